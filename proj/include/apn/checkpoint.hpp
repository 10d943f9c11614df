#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "apn/config.hpp"
#include "apn/data.hpp"
#include "apn/model.hpp"

namespace apn {

namespace ckpt_detail {

constexpr char kMagic[8] = {'A', 'P', 'N', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), s.size());
}

inline std::string read_string(std::istream& is) {
  const auto n = read_le<std::uint32_t>(is);
  if (n > (1u << 24)) throw std::runtime_error("checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("checkpoint truncated");
  return s;
}

// Scalars cross the file boundary through their bit patterns, so the
// round-trip is exact.
inline void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, sizeof(bits));
  write_le(os, bits);
}

inline double read_f64(std::istream& is) {
  const auto bits = read_le<std::uint64_t>(is);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

template <class S>
void write_values(std::ostream& os, const std::vector<S>& values) {
  for (S v : values) {
    if constexpr (sizeof(S) == 4) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      write_le(os, bits);
    } else {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      write_le(os, bits);
    }
  }
}

template <class S>
void read_values(std::istream& is, std::vector<S>& values) {
  for (auto& v : values) {
    if constexpr (sizeof(S) == 4) {
      const auto bits = read_le<std::uint32_t>(is);
      std::memcpy(&v, &bits, 4);
    } else {
      const auto bits = read_le<std::uint64_t>(is);
      std::memcpy(&v, &bits, 8);
    }
  }
}

}  // namespace ckpt_detail

template <class S>
struct CheckpointData {
  ModelState<S> model;
  CharVocab vocab;
};

template <class S>
void save_checkpoint(const std::string& path, const ModelState<S>& model,
                     const CharVocab& vocab) {
  namespace d = ckpt_detail;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write(d::kMagic, 8);
  d::write_le<std::uint32_t>(os, d::kVersion);
  d::write_le<std::uint8_t>(os, sizeof(S));

  ConfigFile echo;
  echo.sections["model"] = model_config_kv(model.cfg);
  d::write_string(os, echo.serialize());
  d::write_le<std::int64_t>(os, model.step);

  d::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(vocab.size()));
  os.write(vocab.symbols.data(), vocab.size());

  auto params = model.parameters();
  d::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    d::write_string(os, p.name);
    d::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor.shape.size()));
    for (int dim : p.tensor.shape) d::write_le<std::uint32_t>(os, std::uint32_t(dim));
    d::write_values(os, *p.tensor.data);
  }
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

template <class S>
CheckpointData<S> load_checkpoint(const std::string& path) {
  namespace d = ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != std::string(d::kMagic, 8))
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  const auto version = d::read_le<std::uint32_t>(is);
  if (version != d::kVersion)
    throw std::runtime_error("load_checkpoint: unsupported version " +
                             std::to_string(version));
  const auto width = d::read_le<std::uint8_t>(is);
  if (width != sizeof(S))
    throw std::runtime_error("load_checkpoint: precision mismatch (file is " +
                             std::to_string(width * 8) + "-bit)");

  const std::string echo = d::read_string(is);
  auto cfg_file = ConfigFile::parse(echo);
  auto cfg = model_config_from_kv(cfg_file.sections.at("model"));
  const auto step = d::read_le<std::int64_t>(is);

  const auto vsize = d::read_le<std::uint32_t>(is);
  if (vsize == 0 || vsize > 4096) throw std::runtime_error("load_checkpoint: bad vocab size");
  CheckpointData<S> out{ModelState<S>::init(cfg, 0), CharVocab{}};
  out.model.step = step;
  out.vocab.symbols.resize(vsize);
  is.read(out.vocab.symbols.data(), vsize);
  if (!is) throw std::runtime_error("checkpoint truncated");
  for (int i = 0; i < static_cast<int>(vsize); ++i)
    out.vocab.index[out.vocab.symbols[i]] = i;

  auto params = out.model.parameters();
  const auto n_params = d::read_le<std::uint32_t>(is);
  if (n_params != params.size())
    throw std::runtime_error("load_checkpoint: parameter count mismatch");
  for (auto& p : params) {
    const std::string name = d::read_string(is);
    if (name != p.name)
      throw std::runtime_error("load_checkpoint: expected parameter '" + p.name +
                               "', found '" + name + "'");
    const auto ndim = d::read_le<std::uint32_t>(is);
    if (ndim != p.tensor.shape.size())
      throw std::runtime_error("load_checkpoint: rank mismatch at " + name);
    for (int dim : p.tensor.shape)
      if (d::read_le<std::uint32_t>(is) != std::uint32_t(dim))
        throw std::runtime_error("load_checkpoint: shape mismatch at " + name);
    d::read_values(is, *p.tensor.data);
  }
  return out;
}

}  // namespace apn
