#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include "apn/model.hpp"

namespace apn {

// Flat key=value configuration with [sections]. '#' starts a comment.
// Serialization is canonical (sorted), so parse -> serialize -> parse is
// the identity on the parsed structure.
struct ConfigFile {
  std::map<std::string, std::map<std::string, std::string>> sections;

  static ConfigFile parse(const std::string& text) {
    ConfigFile cfg;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw std::runtime_error("config line " + std::to_string(lineno) +
                                   ": unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty())
          throw std::runtime_error("config line " + std::to_string(lineno) +
                                   ": empty section name");
        cfg.sections[section];
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("config line " + std::to_string(lineno) +
                                 ": expected key=value, got '" + line + "'");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty())
        throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
      if (cfg.sections[section].count(key))
        throw std::runtime_error("config line " + std::to_string(lineno) +
                                 ": duplicate key '" + key + "'");
      cfg.sections[section][key] = value;
    }
    return cfg;
  }

  static ConfigFile load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
  }

  std::string serialize() const {
    std::string out;
    for (const auto& [name, kv] : sections) {
      if (!name.empty()) out += "[" + name + "]\n";
      for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    }
    return out;
  }
};

// Typed access that tracks which keys were consumed; finish() turns any
// leftover into a configuration error naming the offenders.
class ConfigReader {
 public:
  explicit ConfigReader(ConfigFile cfg) : cfg_(std::move(cfg)) {}

  bool has(const std::string& section, const std::string& key) const {
    auto s = cfg_.sections.find(section);
    return s != cfg_.sections.end() && s->second.count(key);
  }

  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) {
    if (!has(section, key)) return fallback;
    used_[section].insert(key);
    return cfg_.sections.at(section).at(key);
  }

  std::string require_string(const std::string& section, const std::string& key) {
    if (!has(section, key))
      throw std::runtime_error("config: missing required key '" + key + "' in [" +
                               section + "]");
    used_[section].insert(key);
    return cfg_.sections.at(section).at(key);
  }

  long get_long(const std::string& section, const std::string& key, long fallback) {
    if (!has(section, key)) return fallback;
    return parse_long(section, key, require_string(section, key));
  }

  double get_double(const std::string& section, const std::string& key, double fallback) {
    if (!has(section, key)) return fallback;
    const std::string v = require_string(section, key);
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw std::runtime_error("config: [" + section + "] " + key +
                               " expects a number, got '" + v + "'");
    }
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) {
    if (!has(section, key)) return fallback;
    const std::string v = require_string(section, key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::runtime_error("config: [" + section + "] " + key +
                             " expects true/false, got '" + v + "'");
  }

  void finish() const {
    std::string leftovers;
    for (const auto& [name, kv] : cfg_.sections) {
      auto u = used_.find(name);
      for (const auto& [k, v] : kv) {
        if (u != used_.end() && u->second.count(k)) continue;
        if (!leftovers.empty()) leftovers += ", ";
        leftovers += "[" + name + "] " + k;
      }
    }
    if (!leftovers.empty())
      throw std::runtime_error("config: unknown keys: " + leftovers);
  }

 private:
  long parse_long(const std::string& section, const std::string& key,
                  const std::string& v) const {
    try {
      std::size_t pos = 0;
      const long n = std::stol(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return n;
    } catch (const std::exception&) {
      throw std::runtime_error("config: [" + section + "] " + key +
                               " expects an integer, got '" + v + "'");
    }
  }

  ConfigFile cfg_;
  std::map<std::string, std::set<std::string>> used_;
};

inline std::string ffn_kind_name(FfnKind k) {
  switch (k) {
    case FfnKind::Dense: return "dense";
    case FfnKind::Apn: return "apn";
    case FfnKind::None: return "none";
  }
  return "dense";
}

inline FfnKind ffn_kind_from(const std::string& s) {
  if (s == "dense") return FfnKind::Dense;
  if (s == "apn") return FfnKind::Apn;
  if (s == "none") return FfnKind::None;
  throw std::runtime_error("config: ffn must be dense|apn|none, got '" + s + "'");
}

inline std::map<std::string, std::string> model_config_kv(const ModelConfig& cfg) {
  std::map<std::string, std::string> kv;
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  kv["layers"] = std::to_string(cfg.n_layers);
  kv["heads"] = std::to_string(cfg.n_heads);
  kv["dim"] = std::to_string(cfg.dim);
  kv["vocab"] = std::to_string(cfg.vocab_size);
  kv["context"] = std::to_string(cfg.context_len);
  kv["dropout"] = num(cfg.dropout);
  kv["ffn"] = ffn_kind_name(cfg.ffn_kind);
  kv["ffn_ratio"] = num(cfg.ffn_ratio);
  kv["patches"] = std::to_string(cfg.apn.patches);
  kv["active"] = std::to_string(cfg.apn.active);
  kv["code_dim"] = std::to_string(cfg.apn.code_dim);
  kv["temperature"] = num(cfg.apn.temperature);
  kv["residual_scale"] = num(cfg.apn.residual_scale);
  kv["gamma_trainable"] = cfg.apn.gamma_trainable ? "true" : "false";
  kv["gamma_warmup"] = std::to_string(cfg.apn.gamma_warmup_steps);
  kv["patch_dropout"] = num(cfg.apn.patch_dropout_p);
  kv["balance_weight"] = num(cfg.apn.balance_weight);
  kv["entropy_weight"] = num(cfg.apn.entropy_weight);
  kv["gating"] = cfg.apn.gating == GatingMode::Scalar ? "scalar" : "per-dimension";
  return kv;
}

inline ModelConfig model_config_from_reader(ConfigReader& r,
                                            const std::string& section = "model") {
  ModelConfig cfg;
  cfg.n_layers = static_cast<int>(r.get_long(section, "layers", cfg.n_layers));
  cfg.n_heads = static_cast<int>(r.get_long(section, "heads", cfg.n_heads));
  cfg.dim = static_cast<int>(r.get_long(section, "dim", cfg.dim));
  cfg.vocab_size = static_cast<int>(r.get_long(section, "vocab", cfg.vocab_size));
  cfg.context_len = static_cast<int>(r.get_long(section, "context", cfg.context_len));
  cfg.dropout = r.get_double(section, "dropout", cfg.dropout);
  cfg.ffn_kind = ffn_kind_from(r.get_string(section, "ffn", ffn_kind_name(cfg.ffn_kind)));
  cfg.ffn_ratio = r.get_double(section, "ffn_ratio", cfg.ffn_ratio);
  cfg.apn.patches = static_cast<int>(r.get_long(section, "patches", cfg.apn.patches));
  cfg.apn.active = static_cast<int>(r.get_long(section, "active", cfg.apn.active));
  cfg.apn.code_dim = static_cast<int>(r.get_long(section, "code_dim", cfg.apn.code_dim));
  cfg.apn.temperature = r.get_double(section, "temperature", cfg.apn.temperature);
  cfg.apn.residual_scale = r.get_double(section, "residual_scale", cfg.apn.residual_scale);
  cfg.apn.gamma_trainable = r.get_bool(section, "gamma_trainable", cfg.apn.gamma_trainable);
  cfg.apn.gamma_warmup_steps =
      r.get_long(section, "gamma_warmup", cfg.apn.gamma_warmup_steps);
  cfg.apn.patch_dropout_p = r.get_double(section, "patch_dropout", cfg.apn.patch_dropout_p);
  cfg.apn.balance_weight = r.get_double(section, "balance_weight", cfg.apn.balance_weight);
  cfg.apn.entropy_weight = r.get_double(section, "entropy_weight", cfg.apn.entropy_weight);
  const std::string gating = r.get_string(section, "gating", "per-dimension");
  if (gating == "scalar")
    cfg.apn.gating = GatingMode::Scalar;
  else if (gating == "per-dimension")
    cfg.apn.gating = GatingMode::PerDimension;
  else
    throw std::runtime_error("config: gating must be scalar|per-dimension");
  return cfg;
}

inline ModelConfig model_config_from_kv(const std::map<std::string, std::string>& kv) {
  ConfigFile f;
  f.sections["model"] = kv;
  ConfigReader r(f);
  auto cfg = model_config_from_reader(r, "model");
  r.finish();
  return cfg;
}

}  // namespace apn
