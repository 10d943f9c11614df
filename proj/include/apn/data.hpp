#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "apn/rng.hpp"

namespace apn {

struct CharVocab {
  std::vector<char> symbols;        // sorted by code point
  std::map<char, int> index;

  static CharVocab from_text(const std::string& text) {
    if (text.empty()) throw std::runtime_error("CharVocab: empty text");
    std::set<char> seen(text.begin(), text.end());
    CharVocab v;
    v.symbols.assign(seen.begin(), seen.end());
    for (int i = 0; i < static_cast<int>(v.symbols.size()); ++i)
      v.index[v.symbols[i]] = i;
    return v;
  }

  int size() const { return static_cast<int>(symbols.size()); }

  std::vector<std::uint16_t> encode(const std::string& text) const {
    std::vector<std::uint16_t> out;
    out.reserve(text.size());
    std::set<char> unknown;
    for (char c : text) {
      auto it = index.find(c);
      if (it == index.end())
        unknown.insert(c);
      else
        out.push_back(static_cast<std::uint16_t>(it->second));
    }
    if (!unknown.empty()) {
      std::string list;
      for (char c : unknown) {
        if (!list.empty()) list += ' ';
        list += '\'';
        list += c;
        list += '\'';
      }
      throw std::runtime_error("encode: characters outside vocabulary: " + list);
    }
    return out;
  }

  std::string decode(const std::vector<std::uint16_t>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (auto id : ids) {
      if (id >= symbols.size())
        throw std::runtime_error("decode: index " + std::to_string(id) +
                                 " outside vocabulary of size " + std::to_string(size()));
      out += symbols[id];
    }
    return out;
  }
};

enum class Domain { A, B };

struct DomainSplit {
  Domain domain = Domain::A;
  std::vector<std::uint16_t> train;
  std::vector<std::uint16_t> val;
  std::string source;
};

inline std::pair<CharVocab, DomainSplit> ingest(const std::string& text,
                                                double val_fraction = 0.1,
                                                const std::string& source = "text") {
  if (text.empty()) throw std::runtime_error("ingest: empty text");
  if (val_fraction <= 0.0 || val_fraction >= 1.0)
    throw std::runtime_error("ingest: val_fraction must be in (0,1)");
  CharVocab vocab = CharVocab::from_text(text);
  auto tokens = vocab.encode(text);
  const std::size_t n_train =
      static_cast<std::size_t>(double(tokens.size()) * (1.0 - val_fraction));
  DomainSplit split;
  split.domain = Domain::A;
  split.source = source;
  split.train.assign(tokens.begin(), tokens.begin() + n_train);
  split.val.assign(tokens.begin() + n_train, tokens.end());
  return {vocab, split};
}

namespace corpus_detail {

inline const std::vector<std::string>& cast_a() {
  static const std::vector<std::string> names = {
      "ROMEO",  "JULIET", "HAMLET",   "OPHELIA", "MACBETH", "BANQUO",
      "PORTIA", "BRUTUS", "FALSTAFF", "VIOLA",   "ORSINO",  "PUCK"};
  return names;
}

inline const std::vector<std::string>& phrases_a() {
  static const std::vector<std::string> bank = {
      "what light through yonder window breaks",
      "the lady doth protest too much, methinks",
      "all the world's a stage, and we but players",
      "to be, or not to be; that is the question",
      "a plague on both your houses",
      "the course of true love never did run smooth",
      "something is rotten in the state of Denmark",
      "lord, what fools these mortals be",
      "cowards die many times before their deaths",
      "give me my robe; put on my crown",
      "uneasy lies the head that wears a crown",
      "the better part of valour is discretion",
      "brevity is the soul of wit, good my lord",
      "double, double toil and trouble; fire burn",
      "out, damned spot! out, I say",
      "how sharper than a serpent's tooth it is",
      "if music be the food of love, play on",
      "we are such stuff as dreams are made on",
      "once more unto the breach, dear friends",
      "the fault, dear friend, is not in our stars",
      "now is the winter of our discontent",
      "speak the speech, I pray you, trippingly",
      "there are more things in heaven and earth",
      "some are born great, some achieve greatness",
      "love looks not with the eyes, but with the mind",
      "by the pricking of my thumbs, something wicked comes",
      "friends, countrymen, lend me your ears",
      "what's in a name? that which we call a rose",
      "hell is empty, and all the devils are here",
      "et tu? then fall, and let the heavens weep"};
  return bank;
}

inline const std::vector<std::string>& cast_b() {
  static const std::vector<std::string> names = {
      "ALDRIC",  "BERTRAM", "CELESTINE", "DORVANE", "ELSWITH", "FENWICK",
      "GARRICK", "ISOLDINE", "LUNETTE",  "MORDWEN", "QUILLON", "THESSALY"};
  return names;
}

// Roster names in speaking case, for use inside speech lines.
inline const std::vector<std::string>& cast_b_mixed() {
  static const std::vector<std::string> names = {
      "Aldric",  "Bertram", "Celestine", "Dorvane", "Elswith", "Fenwick",
      "Garrick", "Isoldine", "Lunette",  "Mordwen", "Quillon", "Thessaly"};
  return names;
}

// Templates with an optional {} slot for a roster name. The wording is
// deliberately shifted from the Domain A bank so the domains diverge.
inline const std::vector<std::string>& phrases_b() {
  static const std::vector<std::string> bank = {
      "the frostbound citadel gleams beyond the marsh",
      "bring word to {} before the beacon gutters out",
      "seven winters have I kept the northern gate",
      "the glass river carries no boats after dusk",
      "{} swore an oath upon the shattered crown",
      "no raven flies between here and the salt towers",
      "the candle guild demands its tithe of wax",
      "I traded my name for passage through the fens",
      "let {} read the ledger of drowned kings",
      "the moon-priests chant in a tongue of rust",
      "our granaries hold barley for one siege more",
      "a lantern burns in the tower where {} keeps watch",
      "the old road is swallowed by singing grass",
      "pay the ferryman in iron, never in silver",
      "{} has broken the seal of the winter vault",
      "the map ends where the pale forest begins",
      "three bells mean plague; four bells mean war",
      "hang the traitor's banner from the salt gate",
      "{} walks the battlements and will not sleep",
      "the king under the hill dreams of our ruin",
      "sharpen the harrow-blades; the thaw is near",
      "what coin buys silence from the weir-wardens"};
  return bank;
}

// Word banks for compositional Domain B lines. The cross product gives the
// adaptation corpus far more distinct sentences than the fixed templates
// alone, so a few hundred online steps cannot simply memorize it.
inline const std::vector<std::string>& b_adjectives() {
  static const std::vector<std::string> bank = {
      "frostbound", "pale",      "drowned",   "iron",      "salt-worn", "hollow",
      "winter",     "rusted",    "singing",   "shattered", "moonlit",   "sunken",
      "harrowed",   "brackish",  "starless",  "thawing",   "leaden",    "wind-carved",
      "ashen",      "fathomless", "briar-bound", "smoke-dim", "keening", "untithed",
      "rime-laced", "fen-dark",  "oathbound", "threadbare", "gloaming", "spellshorn",
      "marrowless", "veiled"};
  return bank;
}

inline const std::vector<std::string>& b_nouns() {
  static const std::vector<std::string> bank = {
      "citadel",   "ledger",    "beacon",   "ferryman", "granary",  "rampart",
      "vault",     "tithe",     "crown",    "lantern",  "weir",     "causeway",
      "gatehouse", "banner",    "cistern",  "belfry",   "portcullis", "map",
      "harrow",    "seal",      "reliquary", "mooring",  "almanac",  "sluice",
      "garrison",  "psalter",   "bulwark",  "tollgate", "ossuary",  "signet",
      "dovecote",  "millstone", "tether",   "ewer",     "scabbard", "cairn",
      "trellis",   "quern",     "fathom-line", "hearthstone"};
  return bank;
}

inline const std::vector<std::string>& b_verbs() {
  static const std::vector<std::string> bank = {
      "guards",   "barters",  "summons",  "forsakes", "hoards",   "kindles",
      "buries",   "redeems",  "watches",  "unseals",  "ransoms",  "mends",
      "plunders", "weighs",   "dowses",   "reckons",  "beguiles", "shrives",
      "gleans",   "tempers",  "quenches", "braids",   "augurs",   "scries",
      "fetters",  "leavens",  "palters",  "wreathes", "sunders",  "gilds",
      "throttles", "harries"};
  return bank;
}

inline const std::vector<std::string>& b_places() {
  static const std::vector<std::string> bank = {
      "beyond the marsh",       "beneath the salt towers", "at the northern gate",
      "past the pale forest",   "under the glass river",   "within the winter vault",
      "along the old road",     "before the salt gate",    "behind the weir",
      "above the drowned quay", "amid the reed-beds",      "below the cliff stair",
      "against the storm wall", "beside the lych road",    "across the tidal shelf",
      "atop the watch barrow",  "through the fowler's cut", "inside the tallow works",
      "near the gibbet field",  "over the winter ford"};
  return bank;
}

inline std::string capitalize(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = char(s[0] - 'a' + 'A');
  return s;
}

inline std::string fill_slot(const std::string& tmpl, const std::string& name) {
  auto pos = tmpl.find("{}");
  if (pos == std::string::npos) return tmpl;
  return tmpl.substr(0, pos) + name + tmpl.substr(pos + 2);
}

// One dialogue turn: stage direction sometimes, speaker line in capitals,
// then one to three indented speech lines. Shared by both domains.
template <class PickPhrase>
void emit_turn(std::string& out, Rng& rng, const std::vector<std::string>& cast,
               PickPhrase&& pick_phrase) {
  if (rng.uniform() < 0.12) {
    const auto& a = cast[rng.uniform_int(static_cast<int>(cast.size()))];
    const auto& b = cast[rng.uniform_int(static_cast<int>(cast.size()))];
    if (rng.uniform() < 0.5)
      out += "[Enter " + a + " & " + b + "]\n";
    else
      out += "[Exeunt]\n[Enter " + a + "]\n";
  }
  out += cast[rng.uniform_int(static_cast<int>(cast.size()))] + ":\n";
  const int n_lines = 1 + rng.uniform_int(3);
  for (int i = 0; i < n_lines; ++i) {
    std::string line = pick_phrase(rng);
    out += "  " + capitalize(std::move(line));
    const double roll = rng.uniform();
    if (roll < 0.15)
      out += "!\n";
    else if (roll < 0.3)
      out += "?\n";
    else if (roll < 0.5)
      out += ";\n";
    else
      out += ".\n";
  }
}

}  // namespace corpus_detail

// Built-in Shakespeare-style Domain A text. The prologue pins the alphabet:
// the generated corpus uses exactly 65 symbols (upper and lower case letters,
// space, newline, and . , ; : ! ? ' - [ ] &).
inline std::string synthesize_domain_a_text(std::uint64_t seed,
                                            std::size_t target_chars) {
  std::string out;
  out.reserve(target_chars + 256);
  out +=
      "[PROLOGUE]\n"
      "CHORUS:\n"
      "  THE QUICK BROWN FOX JUMPS OVER THE LAZY DOG;\n"
      "  the quick brown fox jumps over the lazy dog:\n"
      "  mark well, 'tis but a jest - and yet not so!\n"
      "  what say you? speak, & be brief.\n"
      "[Exeunt]\n";
  Rng rng(seed);
  const auto& bank = corpus_detail::phrases_a();
  auto pick = [&bank](Rng& r) { return bank[r.uniform_int(static_cast<int>(bank.size()))]; };
  while (out.size() < target_chars)
    corpus_detail::emit_turn(out, rng, corpus_detail::cast_a(), pick);
  return out;
}

inline DomainSplit synthesize_domain_b(const CharVocab& vocab, std::uint64_t seed,
                                       std::size_t target_chars) {
  // Closure check up front: every character the templates can emit must be
  // encodable, and the error must name the offenders.
  std::string alphabet;
  for (const auto& s : corpus_detail::cast_b()) alphabet += s;
  for (const auto& s : corpus_detail::cast_b_mixed()) alphabet += s;
  for (const auto& s : corpus_detail::phrases_b()) alphabet += corpus_detail::fill_slot(s, "A");
  for (const auto& s : corpus_detail::b_adjectives()) alphabet += s;
  for (const auto& s : corpus_detail::b_nouns()) alphabet += s;
  for (const auto& s : corpus_detail::b_verbs()) alphabet += s;
  for (const auto& s : corpus_detail::b_places()) alphabet += s;
  alphabet += " \n:.;!?-[]&'," ;
  std::set<char> missing;
  for (char c : alphabet)
    if (!vocab.index.count(c)) missing.insert(c);
  if (!missing.empty()) {
    std::string list;
    for (char c : missing) {
      if (!list.empty()) list += ' ';
      list += '\'';
      list += c;
      list += '\'';
    }
    throw std::runtime_error("synthesize_domain_b: template characters outside vocabulary: " +
                             list);
  }

  std::string out;
  out.reserve(target_chars + 256);
  Rng rng(seed);
  const auto& bank = corpus_detail::phrases_b();
  const auto& mixed = corpus_detail::cast_b_mixed();
  auto pick = [&bank, &mixed](Rng& r) {
    if (r.uniform() < 0.4) {
      const auto& tmpl = bank[r.uniform_int(static_cast<int>(bank.size()))];
      return corpus_detail::fill_slot(tmpl,
                                      mixed[r.uniform_int(static_cast<int>(mixed.size()))]);
    }
    auto any = [&r](const std::vector<std::string>& words) -> const std::string& {
      return words[r.uniform_int(static_cast<int>(words.size()))];
    };
    std::string line = mixed[r.uniform_int(static_cast<int>(mixed.size()))];
    line += " " + any(corpus_detail::b_verbs());
    line += " the " + any(corpus_detail::b_adjectives());
    line += " " + any(corpus_detail::b_nouns());
    line += " " + any(corpus_detail::b_places());
    if (r.uniform() < 0.35) {
      line += " and " + any(corpus_detail::b_verbs());
      line += " the " + any(corpus_detail::b_adjectives());
      line += " " + any(corpus_detail::b_nouns());
    }
    return line;
  };
  while (out.size() < target_chars)
    corpus_detail::emit_turn(out, rng, corpus_detail::cast_b(), pick);

  auto tokens = vocab.encode(out);
  const std::size_t n_train = static_cast<std::size_t>(double(tokens.size()) * 0.9);
  DomainSplit split;
  split.domain = Domain::B;
  split.source = "synthetic domain B (seed " + std::to_string(seed) + ")";
  split.train.assign(tokens.begin(), tokens.begin() + n_train);
  split.val.assign(tokens.begin() + n_train, tokens.end());
  return split;
}

struct Batch {
  std::vector<int> inputs;
  std::vector<int> targets;
  int batch = 0;
  int context = 0;
};

inline Batch sample_batch(const std::vector<std::uint16_t>& tokens, int batch,
                          int context, Rng& rng) {
  if (batch < 1 || context < 1) throw std::runtime_error("sample_batch: bad shape");
  if (tokens.size() <= static_cast<std::size_t>(context))
    throw std::runtime_error("sample_batch: stream of " + std::to_string(tokens.size()) +
                             " tokens is too short for context " + std::to_string(context));
  Batch b;
  b.batch = batch;
  b.context = context;
  b.inputs.resize(std::size_t(batch) * context);
  b.targets.resize(std::size_t(batch) * context);
  const int n_starts = static_cast<int>(tokens.size()) - context;
  for (int i = 0; i < batch; ++i) {
    const int o = rng.uniform_int(n_starts);
    for (int t = 0; t < context; ++t) {
      b.inputs[std::size_t(i) * context + t] = tokens[o + t];
      b.targets[std::size_t(i) * context + t] = tokens[o + t + 1];
    }
  }
  return b;
}

namespace io_detail {

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
  if (!is) throw std::runtime_error("split file truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace io_detail

inline void save_split(const std::string& path, const CharVocab& vocab,
                       const DomainSplit& split) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_split: cannot open " + path);
  os.write("APN1", 4);
  io_detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(vocab.size()));
  os.write(vocab.symbols.data(), vocab.size());
  io_detail::write_le<std::uint64_t>(os, split.train.size());
  io_detail::write_le<std::uint64_t>(os, split.val.size());
  for (auto t : split.train) io_detail::write_le<std::uint16_t>(os, t);
  for (auto t : split.val) io_detail::write_le<std::uint16_t>(os, t);
  if (!os) throw std::runtime_error("save_split: write failed for " + path);
}

inline std::pair<CharVocab, DomainSplit> load_split(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_split: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "APN1")
    throw std::runtime_error("load_split: bad magic in " + path);
  const auto vsize = io_detail::read_le<std::uint32_t>(is);
  if (vsize == 0 || vsize > 4096) throw std::runtime_error("load_split: bad vocab size");
  CharVocab vocab;
  vocab.symbols.resize(vsize);
  is.read(vocab.symbols.data(), vsize);
  if (!is) throw std::runtime_error("split file truncated");
  for (int i = 0; i < static_cast<int>(vsize); ++i) vocab.index[vocab.symbols[i]] = i;
  const auto n_train = io_detail::read_le<std::uint64_t>(is);
  const auto n_val = io_detail::read_le<std::uint64_t>(is);
  DomainSplit split;
  split.source = path;
  split.train.resize(n_train);
  split.val.resize(n_val);
  for (auto& t : split.train) t = io_detail::read_le<std::uint16_t>(is);
  for (auto& t : split.val) t = io_detail::read_le<std::uint16_t>(is);
  for (auto t : split.train)
    if (t >= vsize) throw std::runtime_error("load_split: token out of range");
  for (auto t : split.val)
    if (t >= vsize) throw std::runtime_error("load_split: token out of range");
  return {vocab, split};
}

}  // namespace apn
