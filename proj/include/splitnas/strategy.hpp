#pragma once

#include <array>
#include <map>
#include <sstream>
#include <string>

#include "splitnas/common.hpp"

namespace splitnas {

// Wire names follow the compression-technique table: F* act on fc layers,
// C* on conv layers, W* prune weights or filters.
enum class Technique { F1, F2, F3, C1, C2, C3, W1, W2 };

inline constexpr std::array<Technique, 8> kAllTechniques = {
    Technique::F1, Technique::F2, Technique::F3, Technique::C1,
    Technique::C2, Technique::C3, Technique::W1, Technique::W2};

inline const char* technique_name(Technique t) {
  switch (t) {
    case Technique::F1: return "F1";
    case Technique::F2: return "F2";
    case Technique::F3: return "F3";
    case Technique::C1: return "C1";
    case Technique::C2: return "C2";
    case Technique::C3: return "C3";
    case Technique::W1: return "W1";
    case Technique::W2: return "W2";
  }
  return "?";
}

inline Technique technique_from_name(const std::string& s) {
  for (Technique t : kAllTechniques)
    if (s == technique_name(t)) return t;
  throw ParseError("unknown compression technique '" + s + "'");
}

// One partition point plus per-layer technique assignments, indexed in the
// base graph's flat layer numbering. Valid strategies only compress layers
// strictly below the partition (the encoder side).
struct Strategy {
  int partition = 0;
  std::map<int, Technique> compressions;

  bool operator==(const Strategy& o) const {
    return partition == o.partition && compressions == o.compressions;
  }
  bool operator<(const Strategy& o) const {
    if (partition != o.partition) return partition < o.partition;
    return compressions < o.compressions;
  }
};

// Canonical form: "P:<partition>" first, then "<index>:<technique>" sorted by
// ascending layer index.
inline std::string to_string(const Strategy& s) {
  std::ostringstream os;
  os << "P:" << s.partition;
  for (const auto& [idx, t] : s.compressions) os << " " << idx << ":" << technique_name(t);
  return os.str();
}

inline Strategy parse_strategy(const std::string& text) {
  Strategy s;
  std::istringstream is(text);
  std::string tok;
  bool saw_partition = false;
  while (is >> tok) {
    auto colon = tok.find(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 >= tok.size())
      throw ParseError("bad strategy token '" + tok + "'");
    std::string head = tok.substr(0, colon);
    std::string tail = tok.substr(colon + 1);
    auto parse_int = [&](const std::string& v) {
      size_t pos = 0;
      int out;
      try {
        out = std::stoi(v, &pos);
      } catch (const std::exception&) {
        throw ParseError("bad integer '" + v + "' in strategy token '" + tok + "'");
      }
      if (pos != v.size()) throw ParseError("bad integer '" + v + "' in strategy token '" + tok + "'");
      return out;
    };
    if (head == "P") {
      if (saw_partition) throw ParseError("duplicate partition token in strategy");
      s.partition = parse_int(tail);
      if (s.partition < 0) throw ParseError("partition must be non-negative");
      saw_partition = true;
    } else {
      int idx = parse_int(head);
      if (idx < 0) throw ParseError("layer index must be non-negative");
      Technique t = technique_from_name(tail);
      if (s.compressions.count(idx)) throw ParseError("duplicate layer index " + std::to_string(idx));
      s.compressions[idx] = t;
    }
  }
  if (!saw_partition) throw ParseError("strategy is missing the P:<partition> token");
  return s;
}

}  // namespace splitnas
