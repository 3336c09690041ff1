#pragma once

// Token-index sets of a pronoun/antecedent example and the five attention
// relations defined over them.
//
// Target-side indices are *predicted* positions: the decoder input is the
// gold target shifted right behind <bos>, so row i of any decoder attention
// matrix is the step that emits target token i, and key i of decoder
// self-attention is the position that reads token i-1.

#include <algorithm>
#include <array>
#include <compare>
#include <cstddef>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ctxattn/numerics.hpp"

namespace ctxattn {

enum class ModuleKind { EncoderSelf, Cross, DecoderSelf };

inline std::string_view module_code(ModuleKind k) {
  switch (k) {
    case ModuleKind::EncoderSelf: return "e";
    case ModuleKind::Cross: return "c";
    case ModuleKind::DecoderSelf: return "d";
  }
  return "?";
}

inline std::string_view module_name(ModuleKind k) {
  switch (k) {
    case ModuleKind::EncoderSelf: return "encoder-self";
    case ModuleKind::Cross: return "cross";
    case ModuleKind::DecoderSelf: return "decoder-self";
  }
  return "?";
}

inline ModuleKind parse_module_kind(std::string_view s) {
  if (s == "e" || s == "encoder-self") return ModuleKind::EncoderSelf;
  if (s == "c" || s == "cross") return ModuleKind::Cross;
  if (s == "d" || s == "decoder-self") return ModuleKind::DecoderSelf;
  throw Error("unknown attention module kind '" + std::string(s) + "'");
}

// One attention head, named a-l-h with 1-based layer and head numbers.
struct HeadAddress {
  ModuleKind kind = ModuleKind::EncoderSelf;
  int layer = 1;
  int head = 1;

  std::string str() const {
    std::ostringstream os;
    os << module_code(kind) << '-' << layer << '-' << head;
    return os.str();
  }
  friend auto operator<=>(const HeadAddress&, const HeadAddress&) = default;
};

inline HeadAddress parse_head_address(std::string_view s) {
  const auto a = s.find('-');
  const auto b = a == std::string_view::npos ? a : s.find('-', a + 1);
  if (a == std::string_view::npos || b == std::string_view::npos)
    throw Error("head address must look like d-2-3, got '" + std::string(s) + "'");
  HeadAddress h;
  h.kind = parse_module_kind(s.substr(0, a));
  try {
    h.layer = std::stoi(std::string(s.substr(a + 1, b - a - 1)));
    h.head = std::stoi(std::string(s.substr(b + 1)));
  } catch (const std::exception&) {
    throw Error("head address must look like d-2-3, got '" + std::string(s) + "'");
  }
  return h;
}

enum class Relation { SP_SC, TP_SC, TP_SP, TP_TC, TP_TC1 };

inline constexpr std::array<Relation, 5> kAllRelations = {
    Relation::SP_SC, Relation::TP_SC, Relation::TP_SP, Relation::TP_TC, Relation::TP_TC1};

inline std::string_view relation_name(Relation r) {
  switch (r) {
    case Relation::SP_SC: return "SP_SC";
    case Relation::TP_SC: return "TP_SC";
    case Relation::TP_SP: return "TP_SP";
    case Relation::TP_TC: return "TP_TC";
    case Relation::TP_TC1: return "TP_TC1";
  }
  return "?";
}

inline Relation parse_relation(std::string_view s) {
  for (Relation r : kAllRelations)
    if (relation_name(r) == s) return r;
  throw Error("unknown relation '" + std::string(s) + "'");
}

inline ModuleKind relation_module(Relation r) {
  switch (r) {
    case Relation::SP_SC: return ModuleKind::EncoderSelf;
    case Relation::TP_SC:
    case Relation::TP_SP: return ModuleKind::Cross;
    case Relation::TP_TC:
    case Relation::TP_TC1: return ModuleKind::DecoderSelf;
  }
  return ModuleKind::EncoderSelf;
}

using IndexSet = std::vector<std::size_t>;

struct RelationAnnotation {
  IndexSet s_p;        // source pronoun
  IndexSet s_c;        // source antecedent
  IndexSet t_p;        // target pronoun (predicted positions)
  IndexSet t_c;        // target antecedent (predicted positions)
  IndexSet t_c_plus1;  // t_c shifted onto the decoder input

  friend bool operator==(const RelationAnnotation&, const RelationAnnotation&) = default;
};

// T_{C+1} from T_C, dropping shifted indices that fall off the target.
inline IndexSet shift_by_one(const IndexSet& t_c, std::size_t tgt_len) {
  IndexSet out;
  for (std::size_t i : t_c)
    if (i + 1 < tgt_len) out.push_back(i + 1);
  return out;
}

inline RelationAnnotation make_annotation(IndexSet s_p, IndexSet s_c, IndexSet t_p, IndexSet t_c,
                                          std::size_t tgt_len) {
  RelationAnnotation a{std::move(s_p), std::move(s_c), std::move(t_p), std::move(t_c), {}};
  a.t_c_plus1 = shift_by_one(a.t_c, tgt_len);
  return a;
}

struct ResolvedRelation {
  ModuleKind kind;
  IndexSet queries;  // rows (the attending set)
  IndexSet keys;     // columns (the attended set)
};

inline ResolvedRelation resolve_unchecked(Relation r, const RelationAnnotation& a) {
  switch (r) {
    case Relation::SP_SC: return {ModuleKind::EncoderSelf, a.s_p, a.s_c};
    case Relation::TP_SC: return {ModuleKind::Cross, a.t_p, a.s_c};
    case Relation::TP_SP: return {ModuleKind::Cross, a.t_p, a.s_p};
    case Relation::TP_TC: return {ModuleKind::DecoderSelf, a.t_p, a.t_c};
    case Relation::TP_TC1: return {ModuleKind::DecoderSelf, a.t_p, a.t_c_plus1};
  }
  throw Error("unreachable relation");
}

inline bool supports(Relation r, const RelationAnnotation& a) {
  const auto res = resolve_unchecked(r, a);
  return !res.queries.empty() && !res.keys.empty();
}

inline ResolvedRelation resolve(Relation r, const RelationAnnotation& a) {
  auto res = resolve_unchecked(r, a);
  if (res.queries.empty() || res.keys.empty())
    throw Error("relation unsupported by example: " + std::string(relation_name(r)) +
                (res.queries.empty() ? " has no query tokens" : " has no key tokens"));
  return res;
}

inline void validate_against_lengths(const RelationAnnotation& a, std::size_t src_len,
                                     std::size_t tgt_len) {
  auto check = [](const IndexSet& set, std::string_view name, std::size_t len,
                  std::string_view msg) {
    for (std::size_t i : set) {
      if (i >= len) {
        std::ostringstream os;
        os << msg << ": " << name << " index " << i << " >= length " << len;
        throw Error(os.str());
      }
    }
  };
  check(a.s_p, "s_p", src_len, "index out of range");
  check(a.s_c, "s_c", src_len, "index out of range");
  check(a.t_p, "t_p", tgt_len, "index out of range");
  check(a.t_c, "t_c", tgt_len, "index out of range");
  check(a.t_c_plus1, "t_c_plus1", tgt_len, "shifted index out of range");
  if (a.t_c_plus1 != shift_by_one(a.t_c, tgt_len))
    throw Error("t_c_plus1 is not t_c shifted by one");
  if (!a.t_c.empty() && !a.t_p.empty()) {
    const auto last_c = *std::max_element(a.t_c.begin(), a.t_c.end());
    const auto first_p = *std::min_element(a.t_p.begin(), a.t_p.end());
    if (last_c >= first_p) {
      std::ostringstream os;
      os << "target antecedent after pronoun: t_c index " << last_c << " >= t_p index "
         << first_p;
      throw Error(os.str());
    }
  }
}

}  // namespace ctxattn
