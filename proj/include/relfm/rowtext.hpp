#pragma once

// Row linearization into `<table> T <attr> A <value> V ...` sequences,
// semantic-unit masking, and corpus splitting/export.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "relfm/error.hpp"
#include "relfm/relmodel.hpp"
#include "relfm/rng.hpp"

namespace relfm::rowtext {

inline constexpr std::string_view kTableToken = "<table>";
inline constexpr std::string_view kAttrToken = "<attr>";
inline constexpr std::string_view kValueToken = "<value>";
inline constexpr std::string_view kMaskToken = "<mask>";

enum class UnitKind : std::uint8_t { table_name = 0, attr_name = 1, value = 2 };

struct Unit {
  UnitKind kind;
  std::string text;  // unescaped
};

struct LinearizedRow {
  std::string table;
  std::vector<Unit> units;  // table name, then (attr, value) per column in manifest order
  std::string text;
};

/// Prefixes every literal special token with an extra '<'.
inline std::string escape(std::string_view s) {
  static constexpr std::array<std::string_view, 4> specials{kTableToken, kAttrToken, kValueToken, kMaskToken};
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '<') {
      for (auto sp : specials)
        if (s.substr(i, sp.size()) == sp) {
          out.push_back('<');
          break;
        }
    }
    out.push_back(s[i]);
  }
  return out;
}

inline std::string unescape(std::string_view s) {
  static constexpr std::array<std::string_view, 4> specials{kTableToken, kAttrToken, kValueToken, kMaskToken};
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '<') {
      bool drop = false;
      for (auto sp : specials)
        if (s.substr(i + 1, sp.size()) == sp) drop = true;
      if (drop) continue;
    }
    out.push_back(s[i]);
  }
  return out;
}

/// Renders units; `masked[i]` replaces unit i by the mask token.
inline std::string render(const std::vector<Unit>& units, const std::vector<bool>* masked = nullptr) {
  std::string out;
  for (std::size_t i = 0; i < units.size(); ++i) {
    const auto& u = units[i];
    bool m = masked && (*masked)[i];
    switch (u.kind) {
      case UnitKind::table_name: out += kTableToken; break;
      case UnitKind::attr_name: out += ' '; out += kAttrToken; break;
      case UnitKind::value: out += ' '; out += kValueToken; break;
    }
    if (m) {
      out += ' ';
      out += kMaskToken;
    } else if (!u.text.empty()) {
      out += ' ';
      out += escape(u.text);
    }
  }
  return out;
}

inline LinearizedRow linearize_row(const SchemaManifest& manifest, const RowStore& store, std::string_view table,
                                   std::size_t ordinal) {
  const std::size_t ti = manifest.table_index(table);
  const auto& spec = manifest.tables[ti];
  const auto& data = store.tables.at(ti);
  if (ordinal >= data.n_rows)
    throw Error("table '" + spec.name + "': ordinal " + std::to_string(ordinal) + " out of range");
  LinearizedRow row;
  row.table = spec.name;
  row.units.push_back({UnitKind::table_name, spec.name});
  for (std::size_t c = 0; c < spec.columns.size(); ++c) {
    row.units.push_back({UnitKind::attr_name, spec.columns[c].name});
    row.units.push_back({UnitKind::value, render_cell(spec.columns[c].kind, data.at(ordinal, c))});
  }
  row.text = render(row.units);
  return row;
}

struct ParsedRow {
  std::string table;
  std::vector<std::pair<std::string, std::string>> cells;
};

/// Inverse of rendering for unmasked rows.
inline ParsedRow parse_linearized(std::string_view text) {
  const std::string attr_sep = std::string(" ") + std::string(kAttrToken) + " ";
  const std::string value_sep = std::string(" ") + std::string(kValueToken);
  if (text.substr(0, kTableToken.size()) != kTableToken) throw Error("linearized row must start with <table>");
  ParsedRow out;
  std::size_t pos = kTableToken.size();
  auto next_attr = [&](std::size_t from) {
    auto p = text.find(attr_sep, from);
    return p == std::string_view::npos ? text.size() : p;
  };
  std::size_t end = next_attr(pos);
  auto seg = text.substr(pos, end - pos);
  if (!seg.empty()) {
    if (seg[0] != ' ') throw Error("malformed table segment");
    seg.remove_prefix(1);
  }
  out.table = unescape(seg);
  pos = end;
  while (pos < text.size()) {
    pos += attr_sep.size();
    end = next_attr(pos);
    auto part = text.substr(pos, end - pos);
    auto vp = part.find(value_sep);
    if (vp == std::string_view::npos) throw Error("attribute without <value> marker");
    auto name = part.substr(0, vp);
    auto value = part.substr(vp + value_sep.size());
    if (!value.empty()) {
      if (value[0] != ' ') throw Error("malformed value segment");
      value.remove_prefix(1);
    }
    out.cells.emplace_back(unescape(name), unescape(value));
    pos = end;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Masking

struct MaskProbabilities {
  double table_name = 0.30;
  double attr_name = 0.20;
  double value = 0.40;

  double operator[](UnitKind k) const {
    switch (k) {
      case UnitKind::table_name: return table_name;
      case UnitKind::attr_name: return attr_name;
      case UnitKind::value: return value;
    }
    return 0.0;
  }
};

struct MaskPlan {
  std::size_t row_id = 0;
  std::vector<std::size_t> masked;  // sorted unit indices
  std::vector<UnitKind> categories;  // parallel to `masked`
  /// Set when the independent draws selected nothing and one unit was forced.
  std::optional<std::size_t> forced;
};

inline bool maskable(const Unit& u, const MaskProbabilities& probs) {
  if (probs[u.kind] <= 0.0) return false;
  return !(u.kind == UnitKind::value && u.text.empty());
}

template <typename Rng>
MaskPlan sample_mask_plan(const LinearizedRow& row, Rng& rng, const MaskProbabilities& probs = {},
                          std::size_t row_id = 0) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < row.units.size(); ++i)
    if (maskable(row.units[i], probs)) candidates.push_back(i);
  if (candidates.empty()) throw Error("unmaskable row");
  MaskPlan plan;
  plan.row_id = row_id;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (auto i : candidates)
    if (unif(rng) < probs[row.units[i].kind]) plan.masked.push_back(i);
  if (plan.masked.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    plan.forced = candidates[pick(rng)];
    plan.masked.push_back(*plan.forced);
  }
  for (auto i : plan.masked) plan.categories.push_back(row.units[i].kind);
  return plan;
}

struct MaskedPair {
  std::string masked;
  std::string target;
};

inline MaskedPair apply_mask(const LinearizedRow& row, const MaskPlan& plan) {
  if (plan.masked.empty()) throw Error("mask plan is empty (at least one unit must be masked)");
  std::vector<bool> flags(row.units.size(), false);
  for (auto i : plan.masked) {
    if (i >= row.units.size()) throw Error("mask index " + std::to_string(i) + " out of range");
    flags[i] = true;
  }
  return {render(row.units, &flags), row.text};
}

// ---------------------------------------------------------------------------
// Corpus

struct CorpusSplit {
  std::vector<std::size_t> train, validation, test;
  std::uint64_t seed = 0;
};

/// Sizes floor(0.7n), floor(0.1n) and the remainder over a seeded shuffle.
inline CorpusSplit split_corpus(std::size_t n_rows, std::uint64_t seed) {
  std::vector<std::size_t> ids(n_rows);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(seed);
  shuffle(ids, rng);
  const std::size_t n_train = n_rows * 7 / 10;
  const std::size_t n_val = n_rows / 10;
  CorpusSplit s;
  s.seed = seed;
  s.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.validation.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                      ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
  return s;
}

/// Writes train.txt (targets), valid.{masked,target}.txt and test.{masked,target}.txt.
/// `plans[i]` is the persisted static mask for rows[i]; train plans are ignored.
inline void export_corpus(const std::vector<LinearizedRow>& rows, const std::vector<MaskPlan>& plans,
                          const CorpusSplit& split, const std::filesystem::path& out) {
  if (plans.size() != rows.size()) throw Error("export_corpus: one mask plan per row required");
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create directory " + out.string());
  auto open = [&](const char* name) {
    std::ofstream f(out / name, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + (out / name).string());
    return f;
  };
  auto check_id = [&](std::size_t id) {
    if (id >= rows.size()) throw Error("export_corpus: split references row " + std::to_string(id));
  };
  {
    auto f = open("train.txt");
    for (auto id : split.train) {
      check_id(id);
      f << rows[id].text << '\n';
    }
  }
  auto write_pair = [&](const std::vector<std::size_t>& ids, const char* masked_name, const char* target_name) {
    auto fm = open(masked_name);
    auto ft = open(target_name);
    for (auto id : ids) {
      check_id(id);
      auto mp = apply_mask(rows[id], plans[id]);
      fm << mp.masked << '\n';
      ft << mp.target << '\n';
    }
    if (!fm || !ft) throw IoError("write failed in " + out.string());
  };
  write_pair(split.validation, "valid.masked.txt", "valid.target.txt");
  write_pair(split.test, "test.masked.txt", "test.target.txt");
}

/// Selects up to `quota` rows per table (first rows in file order), table by table.
inline std::vector<std::pair<std::size_t, std::size_t>> select_rows(const RowStore& store,
                                                                    std::optional<std::size_t> quota) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t t = 0; t < store.tables.size(); ++t) {
    std::size_t n = store.tables[t].n_rows;
    if (quota) n = std::min(n, *quota);
    for (std::size_t r = 0; r < n; ++r) out.emplace_back(t, r);
  }
  return out;
}

}  // namespace relfm::rowtext
