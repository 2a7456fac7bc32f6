#pragma once

// Relational database model: schema manifest, typed row store, schema graph
// and the heterogeneous relational entity graph built from key links.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"
#include "relfm/csv.hpp"
#include "relfm/date.hpp"
#include "relfm/error.hpp"

namespace relfm {

enum class ColumnKind { text, integer, real, date, key };

inline std::string_view to_string(ColumnKind k) {
  switch (k) {
    case ColumnKind::text: return "text";
    case ColumnKind::integer: return "integer";
    case ColumnKind::real: return "float";
    case ColumnKind::date: return "date";
    case ColumnKind::key: return "key";
  }
  return "?";
}

inline std::optional<ColumnKind> parse_column_kind(std::string_view s) {
  if (s == "text") return ColumnKind::text;
  if (s == "integer") return ColumnKind::integer;
  if (s == "float") return ColumnKind::real;
  if (s == "date") return ColumnKind::date;
  if (s == "key") return ColumnKind::key;
  return std::nullopt;
}

struct ColumnSpec {
  std::string name;
  ColumnKind kind = ColumnKind::text;
  bool nullable = true;
};

struct ForeignKey {
  std::string column;
  std::string references;
};

struct TableSpec {
  std::string name;
  std::string file;
  std::string primary_key;
  std::vector<ColumnSpec> columns;
  std::vector<ForeignKey> foreign_keys;
  std::optional<std::string> time_column;

  std::optional<std::size_t> find_column(std::string_view col) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i].name == col) return i;
    return std::nullopt;
  }
  std::size_t column_index(std::string_view col) const {
    if (auto i = find_column(col)) return *i;
    throw Error("table '" + name + "': column '" + std::string(col) + "' not found");
  }
};

struct SchemaManifest {
  std::vector<TableSpec> tables;

  std::optional<std::size_t> find_table(std::string_view name) const {
    for (std::size_t i = 0; i < tables.size(); ++i)
      if (tables[i].name == name) return i;
    return std::nullopt;
  }
  std::size_t table_index(std::string_view name) const {
    if (auto i = find_table(name)) return *i;
    throw Error("table '" + std::string(name) + "' not found");
  }

  /// The link set: one (fkey table, pkey table) pair per foreign key.
  std::vector<std::pair<std::string, std::string>> links() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& t : tables)
      for (const auto& fk : t.foreign_keys) out.emplace_back(t.name, fk.references);
    return out;
  }
};

/// Validates structural invariants; throws Error naming the offending table/column.
inline void validate_manifest(const SchemaManifest& m) {
  std::set<std::string> names;
  for (const auto& t : m.tables) {
    if (t.name.empty()) throw Error("table with empty name");
    if (!names.insert(t.name).second) throw Error("duplicate table name '" + t.name + "'");
  }
  for (const auto& t : m.tables) {
    std::set<std::string> cols;
    for (const auto& c : t.columns) {
      if (c.name.empty()) throw Error("table '" + t.name + "': column with empty name");
      if (!cols.insert(c.name).second)
        throw Error("table '" + t.name + "': duplicate column '" + c.name + "'");
    }
    if (!t.find_column(t.primary_key))
      throw Error("table '" + t.name + "': primary key column '" + t.primary_key + "' not found");
    std::set<std::string> fk_cols;
    for (const auto& fk : t.foreign_keys) {
      if (!t.find_column(fk.column))
        throw Error("table '" + t.name + "': foreign key column '" + fk.column + "' not found");
      if (!fk_cols.insert(fk.column).second)
        throw Error("table '" + t.name + "': column '" + fk.column + "' declared as foreign key twice");
      if (!m.find_table(fk.references))
        throw Error("table '" + t.name + "', column '" + fk.column + "': referenced table not found: '" +
                    fk.references + "'");
    }
    if (t.time_column) {
      auto i = t.find_column(*t.time_column);
      if (!i) throw Error("table '" + t.name + "': time column '" + *t.time_column + "' not found");
      if (t.columns[*i].kind != ColumnKind::date)
        throw Error("table '" + t.name + "': time column '" + *t.time_column + "' must have kind date");
    }
  }
}

inline SchemaManifest manifest_from_json(const nlohmann::json& doc) {
  auto ctx_error = [](const std::string& ctx, const std::string& what) { return Error(ctx + ": " + what); };
  if (!doc.is_object() || !doc.contains("tables") || !doc["tables"].is_array())
    throw Error("manifest: top-level object with a \"tables\" array expected");
  SchemaManifest m;
  for (const auto& jt : doc["tables"]) {
    if (!jt.is_object()) throw Error("manifest: table entry must be an object");
    TableSpec t;
    std::string ctx = "manifest";
    try {
      t.name = jt.at("name").get<std::string>();
      ctx = "table '" + t.name + "'";
      t.file = jt.at("file").get<std::string>();
      const auto& pk = jt.at("primary_key");
      if (pk.is_array()) throw ctx_error(ctx, "composite primary keys are not supported");
      t.primary_key = pk.get<std::string>();
      for (const auto& jc : jt.at("columns")) {
        ColumnSpec c;
        c.name = jc.at("name").get<std::string>();
        auto kind_str = jc.at("kind").get<std::string>();
        auto kind = parse_column_kind(kind_str);
        if (!kind) throw ctx_error(ctx, "column '" + c.name + "': unknown column kind '" + kind_str + "'");
        c.kind = *kind;
        c.nullable = jc.value("nullable", true);
        t.columns.push_back(std::move(c));
      }
      if (jt.contains("foreign_keys")) {
        for (const auto& jf : jt["foreign_keys"]) {
          if (jf.at("column").is_array()) throw ctx_error(ctx, "composite foreign keys are not supported");
          t.foreign_keys.push_back({jf.at("column").get<std::string>(), jf.at("references").get<std::string>()});
        }
      }
      if (jt.contains("time_column") && !jt["time_column"].is_null())
        t.time_column = jt["time_column"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ctx_error(ctx, std::string("malformed entry: ") + e.what());
    }
    m.tables.push_back(std::move(t));
  }
  validate_manifest(m);
  return m;
}

inline nlohmann::json manifest_to_json(const SchemaManifest& m) {
  nlohmann::json tables = nlohmann::json::array();
  for (const auto& t : m.tables) {
    nlohmann::json jt;
    jt["name"] = t.name;
    jt["file"] = t.file;
    jt["primary_key"] = t.primary_key;
    jt["columns"] = nlohmann::json::array();
    for (const auto& c : t.columns)
      jt["columns"].push_back({{"name", c.name}, {"kind", std::string(to_string(c.kind))}, {"nullable", c.nullable}});
    jt["foreign_keys"] = nlohmann::json::array();
    for (const auto& fk : t.foreign_keys) jt["foreign_keys"].push_back({{"column", fk.column}, {"references", fk.references}});
    if (t.time_column) jt["time_column"] = *t.time_column;
    tables.push_back(std::move(jt));
  }
  return {{"tables", tables}};
}

inline SchemaManifest parse_schema_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("manifest " + path.string() + ": malformed JSON: " + e.what());
  }
  return manifest_from_json(doc);
}

// ---------------------------------------------------------------------------
// Row store

/// A typed cell. Dates are held as days since 1970-01-01; text and key cells as strings.
using Cell = std::variant<std::monostate, std::int64_t, double, std::string>;

inline bool is_absent(const Cell& c) { return std::holds_alternative<std::monostate>(c); }

/// Shortest round-trip decimal for floats, plain digits for integers, ISO for dates.
inline std::string render_cell(ColumnKind kind, const Cell& c) {
  if (is_absent(c)) return {};
  if (auto* s = std::get_if<std::string>(&c)) return *s;
  if (auto* d = std::get_if<double>(&c)) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, *d);
    return std::string(buf, res.ptr);
  }
  auto i = std::get<std::int64_t>(c);
  if (kind == ColumnKind::date) return format_iso_date(static_cast<std::int32_t>(i));
  return std::to_string(i);
}

/// Parses a raw CSV field for a column kind. Empty fields are absent; parse
/// failures return nullopt so the caller can count a warning.
inline std::optional<Cell> parse_cell(ColumnKind kind, std::string_view raw) {
  if (raw.empty()) return Cell{};
  switch (kind) {
    case ColumnKind::text:
    case ColumnKind::key:
      return Cell{std::string(raw)};
    case ColumnKind::integer: {
      std::int64_t v = 0;
      auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
      if (ec != std::errc{} || p != raw.data() + raw.size()) return std::nullopt;
      return Cell{v};
    }
    case ColumnKind::real: {
      double v = 0;
      auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
      if (ec != std::errc{} || p != raw.data() + raw.size()) return std::nullopt;
      if (!std::isfinite(v)) return Cell{};  // NaN/inf behave like missing values
      return Cell{v};
    }
    case ColumnKind::date: {
      auto d = parse_iso_date(raw);
      if (!d) return std::nullopt;
      return Cell{static_cast<std::int64_t>(*d)};
    }
  }
  return std::nullopt;
}

struct TableData {
  std::string name;
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;
  std::vector<Cell> cells;  // row-major, manifest column order
  std::unordered_map<std::string, std::size_t> pk_index;
  std::vector<std::optional<std::int32_t>> timestamps;  // empty if the table has no time column

  const Cell& at(std::size_t row, std::size_t col) const { return cells[row * n_cols + col]; }
  bool has_time() const { return !timestamps.empty(); }
};

struct RowStore {
  std::vector<TableData> tables;  // manifest order
  std::size_t warnings = 0;       // unparseable typed cells and nulls in non-nullable columns

  std::size_t total_rows() const {
    std::size_t n = 0;
    for (const auto& t : tables) n += t.n_rows;
    return n;
  }
};

struct LoadOptions {
  std::optional<std::size_t> row_cap;  // first-N rows per table in file order
};

inline TableData load_table(const TableSpec& spec, std::istream& in, const LoadOptions& opts, std::size_t& warnings) {
  csv::Reader reader(in);
  std::vector<std::string> fields;
  if (!reader.next(fields)) throw Error("table '" + spec.name + "': missing header row");
  const std::size_t ncols = spec.columns.size();
  if (fields.size() != ncols) throw Error("table '" + spec.name + "': header mismatch (column count differs from manifest)");
  std::vector<std::size_t> src_of(ncols, 0);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    auto c = spec.find_column(fields[i]);
    if (!c || !seen.insert(fields[i]).second)
      throw Error("table '" + spec.name + "': header mismatch at column '" + fields[i] + "'");
    src_of[*c] = i;
  }
  TableData t;
  t.name = spec.name;
  t.n_cols = ncols;
  const std::size_t pk_col = spec.column_index(spec.primary_key);
  const bool timed = spec.time_column.has_value();
  const std::size_t time_col = timed ? spec.column_index(*spec.time_column) : 0;
  while ((!opts.row_cap || t.n_rows < *opts.row_cap) && reader.next(fields)) {
    if (fields.size() == 1 && fields[0].empty() && ncols != 1) continue;  // blank line
    if (fields.size() != ncols)
      throw Error("table '" + spec.name + "': line " + std::to_string(reader.line()) + " has " +
                  std::to_string(fields.size()) + " fields, expected " + std::to_string(ncols));
    for (std::size_t c = 0; c < ncols; ++c) {
      const auto& col = spec.columns[c];
      auto cell = parse_cell(col.kind, fields[src_of[c]]);
      if (!cell) {
        ++warnings;
        cell = Cell{};
      } else if (is_absent(*cell) && !col.nullable) {
        ++warnings;
      }
      t.cells.push_back(std::move(*cell));
    }
    const Cell& pk = t.cells[t.n_rows * ncols + pk_col];
    if (is_absent(pk))
      throw Error("table '" + spec.name + "': missing primary key on line " + std::to_string(reader.line()));
    auto key = render_cell(spec.columns[pk_col].kind, pk);
    if (!t.pk_index.emplace(key, t.n_rows).second)
      throw Error("table '" + spec.name + "': duplicate primary key '" + key + "'");
    if (timed) {
      const Cell& tc = t.cells[t.n_rows * ncols + time_col];
      t.timestamps.push_back(is_absent(tc) ? std::nullopt
                                           : std::optional<std::int32_t>(static_cast<std::int32_t>(std::get<std::int64_t>(tc))));
    }
    ++t.n_rows;
  }
  return t;
}

inline RowStore load_tables(const SchemaManifest& manifest, const std::filesystem::path& root,
                            const LoadOptions& opts = {}) {
  RowStore store;
  for (const auto& spec : manifest.tables) {
    auto path = root / spec.file;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("table '" + spec.name + "': missing file " + path.string());
    store.tables.push_back(load_table(spec, in, opts, store.warnings));
  }
  return store;
}

// ---------------------------------------------------------------------------
// Schema graph

enum class Direction : std::uint8_t { forward = 0, inverse = 1 };

struct SchemaEdge {
  std::string name;
  std::size_t src_table = 0;
  std::size_t dst_table = 0;
  std::string fk_column;
  Direction direction = Direction::forward;
  std::size_t inverse = 0;  // index of the paired edge
};

struct SchemaGraph {
  std::vector<std::string> tables;
  std::vector<SchemaEdge> edges;
};

inline std::string relation_name(const std::string& fk_table, const std::string& column, const std::string& pk_table,
                                 Direction dir) {
  if (dir == Direction::forward) return fk_table + "." + column + "->" + pk_table;
  return pk_table + "<-" + fk_table + "." + column;
}

/// One forward edge per foreign key (fkey table -> pkey table) followed by its inverse.
inline SchemaGraph build_schema_graph(const SchemaManifest& m) {
  SchemaGraph g;
  for (const auto& t : m.tables) g.tables.push_back(t.name);
  for (std::size_t ti = 0; ti < m.tables.size(); ++ti) {
    const auto& t = m.tables[ti];
    for (const auto& fk : t.foreign_keys) {
      std::size_t dst = m.table_index(fk.references);
      std::size_t fwd = g.edges.size();
      g.edges.push_back({relation_name(t.name, fk.column, fk.references, Direction::forward), ti, dst, fk.column,
                         Direction::forward, fwd + 1});
      g.edges.push_back({relation_name(t.name, fk.column, fk.references, Direction::inverse), dst, ti, fk.column,
                         Direction::inverse, fwd});
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Relational entity graph

using NodeId = std::uint32_t;

struct Relation {
  std::string name;
  std::size_t src_type = 0;
  std::size_t dst_type = 0;
  std::size_t inverse = 0;
  std::vector<std::pair<NodeId, NodeId>> edges;  // (src ordinal, dst ordinal) within their tables, sorted
};

/// Heterogeneous graph: nodes are rows grouped in per-table contiguous blocks,
/// edges are key links stored per relation. Immutable once indexed.
struct EntityGraph {
  std::vector<std::string> tables;
  std::vector<std::size_t> offsets{0};  // tables.size() + 1 entries, partitions [0, num_nodes)
  std::vector<Relation> relations;
  std::vector<std::optional<std::int32_t>> timestamps;  // per global node
  std::vector<std::string> keys;                        // primary key text per global node
  std::size_t dangling_fks = 0;

  // Incoming adjacency pooled over all relations (CSR over global ids).
  std::vector<std::size_t> in_offsets;
  std::vector<NodeId> in_sources;

  std::size_t num_nodes() const { return offsets.back(); }
  std::size_t num_types() const { return tables.size(); }
  std::size_t type_size(std::size_t type) const { return offsets[type + 1] - offsets[type]; }

  /// The node type map.
  std::size_t node_type(NodeId v) const {
    auto it = std::upper_bound(offsets.begin(), offsets.end(), static_cast<std::size_t>(v));
    return static_cast<std::size_t>(it - offsets.begin()) - 1;
  }
  NodeId global_id(std::size_t type, std::size_t ordinal) const { return static_cast<NodeId>(offsets[type] + ordinal); }
  std::size_t ordinal(NodeId v) const { return v - offsets[node_type(v)]; }

  std::optional<std::size_t> find_type(std::string_view name) const {
    for (std::size_t i = 0; i < tables.size(); ++i)
      if (tables[i] == name) return i;
    return std::nullopt;
  }

  std::size_t num_edges() const {
    std::size_t n = 0;
    for (const auto& r : relations) n += r.edges.size();
    return n;
  }

  std::span<const NodeId> incoming(NodeId v) const {
    return {in_sources.data() + in_offsets[v], in_offsets[v + 1] - in_offsets[v]};
  }

  void rebuild_index() {
    const std::size_t n = num_nodes();
    in_offsets.assign(n + 1, 0);
    for (const auto& r : relations)
      for (auto [s, d] : r.edges) ++in_offsets[offsets[r.dst_type] + d + 1];
    for (std::size_t i = 0; i < n; ++i) in_offsets[i + 1] += in_offsets[i];
    in_sources.assign(in_offsets.back(), 0);
    std::vector<std::size_t> fill(in_offsets.begin(), in_offsets.end() - 1);
    for (const auto& r : relations)
      for (auto [s, d] : r.edges) in_sources[fill[offsets[r.dst_type] + d]++] = global_id(r.src_type, s);
  }
};

struct GraphBuildOptions {
  bool strict = false;  // dangling foreign keys become errors
};

inline EntityGraph build_entity_graph(const SchemaManifest& m, const RowStore& store, const GraphBuildOptions& opts = {}) {
  if (store.tables.size() != m.tables.size()) throw Error("row store does not match manifest");
  EntityGraph g;
  for (std::size_t t = 0; t < m.tables.size(); ++t) {
    const auto& spec = m.tables[t];
    const auto& data = store.tables[t];
    g.tables.push_back(spec.name);
    g.offsets.push_back(g.offsets.back() + data.n_rows);
    const std::size_t pk_col = spec.column_index(spec.primary_key);
    for (std::size_t r = 0; r < data.n_rows; ++r) {
      g.keys.push_back(render_cell(spec.columns[pk_col].kind, data.at(r, pk_col)));
      g.timestamps.push_back(data.has_time() ? data.timestamps[r] : std::nullopt);
    }
  }
  auto sg = build_schema_graph(m);
  for (const auto& e : sg.edges)
    g.relations.push_back({e.name, e.src_table, e.dst_table, e.inverse, {}});
  for (std::size_t ei = 0; ei < sg.edges.size(); ei += 2) {
    const auto& e = sg.edges[ei];
    const auto& spec = m.tables[e.src_table];
    const auto& src = store.tables[e.src_table];
    const auto& dst = store.tables[e.dst_table];
    const std::size_t col = spec.column_index(e.fk_column);
    auto& fwd = g.relations[ei].edges;
    auto& inv = g.relations[ei + 1].edges;
    for (std::size_t r = 0; r < src.n_rows; ++r) {
      const Cell& c = src.at(r, col);
      if (is_absent(c)) continue;
      auto it = dst.pk_index.find(render_cell(spec.columns[col].kind, c));
      if (it == dst.pk_index.end()) {
        if (opts.strict)
          throw Error("table '" + spec.name + "', row " + std::to_string(r) + ": dangling foreign key " + e.fk_column);
        ++g.dangling_fks;
        continue;
      }
      fwd.emplace_back(static_cast<NodeId>(r), static_cast<NodeId>(it->second));
      inv.emplace_back(static_cast<NodeId>(it->second), static_cast<NodeId>(r));
    }
    for (auto* list : {&fwd, &inv}) {
      std::sort(list->begin(), list->end());
      list->erase(std::unique(list->begin(), list->end()), list->end());
    }
  }
  g.rebuild_index();
  return g;
}

struct GraphReport {
  bool ok = true;
  bool parity = true;
  std::vector<std::pair<std::string, std::size_t>> edge_counts;
  std::vector<std::string> violations;
};

/// Checks endpoint ranges, duplicate edges, reverse-edge parity and that the
/// node blocks partition the id range.
inline GraphReport validate_graph(const EntityGraph& g) {
  GraphReport rep;
  auto fail = [&](std::string msg) {
    rep.ok = false;
    rep.violations.push_back(std::move(msg));
  };
  if (g.offsets.size() != g.tables.size() + 1 || g.offsets.front() != 0 ||
      !std::is_sorted(g.offsets.begin(), g.offsets.end()))
    fail("node blocks do not partition the node range");
  auto edge_str = [&](const Relation& r, std::pair<NodeId, NodeId> e) {
    return r.name + " " + g.tables[r.src_type] + ":" + std::to_string(e.first) + " " + g.tables[r.dst_type] + ":" +
           std::to_string(e.second);
  };
  for (const auto& r : g.relations) {
    rep.edge_counts.emplace_back(r.name, r.edges.size());
    if (r.src_type >= g.num_types() || r.dst_type >= g.num_types() || r.inverse >= g.relations.size()) {
      fail("relation " + r.name + " has invalid type indices");
      continue;
    }
    for (std::size_t i = 0; i < r.edges.size(); ++i) {
      auto e = r.edges[i];
      if (e.first >= g.type_size(r.src_type) || e.second >= g.type_size(r.dst_type))
        fail("endpoint out of range: " + edge_str(r, e));
      if (i > 0 && !(r.edges[i - 1] < e)) fail("duplicate or unsorted edge: " + edge_str(r, e));
    }
    const auto& inv = g.relations[r.inverse];
    for (auto e : r.edges) {
      if (!std::binary_search(inv.edges.begin(), inv.edges.end(), std::make_pair(e.second, e.first))) {
        rep.parity = false;
        fail("missing reverse edge for " + edge_str(r, e));
      }
    }
  }
  return rep;
}

}  // namespace relfm
