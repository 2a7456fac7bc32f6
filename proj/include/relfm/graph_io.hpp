#pragma once

// Entity graph persistence.
//
// Binary layout (little-endian): magic "RGPH", u8 version=1, u32 n_tables;
// per table: u16 name_len + name, u64 n_rows, u8 has_time; then per row:
// u32 key_len + key bytes, and (if has_time) u8 present + i32 days.
// Then u32 n_relations; per relation: u16 name_len + name, u32 src_type,
// u32 dst_type, u32 inverse, u64 n_edges, n_edges x (u32 src, u32 dst).
// Trailing u64 dangling foreign-key count.

#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>

#include "relfm/binio.hpp"
#include "relfm/relmodel.hpp"

namespace relfm {

inline void write_graph(const EntityGraph& g, const std::filesystem::path& path) {
  binio::Writer w;
  w.put_bytes("RGPH");
  w.put<std::uint8_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(g.num_types()));
  for (std::size_t t = 0; t < g.num_types(); ++t) {
    w.put_str16(g.tables[t]);
    w.put<std::uint64_t>(g.type_size(t));
    bool has_time = false;
    for (std::size_t v = g.offsets[t]; v < g.offsets[t + 1]; ++v) has_time |= g.timestamps[v].has_value();
    w.put<std::uint8_t>(has_time);
    for (std::size_t v = g.offsets[t]; v < g.offsets[t + 1]; ++v) {
      w.put_str32(g.keys[v]);
      if (has_time) {
        w.put<std::uint8_t>(g.timestamps[v].has_value());
        w.put<std::int32_t>(g.timestamps[v].value_or(0));
      }
    }
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(g.relations.size()));
  for (const auto& r : g.relations) {
    w.put_str16(r.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.src_type));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.dst_type));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.inverse));
    w.put<std::uint64_t>(r.edges.size());
    for (auto [s, d] : r.edges) {
      w.put<std::uint32_t>(s);
      w.put<std::uint32_t>(d);
    }
  }
  w.put<std::uint64_t>(g.dangling_fks);
  w.save(path);
}

inline EntityGraph read_graph(const std::filesystem::path& path) {
  auto r = binio::Reader::from_file(path);
  if (r.get_bytes(4) != "RGPH") throw Error(path.string() + ": not a graph file (magic mismatch)");
  if (r.get<std::uint8_t>() != 1) throw Error(path.string() + ": unsupported graph file version");
  EntityGraph g;
  auto n_tables = r.get<std::uint32_t>();
  for (std::uint32_t t = 0; t < n_tables; ++t) {
    g.tables.push_back(r.get_str16());
    auto n = r.get<std::uint64_t>();
    g.offsets.push_back(g.offsets.back() + n);
    bool has_time = r.get<std::uint8_t>() != 0;
    for (std::uint64_t i = 0; i < n; ++i) {
      g.keys.push_back(r.get_str32());
      std::optional<std::int32_t> ts;
      if (has_time) {
        bool present = r.get<std::uint8_t>() != 0;
        auto days = r.get<std::int32_t>();
        if (present) ts = days;
      }
      g.timestamps.push_back(ts);
    }
  }
  auto n_rel = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_rel; ++i) {
    Relation rel;
    rel.name = r.get_str16();
    rel.src_type = r.get<std::uint32_t>();
    rel.dst_type = r.get<std::uint32_t>();
    rel.inverse = r.get<std::uint32_t>();
    auto ne = r.get<std::uint64_t>();
    if (ne > r.remaining() / 8) throw Error("unexpected end of file");
    rel.edges.reserve(ne);
    for (std::uint64_t e = 0; e < ne; ++e) {
      auto s = r.get<std::uint32_t>();
      auto d = r.get<std::uint32_t>();
      rel.edges.emplace_back(s, d);
    }
    g.relations.push_back(std::move(rel));
  }
  g.dangling_fks = r.get<std::uint64_t>();
  if (!r.at_end()) throw Error(path.string() + ": trailing bytes after graph payload");
  auto rep = validate_graph(g);
  if (!rep.ok) throw Error(path.string() + ": invalid graph: " + rep.violations.front());
  g.rebuild_index();
  return g;
}

/// Debug dump, one `EDGE <relation> <src_table>:<src_ordinal> <dst_table>:<dst_ordinal>` line per edge.
inline void dump_edges(const EntityGraph& g, std::ostream& out) {
  for (const auto& r : g.relations)
    for (auto [s, d] : r.edges)
      out << "EDGE " << r.name << ' ' << g.tables[r.src_type] << ':' << s << ' ' << g.tables[r.dst_type] << ':' << d
          << '\n';
}

}  // namespace relfm
