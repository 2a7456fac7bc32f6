#pragma once

// Binary entity-classification tasks: `entity_id,timestamp,label` CSV files,
// the task manifest, and train/validation/test splits by seed time.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "relfm/csv.hpp"
#include "relfm/date.hpp"
#include "relfm/error.hpp"
#include "relfm/relmodel.hpp"
#include "relfm/rng.hpp"

namespace relfm {

enum class Split : std::uint8_t { train, validation, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

struct TaskRow {
  std::string entity_id;
  NodeId node = 0;
  std::int32_t time = 0;  // days since epoch
  int label = 0;
  Split split = Split::train;
};

struct TaskTable {
  std::string entity_table;
  std::vector<TaskRow> rows;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rows[i].split == s) out.push_back(i);
    return out;
  }
};

struct TaskManifest {
  std::string entity_table;
  std::int32_t val_start = 0;
  std::int32_t test_start = 0;
};

inline TaskManifest task_manifest_from_json(const nlohmann::json& j) {
  try {
    TaskManifest m;
    m.entity_table = j.at("entity_table").get<std::string>();
    const auto& ts = j.at("time_split");
    auto date = [&](const char* key) {
      auto s = ts.at(key).get<std::string>();
      auto d = parse_iso_date(s);
      if (!d) throw Error(std::string("task manifest: unparseable date for ") + key + ": '" + s + "'");
      return *d;
    };
    m.val_start = date("val_start");
    m.test_start = date("test_start");
    if (m.val_start > m.test_start) throw Error("task manifest: val_start is after test_start");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("task manifest: ") + e.what());
  }
}

inline nlohmann::json task_manifest_to_json(const TaskManifest& m) {
  return {{"entity_table", m.entity_table},
          {"time_split", {{"val_start", format_iso_date(m.val_start)}, {"test_start", format_iso_date(m.test_start)}}}};
}

inline TaskManifest load_task_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open task manifest " + path.string());
  try {
    return task_manifest_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

/// Reads `entity_id,timestamp,label` rows and resolves ids against the
/// entity table's node keys. Errors name the 1-based data row.
inline TaskTable load_task_table(std::istream& in, const std::string& entity_table, const EntityGraph& g) {
  auto type = g.find_type(entity_table);
  if (!type) throw Error("task entity table '" + entity_table + "' is not in the graph");
  std::unordered_map<std::string_view, NodeId> by_key;
  for (std::size_t i = 0; i < g.type_size(*type); ++i) {
    NodeId v = g.global_id(*type, i);
    by_key.emplace(g.keys[v], v);
  }
  csv::Reader reader(in);
  std::vector<std::string> f;
  if (!reader.next(f) || f != std::vector<std::string>{"entity_id", "timestamp", "label"})
    throw Error("task file header must be entity_id,timestamp,label");
  TaskTable t;
  t.entity_table = entity_table;
  for (std::size_t row = 1; reader.next(f); ++row) {
    auto where = " at task row " + std::to_string(row);
    if (f.size() != 3) throw Error("expected 3 fields" + where);
    auto it = by_key.find(f[0]);
    if (it == by_key.end()) throw Error("unknown entity id '" + f[0] + "'" + where);
    auto d = parse_iso_date(f[1]);
    if (!d) throw Error("unparseable date '" + f[1] + "'" + where);
    if (f[2] != "0" && f[2] != "1") throw Error("label must be 0 or 1, got '" + f[2] + "'" + where);
    t.rows.push_back({f[0], it->second, *d, f[2] == "1" ? 1 : 0, Split::train});
  }
  return t;
}

inline TaskTable load_task_table(const std::filesystem::path& path, const std::string& entity_table,
                                 const EntityGraph& g) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open task file " + path.string());
  return load_task_table(f, entity_table, g);
}

inline void write_task_csv(const TaskTable& t, std::ostream& out) {
  out << "entity_id,timestamp,label\n";
  for (const auto& r : t.rows) out << csv::escape(r.entity_id) << ',' << format_iso_date(r.time) << ',' << r.label << '\n';
}

/// train: time < val_start; validation: val_start <= time < test_start; test: the rest.
inline void apply_time_split(TaskTable& t, std::int32_t val_start, std::int32_t test_start) {
  for (auto& r : t.rows)
    r.split = r.time < val_start ? Split::train : (r.time < test_start ? Split::validation : Split::test);
}

/// Seeded 70/10/20 assignment ignoring time.
inline void apply_random_split(TaskTable& t, std::uint64_t seed) {
  std::vector<std::size_t> ids(t.rows.size());
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(seed);
  shuffle(ids, rng);
  const std::size_t n_train = ids.size() * 7 / 10, n_val = ids.size() / 10;
  for (std::size_t k = 0; k < ids.size(); ++k)
    t.rows[ids[k]].split = k < n_train ? Split::train : (k < n_train + n_val ? Split::validation : Split::test);
}

/// Every train seed time precedes every validation one, which precede every test one.
inline bool temporally_ordered(const TaskTable& t) {
  std::int32_t hi[3] = {INT32_MIN, INT32_MIN, INT32_MIN}, lo[3] = {INT32_MAX, INT32_MAX, INT32_MAX};
  for (const auto& r : t.rows) {
    auto s = static_cast<std::size_t>(r.split);
    hi[s] = std::max(hi[s], r.time);
    lo[s] = std::min(lo[s], r.time);
  }
  return hi[0] < lo[1] && hi[1] < lo[2] && hi[0] < lo[2];
}

}  // namespace relfm
