#pragma once

// Deterministic synthetic relational databases with a planted label signal.
//
// Tables are named <prefix>0 .. <prefix>{k-1}; table 0 is the entity table.
// Star: every other table references table 0. Chain: table i references i-1.
// Each row draws a latent cluster (children usually inherit the parent's),
// and attribute words come mostly from the cluster's slice of the
// vocabulary. Each row also has a hidden propensity (low or high); non-root
// rows carry a `status` of `flagged` with their parent's propensity. In
// neighbor-aggregate mode an entity's label is the majority status of its
// children visible at the seed time, so the entity row alone says nothing
// about it. Node-local mode adds a `signal` column to the entity table that
// carries the label directly.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "relfm/csv.hpp"
#include "relfm/date.hpp"
#include "relfm/error.hpp"
#include "relfm/relmodel.hpp"
#include "relfm/rng.hpp"
#include "relfm/task.hpp"

namespace relfm::synth {

inline constexpr const char* kMarkerColumn = "status";
inline constexpr const char* kMarker = "flagged";
inline constexpr const char* kUnmarked = "clear";
inline constexpr std::int32_t kStartDay = 16436;  // 2015-01-01

enum class Topology : std::uint8_t { star, chain };
enum class SignalMode : std::uint8_t { neighbor_aggregate, node_local };

inline Topology parse_topology(std::string_view s) {
  if (s == "star") return Topology::star;
  if (s == "chain") return Topology::chain;
  throw Error("unknown topology '" + std::string(s) + "' (expected star or chain)");
}

inline SignalMode parse_signal_mode(std::string_view s) {
  if (s == "neighbor-aggregate" || s == "neighbor_aggregate") return SignalMode::neighbor_aggregate;
  if (s == "node-local" || s == "node_local") return SignalMode::node_local;
  throw Error("unknown signal mode '" + std::string(s) + "'");
}

struct SynthProfile {
  std::size_t tables = 4;
  std::size_t rows_per_table = 2000;
  std::size_t entity_rows = 0;  // rows of table 0; 0 means rows_per_table
  Topology topology = Topology::star;
  std::size_t attributes = 3;
  std::size_t vocabulary = 500;
  SignalMode signal = SignalMode::neighbor_aggregate;
  double noise = 0.1;
  std::uint64_t seed = 0;
  std::string prefix = "t";
  std::size_t clusters = 8;
  double cluster_affinity = 0.8;  // chance an attribute word comes from the row's cluster
  double inherit = 0.7;           // chance a child row keeps its parent's cluster
  double marker_low = 0.2;
  double marker_high = 0.8;
  std::int32_t span_days = 1500;

  std::size_t entity_count() const { return entity_rows ? entity_rows : rows_per_table; }

  void validate() const {
    if (tables < 2) throw Error("synthetic profile needs at least 2 tables");
    if (rows_per_table == 0 || entity_count() == 0) throw Error("row counts must be positive");
    if (vocabulary == 0 || clusters == 0) throw Error("vocabulary and cluster count must be positive");
    if (!(noise >= 0.0 && noise < 0.5)) throw Error("noise must be in [0, 0.5)");
    if (!(marker_low >= 0.0 && marker_high <= 1.0 && marker_low <= marker_high)) throw Error("invalid marker rates");
    if (span_days <= 0) throw Error("span_days must be positive");
  }
};

inline nlohmann::json to_json(const SynthProfile& p) {
  return {{"tables", p.tables},
          {"rows_per_table", p.rows_per_table},
          {"entity_rows", p.entity_count()},
          {"topology", p.topology == Topology::star ? "star" : "chain"},
          {"attributes", p.attributes},
          {"vocabulary", p.vocabulary},
          {"signal", p.signal == SignalMode::neighbor_aggregate ? "neighbor-aggregate" : "node-local"},
          {"noise", p.noise},
          {"seed", p.seed},
          {"prefix", p.prefix}};
}

inline std::string table_name(const SynthProfile& p, std::size_t i) { return p.prefix + std::to_string(i); }

inline std::size_t parent_of(const SynthProfile& p, std::size_t i) { return p.topology == Topology::star ? 0 : i - 1; }

inline SchemaManifest synth_manifest(const SynthProfile& p) {
  SchemaManifest m;
  for (std::size_t i = 0; i < p.tables; ++i) {
    TableSpec t;
    t.name = table_name(p, i);
    t.file = t.name + ".csv";
    t.primary_key = "id";
    t.columns.push_back({"id", ColumnKind::key, false});
    if (i > 0) {
      auto fk = table_name(p, parent_of(p, i)) + "_id";
      t.columns.push_back({fk, ColumnKind::key, false});
      t.foreign_keys.push_back({fk, table_name(p, parent_of(p, i))});
    }
    for (std::size_t a = 1; a <= p.attributes; ++a) t.columns.push_back({"a" + std::to_string(a), ColumnKind::text, true});
    if (i > 0) {
      t.columns.push_back({kMarkerColumn, ColumnKind::text, false});
      t.columns.push_back({"date", ColumnKind::date, false});
      t.time_column = "date";
    } else if (p.signal == SignalMode::node_local) {
      t.columns.push_back({"signal", ColumnKind::text, false});
    }
    m.tables.push_back(std::move(t));
  }
  validate_manifest(m);
  return m;
}

/// Writes schema.json and one CSV per table into `out_dir`.
inline SchemaManifest generate_database(const SynthProfile& p, const std::filesystem::path& out_dir) {
  p.validate();
  auto m = synth_manifest(p);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create directory " + out_dir.string());

  Rng rng(p.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> cluster_pick(0, p.clusters - 1);
  const std::size_t slice = std::max<std::size_t>(1, p.vocabulary / p.clusters);
  std::vector<std::vector<std::size_t>> cluster(p.tables);
  std::vector<std::vector<std::uint8_t>> high(p.tables);

  auto word = [&](std::size_t c) {
    std::size_t w;
    if (unif(rng) < p.cluster_affinity) {
      w = std::min(p.vocabulary - 1, c * slice + std::uniform_int_distribution<std::size_t>(0, slice - 1)(rng));
    } else {
      w = std::uniform_int_distribution<std::size_t>(0, p.vocabulary - 1)(rng);
    }
    return "w" + std::to_string(w);
  };

  for (std::size_t i = 0; i < p.tables; ++i) {
    const auto& spec = m.tables[i];
    const std::size_t n = i == 0 ? p.entity_count() : p.rows_per_table;
    std::ofstream f(out_dir / spec.file, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + (out_dir / spec.file).string());
    std::vector<std::string> row;
    for (const auto& c : spec.columns) row.push_back(c.name);
    csv::write_row(f, row);
    const std::size_t parent = i > 0 ? parent_of(p, i) : 0;
    for (std::size_t r = 0; r < n; ++r) {
      row.clear();
      row.push_back(std::to_string(r));
      std::size_t c = cluster_pick(rng);
      std::size_t pr = 0;
      if (i > 0) {
        pr = std::uniform_int_distribution<std::size_t>(0, cluster[parent].size() - 1)(rng);
        row.push_back(std::to_string(pr));
        if (unif(rng) < p.inherit) c = cluster[parent][pr];
      }
      const bool is_high = unif(rng) < 0.5;
      cluster[i].push_back(c);
      high[i].push_back(is_high);
      for (std::size_t a = 0; a < p.attributes; ++a) row.push_back(word(c));
      if (i > 0) {
        const double rate = high[parent][pr] ? p.marker_high : p.marker_low;
        row.push_back(unif(rng) < rate ? kMarker : kUnmarked);
        auto day = kStartDay + static_cast<std::int32_t>(static_cast<long long>(r) * p.span_days / static_cast<long long>(n));
        row.push_back(format_iso_date(day));
      } else if (p.signal == SignalMode::node_local) {
        row.push_back(is_high ? "pos" : "neg");
      }
      csv::write_row(f, row);
    }
    if (!f) throw IoError("write failed for " + (out_dir / spec.file).string());
  }
  std::ofstream mf(out_dir / "schema.json", std::ios::binary | std::ios::trunc);
  if (!mf) throw IoError("cannot write " + (out_dir / "schema.json").string());
  mf << manifest_to_json(m).dump(2) << '\n';
  return m;
}

struct PlantOptions {
  SignalMode mode = SignalMode::neighbor_aggregate;
  double noise = 0.1;
  std::uint64_t seed = 0;
  double min_time_fraction = 0.3;  // seed times uniform over the last (1 - this) of the time range
  double val_quantile = 0.6;
  double test_quantile = 0.8;
};

struct PlantedTask {
  TaskTable task;
  TaskManifest manifest;
  std::size_t coin_flips = 0;  // entities with no visible child rows (or tied counts)
};

/// Labels every entity row. Neighbor-aggregate: majority marker among linked
/// child rows dated on or before the seed time; ties and childless entities
/// get a fair coin. Node-local: the entity's own `signal`. Then flipped with
/// probability `noise`.
inline PlantedTask plant_labels(const SchemaManifest& m, const RowStore& store, const EntityGraph& g,
                                const std::string& entity_table, const PlantOptions& opt) {
  if (!(opt.noise >= 0.0 && opt.noise < 0.5)) throw Error("noise must be in [0, 0.5)");
  const std::size_t et = m.table_index(entity_table);
  const auto& espec = m.tables[et];
  const auto& edata = store.tables.at(et);
  const auto gtype = g.find_type(entity_table);
  if (!gtype) throw Error("entity table missing from graph");

  std::int32_t lo = INT32_MAX, hi = INT32_MIN;
  for (const auto& t : store.tables)
    for (const auto& ts : t.timestamps)
      if (ts) {
        lo = std::min(lo, *ts);
        hi = std::max(hi, *ts);
      }
  if (lo > hi) throw Error("database has no timestamps to place seed times");

  // child rows (date, marked) per entity ordinal
  struct Child {
    std::int32_t date;
    bool marked;
  };
  std::vector<std::vector<Child>> children(edata.n_rows);
  bool any_link = false;
  for (std::size_t t = 0; t < m.tables.size(); ++t) {
    const auto& spec = m.tables[t];
    const auto& data = store.tables[t];
    auto mcol = spec.find_column(kMarkerColumn);
    for (const auto& fk : spec.foreign_keys) {
      if (fk.references != entity_table) continue;
      any_link = true;
      if (!mcol || !data.has_time()) continue;
      const std::size_t fc = spec.column_index(fk.column);
      for (std::size_t r = 0; r < data.n_rows; ++r) {
        const Cell& ref = data.at(r, fc);
        if (is_absent(ref) || !data.timestamps[r]) continue;
        auto it = edata.pk_index.find(render_cell(spec.columns[fc].kind, ref));
        if (it == edata.pk_index.end()) continue;
        const Cell& mk = data.at(r, *mcol);
        const auto* s = std::get_if<std::string>(&mk);
        children[it->second].push_back({*data.timestamps[r], s && *s == kMarker});
      }
    }
  }
  if (opt.mode == SignalMode::neighbor_aggregate && !any_link)
    throw Error("entity table '" + entity_table + "' has no incoming relation");
  std::optional<std::size_t> signal_col;
  if (opt.mode == SignalMode::node_local) {
    signal_col = espec.find_column("signal");
    if (!signal_col) throw Error("node-local labels need a 'signal' column on the entity table");
  }

  Rng rng(opt.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double t0 = lo + opt.min_time_fraction * (hi - lo);
  PlantedTask out;
  out.task.entity_table = entity_table;
  for (std::size_t r = 0; r < edata.n_rows; ++r) {
    const auto seed_time = static_cast<std::int32_t>(std::floor(t0 + unif(rng) * (hi - t0) + 0.5));
    int label = 0;
    if (opt.mode == SignalMode::neighbor_aggregate) {
      std::size_t marked = 0, seen = 0;
      for (const auto& c : children[r])
        if (c.date <= seed_time) {
          ++seen;
          marked += c.marked;
        }
      if (2 * marked > seen) {
        label = 1;
      } else if (2 * marked == seen) {
        label = unif(rng) < 0.5;
        ++out.coin_flips;
      }
    } else {
      const auto* s = std::get_if<std::string>(&edata.at(r, *signal_col));
      label = s && *s == "pos";
    }
    if (unif(rng) < opt.noise) label = 1 - label;
    const auto key = render_cell(espec.columns[espec.column_index(espec.primary_key)].kind,
                                 edata.at(r, espec.column_index(espec.primary_key)));
    out.task.rows.push_back({key, g.global_id(*gtype, r), seed_time, label, Split::train});
  }

  std::vector<std::int32_t> times;
  for (const auto& row : out.task.rows) times.push_back(row.time);
  std::sort(times.begin(), times.end());
  auto quantile = [&](double q) { return times[std::min(times.size() - 1, static_cast<std::size_t>(q * times.size()))]; };
  out.manifest = {entity_table, quantile(opt.val_quantile), quantile(opt.test_quantile)};
  apply_time_split(out.task, out.manifest.val_start, out.manifest.test_start);
  return out;
}

/// task.csv and task.json.
inline void write_task_files(const PlantedTask& t, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream f(dir / "task.csv", std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + (dir / "task.csv").string());
  write_task_csv(t.task, f);
  std::ofstream j(dir / "task.json", std::ios::binary | std::ios::trunc);
  if (!j) throw IoError("cannot write " + (dir / "task.json").string());
  j << task_manifest_to_json(t.manifest).dump(2) << '\n';
}

}  // namespace relfm::synth
