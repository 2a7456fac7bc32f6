#pragma once

// Fixtures and independent oracles shared by the unit and acceptance tests.
// The oracles deliberately avoid the library's own indexes and fast paths.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "relfm/csv.hpp"
#include "relfm/downstream.hpp"
#include "relfm/encoders.hpp"
#include "relfm/hetgnn.hpp"
#include "relfm/pretrain.hpp"
#include "relfm/relmodel.hpp"
#include "relfm/synth.hpp"
#include "relfm/tensor.hpp"

namespace relfm::testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    static std::uint64_t counter = 0;
    std::random_device rd;
    path_ = fs::temp_directory_path() /
            ("relfm_test_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << s;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// drivers(3) <- results(4) -> races(2), results carrying driverId and raceId.
inline const char* kToySchema = R"({
  "tables": [
    {"name": "drivers", "file": "drivers.csv", "primary_key": "driverId",
     "columns": [{"name": "driverId", "kind": "key", "nullable": false},
                 {"name": "surname", "kind": "text", "nullable": true}]},
    {"name": "races", "file": "races.csv", "primary_key": "raceId",
     "columns": [{"name": "raceId", "kind": "key", "nullable": false},
                 {"name": "date", "kind": "date", "nullable": false}],
     "time_column": "date"},
    {"name": "results", "file": "results.csv", "primary_key": "resultId",
     "columns": [{"name": "resultId", "kind": "integer", "nullable": false},
                 {"name": "driverId", "kind": "key", "nullable": true},
                 {"name": "raceId", "kind": "key", "nullable": true},
                 {"name": "points", "kind": "float", "nullable": true}],
     "foreign_keys": [{"column": "driverId", "references": "drivers"},
                      {"column": "raceId", "references": "races"}]}
  ]
})";

inline void write_toy_db(const fs::path& dir) {
  write_text(dir / "schema.json", kToySchema);
  write_text(dir / "drivers.csv", "driverId,surname\n1,Hamilton\n2,Verstappen\n3,\n");
  write_text(dir / "races.csv", "raceId,date\n10,2020-03-01\n11,2020-04-01\n");
  write_text(dir / "results.csv",
             "resultId,driverId,raceId,points\n100,1,10,25\n101,2,10,18.5\n102,1,11,18\n103,3,11,0\n");
}

struct LoadedDb {
  SchemaManifest manifest;
  RowStore store;
  EntityGraph graph;
};

inline LoadedDb load_db(const fs::path& dir, const GraphBuildOptions& opts = {}) {
  LoadedDb db;
  db.manifest = parse_schema_manifest(dir / "schema.json");
  db.store = load_tables(db.manifest, dir);
  db.graph = build_entity_graph(db.manifest, db.store, opts);
  return db;
}

/// hubs(n_hubs) <- spokes: spoke i references hub i % n_hubs and is dated
/// first_day + i.
inline void write_hub_db(const fs::path& dir, std::size_t n_hubs, std::size_t n_spokes, std::int32_t first_day) {
  write_text(dir / "schema.json", R"({"tables": [
    {"name": "hubs", "file": "hubs.csv", "primary_key": "id",
     "columns": [{"name": "id", "kind": "key", "nullable": false}, {"name": "name", "kind": "text", "nullable": true}]},
    {"name": "spokes", "file": "spokes.csv", "primary_key": "id",
     "columns": [{"name": "id", "kind": "key", "nullable": false}, {"name": "hub", "kind": "key", "nullable": false},
                 {"name": "date", "kind": "date", "nullable": false}],
     "foreign_keys": [{"column": "hub", "references": "hubs"}], "time_column": "date"}]})");
  std::string hubs = "id,name\n", spokes = "id,hub,date\n";
  for (std::size_t h = 0; h < n_hubs; ++h) hubs += "h" + std::to_string(h) + ",hub" + std::to_string(h) + "\n";
  for (std::size_t i = 0; i < n_spokes; ++i)
    spokes += "s" + std::to_string(i) + ",h" + std::to_string(i % n_hubs) + "," +
              format_iso_date(first_day + static_cast<std::int32_t>(i)) + "\n";
  write_text(dir / "hubs.csv", hubs);
  write_text(dir / "spokes.csv", spokes);
}

/// Generates a synthetic database into `dir` and loads it back.
inline LoadedDb synth_db(const fs::path& dir, const synth::SynthProfile& p) {
  LoadedDb db;
  db.manifest = synth::generate_database(p, dir);
  db.store = load_tables(db.manifest, dir);
  db.graph = build_entity_graph(db.manifest, db.store);
  return db;
}

// ---------------------------------------------------------------------------
// Randomized databases and the nested-scan edge oracle

struct RawTable {
  std::string name;
  std::vector<std::string> columns;             // column 0 is the primary key
  std::vector<std::pair<std::size_t, std::string>> fks;  // (column index, referenced table)
  std::vector<std::vector<std::string>> rows;
};

/// Random schema (2-5 tables, self references and parallel foreign keys
/// allowed) with random, partly dangling or empty, foreign-key values.
inline std::vector<RawTable> random_raw_db(std::uint64_t seed, std::size_t max_rows_total = 10000) {
  std::mt19937_64 rng(seed);
  auto uni = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  const std::size_t n_tables = uni(2, 5);
  std::vector<RawTable> db(n_tables);
  std::vector<std::size_t> sizes(n_tables);
  for (std::size_t t = 0; t < n_tables; ++t) {
    db[t].name = "tab" + std::to_string(t);
    sizes[t] = uni(0, std::max<std::size_t>(1, max_rows_total / n_tables));
    db[t].columns.push_back("pk");
  }
  for (std::size_t t = 0; t < n_tables; ++t) {
    const std::size_t n_fk = uni(0, 3);
    for (std::size_t k = 0; k < n_fk; ++k) {
      const std::size_t target = uni(0, n_tables - 1);
      db[t].columns.push_back("fk" + std::to_string(k));
      db[t].fks.emplace_back(db[t].columns.size() - 1, db[target].name);
    }
    db[t].columns.push_back("note");
  }
  for (std::size_t t = 0; t < n_tables; ++t) {
    // keys are a shuffled subset of a larger id space, so some references dangle
    std::vector<std::size_t> ids(sizes[t] * 2 + 1);
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t r = 0; r < sizes[t]; ++r) {
      std::vector<std::string> row{std::to_string(ids[r])};
      for (std::size_t k = 0; k < db[t].fks.size(); ++k) {
        const auto& target = db[t].fks[k].second;
        std::size_t tsize = 0;
        for (std::size_t u = 0; u < n_tables; ++u)
          if (db[u].name == target) tsize = sizes[u];
        if (uni(0, 9) == 0) row.push_back("");
        else row.push_back(std::to_string(uni(0, tsize * 2 + 1)));
      }
      row.push_back("n" + std::to_string(uni(0, 5)));
      db[t].rows.push_back(std::move(row));
    }
  }
  return db;
}

inline void write_raw_db(const std::vector<RawTable>& db, const fs::path& dir) {
  nlohmann::json tables = nlohmann::json::array();
  for (const auto& t : db) {
    nlohmann::json jt{{"name", t.name}, {"file", t.name + ".csv"}, {"primary_key", "pk"}};
    jt["columns"] = nlohmann::json::array();
    for (std::size_t c = 0; c < t.columns.size(); ++c)
      jt["columns"].push_back({{"name", t.columns[c]}, {"kind", c + 1 == t.columns.size() ? "text" : "key"},
                               {"nullable", c != 0}});
    jt["foreign_keys"] = nlohmann::json::array();
    for (const auto& [col, ref] : t.fks) jt["foreign_keys"].push_back({{"column", t.columns[col]}, {"references", ref}});
    tables.push_back(jt);
    std::ostringstream csvs;
    csv::write_row(csvs, t.columns);
    for (const auto& r : t.rows) csv::write_row(csvs, r);
    write_text(dir / (t.name + ".csv"), csvs.str());
  }
  write_text(dir / "schema.json", nlohmann::json{{"tables", tables}}.dump());
}

/// (relation name, src ordinal, dst ordinal) for every pk/fk match, found by
/// comparing every referencing cell with every primary key of the target.
using EdgeSet = std::set<std::tuple<std::string, std::size_t, std::size_t>>;

inline EdgeSet brute_force_edges(const std::vector<RawTable>& db) {
  EdgeSet out;
  for (const auto& s : db)
    for (const auto& [col, ref] : s.fks)
      for (const auto& t : db) {
        if (t.name != ref) continue;
        const auto fwd = s.name + "." + s.columns[col] + "->" + t.name;
        const auto inv = t.name + "<-" + s.name + "." + s.columns[col];
        for (std::size_t r = 0; r < s.rows.size(); ++r) {
          if (s.rows[r][col].empty()) continue;
          for (std::size_t q = 0; q < t.rows.size(); ++q)
            if (t.rows[q][0] == s.rows[r][col]) {
              out.emplace(fwd, r, q);
              out.emplace(inv, q, r);
            }
        }
      }
  return out;
}

inline EdgeSet graph_edges(const EntityGraph& g) {
  EdgeSet out;
  for (const auto& r : g.relations)
    for (auto [s, d] : r.edges) out.emplace(r.name, s, d);
  return out;
}

inline std::size_t count_dangling(const std::vector<RawTable>& db) {
  std::size_t n = 0;
  for (const auto& s : db)
    for (const auto& [col, ref] : s.fks)
      for (const auto& row : s.rows) {
        if (row[col].empty()) continue;
        bool hit = false;
        for (const auto& t : db)
          if (t.name == ref)
            for (const auto& q : t.rows) hit |= q[0] == row[col];
        n += !hit;
      }
  return n;
}

// ---------------------------------------------------------------------------
// Dense full-graph propagation oracle

using DenseMat = std::vector<std::vector<double>>;

inline std::vector<double> vec_mat(const std::vector<double>& x, const tensor::Tensor<double>& W) {
  std::vector<double> y(W.cols(), 0.0);
  for (std::size_t i = 0; i < W.rows(); ++i)
    for (std::size_t j = 0; j < W.cols(); ++j) y[j] += x[i] * W(i, j);
  return y;
}

/// Every node's final embedding using all incoming edges (as a multiset)
/// plus the node itself in each mean; no sampling.
inline DenseMat dense_forward(const gnn::HeteroSageParams<double>& p, const std::vector<std::size_t>& type_map,
                              const EntityGraph& g, const EmbeddingMatrix& feats) {
  const std::size_t n = g.num_nodes();
  std::vector<std::vector<std::size_t>> in(n);
  for (const auto& r : g.relations)
    for (auto [s, d] : r.edges) in[g.global_id(r.dst_type, d)].push_back(g.global_id(r.src_type, s));
  DenseMat h(n);
  for (std::size_t v = 0; v < n; ++v) {
    const std::size_t t = g.node_type(static_cast<NodeId>(v));
    auto row = feats.blocks[t].row(v - g.offsets[t], feats.dim);
    std::vector<double> x(row.begin(), row.end());
    const auto& proj = p.proj[type_map[t]];
    h[v] = vec_mat(x, proj.W);
    for (std::size_t j = 0; j < h[v].size(); ++j) h[v][j] += proj.b.data()[j];
  }
  for (std::size_t l = 0; l < p.convs.size(); ++l) {
    const auto& c = p.convs[l];
    DenseMat next(n);
    for (std::size_t v = 0; v < n; ++v) {
      std::vector<double> mean(h[v].size(), 0.0);
      for (auto u : in[v])
        for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += h[u][j];
      for (std::size_t j = 0; j < mean.size(); ++j) mean[j] = (mean[j] + h[v][j]) / static_cast<double>(in[v].size() + 1);
      auto a = vec_mat(h[v], c.W_self);
      auto b = vec_mat(mean, c.W_neigh);
      next[v].resize(a.size());
      for (std::size_t j = 0; j < a.size(); ++j) {
        double z = a[j] + b[j] + c.b.data()[j];
        next[v][j] = l + 1 < p.convs.size() ? std::max(0.0, z) : z;
      }
    }
    h = std::move(next);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Metrics oracle

inline double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        pairs += 1.0;
      }
  return num / pairs;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

/// Central differences on every element of `params`; `loss` must rebuild its
/// computation from the current parameter values. The analytic gradients
/// must already be present on `params`. The step starts at h and shrinks
/// while the estimates at h and h/4 disagree, which happens when a ReLU kink
/// lies inside the stencil.
inline GradCheckResult finite_difference_check(std::vector<std::pair<std::string, tensor::Tensor<double>>>& params,
                                               const std::function<double()>& loss, double h = 1e-5) {
  GradCheckResult res;
  for (auto& [name, t] : params) {
    auto v = t.data();
    auto g = t.grad();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      auto central = [&](double step) {
        v[i] = orig + step;
        const double lp = loss();
        v[i] = orig - step;
        const double lm = loss();
        v[i] = orig;
        return (lp - lm) / (2 * step);
      };
      double step = h;
      double numeric = central(step);
      for (int k = 0; k < 3; ++k) {
        const double finer = central(step / 4);
        if (std::abs(finer - numeric) <= 1e-6 * std::max({std::abs(numeric), std::abs(finer), 1e-2})) break;
        step /= 4;
        numeric = finer;
      }
      const double analytic = g.empty() ? 0.0 : g[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      const double rel = std::abs(numeric - analytic) / denom;
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst = name + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic) + " numeric " +
                    std::to_string(numeric);
      }
    }
  }
  return res;
}

/// Random, non-zero biases keep pre-activations away from ReLU kinks.
inline void randomize_biases(std::vector<std::pair<std::string, tensor::Tensor<double>>>& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.5);
  for (auto& [name, t] : params)
    if (t.rank() == 1)
      for (auto& x : t.data()) x = nd(rng);
}

inline EmbeddingMatrix random_features(const EntityGraph& g, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  EmbeddingMatrix m;
  m.dim = dim;
  for (std::size_t t = 0; t < g.num_types(); ++t) {
    EmbeddingBlock b{g.tables[t], g.type_size(t), std::vector<float>(g.type_size(t) * dim)};
    for (auto& v : b.values) v = nd(rng);
    m.blocks.push_back(std::move(b));
  }
  return m;
}

struct GradCheckCase {
  GradCheckResult result;
  std::size_t n_params = 0;
};

inline std::size_t parameter_count(const std::vector<std::pair<std::string, tensor::Tensor<double>>>& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

/// Masked-reconstruction loss of a 64-bit toy encoder on the toy database.
inline GradCheckCase pretrain_gradcheck(std::uint64_t seed) {
  TempDir dir;
  write_toy_db(dir.path());
  const auto db = load_db(dir.path());
  const auto& g = db.graph;
  const auto feats = random_features(g, 3, seed);
  auto params = gnn::init_params<double>(g.tables, 3, 4, 2, seed);
  auto named = params.named_parameters();
  randomize_biases(named, seed ^ 0x9E37);
  const auto type_map = gnn::bind_types(params, g);

  Rng rng(seed);
  const NodeId seeds[] = {0, 3, 5, 8};
  const auto sub = gnn::sample_neighborhood(g, seeds, gnn::FanoutSpec{}, rng);
  auto inputs = gnn::gather_inputs<double>(feats, g, sub);
  std::vector<double> t;
  for (auto s : sub.seeds)
    for (std::size_t j = 0; j < 3; ++j) t.push_back(inputs(s, j));
  const auto target = tensor::Tensor<double>::matrix(sub.seeds.size(), 3, t);
  auto [masked, mask] = pretrain::mask_features(target, 0.5, rng);
  for (std::size_t i = 0; i < sub.seeds.size(); ++i) mask.bits[i * 3] = 1;  // every row contributes
  for (std::size_t i = 0; i < sub.seeds.size(); ++i)
    for (std::size_t j = 0; j < 3; ++j)
      if (mask.bits[i * 3 + j]) inputs(sub.seeds[i], j) = 0.0;

  const pretrain::LossParams lp{0.7, 2.0, 1e-6};
  auto loss = [&](tensor::Tape<double>& tape) {
    auto h = gnn::forward(params, type_map, g, sub, inputs, tape);
    auto xhat = gnn::decode_reconstruction(params, h, tape);
    return pretrain::combined_loss(tape, xhat, target, mask, lp).combined;
  };
  tensor::Tape<double> tape;
  tape.backward(loss(tape));
  GradCheckCase out;
  out.n_params = parameter_count(named);
  out.result = finite_difference_check(named, [&] {
    tensor::Tape<double> t2;
    return loss(t2).item();
  });
  return out;
}

/// Cross-entropy of a 64-bit toy downstream model (GNN, date encoder, head
/// with dropout active) on a small task over the toy database.
inline GradCheckCase downstream_gradcheck(std::uint64_t seed) {
  TempDir dir;
  write_toy_db(dir.path());
  const auto db = load_db(dir.path());
  const auto& g = db.graph;
  const auto feats = random_features(g, 3, seed);
  downstream::DownstreamConfig cfg;
  cfg.seed = seed;
  cfg.hidden_channels = 4;
  cfg.date_dim = 3;
  cfg.head_hidden = {5, 4};
  cfg.dropout_keep = 0.8;
  auto model = downstream::init_model<double>(g, 3, downstream::AdaptMode::finetune, nullptr, cfg, {18330.0, 20.0});
  auto named = model.named_parameters();
  randomize_biases(named, seed ^ 0x51);
  const auto d0 = *parse_iso_date("2020-03-15");
  const std::vector<TaskRow> rows{{"1", 0, d0, 1, Split::train},
                                  {"2", 1, d0 + 30, 0, Split::train},
                                  {"3", 2, d0 - 20, 1, Split::train},
                                  {"1", 0, d0 + 40, 0, Split::train}};
  const downstream::ForwardContext ctx{true, seed, 1, 0};
  auto loss = [&](tensor::Tape<double>& tape) { return downstream::task_loss(model, g, feats, rows, cfg, ctx, tape); };
  tensor::Tape<double> tape;
  tape.backward(loss(tape));
  GradCheckCase out;
  out.n_params = parameter_count(named);
  out.result = finite_difference_check(named, [&] {
    tensor::Tape<double> t2;
    return loss(t2).item();
  });
  return out;
}

}  // namespace relfm::testing
