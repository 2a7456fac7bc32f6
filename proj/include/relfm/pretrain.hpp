#pragma once

// Masked feature reconstruction pretraining over one or more databases.

#include <charconv>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "relfm/encoders.hpp"
#include "relfm/error.hpp"
#include "relfm/hetgnn.hpp"
#include "relfm/relmodel.hpp"
#include "relfm/rng.hpp"
#include "relfm/tensor.hpp"

namespace relfm::pretrain {

using tensor::Tape;
using tensor::Tensor;

struct PretrainConfig {
  double mask_prob = 0.15;
  double alpha = 0.7;
  double gamma = 2.0;
  double epsilon = 1e-6;
  gnn::FanoutSpec fanout{};
  std::size_t batch_size = 16384;
  double lr = 1e-4;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  std::size_t hidden_channels = 256;
  std::size_t layers = 2;
  double val_fraction = 0.1;
  std::size_t workers = 1;

  void validate() const {
    if (!(mask_prob > 0.0 && mask_prob <= 1.0)) throw Error("mask_prob must be in (0, 1]");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("alpha must be in [0, 1]");
    if (!(gamma >= 1.0)) throw Error("gamma must be >= 1");
    if (!(epsilon > 0.0)) throw Error("epsilon must be > 0");
    if (!(lr > 0.0)) throw Error("lr must be > 0");
    if (batch_size == 0) throw Error("batch_size must be positive");
    if (hidden_channels == 0) throw Error("hidden_channels must be positive");
    if (layers == 0) throw Error("layers must be positive");
    if (fanout.layers() != layers)
      throw Error("fanout has " + std::to_string(fanout.layers()) + " hops but layers = " + std::to_string(layers));
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw Error("val_fraction must be in [0, 1)");
    if (workers == 0) throw Error("workers must be positive");
  }
};

inline nlohmann::json to_json(const PretrainConfig& c) {
  return {{"mask_prob", c.mask_prob},     {"alpha", c.alpha},
          {"gamma", c.gamma},             {"epsilon", c.epsilon},
          {"fanout", c.fanout.caps},      {"batch_size", c.batch_size},
          {"lr", c.lr},                   {"epochs", c.epochs},
          {"seed", c.seed},               {"hidden_channels", c.hidden_channels},
          {"layers", c.layers},           {"val_fraction", c.val_fraction},
          {"workers", c.workers}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline PretrainConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error("pretrain config must be a JSON object");
  PretrainConfig c;
  bool layers_given = false, fanout_given = false;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "mask_prob") c.mask_prob = v.get<double>();
      else if (k == "alpha") c.alpha = v.get<double>();
      else if (k == "gamma") c.gamma = v.get<double>();
      else if (k == "epsilon") c.epsilon = v.get<double>();
      else if (k == "fanout") c.fanout.caps = v.get<std::vector<std::size_t>>(), fanout_given = true;
      else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (k == "lr") c.lr = v.get<double>();
      else if (k == "epochs") c.epochs = v.get<std::size_t>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "hidden_channels") c.hidden_channels = v.get<std::size_t>();
      else if (k == "layers") c.layers = v.get<std::size_t>(), layers_given = true;
      else if (k == "val_fraction") c.val_fraction = v.get<double>();
      else if (k == "workers") c.workers = v.get<std::size_t>();
      else throw Error("unknown pretrain config key '" + k + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("pretrain config: ") + e.what());
  }
  if (fanout_given && !layers_given) c.layers = c.fanout.layers();
  c.validate();
  return c;
}

inline PretrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Masking and losses

struct FeatureMask {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<std::uint8_t> bits;  // row-major, 1 = masked

  bool row_empty(std::size_t i) const {
    for (std::size_t j = 0; j < dim; ++j)
      if (bits[i * dim + j]) return false;
    return true;
  }
  std::size_t masked_rows() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < rows; ++i) n += !row_empty(i);
    return n;
  }
};

/// Each entry masked independently with probability p; masked entries zeroed.
template <typename T>
std::pair<Tensor<T>, FeatureMask> mask_features(const Tensor<T>& feats, double p, Rng& rng) {
  if (!(p > 0.0 && p <= 1.0)) throw Error("mask probability must be in (0, 1]");
  FeatureMask m{feats.rows(), feats.cols(), std::vector<std::uint8_t>(feats.size(), 0)};
  Tensor<T> out = feats.clone();
  out.set_requires_grad(false);
  std::bernoulli_distribution coin(p);
  auto v = out.data();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (coin(rng)) {
      m.bits[i] = 1;
      v[i] = T(0);
    }
  return {out, m};
}

struct LossParams {
  double alpha = 0.7;
  double gamma = 2.0;
  double epsilon = 1e-6;
};

inline LossParams loss_params(const PretrainConfig& c) { return {c.alpha, c.gamma, c.epsilon}; }

template <typename T>
struct LossParts {
  Tensor<T> combined, cos, mse;
};

/// alpha * scaled cosine + (1 - alpha) * masked MSE, both on masked entries only.
template <typename T>
LossParts<T> combined_loss(Tape<T>& tape, const Tensor<T>& xhat, const Tensor<T>& x, const FeatureMask& mask,
                           const LossParams& lp) {
  auto cos = tape.scaled_cosine_loss(xhat, x, mask.bits, lp.gamma, lp.epsilon);
  auto mse = tape.masked_mse_loss(xhat, x, mask.bits);
  auto comb = tape.weighted_sum(cos, lp.alpha, mse, 1.0 - lp.alpha);
  return {comb, cos, mse};
}

/// Masked SSE divided by the row's masked count, averaged over rows with a
/// non-empty mask. Returns {sum over rows, row count}.
template <typename T>
std::pair<double, std::size_t> masked_mse_per_dim(const Tensor<T>& xhat, const Tensor<T>& x, const FeatureMask& mask) {
  if (xhat.shape() != x.shape() || mask.bits.size() != x.size()) throw Error("masked_mse_per_dim: shape mismatch");
  double sum = 0.0;
  std::size_t n = 0;
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double sse = 0.0;
    std::size_t k = 0;
    for (std::size_t j = 0; j < d; ++j)
      if (mask.bits[i * d + j]) {
        double diff = static_cast<double>(xhat(i, j)) - static_cast<double>(x(i, j));
        sse += diff * diff;
        ++k;
      }
    if (k) {
      sum += sse / static_cast<double>(k);
      ++n;
    }
  }
  return {sum, n};
}

// ---------------------------------------------------------------------------
// Scheduling

struct ScheduledBatch {
  std::size_t db = 0;
  std::vector<NodeId> seeds;
};

/// Shuffles each database's seeds into batches, then takes one batch per
/// database in turn until every database is exhausted.
inline std::vector<ScheduledBatch> make_schedule(const std::vector<std::vector<NodeId>>& seeds_per_db,
                                                 std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw Error("batch_size must be positive");
  std::vector<std::vector<ScheduledBatch>> per_db(seeds_per_db.size());
  std::size_t rounds = 0;
  for (std::size_t db = 0; db < seeds_per_db.size(); ++db) {
    auto ids = seeds_per_db[db];
    shuffle(ids, rng);
    for (std::size_t i = 0; i < ids.size(); i += batch_size) {
      auto end = std::min(ids.size(), i + batch_size);
      per_db[db].push_back({db, std::vector<NodeId>(ids.begin() + static_cast<std::ptrdiff_t>(i),
                                                    ids.begin() + static_cast<std::ptrdiff_t>(end))});
    }
    rounds = std::max(rounds, per_db[db].size());
  }
  std::vector<ScheduledBatch> out;
  for (std::size_t r = 0; r < rounds; ++r)
    for (auto& b : per_db)
      if (r < b.size()) out.push_back(std::move(b[r]));
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct PretrainSource {
  std::string name;  // projection keys are "<name>/<table>"
  const EntityGraph* graph = nullptr;
  const EmbeddingMatrix* features = nullptr;
};

struct PreparedBatch {
  std::size_t db = 0;
  gnn::SampledSubgraph sub;
  Tensor<float> inputs;   // all subgraph rows, seed rows masked
  Tensor<float> targets;  // unmasked seed rows
  FeatureMask mask;
};

inline PreparedBatch prepare_batch(const PretrainSource& src, std::size_t db, std::span<const NodeId> seeds,
                                   const PretrainConfig& cfg, std::uint64_t batch_seed) {
  Rng rng(batch_seed);
  PreparedBatch b;
  b.db = db;
  b.sub = gnn::sample_neighborhood(*src.graph, seeds, cfg.fanout, rng);
  b.inputs = gnn::gather_inputs<float>(*src.features, *src.graph, b.sub);
  const std::size_t d = b.inputs.cols();
  std::vector<float> t(b.sub.seeds.size() * d);
  for (std::size_t i = 0; i < b.sub.seeds.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) t[i * d + j] = b.inputs(b.sub.seeds[i], j);
  b.targets = Tensor<float>::matrix(b.sub.seeds.size(), d, std::move(t));
  auto [masked, mask] = mask_features(b.targets, cfg.mask_prob, rng);
  for (std::size_t i = 0; i < b.sub.seeds.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) b.inputs(b.sub.seeds[i], j) = masked(i, j);
  b.mask = std::move(mask);
  return b;
}

struct LossRecord {
  std::size_t epoch = 0;
  std::string split;  // "train" or "validation"
  double combined = 0.0, cos = 0.0, mse = 0.0;
  double mse_per_dim = 0.0;  // not part of the history CSV
};

struct PretrainResult {
  gnn::HeteroSageParams<float> params;
  std::vector<LossRecord> history;
  std::size_t skipped_batches = 0;  // batches whose sampled mask was empty everywhere
};

struct RunOptions {
  std::optional<std::filesystem::path> checkpoint_dir;  // epoch_<k>.rfmp per epoch
  std::function<void(const LossRecord&)> on_record;
};

inline std::vector<std::string> source_type_keys(const std::vector<PretrainSource>& sources) {
  std::vector<std::string> keys;
  for (const auto& s : sources)
    for (const auto& t : s.graph->tables) keys.push_back(s.name + "/" + t);
  return keys;
}

namespace detail {

struct Accum {
  double comb = 0, cos = 0, mse = 0, per_dim = 0;
  std::size_t n = 0, n_dim = 0;

  LossRecord finish(std::size_t epoch, std::string split) const {
    LossRecord r{epoch, std::move(split)};
    if (n) {
      r.combined = comb / static_cast<double>(n);
      r.cos = cos / static_cast<double>(n);
      r.mse = mse / static_cast<double>(n);
    }
    if (n_dim) r.mse_per_dim = per_dim / static_cast<double>(n_dim);
    return r;
  }
};

/// Runs one batch; with `opt` set, also backpropagates and steps.
inline bool run_batch(gnn::HeteroSageParams<float>& params, const std::vector<std::size_t>& type_map,
                      const EntityGraph& g, const PreparedBatch& b, const LossParams& lp, tensor::Adam<float>* opt,
                      Accum& acc) {
  const std::size_t n = b.mask.masked_rows();
  if (n == 0) return false;
  Tape<float> tape;
  auto h = gnn::forward(params, type_map, g, b.sub, b.inputs, tape, opt ? gnn::Mode::train : gnn::Mode::eval);
  auto xhat = gnn::decode_reconstruction(params, h, tape);
  auto parts = combined_loss(tape, xhat, b.targets, b.mask, lp);
  acc.comb += parts.combined.item() * static_cast<double>(n);
  acc.cos += parts.cos.item() * static_cast<double>(n);
  acc.mse += parts.mse.item() * static_cast<double>(n);
  acc.n += n;
  auto [pd, pn] = masked_mse_per_dim(xhat, b.targets, b.mask);
  acc.per_dim += pd;
  acc.n_dim += pn;
  if (opt) {
    tape.backward(parts.combined);
    opt->step();
    opt->zero_grad();
  }
  return true;
}

}  // namespace detail

/// Deterministic in cfg.seed regardless of cfg.workers: every batch draws its
/// sample and mask from its own derived seed.
inline PretrainResult run_pretraining(const std::vector<PretrainSource>& sources, const PretrainConfig& cfg,
                                      const RunOptions& opts = {}) {
  cfg.validate();
  if (sources.empty()) throw Error("pretraining needs at least one database");
  const std::size_t d_in = sources.front().features->dim;
  for (const auto& s : sources) {
    if (!s.graph || !s.features) throw Error("pretraining source '" + s.name + "' is incomplete");
    if (s.features->dim != d_in)
      throw Error("feature dimension mismatch across databases: " + std::to_string(s.features->dim) + " vs " +
                  std::to_string(d_in));
    check_features_match(*s.features, *s.graph);
  }

  PretrainResult res;
  res.params = gnn::init_params<float>(source_type_keys(sources), d_in, cfg.hidden_channels, cfg.layers, cfg.seed);
  std::vector<std::vector<std::size_t>> type_maps;
  for (const auto& s : sources) type_maps.push_back(gnn::bind_types(res.params, *s.graph, s.name + "/"));

  // 90/10 seed split per database
  std::vector<std::vector<NodeId>> train_seeds(sources.size()), val_seeds(sources.size());
  for (std::size_t db = 0; db < sources.size(); ++db) {
    std::vector<NodeId> ids(sources[db].graph->num_nodes());
    std::iota(ids.begin(), ids.end(), NodeId{0});
    Rng rng(derive_seed(cfg.seed, {0x5E, db}));
    shuffle(ids, rng);
    const auto n_val = static_cast<std::size_t>(std::floor(cfg.val_fraction * static_cast<double>(ids.size())));
    val_seeds[db].assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_seeds[db].assign(ids.begin() + static_cast<std::ptrdiff_t>(n_val), ids.end());
  }

  // static validation batches
  std::vector<PreparedBatch> val_batches;
  for (std::size_t db = 0; db < sources.size(); ++db)
    for (std::size_t i = 0, k = 0; i < val_seeds[db].size(); i += cfg.batch_size, ++k) {
      auto end = std::min(val_seeds[db].size(), i + cfg.batch_size);
      std::span<const NodeId> seeds(val_seeds[db].data() + i, end - i);
      val_batches.push_back(prepare_batch(sources[db], db, seeds, cfg, derive_seed(cfg.seed, {0x7A, db, k})));
    }

  std::vector<Tensor<float>> trainable;
  for (auto& [name, t] : res.params.named_parameters()) trainable.push_back(t);
  tensor::Adam<float> opt(trainable, tensor::AdamConfig{cfg.lr});
  const LossParams lp = loss_params(cfg);

  auto emit = [&](LossRecord r) {
    if (opts.on_record) opts.on_record(r);
    res.history.push_back(std::move(r));
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng sched_rng(derive_seed(cfg.seed, {0x5C, epoch}));
    auto schedule = make_schedule(train_seeds, cfg.batch_size, sched_rng);
    auto prep = [&, epoch](std::size_t bi) {
      const auto& sb = schedule[bi];
      return prepare_batch(sources[sb.db], sb.db, sb.seeds, cfg, derive_seed(cfg.seed, {0xB4, epoch, bi}));
    };
    detail::Accum train_acc;
    std::deque<std::future<PreparedBatch>> ahead;
    std::size_t next = 0;
    for (std::size_t bi = 0; bi < schedule.size(); ++bi) {
      PreparedBatch b;
      if (cfg.workers <= 1) {
        b = prep(bi);
      } else {
        while (ahead.size() < cfg.workers && next < schedule.size())
          ahead.push_back(std::async(std::launch::async, prep, next++));
        b = ahead.front().get();
        ahead.pop_front();
      }
      if (!detail::run_batch(res.params, type_maps[b.db], *sources[b.db].graph, b, lp, &opt, train_acc))
        ++res.skipped_batches;
    }
    emit(train_acc.finish(epoch, "train"));

    if (!val_batches.empty()) {
      detail::Accum val_acc;
      for (const auto& b : val_batches)
        detail::run_batch(res.params, type_maps[b.db], *sources[b.db].graph, b, lp, nullptr, val_acc);
      emit(val_acc.finish(epoch, "validation"));
    }
    if (opts.checkpoint_dir) {
      std::filesystem::create_directories(*opts.checkpoint_dir);
      tensor::write_checkpoint(res.params.to_checkpoint(),
                               *opts.checkpoint_dir / ("epoch_" + std::to_string(epoch) + ".rfmp"));
    }
  }
  return res;
}

/// Shortest round-trip decimal form; stable across runs.
inline std::string format_number(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline void write_history_csv(const std::vector<LossRecord>& history, std::ostream& out) {
  out << "epoch,split,loss_combined,loss_cos,loss_mse\n";
  for (const auto& r : history)
    out << r.epoch << ',' << r.split << ',' << format_number(r.combined) << ',' << format_number(r.cos) << ','
        << format_number(r.mse) << '\n';
}

inline void write_history_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  write_history_csv(history, f);
}

}  // namespace relfm::pretrain
