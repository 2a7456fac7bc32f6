#pragma once

// Adapting a pretrained encoder to a binary entity-classification task:
// fresh typed projections, a date encoder, an MLP head, frozen or fine-tuned
// conv layers, evaluation metrics and the six-arm ablation.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "relfm/encoders.hpp"
#include "relfm/error.hpp"
#include "relfm/hetgnn.hpp"
#include "relfm/metrics.hpp"
#include "relfm/relmodel.hpp"
#include "relfm/rng.hpp"
#include "relfm/task.hpp"
#include "relfm/tensor.hpp"

namespace relfm::downstream {

using tensor::Tape;
using tensor::Tensor;

enum class AdaptMode : std::uint8_t { no_gnn, frozen, finetune };

inline std::string_view to_string(AdaptMode m) {
  switch (m) {
    case AdaptMode::no_gnn: return "no_gnn";
    case AdaptMode::frozen: return "frozen";
    case AdaptMode::finetune: return "finetune";
  }
  return "?";
}

inline AdaptMode parse_adapt_mode(std::string_view s) {
  if (s == "no_gnn" || s == "none") return AdaptMode::no_gnn;
  if (s == "frozen") return AdaptMode::frozen;
  if (s == "finetune" || s == "fine-tune" || s == "finetuned") return AdaptMode::finetune;
  throw Error("unknown adapt mode '" + std::string(s) + "' (expected no_gnn, frozen or finetune)");
}

struct DownstreamConfig {
  std::size_t epochs = 30;
  double lr = 1e-4;
  std::size_t batch_size = 64;
  std::size_t date_dim = 32;
  std::vector<std::size_t> head_hidden{128, 64};
  double dropout_keep = 0.8;
  gnn::FanoutSpec fanout{};
  bool time_filter = true;
  std::uint64_t seed = 0;
  std::size_t hidden_channels = 256;  // used when no pretrained encoder is given
  std::size_t layers = 2;

  void validate() const {
    if (!(lr > 0.0)) throw Error("lr must be > 0");
    if (batch_size == 0) throw Error("batch_size must be positive");
    if (date_dim == 0) throw Error("date_dim must be positive");
    if (!(dropout_keep > 0.0 && dropout_keep <= 1.0)) throw Error("dropout keep probability must be in (0, 1]");
    for (auto w : head_hidden)
      if (w == 0) throw Error("head widths must be positive");
    if (hidden_channels == 0 || layers == 0) throw Error("hidden_channels and layers must be positive");
  }
};

inline nlohmann::json to_json(const DownstreamConfig& c) {
  return {{"epochs", c.epochs},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"date_dim", c.date_dim},
          {"head_hidden", c.head_hidden},
          {"dropout_keep", c.dropout_keep},
          {"fanout", c.fanout.caps},
          {"time_filter", c.time_filter},
          {"seed", c.seed},
          {"hidden_channels", c.hidden_channels},
          {"layers", c.layers}};
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
struct DateEncoder {
  gnn::Linear<T> l1, l2;
  double mean = 0.0;
  double std = 1.0;

  double normalize(std::int32_t t) const { return (static_cast<double>(t) - mean) / std; }

  Tensor<T> forward(Tape<T>& tape, std::span<const std::int32_t> times) const {
    std::vector<T> x;
    x.reserve(times.size());
    for (auto t : times) x.push_back(static_cast<T>(normalize(t)));
    auto in = tape.constant({times.size(), 1}, std::move(x));
    return tape.linear(tape.relu(tape.linear(in, l1.W, l1.b)), l2.W, l2.b);
  }
};

/// Mean and population standard deviation of the train-split seed times.
inline std::pair<double, double> fit_time_normalization(const TaskTable& task) {
  double s = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& r : task.rows)
    if (r.split == Split::train) {
      s += r.time;
      sq += static_cast<double>(r.time) * r.time;
      ++n;
    }
  if (n == 0) throw Error("task has no training rows");
  const double mean = s / static_cast<double>(n);
  const double var = sq / static_cast<double>(n) - mean * mean;
  if (!(var > 0.0)) throw Error("degenerate time range");
  return {mean, std::sqrt(var)};
}

template <typename T>
std::vector<T> encode_date(const DateEncoder<T>& enc, std::int32_t t) {
  Tape<T> tape;
  std::int32_t ts[1] = {t};
  auto out = enc.forward(tape, ts);
  return {out.data().begin(), out.data().end()};
}

template <typename T>
struct DownstreamModel {
  AdaptMode mode = AdaptMode::finetune;
  std::size_t d_in = 0;
  std::optional<gnn::HeteroSageParams<T>> gnn;  // typed projections + conv layers, no decoder
  std::vector<std::size_t> type_map;
  DateEncoder<T> date;
  std::vector<gnn::Linear<T>> head;
  double dropout_keep = 0.8;

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    if (gnn) out = gnn->named_parameters();
    out.emplace_back("date.l1.W", date.l1.W);
    out.emplace_back("date.l1.b", date.l1.b);
    out.emplace_back("date.l2.W", date.l2.W);
    out.emplace_back("date.l2.b", date.l2.b);
    for (std::size_t i = 0; i < head.size(); ++i) {
      out.emplace_back("head." + std::to_string(i) + ".W", head[i].W);
      out.emplace_back("head." + std::to_string(i) + ".b", head[i].b);
    }
    return out;
  }

  /// Everything except the conv layers in frozen mode.
  std::vector<Tensor<T>> trainable() const {
    std::vector<Tensor<T>> out;
    for (const auto& [name, t] : named_parameters()) {
      if (mode == AdaptMode::frozen && name.rfind("conv", 0) == 0) continue;
      out.push_back(t);
    }
    return out;
  }
};

/// Typed projections are always fresh for the target schema; conv layers are
/// copied from `pretrained` when given.
template <typename T>
DownstreamModel<T> init_model(const EntityGraph& g, std::size_t d_in, AdaptMode mode,
                              const gnn::HeteroSageParams<T>* pretrained, const DownstreamConfig& cfg,
                              std::pair<double, double> time_norm) {
  cfg.validate();
  if (d_in == 0) throw Error("feature dimension must be positive");
  DownstreamModel<T> m;
  m.mode = mode;
  m.d_in = d_in;
  m.dropout_keep = cfg.dropout_keep;
  std::size_t emb_dim = d_in;
  if (mode != AdaptMode::no_gnn) {
    const std::size_t layers = pretrained ? pretrained->convs.size() : cfg.layers;
    const std::size_t d_h = pretrained ? pretrained->d_h : cfg.hidden_channels;
    if (cfg.fanout.layers() != layers)
      throw Error("fanout has " + std::to_string(cfg.fanout.layers()) + " hops but the encoder has " +
                  std::to_string(layers) + " conv layers");
    auto p = gnn::init_params<T>(g.tables, d_in, d_h, layers, derive_seed(cfg.seed, {0xD1}), false);
    if (pretrained) {
      for (std::size_t l = 0; l < layers; ++l) {
        const auto& c = pretrained->convs[l];
        if (c.W_self.shape() != tensor::Shape{d_h, d_h} || c.W_neigh.shape() != tensor::Shape{d_h, d_h} ||
            c.b.size() != d_h)
          throw Error("incompatible hidden dims in pretrained conv layer " + std::to_string(l + 1));
        p.convs[l] = {c.W_self.clone(), c.W_neigh.clone(), c.b.clone()};
      }
    }
    for (auto& c : p.convs) {
      c.W_self.set_requires_grad(mode == AdaptMode::finetune);
      c.W_neigh.set_requires_grad(mode == AdaptMode::finetune);
      c.b.set_requires_grad(mode == AdaptMode::finetune);
    }
    m.type_map = gnn::bind_types(p, g);
    m.gnn = std::move(p);
    emb_dim = d_h;
  }
  Rng rng(derive_seed(cfg.seed, {0xD2}));
  m.date.l1 = gnn::init_linear<T>(1, cfg.date_dim, rng);
  m.date.l2 = gnn::init_linear<T>(cfg.date_dim, cfg.date_dim, rng);
  m.date.mean = time_norm.first;
  m.date.std = time_norm.second;
  std::size_t in = emb_dim + cfg.date_dim;
  for (auto w : cfg.head_hidden) {
    m.head.push_back(gnn::init_linear<T>(in, w, rng));
    in = w;
  }
  m.head.push_back(gnn::init_linear<T>(in, 2, rng));
  return m;
}

template <typename T>
std::vector<tensor::NamedArray> model_to_checkpoint(const DownstreamModel<T>& m) {
  std::vector<tensor::NamedArray> out;
  for (const auto& [name, t] : m.named_parameters()) out.push_back(tensor::to_named(name, t));
  return out;
}

/// Rebuilds a trained model for evaluation. The mode is no_gnn when the
/// checkpoint has no conv layers, otherwise `mode`.
template <typename T>
DownstreamModel<T> model_from_checkpoint(const std::vector<tensor::NamedArray>& entries, const EntityGraph& g,
                                         AdaptMode mode, std::pair<double, double> time_norm) {
  std::unordered_map<std::string, const tensor::NamedArray*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto get = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("checkpoint: missing entry '" + name + "'");
    return tensor::from_named<T>(*it->second, true);
  };
  DownstreamModel<T> m;
  m.dropout_keep = 1.0;
  if (by_name.count("conv1.self.W")) {
    m.mode = mode == AdaptMode::no_gnn ? AdaptMode::finetune : mode;
    auto p = gnn::params_from_checkpoint<T>(entries);
    m.type_map = gnn::bind_types(p, g);
    m.d_in = p.proj.front().W.rows();
    m.gnn = std::move(p);
  } else {
    m.mode = AdaptMode::no_gnn;
  }
  m.date.l1 = {get("date.l1.W"), get("date.l1.b")};
  m.date.l2 = {get("date.l2.W"), get("date.l2.b")};
  m.date.mean = time_norm.first;
  m.date.std = time_norm.second;
  for (std::size_t i = 0; by_name.count("head." + std::to_string(i) + ".W"); ++i)
    m.head.push_back({get("head." + std::to_string(i) + ".W"), get("head." + std::to_string(i) + ".b")});
  if (m.head.empty()) throw Error("checkpoint: no head layers");
  if (!m.gnn) m.d_in = m.head.front().W.rows() - m.date.l2.W.cols();
  return m;
}

struct ForwardContext {
  bool training = false;
  std::uint64_t seed = 0;     // base seed for sampling and dropout
  std::uint64_t salt = 0;     // epoch in training, 0 in evaluation
  std::uint64_t batch = 0;
};

/// Logits [n x 2] for the given task rows.
template <typename T>
Tensor<T> forward_task(const DownstreamModel<T>& m, const EntityGraph& g, const EmbeddingMatrix& feats,
                       std::span<const TaskRow> rows, const DownstreamConfig& cfg, const ForwardContext& ctx,
                       Tape<T>& tape) {
  if (feats.dim != m.d_in) throw Error("feature dimension does not match the model");
  Tensor<T> emb;
  if (m.gnn) {
    gnn::SampledSubgraph all;
    for (const auto& r : rows) {
      Rng rng(derive_seed(ctx.seed, {0x5A, r.node, static_cast<std::uint32_t>(r.time), ctx.salt}));
      NodeId seed[1] = {r.node};
      std::optional<std::int32_t> bound;
      if (cfg.time_filter) bound = r.time;
      all.append(gnn::sample_neighborhood(g, seed, cfg.fanout, rng, bound));
    }
    auto inputs = gnn::gather_inputs<T>(feats, g, all);
    emb = gnn::forward(*m.gnn, m.type_map, g, all, inputs, tape, ctx.training ? gnn::Mode::train : gnn::Mode::eval);
  } else {
    gnn::SampledSubgraph own;
    for (const auto& r : rows) {
      own.seeds.push_back(own.nodes.size());
      own.nodes.push_back(r.node);
      own.hop.push_back(0);
    }
    emb = gnn::gather_inputs<T>(feats, g, own);
  }
  std::vector<std::int32_t> times;
  for (const auto& r : rows) times.push_back(r.time);
  auto z = tape.concat_cols(emb, m.date.forward(tape, times));
  Rng drop(derive_seed(ctx.seed, {0xD5, ctx.salt, ctx.batch}));
  for (std::size_t i = 0; i < m.head.size(); ++i) {
    z = tape.linear(z, m.head[i].W, m.head[i].b);
    if (i + 1 < m.head.size()) z = tape.dropout(tape.relu(z), m.dropout_keep, drop, ctx.training);
  }
  return z;
}

template <typename T>
Tensor<T> task_loss(const DownstreamModel<T>& m, const EntityGraph& g, const EmbeddingMatrix& feats,
                    std::span<const TaskRow> rows, const DownstreamConfig& cfg, const ForwardContext& ctx,
                    Tape<T>& tape) {
  auto logits = forward_task(m, g, feats, rows, cfg, ctx, tape);
  std::vector<int> labels;
  for (const auto& r : rows) labels.push_back(r.label);
  return tape.softmax_cross_entropy(logits, std::move(labels));
}

/// Positive-class probabilities in evaluation mode.
template <typename T>
std::vector<double> predict(const DownstreamModel<T>& m, const EntityGraph& g, const EmbeddingMatrix& feats,
                            std::span<const TaskRow> rows, const DownstreamConfig& cfg) {
  std::vector<double> out;
  out.reserve(rows.size());
  const std::size_t bs = std::max<std::size_t>(cfg.batch_size, 256);
  for (std::size_t i = 0; i < rows.size(); i += bs) {
    Tape<T> tape;
    auto part = rows.subspan(i, std::min(bs, rows.size() - i));
    auto logits = forward_task(m, g, feats, part, cfg, ForwardContext{false, cfg.seed, 0, 0}, tape);
    for (std::size_t r = 0; r < part.size(); ++r) {
      double a = static_cast<double>(logits(r, 0)), b = static_cast<double>(logits(r, 1));
      out.push_back(1.0 / (1.0 + std::exp(a - b)));
    }
  }
  return out;
}

struct SplitMetrics {
  std::size_t n = 0;
  std::optional<double> roc_auc;  // nullopt when the split has a single class
  ThresholdMetrics thresholded;
};

inline SplitMetrics score_predictions(std::span<const double> probs, std::span<const int> labels) {
  SplitMetrics s;
  s.n = probs.size();
  if (probs.empty()) return s;
  bool pos = false, neg = false;
  for (int y : labels) (y ? pos : neg) = true;
  if (pos && neg) s.roc_auc = roc_auc(probs, labels);
  s.thresholded = precision_accuracy_f1(probs, labels);
  return s;
}

template <typename T>
SplitMetrics evaluate(const DownstreamModel<T>& m, const EntityGraph& g, const EmbeddingMatrix& feats,
                      const TaskTable& task, Split split, const DownstreamConfig& cfg) {
  std::vector<TaskRow> rows;
  std::vector<int> labels;
  for (const auto& r : task.rows)
    if (r.split == split) {
      rows.push_back(r);
      labels.push_back(r.label);
    }
  auto probs = predict(m, g, feats, rows, cfg);
  return score_predictions(probs, labels);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_auc;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 when no epoch had a defined validation AUC (final weights kept)
};

/// Mini-batch cross-entropy training; the model ends up holding the weights of
/// the epoch with the best validation ROC-AUC.
template <typename T>
TrainResult train_downstream(DownstreamModel<T>& m, const EntityGraph& g, const EmbeddingMatrix& feats,
                             const TaskTable& task, const DownstreamConfig& cfg) {
  cfg.validate();
  check_features_match(feats, g);
  std::vector<TaskRow> train;
  for (const auto& r : task.rows)
    if (r.split == Split::train) train.push_back(r);
  if (train.empty()) throw Error("task has no training rows");

  tensor::Adam<T> opt(m.trainable(), tensor::AdamConfig{cfg.lr});
  auto params = m.named_parameters();
  std::vector<std::vector<T>> best;
  std::optional<double> best_auc;
  TrainResult res;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng order_rng(derive_seed(cfg.seed, {0x5B, epoch}));
    shuffle(train, order_rng);
    double loss_sum = 0.0;
    std::size_t batch = 0;
    for (std::size_t i = 0; i < train.size(); i += cfg.batch_size, ++batch) {
      std::span<const TaskRow> part(train.data() + i, std::min(cfg.batch_size, train.size() - i));
      Tape<T> tape;
      auto loss = task_loss(m, g, feats, part, cfg, ForwardContext{true, cfg.seed, epoch, batch}, tape);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(part.size());
      tape.backward(loss);
      opt.step();
      opt.zero_grad();
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(train.size()), std::nullopt};
    rec.val_auc = evaluate(m, g, feats, task, Split::validation, cfg).roc_auc;
    if (rec.val_auc && (!best_auc || *rec.val_auc > *best_auc)) {
      best_auc = rec.val_auc;
      res.best_epoch = epoch;
      best.clear();
      for (const auto& [name, t] : params) best.emplace_back(t.data().begin(), t.data().end());
    }
    res.history.push_back(rec);
  }
  if (!best.empty())
    for (std::size_t i = 0; i < params.size(); ++i) std::copy(best[i].begin(), best[i].end(), params[i].second.data().begin());
  return res;
}

// ---------------------------------------------------------------------------
// Reporting

struct MetricRow {
  std::string config;
  Split split = Split::test;
  SplitMetrics metrics;
};

inline std::string format_metric(const std::optional<double>& v) {
  if (!v) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

inline void write_metrics_csv(const std::vector<MetricRow>& rows, std::ostream& out) {
  out << "config,split,roc_auc,precision,accuracy,f1\n";
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    std::optional<double> acc;
    if (m.n) acc = m.thresholded.accuracy;
    out << r.config << ',' << to_string(r.split) << ',' << format_metric(m.roc_auc) << ','
        << format_metric(m.n ? m.thresholded.precision : std::nullopt) << ',' << format_metric(acc) << ','
        << format_metric(m.n ? m.thresholded.f1 : std::nullopt) << '\n';
  }
}

inline void write_metrics_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  write_metrics_csv(rows, f);
}

/// {informative, random} x {no_gnn, frozen, finetune}, all with the same
/// seeds; one test-split row per configuration.
inline std::vector<MetricRow> run_ablation(const EntityGraph& g, const EmbeddingMatrix& informative,
                                           const EmbeddingMatrix& random, const TaskTable& task,
                                           const gnn::HeteroSageParams<float>* pretrained,
                                           const DownstreamConfig& cfg) {
  std::vector<MetricRow> out;
  const auto norm = fit_time_normalization(task);
  const std::pair<const char*, const EmbeddingMatrix*> sources[] = {{"informative", &informative},
                                                                      {"random", &random}};
  for (const auto& [src_name, feats] : sources)
    for (auto mode : {AdaptMode::no_gnn, AdaptMode::frozen, AdaptMode::finetune}) {
      auto model = init_model<float>(g, feats->dim, mode, pretrained, cfg, norm);
      train_downstream(model, g, *feats, task, cfg);
      out.push_back({std::string(src_name) + "+" + std::string(to_string(mode)), Split::test,
                     evaluate(model, g, *feats, task, Split::test, cfg)});
    }
  return out;
}

}  // namespace relfm::downstream
