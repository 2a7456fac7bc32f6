#pragma once

// Heterogeneous GraphSAGE: node-type-specific input projections, conv layers
// shared across every node and edge type (mean over sampled neighbors plus the
// node itself), and a linear reconstruction decoder. Also the fanout-bounded,
// optionally time-bounded neighbor sampler.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "relfm/encoders.hpp"
#include "relfm/error.hpp"
#include "relfm/relmodel.hpp"
#include "relfm/rng.hpp"
#include "relfm/tensor.hpp"

namespace relfm::gnn {

using tensor::Tape;
using tensor::Tensor;

struct FanoutSpec {
  std::vector<std::size_t> caps{20, 10};  // per hop, outward from the seeds
  std::size_t layers() const { return caps.size(); }
};

struct SampledSubgraph {
  std::vector<NodeId> nodes;        // local -> global id
  std::vector<std::uint8_t> hop;    // hop at which each local node was first reached
  std::vector<std::size_t> seeds;   // local indices of the seed rows, in request order
  std::vector<std::pair<std::size_t, std::size_t>> edges;  // (src, dst) local: src is a sampled neighbor of dst

  std::size_t size() const { return nodes.size(); }

  /// Each local node's sampled in-neighbors followed by the node itself.
  tensor::RowGroups neighborhoods() const {
    std::vector<std::vector<std::size_t>> in(nodes.size());
    for (auto [s, d] : edges) in[d].push_back(s);
    tensor::RowGroups g;
    for (std::size_t v = 0; v < nodes.size(); ++v) {
      in[v].push_back(v);
      g.add(in[v]);
    }
    return g;
  }

  /// Disjoint union; the other subgraph's seeds are appended after ours.
  void append(const SampledSubgraph& o) {
    const std::size_t base = nodes.size();
    nodes.insert(nodes.end(), o.nodes.begin(), o.nodes.end());
    hop.insert(hop.end(), o.hop.begin(), o.hop.end());
    for (auto s : o.seeds) seeds.push_back(base + s);
    for (auto [s, d] : o.edges) edges.emplace_back(base + s, base + d);
  }
};

/// Per hop, each frontier node's incoming neighbors (pooled over all
/// relations, minus those stamped after `time_bound`) are sampled without
/// replacement up to the hop cap. Nodes are deduplicated; only newly reached
/// nodes form the next frontier.
inline SampledSubgraph sample_neighborhood(const EntityGraph& g, std::span<const NodeId> seeds, const FanoutSpec& fanout,
                                           Rng& rng, std::optional<std::int32_t> time_bound = std::nullopt) {
  SampledSubgraph sub;
  std::unordered_map<NodeId, std::size_t> local;
  auto intern = [&](NodeId v, std::uint8_t hop, std::vector<std::size_t>* frontier) {
    auto [it, fresh] = local.try_emplace(v, sub.nodes.size());
    if (fresh) {
      sub.nodes.push_back(v);
      sub.hop.push_back(hop);
      if (frontier) frontier->push_back(it->second);
    }
    return it->second;
  };
  std::vector<std::size_t> frontier;
  for (NodeId s : seeds) {
    if (s >= g.num_nodes()) throw Error("sample_neighborhood: seed " + std::to_string(s) + " out of range");
    sub.seeds.push_back(intern(s, 0, &frontier));
  }
  const bool bounded = time_bound.has_value();
  const std::int32_t bound = time_bound.value_or(0);
  std::vector<NodeId> pool;
  for (std::size_t k = 0; k < fanout.caps.size(); ++k) {
    std::vector<std::size_t> next;
    for (std::size_t lv : frontier) {
      pool.clear();
      for (NodeId u : g.incoming(sub.nodes[lv])) {
        if (bounded && g.timestamps[u] && *g.timestamps[u] > bound) continue;
        pool.push_back(u);
      }
      const std::size_t take = std::min(pool.size(), fanout.caps[k]);
      for (std::size_t i = 0; i < take; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
      }
      for (std::size_t i = 0; i < take; ++i) {
        std::size_t lu = intern(pool[i], static_cast<std::uint8_t>(k + 1), &next);
        sub.edges.emplace_back(lu, lv);
      }
    }
    frontier = std::move(next);
  }
  return sub;
}

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
struct Linear {
  Tensor<T> W;  // [in x out]
  Tensor<T> b;  // [out]
};

template <typename T>
struct ConvLayer {
  Tensor<T> W_self;
  Tensor<T> W_neigh;
  Tensor<T> b;
};

template <typename T>
struct HeteroSageParams {
  std::size_t d_in = 0;
  std::size_t d_h = 0;
  std::vector<std::string> types;  // node-type keys, parallel to `proj`
  std::vector<Linear<T>> proj;
  std::vector<ConvLayer<T>> convs;
  std::optional<Linear<T>> decoder;

  std::optional<std::size_t> find_type(std::string_view key) const {
    for (std::size_t i = 0; i < types.size(); ++i)
      if (types[i] == key) return i;
    return std::nullopt;
  }

  std::vector<std::pair<std::string, Tensor<T>>> conv_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t l = 0; l < convs.size(); ++l) {
      const auto p = "conv" + std::to_string(l + 1);
      out.emplace_back(p + ".self.W", convs[l].W_self);
      out.emplace_back(p + ".neigh.W", convs[l].W_neigh);
      out.emplace_back(p + ".b", convs[l].b);
    }
    return out;
  }

  /// Checkpoint entry names and tensors, in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t i = 0; i < types.size(); ++i) {
      out.emplace_back("proj." + types[i] + ".W", proj[i].W);
      out.emplace_back("proj." + types[i] + ".b", proj[i].b);
    }
    for (auto& e : conv_parameters()) out.push_back(std::move(e));
    if (decoder) {
      out.emplace_back("decoder.W", decoder->W);
      out.emplace_back("decoder.b", decoder->b);
    }
    return out;
  }

  std::vector<tensor::NamedArray> to_checkpoint() const {
    std::vector<tensor::NamedArray> out;
    for (const auto& [name, t] : named_parameters()) out.push_back(tensor::to_named(name, t));
    return out;
  }
};

template <typename T>
Tensor<T> uniform_init(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<T> v(in * out);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>::matrix(in, out, std::move(v), true);
}

template <typename T>
Linear<T> init_linear(std::size_t in, std::size_t out, Rng& rng) {
  return {uniform_init<T>(in, out, rng), Tensor<T>::zeros({out}, true)};
}

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
template <typename T>
HeteroSageParams<T> init_params(const std::vector<std::string>& types, std::size_t d_in, std::size_t d_h,
                                std::size_t layers, std::uint64_t seed, bool with_decoder = true) {
  if (d_in == 0 || d_h == 0 || layers == 0) throw Error("init_params: dimensions must be positive");
  Rng rng(seed);
  HeteroSageParams<T> p;
  p.d_in = d_in;
  p.d_h = d_h;
  p.types = types;
  for (std::size_t i = 0; i < types.size(); ++i) p.proj.push_back(init_linear<T>(d_in, d_h, rng));
  for (std::size_t l = 0; l < layers; ++l)
    p.convs.push_back({uniform_init<T>(d_h, d_h, rng), uniform_init<T>(d_h, d_h, rng), Tensor<T>::zeros({d_h}, true)});
  if (with_decoder) p.decoder = init_linear<T>(d_h, d_in, rng);
  return p;
}

template <typename T>
HeteroSageParams<T> init_params(const SchemaManifest& manifest, std::size_t d_in, std::size_t d_h, std::size_t layers,
                                std::uint64_t seed) {
  std::vector<std::string> types;
  for (const auto& t : manifest.tables) types.push_back(t.name);
  return init_params<T>(types, d_in, d_h, layers, seed);
}

/// Rebuilds parameters from checkpoint entries (projection keys are taken
/// from the `proj.<key>.W` names in file order).
template <typename T>
HeteroSageParams<T> params_from_checkpoint(const std::vector<tensor::NamedArray>& entries) {
  std::unordered_map<std::string, const tensor::NamedArray*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto get = [&](const std::string& name) -> const tensor::NamedArray& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("checkpoint: missing entry '" + name + "'");
    return *it->second;
  };
  HeteroSageParams<T> p;
  for (const auto& e : entries) {
    if (e.name.rfind("proj.", 0) == 0 && e.name.size() > 7 && e.name.ends_with(".W")) {
      auto key = e.name.substr(5, e.name.size() - 7);
      p.types.push_back(key);
      p.proj.push_back({tensor::from_named<T>(e, true), tensor::from_named<T>(get("proj." + key + ".b"), true)});
    }
  }
  for (std::size_t l = 1; by_name.count("conv" + std::to_string(l) + ".self.W"); ++l) {
    auto pre = "conv" + std::to_string(l);
    p.convs.push_back({tensor::from_named<T>(get(pre + ".self.W"), true), tensor::from_named<T>(get(pre + ".neigh.W"), true),
                       tensor::from_named<T>(get(pre + ".b"), true)});
  }
  if (p.convs.empty()) throw Error("checkpoint: no conv layers");
  p.d_h = p.convs.front().W_self.rows();
  for (const auto& c : p.convs)
    if (c.W_self.shape() != tensor::Shape{p.d_h, p.d_h} || c.W_neigh.shape() != tensor::Shape{p.d_h, p.d_h} ||
        c.b.size() != p.d_h)
      throw Error("checkpoint: inconsistent conv layer shapes");
  if (by_name.count("decoder.W")) {
    p.decoder = Linear<T>{tensor::from_named<T>(get("decoder.W"), true), tensor::from_named<T>(get("decoder.b"), true)};
    p.d_in = p.decoder->W.cols();
  } else if (!p.proj.empty()) {
    p.d_in = p.proj.front().W.rows();
  }
  return p;
}

/// Maps each graph node type to its projection index via `prefix + table`.
template <typename T>
std::vector<std::size_t> bind_types(const HeteroSageParams<T>& params, const EntityGraph& g,
                                    const std::string& prefix = "") {
  std::vector<std::size_t> map;
  for (const auto& t : g.tables) {
    auto i = params.find_type(prefix + t);
    if (!i) throw Error("no typed projection for node type '" + prefix + t + "'");
    map.push_back(*i);
  }
  return map;
}

/// Feature rows for every node of the subgraph, [n_local x d_in].
template <typename T>
Tensor<T> gather_inputs(const EmbeddingMatrix& feats, const EntityGraph& g, const SampledSubgraph& sub) {
  const std::size_t d = feats.dim;
  std::vector<T> v(sub.size() * d);
  for (std::size_t i = 0; i < sub.size(); ++i) {
    const NodeId u = sub.nodes[i];
    const std::size_t t = g.node_type(u);
    if (t >= feats.blocks.size() || feats.blocks[t].rows != g.type_size(t))
      throw Error("missing feature block for node type '" + g.tables[t] + "'");
    auto row = feats.blocks[t].row(u - g.offsets[t], d);
    std::copy(row.begin(), row.end(), v.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return Tensor<T>::matrix(sub.size(), d, std::move(v));
}

enum class Mode { train, eval };

/// Seed embeddings [n_seeds x d_h]. Hidden layers use ReLU; the last layer is
/// linear and is only evaluated on the seed rows.
template <typename T>
Tensor<T> forward(const HeteroSageParams<T>& params, std::span<const std::size_t> type_map, const EntityGraph& g,
                  const SampledSubgraph& sub, const Tensor<T>& inputs, Tape<T>& tape, Mode = Mode::train) {
  if (params.convs.empty()) throw Error("forward: model has no conv layers");
  if (inputs.rows() != sub.size() || inputs.cols() != params.d_in)
    throw Error("forward: input features " + tensor::shape_str(inputs.shape()) + " do not cover the subgraph");
  // typed projections
  std::vector<std::vector<std::size_t>> by_proj(params.proj.size());
  for (std::size_t i = 0; i < sub.size(); ++i) {
    std::size_t t = g.node_type(sub.nodes[i]);
    if (t >= type_map.size()) throw Error("forward: node type without projection");
    by_proj[type_map[t]].push_back(i);
  }
  std::vector<Tensor<T>> parts;
  std::vector<std::size_t> position(sub.size());
  std::size_t at = 0;
  for (std::size_t p = 0; p < by_proj.size(); ++p) {
    if (by_proj[p].empty()) continue;
    for (auto i : by_proj[p]) position[i] = at++;
    auto x = tape.gather_rows(inputs, by_proj[p]);
    parts.push_back(tape.linear(x, params.proj[p].W, params.proj[p].b));
  }
  Tensor<T> h = tape.gather_rows(tape.concat_rows(std::move(parts)), std::move(position));

  const auto hood = sub.neighborhoods();
  for (std::size_t l = 0; l < params.convs.size(); ++l) {
    const auto& conv = params.convs[l];
    const bool last = l + 1 == params.convs.size();
    if (!last) {
      auto agg = tape.mean_rows(h, hood);
      auto z = tape.add(tape.matmul(h, conv.W_self), tape.matmul(agg, conv.W_neigh));
      h = tape.relu(tape.add_bias(z, conv.b));
    } else {
      tensor::RowGroups seed_hood;
      for (auto s : sub.seeds)
        seed_hood.add(std::span<const std::size_t>(hood.index.data() + hood.offsets[s], hood.offsets[s + 1] - hood.offsets[s]));
      auto agg = tape.mean_rows(h, seed_hood);
      auto self = tape.gather_rows(h, sub.seeds);
      auto z = tape.add(tape.matmul(self, conv.W_self), tape.matmul(agg, conv.W_neigh));
      h = tape.add_bias(z, conv.b);
    }
  }
  return h;
}

/// Shared linear map from hidden space back to the input feature space.
template <typename T>
Tensor<T> decode_reconstruction(const HeteroSageParams<T>& params, const Tensor<T>& h, Tape<T>& tape) {
  if (!params.decoder) throw Error("decode_reconstruction: model has no decoder");
  if (h.cols() != params.d_h) throw Error("decode_reconstruction: expected " + std::to_string(params.d_h) + " columns");
  return tape.linear(h, params.decoder->W, params.decoder->b);
}

}  // namespace relfm::gnn
