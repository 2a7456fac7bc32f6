#pragma once

// Initial node features: sign-hashed bag of tokens, precomputed REMB files,
// and a uniform random baseline over a reference value range.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "relfm/binio.hpp"
#include "relfm/error.hpp"
#include "relfm/relmodel.hpp"
#include "relfm/rng.hpp"
#include "relfm/rowtext.hpp"

namespace relfm {

struct EmbeddingBlock {
  std::string table;
  std::size_t rows = 0;
  std::vector<float> values;  // rows x dim, row-major

  std::span<const float> row(std::size_t i, std::size_t dim) const { return {values.data() + i * dim, dim}; }
  std::span<float> row(std::size_t i, std::size_t dim) { return {values.data() + i * dim, dim}; }

  // bitwise, so -0.0 vs 0.0 and NaN payloads count
  friend bool operator==(const EmbeddingBlock& a, const EmbeddingBlock& b) {
    if (a.table != b.table || a.rows != b.rows || a.values.size() != b.values.size()) return false;
    return std::equal(a.values.begin(), a.values.end(), b.values.begin(),
                      [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
  }
};

struct EmbeddingMatrix {
  std::size_t dim = 0;
  std::vector<EmbeddingBlock> blocks;

  std::size_t total_rows() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.rows;
    return n;
  }
  const EmbeddingBlock* find(std::string_view table) const {
    for (const auto& b : blocks)
      if (b.table == table) return &b;
    return nullptr;
  }
  friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;
};


/// Checks that blocks line up with the graph's node types, in order.
inline void check_features_match(const EmbeddingMatrix& m, const EntityGraph& g) {
  if (m.blocks.size() != g.num_types())
    throw Error("feature table count mismatch: " + std::to_string(m.blocks.size()) + " vs " +
                std::to_string(g.num_types()));
  for (std::size_t t = 0; t < g.num_types(); ++t) {
    if (m.blocks[t].table != g.tables[t])
      throw Error("feature table name mismatch: '" + m.blocks[t].table + "' vs '" + g.tables[t] + "'");
    if (m.blocks[t].rows != g.type_size(t)) throw Error("row count mismatch for table '" + g.tables[t] + "'");
  }
}

// ---------------------------------------------------------------------------
// Hashed featurizer

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ mix64(seed);
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(h);
}

/// Sign-hash of whitespace tokens: each token adds +-1 to bucket hash mod dim,
/// scaled by 1/sqrt(token count).
inline void hash_text_into(std::string_view text, std::uint64_t seed, std::span<float> out) {
  std::fill(out.begin(), out.end(), 0.0f);
  const std::size_t dim = out.size();
  std::size_t count = 0;
  std::size_t i = 0;
  std::vector<double> acc(dim, 0.0);
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) {
      auto h = fnv1a(text.substr(i, j - i), seed);
      acc[h % dim] += (h >> 63) ? -1.0 : 1.0;
      ++count;
    }
    i = j;
  }
  if (count == 0) return;
  const double scale = 1.0 / std::sqrt(static_cast<double>(count));
  for (std::size_t k = 0; k < dim; ++k) out[k] = static_cast<float>(acc[k] * scale);
}

inline EmbeddingMatrix encode_hashed(const SchemaManifest& manifest, const RowStore& store, std::size_t dim,
                                     std::uint64_t seed) {
  if (dim == 0) throw Error("embedding dimension must be positive");
  EmbeddingMatrix m;
  m.dim = dim;
  for (std::size_t t = 0; t < manifest.tables.size(); ++t) {
    EmbeddingBlock b;
    b.table = manifest.tables[t].name;
    b.rows = store.tables.at(t).n_rows;
    b.values.assign(b.rows * dim, 0.0f);
    for (std::size_t r = 0; r < b.rows; ++r)
      hash_text_into(rowtext::linearize_row(manifest, store, b.table, r).text, seed, b.row(r, dim));
    m.blocks.push_back(std::move(b));
  }
  return m;
}

/// Dense low-rank featurizer: a rank-sized hashed vector lifted to `dim` by a
/// fixed Gaussian matrix, so every row lies in the same rank-dim subspace.
inline EmbeddingMatrix encode_projected(const SchemaManifest& manifest, const RowStore& store, std::size_t dim,
                                        std::size_t rank, std::uint64_t seed) {
  if (rank == 0 || rank > dim) throw Error("projection rank must be in [1, dim]");
  auto low = encode_hashed(manifest, store, rank, seed);
  Rng rng(derive_seed(seed, {0x9E0}));
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(rank)));
  std::vector<double> proj(dim * rank);
  for (auto& x : proj) x = nd(rng);
  EmbeddingMatrix m;
  m.dim = dim;
  for (const auto& lb : low.blocks) {
    EmbeddingBlock b{lb.table, lb.rows, std::vector<float>(lb.rows * dim)};
    for (std::size_t r = 0; r < b.rows; ++r) {
      auto src = lb.row(r, rank);
      auto dst = b.row(r, dim);
      for (std::size_t a = 0; a < dim; ++a) {
        double s = 0.0;
        for (std::size_t c = 0; c < rank; ++c) s += proj[a * rank + c] * static_cast<double>(src[c]);
        dst[a] = static_cast<float>(s);
      }
    }
    m.blocks.push_back(std::move(b));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Random baseline

inline EmbeddingMatrix gen_random_embeddings(const EmbeddingMatrix& reference, std::uint64_t seed) {
  float lo = std::numeric_limits<float>::infinity();
  float hi = -std::numeric_limits<float>::infinity();
  for (const auto& b : reference.blocks)
    for (float v : b.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!(lo <= hi)) throw Error("random embeddings need a non-empty reference");
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  EmbeddingMatrix out;
  out.dim = reference.dim;
  for (const auto& b : reference.blocks) {
    EmbeddingBlock nb{b.table, b.rows, std::vector<float>(b.values.size())};
    for (auto& v : nb.values) {
      double x = static_cast<double>(lo) + (static_cast<double>(hi) - static_cast<double>(lo)) * unif(rng);
      v = std::clamp(static_cast<float>(x), lo, hi);
    }
    out.blocks.push_back(std::move(nb));
  }
  return out;
}

// ---------------------------------------------------------------------------
// REMB files

inline std::string encode_remb(const EmbeddingMatrix& m) {
  binio::Writer w;
  w.put_bytes("REMB");
  w.put<std::uint8_t>(1);
  w.put<std::uint8_t>(4);
  w.put<std::uint16_t>(0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.blocks.size()));
  for (const auto& b : m.blocks) {
    w.put_str16(b.table);
    w.put<std::uint64_t>(b.rows);
  }
  for (const auto& b : m.blocks) {
    if (b.values.size() != b.rows * m.dim) throw Error("block '" + b.table + "' has wrong payload size");
    for (float v : b.values) w.put_f32(v);
  }
  return w.bytes();
}

inline void write_embedding_file(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  binio::Writer w;
  w.put_bytes(encode_remb(m));
  w.save(path);
}

inline EmbeddingMatrix decode_remb(std::string bytes) {
  binio::Reader r(std::move(bytes));
  if (r.get_bytes(4) != "REMB") throw Error("REMB: magic mismatch");
  if (auto v = r.get<std::uint8_t>(); v != 1) throw Error("REMB: unsupported version " + std::to_string(v));
  if (auto fw = r.get<std::uint8_t>(); fw != 4) throw Error("REMB: unsupported float width " + std::to_string(fw));
  r.get<std::uint16_t>();
  EmbeddingMatrix m;
  m.dim = r.get<std::uint32_t>();
  auto n_tables = r.get<std::uint32_t>();
  for (std::uint32_t t = 0; t < n_tables; ++t) {
    EmbeddingBlock b;
    b.table = r.get_str16();
    b.rows = r.get<std::uint64_t>();
    m.blocks.push_back(std::move(b));
  }
  for (auto& b : m.blocks) {
    if (m.dim != 0 && b.rows > r.remaining() / (4 * m.dim)) throw Error("unexpected end of file");
    b.values.resize(b.rows * m.dim);
    for (auto& v : b.values) {
      v = r.get_f32();
      if (!std::isfinite(v)) throw Error("REMB: non-finite value in table '" + b.table + "'");
    }
  }
  if (!r.at_end()) throw Error("REMB: dim mismatch (trailing bytes after payload)");
  return m;
}

/// Loads a REMB file and, when a manifest/store pair is given, checks table
/// names and row counts against it.
inline EmbeddingMatrix load_embedding_file(const std::filesystem::path& path, const SchemaManifest* manifest = nullptr,
                                           const RowStore* store = nullptr) {
  auto r = binio::Reader::from_file(path);
  auto m = decode_remb(r.get_bytes(r.remaining()));
  if (manifest) {
    if (m.blocks.size() != manifest->tables.size())
      throw Error("REMB: table count mismatch (" + std::to_string(m.blocks.size()) + " vs manifest " +
                  std::to_string(manifest->tables.size()) + ")");
    for (std::size_t t = 0; t < m.blocks.size(); ++t) {
      if (m.blocks[t].table != manifest->tables[t].name)
        throw Error("REMB: table name mismatch: '" + m.blocks[t].table + "' vs '" + manifest->tables[t].name + "'");
      if (store && m.blocks[t].rows != store->tables.at(t).n_rows)
        throw Error("row count mismatch for table '" + m.blocks[t].table + "'");
    }
  }
  return m;
}

/// Per-dimension standardization fitted over all rows of the given matrices.
struct Standardizer {
  std::vector<double> mean, inv_std;

  static Standardizer fit(std::span<const EmbeddingMatrix* const> mats) {
    if (mats.empty()) throw Error("standardizer: nothing to fit");
    const std::size_t dim = mats.front()->dim;
    Standardizer s;
    s.mean.assign(dim, 0.0);
    std::vector<double> sq(dim, 0.0);
    std::size_t n = 0;
    for (const auto* m : mats) {
      if (m->dim != dim) throw Error("standardizer: dimension mismatch");
      for (const auto& b : m->blocks)
        for (std::size_t r = 0; r < b.rows; ++r, ++n)
          for (std::size_t k = 0; k < dim; ++k) {
            double v = b.values[r * dim + k];
            s.mean[k] += v;
            sq[k] += v * v;
          }
    }
    s.inv_std.assign(dim, 1.0);
    if (n == 0) return s;
    for (std::size_t k = 0; k < dim; ++k) {
      s.mean[k] /= static_cast<double>(n);
      double var = sq[k] / static_cast<double>(n) - s.mean[k] * s.mean[k];
      s.inv_std[k] = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
    }
    return s;
  }

  void apply(EmbeddingMatrix& m) const {
    if (m.dim != mean.size()) throw Error("standardizer: dimension mismatch");
    for (auto& b : m.blocks)
      for (std::size_t i = 0; i < b.values.size(); ++i) {
        std::size_t k = i % m.dim;
        b.values[i] = static_cast<float>((b.values[i] - mean[k]) * inv_std[k]);
      }
  }
};

}  // namespace relfm
