#pragma once

// Road-level encoder and lane-level decoder.
//
// All features are per time step node matrices [nodes x d]. A window of T
// steps is carried as std::vector<Tensor> with one entry per step.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "roaddiff/errors.hpp"
#include "roaddiff/graph.hpp"
#include "roaddiff/optim.hpp"
#include "roaddiff/tensor.hpp"

namespace roaddiff {

enum class Activation { identity, relu };

inline Tensor activate(const Tensor& x, Activation act) { return act == Activation::relu ? relu(x) : x; }

// sigma(Ã x W)
inline Tensor gcn_layer(const Tensor& x, const NormalizedAdjacency& adj, const Tensor& weight, Activation act) {
  if (x.rows() != adj.matrix.rows)
    throw ShapeError("gcn_layer: " + std::to_string(x.rows()) + " feature rows for " +
                     std::to_string(adj.matrix.rows) + " nodes");
  return activate(matmul(Tensor::constant(adj.matrix), matmul(x, weight)), act);
}

// alpha[i][j] = softmax_{j in N(i)} LeakyReLU(a^T [W x_i || W x_j]).
// `attn` is a [2d x 1] column: first half scores the centre node, second half
// the neighbour.
inline Tensor attention_from_projected(const Tensor& projected, const Matrix& mask, const Tensor& attn, double slope) {
  const std::size_t d = projected.cols();
  if (attn.rows() != 2 * d || attn.cols() != 1)
    throw ShapeError("graph_attention: attention vector must be [" + std::to_string(2 * d) + "x1]");
  const Tensor self_score = matmul(projected, slice_rows(attn, 0, d));
  const Tensor nbr_score = matmul(projected, slice_rows(attn, d, d));
  return masked_softmax_rows(leaky_relu(outer_add(self_score, nbr_score), slope), mask);
}

inline Tensor graph_attention(const Tensor& x, const Matrix& mask, const Tensor& weight, const Tensor& attn,
                              double slope) {
  return attention_from_projected(matmul(x, weight), mask, attn, slope);
}

// balance * static + (1 - balance) * dynamic, balance = sigmoid(logit).
inline Tensor spatial_fuse(const Tensor& static_part, const Tensor& dynamic_part, const Tensor& balance_logit) {
  if (static_part.shape() != dynamic_part.shape()) throw ShapeError("spatial_fuse: part shapes differ");
  const Tensor b = sigmoid(balance_logit);
  return add(mul_scalar(static_part, b), mul_scalar(dynamic_part, add_scalar(scale(b, -1.0), 1.0)));
}

// Scores between nodes at step t come from ReLU-scaled query/key products of
// that step; values are taken from the previous step. Step 0 is its own
// predecessor.
inline std::vector<Tensor> temporal_attention(const std::vector<Tensor>& frames, const Tensor& w_q, const Tensor& w_k,
                                              const Tensor& w_v, double key_dim, const Matrix& mask,
                                              std::vector<Tensor>* weights_out = nullptr) {
  if (key_dim <= 0.0) throw ConfigError("temporal_attention: key dimension must be positive");
  if (frames.empty()) throw ShapeError("temporal_attention: need at least one step");
  const double inv_sqrt = 1.0 / std::sqrt(key_dim);
  std::vector<Tensor> out;
  out.reserve(frames.size());
  Tensor prev_values = matmul(frames.front(), w_v);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const Tensor q = matmul(frames[t], w_q);
    const Tensor k = matmul(frames[t], w_k);
    const Tensor alpha = masked_softmax_rows(relu(scale(matmul_nt(q, k), inv_sqrt)), mask);
    if (weights_out) weights_out->push_back(alpha);
    out.push_back(matmul(alpha, prev_values));
    if (t + 1 < frames.size()) prev_values = matmul(frames[t], w_v);
  }
  return out;
}

// Initial lane features: every lane of road i receives W_d z_i + b_d.
// `road_features` is [I x k], `w_d` is [k x d], `b_d` is [1 x d].
inline Tensor road_to_lane(const Tensor& road_features, const LaneNetwork& lanes, const Tensor& w_d, const Tensor& b_d) {
  if (road_features.rows() != lanes.road_count())
    throw ShapeError("road_to_lane: " + std::to_string(road_features.rows()) + " rows for " +
                     std::to_string(lanes.road_count()) + " roads");
  return gather_rows(add_row(matmul(road_features, w_d), b_d), lanes.parent_road());
}

struct AutoencoderOptions {
  std::size_t hidden = 32;
  double leaky_slope = 0.2;
  bool graph_attention = true;
  bool temporal_attention = true;
  // Adds each step's own fused features to its temporal update.
  bool temporal_residual = true;
  bool self_loops = true;
};

struct HiddenState {
  std::vector<Tensor> steps;  // T entries of [I x d]
  Tensor pooled;              // [I x d]
};

namespace detail {

inline void add_mlp(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out,
                    std::mt19937_64& rng) {
  store.add(prefix + ".w1", glorot(in, hidden, rng));
  store.add(prefix + ".b1", Matrix(1, hidden));
  store.add(prefix + ".w2", glorot(hidden, out, rng));
  store.add(prefix + ".b2", Matrix(1, out));
}

inline Tensor mlp(const ParamStore& store, const std::string& prefix, const Tensor& x) {
  const Tensor h = relu(add_row(matmul(x, store.get(prefix + ".w1")), store.get(prefix + ".b1")));
  return add_row(matmul(h, store.get(prefix + ".w2")), store.get(prefix + ".b2"));
}

// Static GCN branch, attention branch, balance fusion, then temporal update.
inline std::vector<Tensor> spatio_temporal_block(const ParamStore& store, const std::string& p,
                                                 const std::vector<Tensor>& inputs, const NormalizedAdjacency& adj,
                                                 const Matrix& mask, const AutoencoderOptions& opt) {
  const Tensor& w = store.get(p + ".w");
  std::vector<Tensor> fused;
  fused.reserve(inputs.size());
  for (const auto& x : inputs) {
    const Tensor projected = matmul(x, w);
    const Tensor static_part = matmul(Tensor::constant(adj.matrix), projected);
    if (!opt.graph_attention) {
      fused.push_back(static_part);
      continue;
    }
    const Tensor alpha = attention_from_projected(projected, mask, store.get(p + ".attn"), opt.leaky_slope);
    fused.push_back(spatial_fuse(static_part, matmul(alpha, projected), store.get(p + ".balance")));
  }
  if (!opt.temporal_attention) return fused;
  auto updated = temporal_attention(fused, store.get(p + ".wq"), store.get(p + ".wk"), store.get(p + ".wv"),
                                    static_cast<double>(opt.hidden), mask);
  if (opt.temporal_residual)
    for (std::size_t t = 0; t < updated.size(); ++t) updated[t] = add(updated[t], fused[t]);
  return updated;
}

inline void add_block(ParamStore& store, const std::string& p, std::size_t d, std::mt19937_64& rng) {
  store.add(p + ".w", glorot(d, d, rng));
  store.add(p + ".attn", glorot(2 * d, 1, rng));
  store.add(p + ".balance", Matrix(1, 1, 0.0));
  store.add(p + ".wq", glorot(d, d, rng));
  store.add(p + ".wk", glorot(d, d, rng));
  store.add(p + ".wv", glorot(d, d, rng));
}

}  // namespace detail

// Road-level encoder. Input is a normalised road window [T x I].
class RoadEncoder {
 public:
  RoadEncoder(const RoadNetwork& roads, AutoencoderOptions opt)
      : opt_(opt),
        adj_(normalized_adjacency(roads.adjacency, opt.self_loops)),
        mask_(neighborhood_mask(roads.adjacency)),
        roads_(roads.road_count) {}

  void init_params(ParamStore& store, std::mt19937_64& rng) const {
    const std::size_t d = opt_.hidden;
    store.add("enc.gcn0", glorot(1, d, rng));
    detail::add_block(store, "enc", d, rng);
    detail::add_mlp(store, "enc.mlp", d, d, d, rng);
  }

  HiddenState encode(const ParamStore& store, const Tensor& road_window) const {
    if (road_window.cols() != roads_) throw ShapeError("encode: expected " + std::to_string(roads_) + " road columns");
    for (double v : road_window.values())
      if (!std::isfinite(v)) throw DataError("encode: non-finite road input");
    std::vector<Tensor> features;
    features.reserve(road_window.rows());
    for (std::size_t t = 0; t < road_window.rows(); ++t) {
      const Tensor x = reshape(slice_rows(road_window, t, 1), {roads_, 1});
      features.push_back(gcn_layer(x, adj_, store.get("enc.gcn0"), Activation::relu));
    }
    HiddenState h;
    h.steps = detail::spatio_temporal_block(store, "enc", features, adj_, mask_, opt_);
    Tensor pooled = h.steps.front();
    for (std::size_t t = 1; t < h.steps.size(); ++t) pooled = add(pooled, h.steps[t]);
    h.pooled = detail::mlp(store, "enc.mlp", pooled);
    return h;
  }

  const NormalizedAdjacency& adjacency() const { return adj_; }
  const Matrix& mask() const { return mask_; }

 private:
  AutoencoderOptions opt_;
  NormalizedAdjacency adj_;
  Matrix mask_;
  std::size_t roads_;
};

// Lane-level decoder. Each step's lane input is W_d [pooled || step_t] + b_d
// gathered onto lanes, so lanes of one road start identical.
class LaneDecoder {
 public:
  LaneDecoder(const LaneNetwork& lanes, AutoencoderOptions opt)
      : opt_(opt),
        lanes_(lanes),
        adj_(normalized_adjacency(lanes.adjacency(), opt.self_loops)),
        mask_(neighborhood_mask(lanes.adjacency())) {}

  void init_params(ParamStore& store, std::mt19937_64& rng) const {
    const std::size_t d = opt_.hidden;
    store.add("dec.wd", glorot(2 * d, d, rng));
    store.add("dec.bd", Matrix(1, d));
    detail::add_block(store, "dec", d, rng);
    detail::add_mlp(store, "dec.mlp", d, d, 1, rng);
  }

  // Returns the initial lane estimate [T x N] in normalised lane units.
  Tensor decode(const ParamStore& store, const HiddenState& h) const {
    std::vector<Tensor> initial;
    initial.reserve(h.steps.size());
    for (const auto& step : h.steps)
      initial.push_back(road_to_lane(concat_cols({h.pooled, step}), lanes_, store.get("dec.wd"), store.get("dec.bd")));
    return decode_initial(store, initial);
  }

  // Decoder stages after the road-to-lane map; exposed for tests.
  Tensor decode_initial(const ParamStore& store, const std::vector<Tensor>& initial) const {
    const auto updated = detail::spatio_temporal_block(store, "dec", initial, adj_, mask_, opt_);
    std::vector<Tensor> rows;
    rows.reserve(updated.size());
    for (const auto& x : updated) rows.push_back(reshape(detail::mlp(store, "dec.mlp", x), {1, lanes_.lane_count()}));
    return concat_rows(rows);
  }

  const NormalizedAdjacency& adjacency() const { return adj_; }
  const Matrix& mask() const { return mask_; }

 private:
  AutoencoderOptions opt_;
  LaneNetwork lanes_;
  NormalizedAdjacency adj_;
  Matrix mask_;
};

// Replacement for the whole encoder/decoder: one linear road-to-lane map
// applied per step.
class LinearAutoencoder {
 public:
  LinearAutoencoder(std::size_t roads, std::size_t lanes) : roads_(roads), lanes_(lanes) {}

  void init_params(ParamStore& store, std::mt19937_64& rng) const {
    store.add("lin.m", glorot(roads_, lanes_, rng));
    store.add("lin.c", Matrix(1, lanes_));
  }

  Tensor forward(const ParamStore& store, const Tensor& road_window) const {
    if (road_window.cols() != roads_) throw ShapeError("linear autoencoder: road column mismatch");
    return add_row(matmul(road_window, store.get("lin.m")), store.get("lin.c"));
  }

 private:
  std::size_t roads_;
  std::size_t lanes_;
};

}  // namespace roaddiff
