// Coupled-RNN trajectory model: parameters, dynamic embedding state, and the
// per-interaction reference operations.
//
// Static embeddings are one-hot and never materialized: a matrix times a
// one-hot vector is a column lookup by entity index. The two prediction
// matrices applied to one-hot inputs are stored transposed, one contiguous
// row per entity, so the lookup reads a single row.
//
// Shapes (n = embedding_dim, F = feature_dim, d_u = users, d_i = items,
// P = d_i + n is the predicted-item length [static one-hot | dynamic]):
//
//   user_w1, user_w2, item_w1, item_w2   n x n
//   user_w3, item_w3                     n x F
//   user_w4, item_w4, proj_wp            n x 1
//   pred_w1, pred_w3                     P x n
//   pred_w2 (stored transposed)          d_u x P
//   pred_w4 (stored transposed)          d_i x P
//   pred_b                               P x 1
//   state_w                              1 x (n + d_u)
//   state_b                              1 x 1

#pragma once

#include "traj/numkit.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace traj {

struct ModelDims {
  std::size_t embedding_dim = 0;
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::size_t feature_dim = 0;

  std::size_t prediction_dim() const { return num_items + embedding_dim; }
  bool operator==(const ModelDims&) const = default;
};

enum class Tensor : std::size_t {
  UserW1, UserW2, UserW3, UserW4,
  ItemW1, ItemW2, ItemW3, ItemW4,
  ProjWp,
  PredW1, PredW2, PredW3, PredW4, PredB,
  StateW, StateB,
  Count
};

inline constexpr std::size_t kTensorCount = static_cast<std::size_t>(Tensor::Count);

inline constexpr std::array<std::string_view, kTensorCount> kTensorNames = {
    "user_w1", "user_w2", "user_w3", "user_w4",
    "item_w1", "item_w2", "item_w3", "item_w4",
    "proj_wp",
    "pred_w1", "pred_w2", "pred_w3", "pred_w4", "pred_b",
    "state_w", "state_b"};

struct TensorInfo {
  std::string_view name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return rows * cols; }
};

/// All trainable weights in one flat buffer. The same type holds gradients.
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(ModelDims dims) : dims_(dims) {
    if (dims.embedding_dim == 0) throw Error("ModelParams: embedding_dim must be positive");
    const std::size_t n = dims.embedding_dim, f = dims.feature_dim;
    const std::size_t p = dims.prediction_dim();
    const std::array<std::pair<std::size_t, std::size_t>, kTensorCount> shapes = {{
        {n, n}, {n, n}, {n, f}, {n, 1},
        {n, n}, {n, n}, {n, f}, {n, 1},
        {n, 1},
        {p, n}, {dims.num_users, p}, {p, n}, {dims.num_items, p}, {p, 1},
        {1, n + dims.num_users}, {1, 1}}};
    std::size_t offset = 0;
    for (std::size_t t = 0; t < kTensorCount; ++t) {
      layout_[t] = {kTensorNames[t], shapes[t].first, shapes[t].second, offset};
      offset += layout_[t].size();
    }
    values_.assign(offset, 0.0);
  }

  const ModelDims& dims() const { return dims_; }
  const TensorInfo& info(Tensor t) const { return layout_[static_cast<std::size_t>(t)]; }

  MatRef operator[](Tensor t) {
    const auto& i = info(t);
    return {values_.data() + i.offset, i.rows, i.cols};
  }
  ConstMatRef operator[](Tensor t) const {
    const auto& i = info(t);
    return {values_.data() + i.offset, i.rows, i.cols};
  }

  std::span<double> flat() { return values_; }
  std::span<const double> flat() const { return values_; }
  std::size_t size() const { return values_.size(); }

  void set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }
  ModelParams zeros_like() const {
    ModelParams z = *this;
    z.set_zero();
    return z;
  }

  bool operator==(const ModelParams& o) const {
    return dims_ == o.dims_ && values_ == o.values_;
  }

 private:
  ModelDims dims_;
  std::array<TensorInfo, kTensorCount> layout_{};
  Vec values_;
};

/// Uniform(+-1/sqrt(fan_in)) for dense layers, N(0, 1) for the projection
/// vector (fan_in of 1), zero biases.
inline ModelParams init_params(ModelDims dims, std::uint64_t seed) {
  ModelParams p(dims);
  std::mt19937_64 rng(seed);
  const auto fill_uniform = [&](Tensor t, double fan_in) {
    const double bound = 1.0 / std::sqrt(std::max(fan_in, 1.0));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : p[t].values()) v = dist(rng);
  };
  const double n = static_cast<double>(dims.embedding_dim);
  for (Tensor t : {Tensor::UserW1, Tensor::UserW2, Tensor::UserW3, Tensor::UserW4,
                   Tensor::ItemW1, Tensor::ItemW2, Tensor::ItemW3, Tensor::ItemW4}) {
    fill_uniform(t, n);
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : p[Tensor::ProjWp].values()) v = normal(rng);
  const double pred_fan_in = 2.0 * n + static_cast<double>(dims.num_users + dims.num_items);
  for (Tensor t : {Tensor::PredW1, Tensor::PredW2, Tensor::PredW3, Tensor::PredW4}) {
    fill_uniform(t, pred_fan_in);
  }
  fill_uniform(Tensor::StateW, n + static_cast<double>(dims.num_users));
  return p;
}

/// Current dynamic embeddings plus per-entity bookkeeping.
struct EmbeddingState {
  Mat user_dyn;  // num_users x n
  Mat item_dyn;  // num_items x n
  std::vector<std::optional<double>> user_last_time;
  std::vector<std::optional<double>> item_last_time;
  /// Item of each user's most recent interaction (input to the prediction head).
  std::vector<std::optional<std::size_t>> user_last_item;

  std::size_t embedding_dim() const { return user_dyn.cols(); }
  bool operator==(const EmbeddingState&) const = default;
};

/// Every entity starts from one shared vector: N(0, 0.1^2) per coordinate,
/// then L2-normalized.
inline EmbeddingState init_state(ModelDims dims, std::uint64_t seed) {
  if (dims.embedding_dim == 0) throw Error("init_state: embedding_dim must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.1);
  Vec shared(dims.embedding_dim);
  double norm = 0.0;
  do {
    for (double& v : shared) v = normal(rng);
    norm = l2_norm(shared);
  } while (norm == 0.0);
  for (double& v : shared) v /= norm;

  EmbeddingState s;
  s.user_dyn = Mat(dims.num_users, dims.embedding_dim);
  s.item_dyn = Mat(dims.num_items, dims.embedding_dim);
  for (std::size_t u = 0; u < dims.num_users; ++u) std::copy(shared.begin(), shared.end(), s.user_dyn.row(u).begin());
  for (std::size_t i = 0; i < dims.num_items; ++i) std::copy(shared.begin(), shared.end(), s.item_dyn.row(i).begin());
  s.user_last_time.assign(dims.num_users, std::nullopt);
  s.item_last_time.assign(dims.num_items, std::nullopt);
  s.user_last_item.assign(dims.num_users, std::nullopt);
  return s;
}

struct UpdatedEmbeddings {
  Vec user;
  Vec item;
};

namespace detail {
inline void check_len(std::span<const double> v, std::size_t n, const char* what) {
  if (v.size() != n) {
    throw Error(std::string(what) + ": expected length " + std::to_string(n) + ", got " +
                std::to_string(v.size()));
  }
}
}  // namespace detail

/// Both outputs are computed from the pre-interaction embeddings.
///   u' = sigmoid(W1u u + W2u i + W3u f + W4u du)
///   i' = sigmoid(W1i i + W2i u + W3i f + W4i di)
inline UpdatedEmbeddings update_embeddings(std::span<const double> u_prev,
                                           std::span<const double> i_prev,
                                           std::span<const double> features, double du,
                                           double di, const ModelParams& p) {
  const auto& d = p.dims();
  detail::check_len(u_prev, d.embedding_dim, "update_embeddings user");
  detail::check_len(i_prev, d.embedding_dim, "update_embeddings item");
  detail::check_len(features, d.feature_dim, "update_embeddings features");
  const double du_arr[1] = {du};
  const double di_arr[1] = {di};

  Vec au(d.embedding_dim, 0.0), ai(d.embedding_dim, 0.0);
  matvec_add(p[Tensor::UserW1], u_prev, au);
  matvec_add(p[Tensor::UserW2], i_prev, au);
  matvec_add(p[Tensor::UserW3], features, au);
  matvec_add(p[Tensor::UserW4], du_arr, au);
  matvec_add(p[Tensor::ItemW1], i_prev, ai);
  matvec_add(p[Tensor::ItemW2], u_prev, ai);
  matvec_add(p[Tensor::ItemW3], features, ai);
  matvec_add(p[Tensor::ItemW4], di_arr, ai);
  return {sigmoid(au), sigmoid(ai)};
}

/// (1 + Wp * delta) ⊙ u. Exactly the identity at delta == 0.
inline Vec project_user(std::span<const double> u, double delta, const ModelParams& p) {
  detail::check_len(u, p.dims().embedding_dim, "project_user");
  const auto wp = p[Tensor::ProjWp];
  Vec out(u.size());
  for (std::size_t k = 0; k < u.size(); ++k) out[k] = (1.0 + wp(k, 0) * delta) * u[k];
  return out;
}

/// W1 û + W2[:, user] + W3 i_prev + W4[:, prev_item] + B.
/// Without a previous item (the user's first interaction) the two item terms
/// are dropped.
inline Vec predict_item_embedding(std::span<const double> u_proj, std::size_t user_idx,
                                  std::span<const double> prev_item_dyn,
                                  std::optional<std::size_t> prev_item_idx,
                                  const ModelParams& p) {
  const auto& d = p.dims();
  detail::check_len(u_proj, d.embedding_dim, "predict_item_embedding user");
  if (user_idx >= d.num_users) {
    throw Error("predict_item_embedding: user index " + std::to_string(user_idx) +
                " out of range (" + std::to_string(d.num_users) + " users)");
  }
  if (prev_item_idx && *prev_item_idx >= d.num_items) {
    throw Error("predict_item_embedding: item index " + std::to_string(*prev_item_idx) +
                " out of range (" + std::to_string(d.num_items) + " items)");
  }
  const auto b = p[Tensor::PredB];
  Vec out(b.values().begin(), b.values().end());
  matvec_add(p[Tensor::PredW1], u_proj, out);
  const auto w2 = p[Tensor::PredW2];
  for (std::size_t r = 0; r < out.size(); ++r) out[r] += w2(user_idx, r);
  if (prev_item_idx) {
    detail::check_len(prev_item_dyn, d.embedding_dim, "predict_item_embedding item");
    matvec_add(p[Tensor::PredW3], prev_item_dyn, out);
    const auto w4 = p[Tensor::PredW4];
    for (std::size_t r = 0; r < out.size(); ++r) out[r] += w4(*prev_item_idx, r);
  }
  return out;
}

/// Distance between a predicted item vector [static | dynamic] and item k's
/// [one-hot(k) | dyn], without materializing the one-hot.
inline double item_distance(std::span<const double> j_pred, std::size_t num_items,
                            std::size_t item_idx, std::span<const double> item_dyn) {
  double s = 0.0;
  for (std::size_t r = 0; r < num_items; ++r) {
    const double t = r == item_idx ? 1.0 : 0.0;
    s += (j_pred[r] - t) * (j_pred[r] - t);
  }
  for (std::size_t k = 0; k < item_dyn.size(); ++k) {
    const double diff = j_pred[num_items + k] - item_dyn[k];
    s += diff * diff;
  }
  return std::sqrt(s);
}

struct LossWeights {
  double lambda_u = 1.0;
  double lambda_i = 1.0;
  double state_scale = 1.0;
  double state_pos_weight = 1.0;  // multiplies the cross-entropy of label-1 interactions
};

struct LossComponents {
  double prediction = 0.0;
  double user_reg = 0.0;
  double item_reg = 0.0;
  double state_ce = 0.0;

  double total(const LossWeights& w) const {
    return prediction + w.lambda_u * user_reg + w.lambda_i * item_reg + w.state_scale * state_ce;
  }
  LossComponents& operator+=(const LossComponents& o) {
    prediction += o.prediction;
    user_reg += o.user_reg;
    item_reg += o.item_reg;
    state_ce += o.state_ce;
    return *this;
  }
};

/// ‖j_pred − [one-hot(true), true_dyn_prev]‖ plus the two drift regularizers.
/// state_ce is left at zero.
inline LossComponents interaction_loss(std::span<const double> j_pred,
                                       std::size_t true_item_idx,
                                       std::span<const double> true_item_dyn_prev,
                                       std::span<const double> u_new,
                                       std::span<const double> u_prev,
                                       std::span<const double> i_new,
                                       std::span<const double> i_prev) {
  const std::size_t n = true_item_dyn_prev.size();
  if (j_pred.size() < n || true_item_idx >= j_pred.size() - n) {
    throw Error("interaction_loss: true item index out of range");
  }
  LossComponents c;
  c.prediction = item_distance(j_pred, j_pred.size() - n, true_item_idx, true_item_dyn_prev);
  c.user_reg = l2_distance(u_new, u_prev);
  c.item_reg = l2_distance(i_new, i_prev);
  return c;
}

/// sigmoid(state_w · [u_new | one-hot(user)] + state_b). With
/// `use_static == false` the one-hot part is ignored.
inline double predict_state_change(std::span<const double> u_new, std::size_t user_idx,
                                   const ModelParams& p, bool use_static = true) {
  const auto& d = p.dims();
  detail::check_len(u_new, d.embedding_dim, "predict_state_change");
  if (user_idx >= d.num_users) throw Error("predict_state_change: user index out of range");
  const auto w = p[Tensor::StateW];
  double z = p[Tensor::StateB](0, 0);
  for (std::size_t k = 0; k < u_new.size(); ++k) z += w(0, k) * u_new[k];
  if (use_static) z += w(0, d.embedding_dim + user_idx);
  return sigmoid(z);
}

inline constexpr double kProbClamp = 1e-12;

inline double cross_entropy(double prob, int label) {
  const double q = std::clamp(prob, kProbClamp, 1.0 - kProbClamp);
  return label != 0 ? -std::log(q) : -std::log(1.0 - q);
}

}  // namespace traj
