// Batched forward and hand-derived backward passes.
//
// A batch is a set of interactions touching pairwise-disjoint users and items
// (one t-Batch). All of its inputs are read from the embedding state as it
// was when the batch started; outputs are written back by commit_batch().
// Row-wise work is split across a ThreadPool; parameter-gradient products run
// one tensor per task so results do not depend on the thread count.
//
// Per row, with n-vectors u0 = u(t-), i0 = i(t-), jp = dynamic embedding of
// the user's previous item, target = [one-hot(item) | i0]:
//
//   w     = Wp * du                 û = (1 + w) ⊙ u0
//   jpred = W1 û + W2[:,user] + W3 jp + W4[:,prev] + B
//   u1    = σ(W1u u0 + W2u i0 + W3u f + W4u du)
//   i1    = σ(W1i i0 + W2i u0 + W3i f + W4i di)
//   p     = σ(Θ·[u1 | one-hot(user)] + b)
//   loss  = ‖jpred − target‖ + λu‖u1 − u0‖ + λi‖i1 − i0‖ + s·CE(p, label)
//
// The target is a constant: no gradient reaches i0 through it.

#pragma once

#include "traj/data.hpp"
#include "traj/model.hpp"
#include "traj/parallel.hpp"

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace traj {

struct EngineOptions {
  LossWeights weights;
  bool state_loss = false;        // add the state-change cross-entropy term
  bool state_use_static = true;   // classifier sees [u1 | one-hot(user)]
  std::size_t min_rows_per_task = 16;
};

/// Everything one interaction contributes, independent of where it came from.
struct InteractionContext {
  std::size_t seq_id = 0;
  std::size_t user = 0;
  std::size_t item = 0;
  double timestamp = 0.0;
  std::span<const double> features;
  double delta_u = 0.0;
  double delta_i = 0.0;
  int label = 0;
  std::span<const double> user_prev;
  std::span<const double> item_prev;
  std::optional<std::size_t> prev_item;
  std::span<const double> prev_item_dyn;  // ignored without prev_item
};

/// Inputs, intermediates and outputs of one batch. Buffers are reused across
/// batches.
struct BatchWorkspace {
  std::size_t rows = 0;
  std::vector<std::size_t> seq_ids, users, items;
  std::vector<std::optional<std::size_t>> prev_items;
  std::vector<int> labels;
  std::vector<double> timestamps;
  RowMatrix u0, i0, jp, feats;
  Eigen::VectorXd du, di;
  // forward
  RowMatrix w, uhat, jpred, residual, u1, i1;
  Eigen::VectorXd pred_norm, user_drift, item_drift, prob, ce;

  /// Sets the row count to `b`. Buffers only grow, so a workspace reused
  /// across batches stops allocating once it has seen the largest batch;
  /// readers slice the first `rows` rows.
  void resize(std::size_t b, const ModelDims& d) {
    rows = b;
    const auto B = static_cast<Eigen::Index>(b);
    const auto n = static_cast<Eigen::Index>(d.embedding_dim);
    const auto P = static_cast<Eigen::Index>(d.prediction_dim());
    const auto F = static_cast<Eigen::Index>(d.feature_dim);
    seq_ids.resize(b);
    users.resize(b);
    items.resize(b);
    prev_items.assign(b, std::nullopt);
    labels.resize(b);
    timestamps.resize(b);
    const auto grow = [B](auto& m, Eigen::Index cols) {
      if (m.rows() < B || m.cols() != cols) m.resize(std::max(B, m.rows()), cols);
    };
    const auto grow_vec = [B](Eigen::VectorXd& v) {
      if (v.size() < B) v.resize(B);
    };
    for (RowMatrix* m : {&u0, &i0, &jp, &w, &uhat, &u1, &i1}) grow(*m, n);
    grow(feats, F);
    grow(jpred, P);
    grow(residual, P);
    for (Eigen::VectorXd* v : {&du, &di, &pred_norm, &user_drift, &item_drift, &prob, &ce}) grow_vec(*v);
  }

  void set_row(std::size_t b, const InteractionContext& c) {
    const auto r = static_cast<Eigen::Index>(b);
    seq_ids[b] = c.seq_id;
    users[b] = c.user;
    items[b] = c.item;
    timestamps[b] = c.timestamp;
    labels[b] = c.label;
    prev_items[b] = c.prev_item;
    du(r) = c.delta_u;
    di(r) = c.delta_i;
    u0.row(r) = eigen_vec(c.user_prev).transpose();
    i0.row(r) = eigen_vec(c.item_prev).transpose();
    if (c.prev_item) {
      jp.row(r) = eigen_vec(c.prev_item_dyn).transpose();
    } else {
      jp.row(r).setZero();
    }
    if (feats.cols() > 0) feats.row(r) = eigen_vec(c.features).transpose();
  }
};

/// Gradients of the batch loss with respect to the batch's input embeddings.
struct InputGrads {
  RowMatrix user_prev;      // d/d u0
  RowMatrix item_prev;      // d/d i0
  RowMatrix prev_item_dyn;  // d/d jp (zero rows where there is no previous item)
};

inline InteractionContext context_from_state(const Dataset& ds, const DeltaTable& deltas,
                                             std::size_t r, const EmbeddingState& state) {
  const auto& x = ds.interactions[r];
  InteractionContext c;
  c.seq_id = r;
  c.user = x.user;
  c.item = x.item;
  c.timestamp = x.timestamp;
  c.features = x.features;
  c.delta_u = deltas.delta_u[r];
  c.delta_i = deltas.delta_i[r];
  c.label = x.state_label;
  c.user_prev = state.user_dyn.row(x.user);
  c.item_prev = state.item_dyn.row(x.item);
  c.prev_item = state.user_last_item[x.user];
  if (c.prev_item) c.prev_item_dyn = state.item_dyn.row(*c.prev_item);
  return c;
}

inline void gather_batch(const Dataset& ds, const DeltaTable& deltas,
                         std::span<const std::size_t> members, const EmbeddingState& state,
                         const ModelDims& dims, BatchWorkspace& ws) {
  ws.resize(members.size(), dims);
  for (std::size_t b = 0; b < members.size(); ++b) {
    ws.set_row(b, context_from_state(ds, deltas, members[b], state));
  }
}

namespace detail {

inline void forward_rows(const ModelParams& p, const EngineOptions& opt, BatchWorkspace& ws,
                         Eigen::Index b0, Eigen::Index len) {
  if (len <= 0) return;
  const auto& d = p.dims();
  const auto n = static_cast<Eigen::Index>(d.embedding_dim);
  const auto items = static_cast<Eigen::Index>(d.num_items);
  const auto wp = p[Tensor::ProjWp].eigen();

  auto w = ws.w.middleRows(b0, len);
  auto uhat = ws.uhat.middleRows(b0, len);
  w.noalias() = ws.du.segment(b0, len) * wp.transpose();
  uhat = (1.0 + w.array()) * ws.u0.middleRows(b0, len).array();

  auto jpred = ws.jpred.middleRows(b0, len);
  jpred.noalias() = uhat * p[Tensor::PredW1].eigen().transpose();
  jpred.noalias() += ws.jp.middleRows(b0, len) * p[Tensor::PredW3].eigen().transpose();
  const auto bias = p[Tensor::PredB].eigen();
  const auto w2 = p[Tensor::PredW2].eigen();
  const auto w4 = p[Tensor::PredW4].eigen();
  for (Eigen::Index r = 0; r < len; ++r) {
    const auto b = static_cast<std::size_t>(b0 + r);
    jpred.row(r) += bias.transpose();
    jpred.row(r) += w2.row(static_cast<Eigen::Index>(ws.users[b]));
    if (ws.prev_items[b]) {
      jpred.row(r) += w4.row(static_cast<Eigen::Index>(*ws.prev_items[b]));
    }
  }

  auto residual = ws.residual.middleRows(b0, len);
  residual.leftCols(items) = jpred.leftCols(items);
  residual.rightCols(n) = jpred.rightCols(n) - ws.i0.middleRows(b0, len);
  for (Eigen::Index r = 0; r < len; ++r) {
    const auto b = static_cast<std::size_t>(b0 + r);
    residual(r, static_cast<Eigen::Index>(ws.items[b])) -= 1.0;
  }
  ws.pred_norm.segment(b0, len) = residual.rowwise().norm();

  const auto sigmoid_inplace = [](auto&& m) {
    m = m.unaryExpr([](double x) { return sigmoid(x); });
  };
  auto u1 = ws.u1.middleRows(b0, len);
  auto i1 = ws.i1.middleRows(b0, len);
  const auto u0 = ws.u0.middleRows(b0, len);
  const auto i0 = ws.i0.middleRows(b0, len);
  u1.noalias() = u0 * p[Tensor::UserW1].eigen().transpose();
  u1.noalias() += i0 * p[Tensor::UserW2].eigen().transpose();
  if (d.feature_dim > 0) {
    u1.noalias() += ws.feats.middleRows(b0, len) * p[Tensor::UserW3].eigen().transpose();
  }
  u1.noalias() += ws.du.segment(b0, len) * p[Tensor::UserW4].eigen().transpose();
  sigmoid_inplace(u1);
  i1.noalias() = i0 * p[Tensor::ItemW1].eigen().transpose();
  i1.noalias() += u0 * p[Tensor::ItemW2].eigen().transpose();
  if (d.feature_dim > 0) {
    i1.noalias() += ws.feats.middleRows(b0, len) * p[Tensor::ItemW3].eigen().transpose();
  }
  i1.noalias() += ws.di.segment(b0, len) * p[Tensor::ItemW4].eigen().transpose();
  sigmoid_inplace(i1);

  ws.user_drift.segment(b0, len) = (u1 - u0).rowwise().norm();
  ws.item_drift.segment(b0, len) = (i1 - i0).rowwise().norm();

  if (opt.state_loss) {
    const auto sw = p[Tensor::StateW].eigen();
    const double sb = p[Tensor::StateB](0, 0);
    const Eigen::VectorXd z = u1 * sw.leftCols(n).transpose();
    for (Eigen::Index r = 0; r < len; ++r) {
      const auto b = static_cast<std::size_t>(b0 + r);
      double zr = z(r) + sb;
      if (opt.state_use_static) zr += sw(0, n + static_cast<Eigen::Index>(ws.users[b]));
      const double pr = sigmoid(zr);
      ws.prob(b0 + r) = pr;
      ws.ce(b0 + r) = (ws.labels[b] ? opt.weights.state_pos_weight : 1.0) * cross_entropy(pr, ws.labels[b]);
    }
  } else {
    ws.prob.segment(b0, len).setZero();
    ws.ce.segment(b0, len).setZero();
  }
}

}  // namespace detail

/// Forward pass over all rows of `ws`. Rows are independent, so they are
/// split across `pool` when one is given.
inline void forward_batch(const ModelParams& p, const EngineOptions& opt, BatchWorkspace& ws,
                          ThreadPool* pool = nullptr) {
  const auto B = static_cast<Eigen::Index>(ws.rows);
  if (pool == nullptr || pool->size() == 1 || ws.rows < 2 * opt.min_rows_per_task) {
    detail::forward_rows(p, opt, ws, 0, B);
    return;
  }
  const std::size_t chunks =
      std::min(pool->size(), std::max<std::size_t>(1, ws.rows / opt.min_rows_per_task));
  pool->run(chunks, [&](std::size_t c) {
    const auto b0 = static_cast<Eigen::Index>(ws.rows * c / chunks);
    const auto b1 = static_cast<Eigen::Index>(ws.rows * (c + 1) / chunks);
    detail::forward_rows(p, opt, ws, b0, b1 - b0);
  });
}

inline LossComponents batch_loss(const BatchWorkspace& ws) {
  LossComponents c;
  const auto B = static_cast<Eigen::Index>(ws.rows);
  if (B == 0) return c;
  c.prediction = ws.pred_norm.head(B).sum();
  c.user_reg = ws.user_drift.head(B).sum();
  c.item_reg = ws.item_drift.head(B).sum();
  c.state_ce = ws.ce.head(B).sum();
  return c;
}

namespace detail {

/// Row-wise x / ‖x‖ with the zero vector at ‖x‖ == 0.
inline RowMatrix unit_rows(const RowMatrix& x, const Eigen::VectorXd& norms) {
  RowMatrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    if (norms(r) > 0.0) {
      out.row(r) = x.row(r) / norms(r);
    } else {
      out.row(r).setZero();
    }
  }
  return out;
}

}  // namespace detail

/// Accumulates d(batch loss)/d(params) into `grads`. Optional `upstream_u1`
/// and `upstream_i1` carry gradients flowing into this batch's outputs from
/// later batches. When `inputs` is given it receives d(loss)/d(inputs).
inline void backward_batch(const ModelParams& p, const EngineOptions& opt,
                           const BatchWorkspace& ws, const RowMatrix* upstream_u1,
                           const RowMatrix* upstream_i1, ModelParams& grads,
                           InputGrads* inputs = nullptr, ThreadPool* pool = nullptr) {
  const auto& d = p.dims();
  const auto B = static_cast<Eigen::Index>(ws.rows);
  const auto n = static_cast<Eigen::Index>(d.embedding_dim);
  if (B == 0) return;
  const auto& wts = opt.weights;

  // prediction term
  const RowMatrix g_res = detail::unit_rows(ws.residual.topRows(B), ws.pred_norm.head(B));
  const RowMatrix g_uhat = g_res * p[Tensor::PredW1].eigen();
  RowMatrix g_u0 = g_uhat.array() * (1.0 + ws.w.topRows(B).array());
  RowMatrix g_jp = g_res * p[Tensor::PredW3].eigen();

  // drift regularizers
  const RowMatrix e_u =
      detail::unit_rows(ws.u1.topRows(B) - ws.u0.topRows(B), ws.user_drift.head(B));
  const RowMatrix e_i =
      detail::unit_rows(ws.i1.topRows(B) - ws.i0.topRows(B), ws.item_drift.head(B));
  RowMatrix g_u1 = wts.lambda_u * e_u;
  RowMatrix g_i1 = wts.lambda_i * e_i;
  g_u0 -= wts.lambda_u * e_u;
  RowMatrix g_i0 = -wts.lambda_i * e_i;
  if (upstream_u1) g_u1 += *upstream_u1;
  if (upstream_i1) g_i1 += *upstream_i1;

  // state classifier
  Eigen::VectorXd g_z = Eigen::VectorXd::Zero(B);
  if (opt.state_loss) {
    for (Eigen::Index r = 0; r < B; ++r) {
      const double pr = ws.prob(r);
      // CE is evaluated on the clamped probability; flat outside the clamp.
      if (pr > kProbClamp && pr < 1.0 - kProbClamp) {
        const int y = ws.labels[static_cast<std::size_t>(r)];
        g_z(r) = wts.state_scale * (y ? wts.state_pos_weight : 1.0) * (pr - static_cast<double>(y));
      }
    }
    g_u1.noalias() += g_z * p[Tensor::StateW].eigen().leftCols(n);
  }

  const RowMatrix g_au = g_u1.array() * ws.u1.topRows(B).array() * (1.0 - ws.u1.topRows(B).array());
  const RowMatrix g_ai = g_i1.array() * ws.i1.topRows(B).array() * (1.0 - ws.i1.topRows(B).array());

  // Parameter gradients: one task per tensor.
  const auto u0 = ws.u0.topRows(B);
  const auto i0 = ws.i0.topRows(B);
  const auto feats = ws.feats.topRows(B);
  std::vector<std::function<void()>> tasks;
  tasks.reserve(16);
  tasks.emplace_back([&] {
    grads[Tensor::PredB].eigen().col(0) += g_res.colwise().sum().transpose();
    auto w2 = grads[Tensor::PredW2].eigen();
    auto w4 = grads[Tensor::PredW4].eigen();
    for (Eigen::Index r = 0; r < B; ++r) {
      const auto b = static_cast<std::size_t>(r);
      w2.row(static_cast<Eigen::Index>(ws.users[b])) += g_res.row(r);
      if (ws.prev_items[b]) w4.row(static_cast<Eigen::Index>(*ws.prev_items[b])) += g_res.row(r);
    }
  });
  tasks.emplace_back([&] { grads[Tensor::PredW1].eigen().noalias() += g_res.transpose() * ws.uhat.topRows(B); });
  tasks.emplace_back([&] { grads[Tensor::PredW3].eigen().noalias() += g_res.transpose() * ws.jp.topRows(B); });
  tasks.emplace_back([&] {
    // w_k = Wp_k du  =>  d/dWp_k = Σ_b g_uhat[b,k] u0[b,k] du_b
    grads[Tensor::ProjWp].eigen().col(0) +=
        (g_uhat.array() * u0.array()).matrix().transpose() * ws.du.head(B);
  });
  tasks.emplace_back([&] {
    grads[Tensor::UserW1].eigen().noalias() += g_au.transpose() * u0;
    grads[Tensor::UserW2].eigen().noalias() += g_au.transpose() * i0;
    if (d.feature_dim > 0) grads[Tensor::UserW3].eigen().noalias() += g_au.transpose() * feats;
    grads[Tensor::UserW4].eigen().col(0) += g_au.transpose() * ws.du.head(B);
  });
  tasks.emplace_back([&] {
    grads[Tensor::ItemW1].eigen().noalias() += g_ai.transpose() * i0;
    grads[Tensor::ItemW2].eigen().noalias() += g_ai.transpose() * u0;
    if (d.feature_dim > 0) grads[Tensor::ItemW3].eigen().noalias() += g_ai.transpose() * feats;
    grads[Tensor::ItemW4].eigen().col(0) += g_ai.transpose() * ws.di.head(B);
  });
  if (opt.state_loss) {
    tasks.emplace_back([&] {
      auto sw = grads[Tensor::StateW].eigen();
      sw.leftCols(n) += g_z.transpose() * ws.u1.topRows(B);
      if (opt.state_use_static) {
        for (Eigen::Index r = 0; r < B; ++r) {
          sw(0, n + static_cast<Eigen::Index>(ws.users[static_cast<std::size_t>(r)])) += g_z(r);
        }
      }
      grads[Tensor::StateB](0, 0) += g_z.sum();
    });
  }
  if (pool != nullptr && pool->size() > 1) {
    pool->run(tasks.size(), [&](std::size_t t) { tasks[t](); });
  } else {
    for (auto& t : tasks) t();
  }

  if (inputs != nullptr) {
    g_u0.noalias() += g_au * p[Tensor::UserW1].eigen();
    g_u0.noalias() += g_ai * p[Tensor::ItemW2].eigen();
    g_i0.noalias() += g_au * p[Tensor::UserW2].eigen();
    g_i0.noalias() += g_ai * p[Tensor::ItemW1].eigen();
    for (Eigen::Index r = 0; r < B; ++r) {
      if (!ws.prev_items[static_cast<std::size_t>(r)]) g_jp.row(r).setZero();
    }
    inputs->user_prev = std::move(g_u0);
    inputs->item_prev = std::move(g_i0);
    inputs->prev_item_dyn = std::move(g_jp);
  }
}

/// Writes the batch outputs into the state.
inline void commit_batch(const BatchWorkspace& ws, EmbeddingState& state) {
  for (std::size_t b = 0; b < ws.rows; ++b) {
    const auto r = static_cast<Eigen::Index>(b);
    const std::size_t u = ws.users[b], i = ws.items[b];
    eigen_vec(state.user_dyn.row(u)) = ws.u1.row(r).transpose();
    eigen_vec(state.item_dyn.row(i)) = ws.i1.row(r).transpose();
    state.user_last_time[u] = ws.timestamps[b];
    state.item_last_time[i] = ws.timestamps[b];
    state.user_last_item[u] = i;
  }
}

struct StepGradients {
  ModelParams params;
  Vec user_prev;
  Vec item_prev;
  Vec prev_item_dyn;
  LossComponents loss;
};

/// Gradients of one interaction's loss with respect to every parameter tensor
/// and to its input embeddings.
inline StepGradients backward_step(const InteractionContext& ctx, const ModelParams& p,
                                   const EngineOptions& opt) {
  BatchWorkspace ws;
  ws.resize(1, p.dims());
  ws.set_row(0, ctx);
  forward_batch(p, opt, ws);
  StepGradients out{p.zeros_like(), {}, {}, {}, batch_loss(ws)};
  InputGrads in;
  backward_batch(p, opt, ws, nullptr, nullptr, out.params, &in);
  out.user_prev.assign(in.user_prev.data(), in.user_prev.data() + in.user_prev.size());
  out.item_prev.assign(in.item_prev.data(), in.item_prev.data() + in.item_prev.size());
  out.prev_item_dyn.assign(in.prev_item_dyn.data(), in.prev_item_dyn.data() + in.prev_item_dyn.size());
  for (std::size_t t = 0; t < kTensorCount; ++t) {
    if (!all_finite(out.params[static_cast<Tensor>(t)].values())) {
      throw Error("backward_step: non-finite gradient in tensor " +
                  std::string(kTensorNames[t]));
    }
  }
  return out;
}

/// Records batches of one backpropagation window so gradients can flow
/// across batch boundaries through the embedding chain.
class WindowTape {
 public:
  explicit WindowTape(const ModelDims& dims)
      : user_node_(dims.num_users), item_node_(dims.num_items) {}

  /// Forward one batch from the current state, record it, then commit it.
  LossComponents step(const Dataset& ds, const DeltaTable& deltas,
                      std::span<const std::size_t> members, const ModelParams& p,
                      const EngineOptions& opt, EmbeddingState& state, ThreadPool* pool) {
    auto& ws = batches_.emplace_back();
    gather_batch(ds, deltas, members, state, p.dims(), ws);
    forward_batch(p, opt, ws, pool);
    auto& refs = refs_.emplace_back(ws.rows);
    for (std::size_t b = 0; b < ws.rows; ++b) {
      refs[b].user_prev = user_node_[ws.users[b]];
      refs[b].item_prev = item_node_[ws.items[b]];
      if (ws.prev_items[b]) refs[b].prev_item = item_node_[*ws.prev_items[b]];
    }
    const auto batch = static_cast<std::int64_t>(batches_.size() - 1);
    for (std::size_t b = 0; b < ws.rows; ++b) {
      user_node_[ws.users[b]] = Node{batch, static_cast<std::int64_t>(b)};
      item_node_[ws.items[b]] = Node{batch, static_cast<std::int64_t>(b)};
    }
    commit_batch(ws, state);
    return batch_loss(ws);
  }

  /// Full reverse pass over the recorded window.
  void backward(const ModelParams& p, const EngineOptions& opt, ModelParams& grads,
                ThreadPool* pool) {
    const auto n = static_cast<Eigen::Index>(p.dims().embedding_dim);
    std::vector<RowMatrix> up_u(batches_.size()), up_i(batches_.size());
    for (std::size_t k = 0; k < batches_.size(); ++k) {
      up_u[k] = RowMatrix::Zero(static_cast<Eigen::Index>(batches_[k].rows), n);
      up_i[k] = RowMatrix::Zero(static_cast<Eigen::Index>(batches_[k].rows), n);
    }
    InputGrads in;
    for (std::size_t k = batches_.size(); k-- > 0;) {
      backward_batch(p, opt, batches_[k], &up_u[k], &up_i[k], grads, &in, pool);
      for (std::size_t b = 0; b < batches_[k].rows; ++b) {
        const auto r = static_cast<Eigen::Index>(b);
        const auto& ref = refs_[k][b];
        if (ref.user_prev.batch >= 0) {
          up_u[static_cast<std::size_t>(ref.user_prev.batch)].row(ref.user_prev.row) += in.user_prev.row(r);
        }
        if (ref.item_prev.batch >= 0) {
          up_i[static_cast<std::size_t>(ref.item_prev.batch)].row(ref.item_prev.row) += in.item_prev.row(r);
        }
        if (ref.prev_item.batch >= 0) {
          up_i[static_cast<std::size_t>(ref.prev_item.batch)].row(ref.prev_item.row) += in.prev_item_dyn.row(r);
        }
      }
    }
  }

  std::size_t num_batches() const { return batches_.size(); }

 private:
  struct Node {
    std::int64_t batch = -1;  // -1: leaf (constant input)
    std::int64_t row = 0;
  };
  struct RowRefs {
    Node user_prev, item_prev, prev_item;
  };
  std::vector<Node> user_node_;
  std::vector<Node> item_node_;
  std::vector<BatchWorkspace> batches_;
  std::vector<std::vector<RowRefs>> refs_;
};

}  // namespace traj
