#pragma once

#include <newton_cnn/model.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace newton_cnn {

inline void relu_in_place(Matrix& X) { X = X.cwiseMax(0.0); }

inline Matrix relu(const Matrix& X) { return X.cwiseMax(0.0); }

// Derivative mask of the rectifier: 1 where the entry is strictly positive,
// 0 elsewhere (the kink at 0 counts as inactive).
inline Matrix relu_mask(const Matrix& X) {
  return (X.array() > 0.0).cast<double>().matrix();
}

// Linear stage of one convolution layer on a batch stack d_in x (a*b*l):
// pads, expands windows, and applies the filter bank plus bias in a single
// matrix product.  Returns the pre-activation stack d_out x (a_conv*b_conv*l).
inline Matrix conv_forward(const LayerShape& sh, const LayerIndexMaps& maps,
                           const Eigen::Ref<const Matrix>& W,
                           const Eigen::Ref<const Vector>& bias, const Matrix& Zin) {
  Matrix S;
  if (sh.pad > 0)
    S.noalias() = W * gather(maps.phi, pad(maps.pad_map, Zin));
  else
    S.noalias() = W * gather(maps.phi, Zin);
  S.colwise() += bias;
  return S;
}

// Fully-connected linear stage on a batch n_in x l.
inline Matrix fc_forward(const Eigen::Ref<const Matrix>& W,
                         const Eigen::Ref<const Vector>& bias,
                         const Eigen::Ref<const Matrix>& Z) {
  Matrix S = W * Z;
  S.colwise() += bias;
  return S;
}

struct MaxPoolResult {
  Matrix pooled;      // d x (out_a*out_b*l)
  PoolArgmax argmax;  // winner positions within each instance's input stack
};

// Max pooling over disjoint windows, driven by the window-partition index
// table (stride = window size).  Records each winner's linear position for
// the backward passes; ties keep the smallest position.
inline MaxPoolResult maxpool(const PhiIndex& pool_phi, const Matrix& conv_stack) {
  const Index l = conv_stack.cols() / (Index(pool_phi.a) * pool_phi.b);
  const Matrix gathered = gather(pool_phi, conv_stack);
  const Index hh = Index(pool_phi.h) * pool_phi.h;
  const Index groups = pool_phi.d * pool_phi.cols();  // windows per instance, channel fastest

  MaxPoolResult r;
  r.pooled.resize(pool_phi.d, pool_phi.cols() * l);
  r.argmax.block = pool_phi.in_size();
  r.argmax.idx.resize(groups, l);
  const double* src = gathered.data();
  double* out = r.pooled.data();
  for (Index i = 0; i < l; ++i)
    for (Index k = 0; k < groups; ++k) {
      const double* win = src + (i * groups + k) * hh;
      Index best = 0;
      for (Index p = 1; p < hh; ++p)
        if (win[p] > win[best]) best = p;
      out[i * groups + k] = win[best];
      r.argmax.idx(k, i) = pool_phi.idx[static_cast<std::size_t>(k * hh + best)];
    }
  return r;
}

// Per-instance squared error against one-hot targets (no 1/2 factor).
inline Vector loss(const Matrix& outputs, const Matrix& targets) {
  require(outputs.rows() == targets.rows() && outputs.cols() == targets.cols(),
          "loss: output/target shape mismatch");
  return (outputs - targets).colwise().squaredNorm().transpose();
}

// Activation stacks of every layer for one batch: z[0] is the input,
// z[m] the input of layer m, z[L] the network output.  Conv-layer stacks are
// d x (a*b*l); fc-layer stacks are n x l (the first fc layer reads the last
// conv stack flattened in place).  Pooling winners are kept per conv layer.
struct ForwardCache {
  std::vector<Matrix> z;
  std::vector<PoolArgmax> pool;
  Index l = 0;

  const Matrix& outputs() const { return z.back(); }
};

// Views a stacked matrix as one column per instance (flattening each
// instance block), without copying.
inline Eigen::Map<const Matrix> per_instance_columns(const Matrix& stack, Index l) {
  return {stack.data(), stack.size() / l, l};
}

inline ForwardCache forward_pass(const Network& net, const Vector& theta, const Matrix& X) {
  require(net.layer_count() > 0 &&
              net.shapes.layers.back().kind == LayerKind::Fc,
          "forward: the last layer must be fully-connected");
  require(theta.size() == net.params(), "forward: parameter vector has wrong length");
  const auto& first = net.shapes.layers.front();
  const Index in_block = first.kind == LayerKind::Conv ? Index(first.a_in) * first.b_in
                                                       : Index(first.n_in);
  require(X.cols() % in_block == 0, "forward: input width is not a multiple of the image size");

  ForwardCache cache;
  cache.l = first.kind == LayerKind::Conv ? X.cols() / in_block : X.cols();
  const int L = net.layer_count();
  cache.z.resize(static_cast<std::size_t>(L) + 1);
  cache.pool.resize(static_cast<std::size_t>(net.conv_layers()));
  cache.z[0] = X;

  for (int m = 0; m < net.conv_layers(); ++m) {
    const LayerShape& sh = net.shapes.layers[static_cast<std::size_t>(m)];
    Matrix S = conv_forward(sh, net.maps[static_cast<std::size_t>(m)],
                            weight(net.shapes, theta, m), layer_bias(net.shapes, theta, m),
                            cache.z[static_cast<std::size_t>(m)]);
    relu_in_place(S);
    if (sh.pool > 0) {
      MaxPoolResult p = maxpool(net.maps[static_cast<std::size_t>(m)].pool_phi, S);
      cache.z[static_cast<std::size_t>(m) + 1] = std::move(p.pooled);
      cache.pool[static_cast<std::size_t>(m)] = std::move(p.argmax);
    } else {
      cache.z[static_cast<std::size_t>(m) + 1] = std::move(S);
      cache.pool[static_cast<std::size_t>(m)].block = Index(sh.d_out) * sh.a_conv * sh.b_conv;
    }
  }
  for (int m = net.conv_layers(); m < L; ++m) {
    Matrix S = fc_forward(weight(net.shapes, theta, m), layer_bias(net.shapes, theta, m),
                          per_instance_columns(cache.z[static_cast<std::size_t>(m)], cache.l));
    if (m + 1 < L) relu_in_place(S);  // final layer stays linear
    cache.z[static_cast<std::size_t>(m) + 1] = std::move(S);
  }
  return cache;
}

// ---------------------------------------------------------------------------
// Batch plans: a partition of the training set into near-equal subsets that
// are evaluated one at a time (bounding working memory), with the last
// subset doubling as the curvature subset whose forward stacks are retained.

struct BatchPlan {
  std::vector<IndexVector> subsets;

  const IndexVector& hessian_subset() const { return subsets.back(); }
  Index total() const {
    Index n = 0;
    for (const auto& s : subsets) n += static_cast<Index>(s.size());
    return n;
  }
};

inline IndexVector sample_without_replacement(Index l, Index k, std::mt19937_64& gen) {
  require(k >= 0 && k <= l, "sample_without_replacement: subset larger than population");
  std::vector<Index> pool(static_cast<std::size_t>(l));
  std::iota(pool.begin(), pool.end(), Index(0));
  for (Index i = 0; i < k; ++i) {
    std::uniform_int_distribution<Index> pick(i, l - 1);
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(gen))]);
  }
  IndexVector out(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.begin(), out.end());
  return out;
}

// Splits [0, l) into R consecutive near-equal subsets.
inline BatchPlan make_uniform_plan(Index l, int R) {
  require(l >= 1, "make_uniform_plan: empty data");
  require(R >= 1 && Index(R) <= l, "make_uniform_plan: subset count out of range");
  BatchPlan plan;
  Index start = 0;
  for (int r = 0; r < R; ++r) {
    const Index stop = l * (r + 1) / R;
    IndexVector s(static_cast<std::size_t>(stop - start));
    std::iota(s.begin(), s.end(), start);
    plan.subsets.push_back(std::move(s));
    start = stop;
  }
  return plan;
}

// Draws the curvature subset (ceil(rate*l) instances, uniform without
// replacement) and splits the remaining instances into near-equal subsets of
// about the same size, so each evaluation touches a bounded slice.
inline BatchPlan make_training_plan(Index l, double sample_rate, std::mt19937_64& gen) {
  require(l >= 1, "make_training_plan: empty data");
  require(sample_rate > 0.0 && sample_rate <= 1.0, "make_training_plan: rate must be in (0, 1]");
  const Index subset = std::min<Index>(l, static_cast<Index>(std::ceil(sample_rate * double(l))));
  IndexVector hess = sample_without_replacement(l, subset, gen);

  std::vector<char> in_hess(static_cast<std::size_t>(l), 0);
  for (Index i : hess) in_hess[static_cast<std::size_t>(i)] = 1;
  IndexVector rest;
  rest.reserve(static_cast<std::size_t>(l - subset));
  for (Index i = 0; i < l; ++i)
    if (!in_hess[static_cast<std::size_t>(i)]) rest.push_back(i);

  BatchPlan plan;
  if (!rest.empty()) {
    const int R = std::max<int>(1, static_cast<int>(std::llround(double(rest.size()) / double(subset))));
    std::size_t start = 0;
    for (int r = 0; r < R; ++r) {
      const std::size_t stop = rest.size() * static_cast<std::size_t>(r + 1) / static_cast<std::size_t>(R);
      plan.subsets.emplace_back(rest.begin() + static_cast<std::ptrdiff_t>(start),
                                rest.begin() + static_cast<std::ptrdiff_t>(stop));
      start = stop;
    }
  }
  plan.subsets.push_back(std::move(hess));
  return plan;
}

// Copies the instance blocks named by idx out of a stacked matrix.
inline Matrix gather_instances(const Matrix& stack, const IndexVector& idx, Index block) {
  Matrix out(stack.rows(), block * static_cast<Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k)
    out.middleCols(static_cast<Index>(k) * block, block) = stack.middleCols(idx[k] * block, block);
  return out;
}

// ---------------------------------------------------------------------------
// Objective: f = (1/2C)·theta^T theta + (1/l)·sum_i ||output_i - y_i||^2,
// evaluated subset by subset.  Per-instance losses are written into a full-
// length buffer and summed in instance order, so the value does not depend
// on how the plan partitions the data.

struct ObjectiveResult {
  double f = 0.0;
  double data_term = 0.0;     // (1/l)·sum of per-instance losses
  Vector per_instance;        // length l
  ForwardCache cache;         // forward stacks of the curvature subset (if kept)
  IndexVector cache_subset;
};

inline ObjectiveResult objective(const Network& net, const Vector& theta, const Matrix& X,
                                 const Matrix& Y, double C, const BatchPlan& plan,
                                 bool keep_hessian_cache = false) {
  require(C > 0.0, "objective: regularization constant must be positive");
  const auto& first = net.shapes.layers.front();
  const Index in_block = Index(first.a_in) * first.b_in;
  const Index l = X.cols() / in_block;
  require(plan.total() == l, "objective: plan does not cover the data");
  require(Y.cols() == l, "objective: label count mismatch");

  ObjectiveResult res;
  res.per_instance = Vector::Zero(l);
  for (std::size_t r = 0; r < plan.subsets.size(); ++r) {
    const IndexVector& subset = plan.subsets[r];
    if (subset.empty()) continue;
    const Matrix Xs = gather_instances(X, subset, in_block);
    ForwardCache cache = forward_pass(net, theta, Xs);
    const Vector xi = loss(cache.outputs(), gather_instances(Y, subset, 1));
    for (std::size_t k = 0; k < subset.size(); ++k)
      res.per_instance[subset[k]] = xi[static_cast<Index>(k)];
    if (keep_hessian_cache && r + 1 == plan.subsets.size()) {
      res.cache = std::move(cache);
      res.cache_subset = subset;
    }
  }
  double sum = 0.0;
  for (Index i = 0; i < l; ++i) sum += res.per_instance[i];
  res.data_term = sum / double(l);
  res.f = 0.5 / C * theta.squaredNorm() + res.data_term;
  return res;
}

inline ObjectiveResult objective(const Network& net, const Vector& theta, const Matrix& X,
                                 const Matrix& Y, double C) {
  const auto& first = net.shapes.layers.front();
  const Index l = X.cols() / (Index(first.a_in) * first.b_in);
  return objective(net, theta, X, Y, C, make_uniform_plan(l, 1), false);
}

// Network outputs over a whole dataset, evaluated in bounded chunks.
inline Matrix network_outputs(const Network& net, const Vector& theta, const Matrix& X,
                              Index chunk = 512) {
  const auto& first = net.shapes.layers.front();
  const Index in_block = Index(first.a_in) * first.b_in;
  const Index l = X.cols() / in_block;
  Matrix out(net.num_classes(), l);
  for (Index start = 0; start < l; start += chunk) {
    const Index n = std::min(chunk, l - start);
    const ForwardCache cache =
        forward_pass(net, theta, X.middleCols(start * in_block, n * in_block));
    out.middleCols(start, n) = cache.outputs();
  }
  return out;
}

}  // namespace newton_cnn
