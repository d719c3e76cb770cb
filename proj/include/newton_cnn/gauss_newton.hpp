#pragma once

#include <newton_cnn/backward.hpp>

namespace newton_cnn {

// Per-layer stacks of output derivatives with respect to each layer's
// pre-activation, for every instance of the curvature subset:
//
//   conv[m] : d_out x (a_conv*b_conv * K * lS)   K images per instance,
//   fc[m]   : n_out x (K * lS)                   output index innermost.
//
// Together with the layer inputs (already in the forward cache) these give
// every Jacobian-vector product without ever forming a Jacobian.
struct JacobianCache {
  std::vector<Matrix> conv;
  std::vector<Matrix> fc;
  int K = 0;
  Index lS = 0;

  Index element_count() const {
    Index n = 0;
    for (const Matrix& m : conv) n += m.size();
    for (const Matrix& m : fc) n += m.size();
    return n;
  }
};

// Builds the stacks by one backward sweep per chunk of instances, seeded
// with the identity at the (linear) output layer.  Chunking bounds the
// transport buffers; results do not depend on the chunk size.
inline JacobianCache build_jacobian_cache(const Network& net, const Vector& theta,
                                          const ForwardCache& cache,
                                          Index chunk_instances = 50) {
  const int L = net.layer_count();
  const int Lc = net.conv_layers();
  require(L > Lc, "jacobian: the last layer must be fully-connected");
  const int K = net.num_classes();
  const Index lS = cache.l;

  JacobianCache jac;
  jac.K = K;
  jac.lS = lS;
  jac.conv.resize(static_cast<std::size_t>(Lc));
  jac.fc.resize(static_cast<std::size_t>(L - Lc));
  for (int m = 0; m < Lc; ++m) {
    const LayerShape& sh = net.shapes.layers[static_cast<std::size_t>(m)];
    jac.conv[static_cast<std::size_t>(m)].resize(sh.d_out,
                                                 Index(sh.a_conv) * sh.b_conv * K * lS);
  }
  for (int m = Lc; m < L; ++m)
    jac.fc[static_cast<std::size_t>(m - Lc)].resize(
        net.shapes.layers[static_cast<std::size_t>(m)].n_out, Index(K) * lS);

  for (Index i0 = 0; i0 < lS; i0 += chunk_instances) {
    const Index lc = std::min(chunk_instances, lS - i0);

    // Identity seed at the last layer: d(output)/d(pre-activation) = I.
    Matrix D = Matrix::Zero(K, K * lc);
    for (Index i = 0; i < lc; ++i) D.middleCols(i * K, K).setIdentity();
    jac.fc.back().middleCols(i0 * K, lc * K) = D;

    for (int m = L - 2; m >= Lc; --m) {
      Matrix dZ = fc_backprop(weight(net.shapes, theta, m + 1), D);
      const Matrix& zin = cache.z[static_cast<std::size_t>(m) + 1];  // n x lS, post-rectifier
      for (Index i = 0; i < lc; ++i) {
        const auto mask = (zin.col(i0 + i).array() > 0.0).cast<double>();
        for (int u = 0; u < K; ++u) dZ.col(i * K + u).array() *= mask;
      }
      D = std::move(dZ);
      jac.fc[static_cast<std::size_t>(m - Lc)].middleCols(i0 * K, lc * K) = D;
    }

    if (Lc == 0) continue;

    // Hand off to the conv chain: flatten per-column derivatives back into
    // image stacks (same storage order, no transpose needed).
    const LayerShape& top = net.shapes.layers[static_cast<std::size_t>(Lc - 1)];
    Matrix dzc = fc_backprop(weight(net.shapes, theta, Lc), D);
    Matrix dZ = Eigen::Map<const Matrix>(dzc.data(), top.d_out,
                                         Index(top.a_out) * top.b_out * K * lc);
    dzc.resize(0, 0);
    for (int m = Lc - 1; m >= 0; --m) {
      const LayerShape& sh = net.shapes.layers[static_cast<std::size_t>(m)];
      const Index ab_out = Index(sh.a_out) * sh.b_out;
      const Index ab_conv = Index(sh.a_conv) * sh.b_conv;
      PoolArgmax am;
      am.block = cache.pool[static_cast<std::size_t>(m)].block;
      if (sh.pool > 0)
        am.idx = cache.pool[static_cast<std::size_t>(m)].idx.middleCols(i0, lc);
      Matrix dS = conv_backprop_S(
          dZ, cache.z[static_cast<std::size_t>(m) + 1].middleCols(i0 * ab_out, lc * ab_out),
          am, sh, K);
      jac.conv[static_cast<std::size_t>(m)].middleCols(i0 * ab_conv * K, lc * ab_conv * K) =
          dS;
      if (m > 0)
        dZ = conv_backprop_Z(dS, weight(net.shapes, theta, m), sh,
                             net.maps[static_cast<std::size_t>(m)], lc * K);
    }
  }
  return jac;
}

// J*v: for each layer, push the candidate parameter block through the
// layer's linear form (one matrix product over the whole subset), then
// contract against the cached derivative stacks.  Output is one K-vector
// per instance, concatenated.
inline Vector jv(const Network& net, const Vector& theta, const JacobianCache& jac,
                 const ForwardCache& cache, const Vector& v) {
  require(v.size() == net.params(), "jv: vector has wrong length");
  const int L = net.layer_count();
  const int Lc = net.conv_layers();
  const int K = jac.K;
  const Index lS = jac.lS;
  Vector out = Vector::Zero(Index(K) * lS);

  for (int m = 0; m < Lc; ++m) {
    const LayerShape& sh = net.shapes.layers[static_cast<std::size_t>(m)];
    const Matrix phi_stack = layer_phi_stack(net, m, cache.z[static_cast<std::size_t>(m)]);
    const Eigen::Map<const Matrix> Wv(v.data() + sh.w_offset, sh.w_rows, sh.w_cols);
    const Eigen::Map<const Vector> bv(v.data() + sh.b_offset, sh.b_len);
    Matrix P;
    P.noalias() = Wv * phi_stack;
    P.colwise() += bv;
    const Index block = Index(sh.d_out) * sh.a_conv * sh.b_conv;
    const Matrix& stack = jac.conv[static_cast<std::size_t>(m)];
    for (Index i = 0; i < lS; ++i) {
      const Eigen::Map<const Matrix> Ji(stack.data() + i * block * K, block, K);
      const Eigen::Map<const Vector> Pi(P.data() + i * block, block);
      out.segment(i * K, K).noalias() += Ji.transpose() * Pi;
    }
  }
  for (int m = Lc; m < L; ++m) {
    const LayerShape& sh = net.shapes.layers[static_cast<std::size_t>(m)];
    const auto Zin = per_instance_columns(cache.z[static_cast<std::size_t>(m)], lS);
    const Eigen::Map<const Matrix> Wv(v.data() + sh.w_offset, sh.w_rows, sh.w_cols);
    const Eigen::Map<const Vector> bv(v.data() + sh.b_offset, sh.b_len);
    Matrix P;
    P.noalias() = Wv * Zin;
    P.colwise() += bv;
    const Index block = sh.n_out;
    const Matrix& stack = jac.fc[static_cast<std::size_t>(m - Lc)];
    for (Index i = 0; i < lS; ++i) {
      const Eigen::Map<const Matrix> Ji(stack.data() + i * block * K, block, K);
      out.segment(i * K, K).noalias() += Ji.transpose() * P.col(i);
    }
  }
  return out;
}

// The loss-curvature block on network outputs is constant for the squared
// error: multiply by 2.
inline void apply_B(Vector& q) { q *= 2.0; }

// J^T*q: expand each instance's K coefficients against the derivative
// stacks, then contract with the layer inputs (one matrix product per layer
// over the whole subset).
inline Vector jtq(const Network& net, const Vector& theta, const JacobianCache& jac,
                  const ForwardCache& cache, const Vector& q) {
  const int L = net.layer_count();
  const int Lc = net.conv_layers();
  const int K = jac.K;
  const Index lS = jac.lS;
  require(q.size() == Index(K) * lS, "jtq: vector has wrong length");
  Vector g = Vector::Zero(net.params());

  for (int m = 0; m < Lc; ++m) {
    const LayerShape& sh = net.shapes.layers[static_cast<std::size_t>(m)];
    const Index block = Index(sh.d_out) * sh.a_conv * sh.b_conv;
    const Matrix& stack = jac.conv[static_cast<std::size_t>(m)];
    Matrix U(sh.d_out, Index(sh.a_conv) * sh.b_conv * lS);
    for (Index i = 0; i < lS; ++i) {
      const Eigen::Map<const Matrix> Ji(stack.data() + i * block * K, block, K);
      Eigen::Map<Vector> Ui(U.data() + i * block, block);
      Ui.noalias() = Ji * q.segment(i * K, K);
    }
    const Matrix phi_stack = layer_phi_stack(net, m, cache.z[static_cast<std::size_t>(m)]);
    Eigen::Map<Matrix> dW(g.data() + sh.w_offset, sh.w_rows, sh.w_cols);
    Eigen::Map<Vector> db(g.data() + sh.b_offset, sh.b_len);
    dW.noalias() = U * phi_stack.transpose();
    db.noalias() = U.rowwise().sum();
  }
  for (int m = Lc; m < L; ++m) {
    const LayerShape& sh = net.shapes.layers[static_cast<std::size_t>(m)];
    const Index block = sh.n_out;
    const Matrix& stack = jac.fc[static_cast<std::size_t>(m - Lc)];
    Matrix U(block, lS);
    for (Index i = 0; i < lS; ++i)
      U.col(i).noalias() =
          Eigen::Map<const Matrix>(stack.data() + i * block * K, block, K) *
          q.segment(i * K, K);
    const auto Zin = per_instance_columns(cache.z[static_cast<std::size_t>(m)], lS);
    Eigen::Map<Matrix> dW(g.data() + sh.w_offset, sh.w_rows, sh.w_cols);
    Eigen::Map<Vector> db(g.data() + sh.b_offset, sh.b_len);
    dW.noalias() = U * Zin.transpose();
    db.noalias() = U.rowwise().sum();
  }
  return g;
}

// Damped, subsampled curvature operator bundled with everything its products
// need.  The operator is
//   (1/C + lambda) I + (1/lS) * J^T B J        with B = 2I,
// applied without forming any matrix.
struct GNContext {
  const Network* net = nullptr;
  const Vector* theta = nullptr;
  const ForwardCache* cache = nullptr;
  JacobianCache jac;
  double C = 1.0;
  double lambda = 0.0;
};

inline GNContext make_gn_context(const Network& net, const Vector& theta,
                                 const ForwardCache& cache, double C, double lambda) {
  require(C > 0.0, "gn: regularization constant must be positive");
  require(lambda >= 0.0, "gn: damping must be non-negative");
  GNContext ctx;
  ctx.net = &net;
  ctx.theta = &theta;
  ctx.cache = &cache;
  ctx.jac = build_jacobian_cache(net, theta, cache);
  ctx.C = C;
  ctx.lambda = lambda;
  return ctx;
}

inline Vector gn_matvec(const GNContext& ctx, const Vector& v, bool with_lambda = true) {
  Vector q = jv(*ctx.net, *ctx.theta, ctx.jac, *ctx.cache, v);
  apply_B(q);
  Vector out = jtq(*ctx.net, *ctx.theta, ctx.jac, *ctx.cache, q) / double(ctx.jac.lS);
  out += (1.0 / ctx.C + (with_lambda ? ctx.lambda : 0.0)) * v;
  return out;
}

}  // namespace newton_cnn
