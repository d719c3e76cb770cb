#pragma once

#include <newton_cnn/forward.hpp>

namespace newton_cnn {

// Derivative of the squared error with respect to the network outputs: 2(z - y).
inline Matrix loss_grad_output(const Matrix& outputs, const Matrix& targets) {
  require(outputs.rows() == targets.rows() && outputs.cols() == targets.cols(),
          "loss_grad_output: output/target shape mismatch");
  return 2.0 * (outputs - targets);
}

// Routes derivatives at a conv layer's output back onto its pre-activation
// stack: multiplies by the rectifier mask of the (pooled) output and sends
// each value to the position that won its pooling window.  With no pooling
// the routing is the identity and only the mask applies.
//
// The stack may carry several stacked images per instance
// (`copies_per_instance` > 1 while building Jacobian stacks); the mask and
// winner table of instance i apply to all of its copies.
inline Matrix conv_backprop_S(const Eigen::Ref<const Matrix>& dZnext,
                              const Eigen::Ref<const Matrix>& Znext,
                              const PoolArgmax& argmax, const LayerShape& sh,
                              Index copies_per_instance = 1) {
  require_contiguous(dZnext, "conv_backprop_S");
  require_contiguous(Znext, "conv_backprop_S");
  const Index ab_out = Index(sh.a_out) * sh.b_out;
  const Index l = Znext.cols() / ab_out;
  const Index in_block = Index(sh.d_out) * ab_out;
  require(dZnext.cols() == ab_out * l * copies_per_instance,
          "conv_backprop_S: value stack width mismatch");
  const double* src = dZnext.data();
  const double* zn = Znext.data();

  if (sh.pool == 0) {
    Matrix dS(dZnext.rows(), dZnext.cols());
    double* dst = dS.data();
    for (Index i = 0; i < l; ++i) {
      const double* m_i = zn + i * in_block;
      for (Index u = 0; u < copies_per_instance; ++u) {
        const Index c = i * copies_per_instance + u;
        for (Index k = 0; k < in_block; ++k)
          dst[c * in_block + k] = m_i[k] > 0.0 ? src[c * in_block + k] : 0.0;
      }
    }
    return dS;
  }

  require(argmax.idx.rows() == in_block && argmax.idx.cols() == l,
          "conv_backprop_S: winner table does not match the stack");
  const Index out_block = Index(sh.d_out) * sh.a_conv * sh.b_conv;
  Matrix dS = Matrix::Zero(sh.d_out, Index(sh.a_conv) * sh.b_conv * l * copies_per_instance);
  double* dst = dS.data();
  for (Index i = 0; i < l; ++i) {
    const double* m_i = zn + i * in_block;
    for (Index u = 0; u < copies_per_instance; ++u) {
      const Index c = i * copies_per_instance + u;
      const double* s_c = src + c * in_block;
      double* d_c = dst + c * out_block;
      for (Index k = 0; k < in_block; ++k)
        if (m_i[k] > 0.0) d_c[argmax.idx(k, i)] += s_c[k];
    }
  }
  return dS;
}

// Transports derivatives on a conv layer's pre-activation stack back to the
// layer's input: one product with the transposed filter bank, then the
// adjoint of the window expansion (accumulate) and of the padding (unpad).
// `copies` counts the stacked images (l for gradients, K*l for Jacobians).
inline Matrix conv_backprop_Z(const Eigen::Ref<const Matrix>& dS,
                              const Eigen::Ref<const Matrix>& W, const LayerShape& sh,
                              const LayerIndexMaps& maps, Index copies) {
  require(dS.cols() == Index(sh.a_conv) * sh.b_conv * copies,
          "conv_backprop_Z: stack width mismatch");
  Matrix V;
  V.noalias() = W.transpose() * dS;  // (h*h*d_in) x (a_conv*b_conv*copies)
  const Index pad_block = Index(sh.d_in) * sh.a_pad * sh.b_pad;
  const Vector acc = accumulate_batched(
      Eigen::Map<const Vector>(V.data(), V.size()), maps.phi.idx, pad_block, copies);
  const Eigen::Map<const Matrix> padded(acc.data(), sh.d_in, (pad_block / sh.d_in) * copies);
  if (sh.pad == 0) return padded;
  return unpad(maps.pad_map, padded);
}

// Weight/bias derivatives of one conv layer, summed over the batch:
// dW = dS * Phi^T, db = row sums of dS.
inline void conv_grad_params(const Eigen::Ref<const Matrix>& dS,
                             const Eigen::Ref<const Matrix>& phi_stack,
                             Eigen::Ref<Matrix> dW, Eigen::Ref<Vector> db) {
  dW.noalias() = dS * phi_stack.transpose();
  db.noalias() = dS.rowwise().sum();
}

// Weight/bias derivatives of one fc layer, summed over the batch.
inline void fc_grad_params(const Eigen::Ref<const Matrix>& dS,
                           const Eigen::Ref<const Matrix>& Zin,
                           Eigen::Ref<Matrix> dW, Eigen::Ref<Vector> db) {
  dW.noalias() = dS * Zin.transpose();
  db.noalias() = dS.rowwise().sum();
}

// Derivatives with respect to an fc layer's input (before any mask).
inline Matrix fc_backprop(const Eigen::Ref<const Matrix>& W,
                          const Eigen::Ref<const Matrix>& dS) {
  Matrix dZ;
  dZ.noalias() = W.transpose() * dS;
  return dZ;
}

// The sub-image expansion of a layer's (padded) input for a whole batch,
// rebuilt on demand from the retained activation stack.
inline Matrix layer_phi_stack(const Network& net, int m, const Eigen::Ref<const Matrix>& Zin) {
  const LayerShape& sh = net.shapes.layers[static_cast<std::size_t>(m)];
  const LayerIndexMaps& maps = net.maps[static_cast<std::size_t>(m)];
  if (sh.pad > 0) return gather(maps.phi, pad(maps.pad_map, Zin));
  return gather(maps.phi, Zin);
}

struct GradientResult {
  double f = 0.0;
  double data_term = 0.0;
  Vector per_instance;        // per-instance losses, length l
  GradVector grad;            // d f / d theta, length total_params
  ForwardCache cache;         // forward stacks of the curvature subset (if kept)
  IndexVector cache_subset;
  Index backward_peak_elems = 0;  // largest simultaneous derivative-stack footprint
};

// Full objective gradient, accumulated subset by subset:
//   grad = theta/C + (1/l) * sum_i d(loss_i)/d(theta).
// Within each subset the backward sweep keeps only the derivative stacks of
// the layer pair currently being processed.
inline GradientResult gradient(const Network& net, const Vector& theta, const Matrix& X,
                               const Matrix& Y, double C, const BatchPlan& plan,
                               bool keep_hessian_cache = false) {
  require(C > 0.0, "gradient: regularization constant must be positive");
  const auto& first = net.shapes.layers.front();
  const Index in_block = Index(first.a_in) * first.b_in;
  const Index l = X.cols() / in_block;
  require(plan.total() == l, "gradient: plan does not cover the data");
  require(Y.cols() == l, "gradient: label count mismatch");

  const int L = net.layer_count();
  const int Lc = net.conv_layers();
  GradientResult res;
  res.per_instance = Vector::Zero(l);
  GradVector loss_grad = Vector::Zero(net.params());

  for (std::size_t r = 0; r < plan.subsets.size(); ++r) {
    const IndexVector& subset = plan.subsets[r];
    if (subset.empty()) continue;
    const Index ls = static_cast<Index>(subset.size());
    const Matrix Xs = gather_instances(X, subset, in_block);
    const Matrix Ys = gather_instances(Y, subset, 1);
    ForwardCache cache = forward_pass(net, theta, Xs);
    const Vector xi = loss(cache.outputs(), Ys);
    for (std::size_t k = 0; k < subset.size(); ++k)
      res.per_instance[subset[k]] = xi[static_cast<Index>(k)];

    auto note_peak = [&](Index a, Index b) {
      res.backward_peak_elems = std::max(res.backward_peak_elems, a + b);
    };

    // fc chain, last layer first (its activation is linear).
    Matrix dS = loss_grad_output(cache.outputs(), Ys);
    for (int m = L - 1; m >= Lc; --m) {
      const LayerShape& fsh = net.shapes.layers[static_cast<std::size_t>(m)];
      const auto Zin = per_instance_columns(cache.z[static_cast<std::size_t>(m)], ls);
      Matrix dW(fsh.w_rows, fsh.w_cols);
      Vector db(fsh.b_len);
      fc_grad_params(dS, Zin, dW, db);
      weight(net.shapes, loss_grad, m) += dW;
      layer_bias(net.shapes, loss_grad, m) += db;
      if (m > 0) {
        Matrix dZ = fc_backprop(weight(net.shapes, theta, m), dS);
        note_peak(dS.size(), dZ.size());
        if (m - 1 >= Lc) {
          // entering another fc layer: its input is a rectifier output
          dS = dZ.cwiseProduct(relu_mask(cache.z[static_cast<std::size_t>(m)]));
        } else {
          // entering the conv chain: reinterpret columns as image stacks
          const LayerShape& csh = net.shapes.layers[static_cast<std::size_t>(Lc - 1)];
          dS = Eigen::Map<const Matrix>(dZ.data(), csh.d_out,
                                        Index(csh.a_out) * csh.b_out * ls);
        }
      }
    }

    // conv chain (dS currently holds derivatives w.r.t. the pooled outputs
    // of the last conv layer, mask not yet applied).
    for (int m = Lc - 1; m >= 0; --m) {
      const LayerShape& sh = net.shapes.layers[static_cast<std::size_t>(m)];
      Matrix dSc = conv_backprop_S(dS, cache.z[static_cast<std::size_t>(m) + 1],
                                   cache.pool[static_cast<std::size_t>(m)], sh, 1);
      note_peak(dS.size(), dSc.size());
      dS.resize(0, 0);
      const Matrix phi_stack =
          layer_phi_stack(net, m, cache.z[static_cast<std::size_t>(m)]);
      Matrix dW(sh.w_rows, sh.w_cols);
      Vector db(sh.b_len);
      conv_grad_params(dSc, phi_stack, dW, db);
      weight(net.shapes, loss_grad, m) += dW;
      layer_bias(net.shapes, loss_grad, m) += db;
      if (m > 0) {
        Matrix dZ = conv_backprop_Z(dSc, weight(net.shapes, theta, m), sh,
                                    net.maps[static_cast<std::size_t>(m)], ls);
        note_peak(dSc.size(), dZ.size());
        dS = std::move(dZ);
      }
    }

    if (keep_hessian_cache && r + 1 == plan.subsets.size()) {
      res.cache = std::move(cache);
      res.cache_subset = subset;
    }
  }

  double sum = 0.0;
  for (Index i = 0; i < l; ++i) sum += res.per_instance[i];
  res.data_term = sum / double(l);
  res.f = 0.5 / C * theta.squaredNorm() + res.data_term;
  res.grad = theta / C + loss_grad / double(l);
  return res;
}

inline GradientResult gradient(const Network& net, const Vector& theta, const Matrix& X,
                               const Matrix& Y, double C) {
  const auto& first = net.shapes.layers.front();
  const Index l = X.cols() / (Index(first.a_in) * first.b_in);
  return gradient(net, theta, X, Y, C, make_uniform_plan(l, 1), false);
}

}  // namespace newton_cnn
