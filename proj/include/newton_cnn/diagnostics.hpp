#pragma once

#include <newton_cnn/gauss_newton.hpp>
#include <newton_cnn/solver.hpp>

#include <iomanip>
#include <ostream>

namespace newton_cnn {

struct CheckItem {
  std::string name;
  bool passed = false;
  std::string detail;  // measured error or mismatch description
};

struct CheckReport {
  std::vector<CheckItem> items;
  bool all_passed() const {
    for (const auto& it : items)
      if (!it.passed) return false;
    return true;
  }
};

namespace detail {

inline std::string err_str(double err, double tol) {
  std::ostringstream os;
  os.setf(std::ios::scientific);
  os << std::setprecision(3) << "err " << err << " (tol " << tol << ")";
  return os.str();
}

inline void push(CheckReport& rep, const std::string& name, double err, double tol) {
  rep.items.push_back({name, err <= tol, err_str(err, tol)});
}

// Direct sliding-window convolution of one padded instance, no index maps:
// out(o, r + c*a_out) = sum_{j,p,q} W(o, p + q*h + j*h*h) * padded(r+p, c+q, j).
inline Matrix brute_force_conv(const Matrix& W, const Vector& bias, const Matrix& z,
                               int a, int b, int d, int h, int s, int pad) {
  const int ap = a + 2 * pad, bp = b + 2 * pad;
  const int ao = (ap - h) / s + 1, bo = (bp - h) / s + 1;
  const int d_out = static_cast<int>(W.rows());
  auto at = [&](int r, int c, int j) -> double {
    r -= pad;
    c -= pad;
    if (r < 0 || r >= a || c < 0 || c >= b) return 0.0;
    return z(j, r + c * a);
  };
  Matrix out(d_out, ao * bo);
  for (int c = 0; c < bo; ++c)
    for (int r = 0; r < ao; ++r)
      for (int o = 0; o < d_out; ++o) {
        double acc = bias(o);
        for (int j = 0; j < d; ++j)
          for (int q = 0; q < h; ++q)
            for (int p = 0; p < h; ++p)
              acc += W(o, p + q * h + j * h * h) * at(r * s + p, c * s + q, j);
        out(o, r + c * ao) = acc;
      }
  return out;
}

}  // namespace detail

// Default geometry for the self-checks: small enough that every oracle is
// cheap, odd enough (uneven sides, padding, a pooled and an unpooled stage)
// to exercise all the index paths.
inline ModelConfig default_check_config() {
  return parse_model_config_string(
      "input a=7 b=6 d=2\n"
      "conv h=3 out=3 stride=1 pad=1 pool=2\n"
      "conv h=2 out=4 stride=1 pad=0 pool=0\n"
      "fc out=6\n"
      "fc out=5\n",
      "<built-in check model>");
}

// Verifies the analytic kernels against brute force and finite differences
// on random data.  `fd_coords` caps how many gradient coordinates get the
// (expensive) per-coordinate difference quotient.
inline CheckReport run_checks(const ModelConfig& config, std::uint64_t seed,
                              int fd_coords = 200) {
  CheckReport rep;
  Network net = make_network(config);
  std::mt19937_64 gen(seed ^ 0xc2b2ae3d27d4eb4fULL);
  std::normal_distribution<double> normal(0.0, 1.0);

  const Index l = 5;
  const int K = net.num_classes();
  Dataset data;
  data.a = config.input_height;
  data.b = config.input_width;
  data.d = config.input_channels;
  data.images = Matrix::NullaryExpr(data.d, Index(data.a) * data.b * l,
                                    [&](Index, Index) { return normal(gen); });
  data.raw_labels.resize(static_cast<std::size_t>(l));
  for (auto& y : data.raw_labels) y = static_cast<int>(gen() % std::uint64_t(K));
  one_hot(data, K);

  Vector theta = init_params(net.shapes, seed);
  const double C = 0.1;

  // 1. forward convolution vs a direct sliding-window loop, first layer
  {
    const LayerShape& sh = net.shapes.layers[0];
    const LayerIndexMaps& maps = net.maps[0];
    const Matrix z = data.images.leftCols(Index(data.a) * data.b);  // instance 0
    const Matrix ours = conv_forward(sh, maps, weight(net.shapes, theta, 0),
                                     layer_bias(net.shapes, theta, 0), z);
    const Matrix ref = detail::brute_force_conv(
        weight(net.shapes, theta, 0), layer_bias(net.shapes, theta, 0), z, sh.a_in,
        sh.b_in, sh.d_in, sh.h, sh.stride, sh.pad);
    detail::push(rep, "convolution vs direct sliding window",
                 (ours - ref).cwiseAbs().maxCoeff(), 1e-12);
  }

  // 2. zero-padding scatter and its gather are adjoint
  {
    const LayerShape& sh = net.shapes.layers[0];
    const PadIndex& pm = net.maps[0].pad_map;
    const Matrix v = Matrix::NullaryExpr(sh.d_in, Index(sh.a_in) * sh.b_in,
                                         [&](Index, Index) { return normal(gen); });
    const Matrix u = Matrix::NullaryExpr(sh.d_in, Index(sh.a_pad) * sh.b_pad,
                                         [&](Index, Index) { return normal(gen); });
    const double lhs = (pad(pm, v).array() * u.array()).sum();
    const double rhs = (v.array() * unpad(pm, u).array()).sum();
    detail::push(rep, "padding scatter/gather adjoint", std::abs(lhs - rhs),
                 1e-10 * (1.0 + std::abs(lhs)));
  }

  // 3. indexed gather and indexed accumulation are adjoint
  {
    const PhiIndex& phi = net.maps[0].phi;
    const Index in_size = phi.in_size();
    const Vector x = Vector::NullaryExpr(in_size, [&](Index) { return normal(gen); });
    const Index n = static_cast<Index>(phi.idx.size());
    const Vector q = Vector::NullaryExpr(n, [&](Index) { return normal(gen); });
    Vector gathered(n);
    for (Index k = 0; k < n; ++k) gathered[k] = x[phi.idx[static_cast<std::size_t>(k)]];
    const double lhs = gathered.dot(q);
    const double rhs = x.dot(accumulate_by_index(q, phi.idx, in_size));
    detail::push(rep, "window gather/accumulate adjoint", std::abs(lhs - rhs),
                 1e-10 * (1.0 + std::abs(lhs)));
  }

  BatchPlan whole = make_uniform_plan(l, 1);
  GradientResult gr = gradient(net, theta, data.images, data.labels, C, whole, true);

  // 4. analytic gradient vs per-coordinate central differences
  {
    std::vector<Index> coords(static_cast<std::size_t>(theta.size()));
    std::iota(coords.begin(), coords.end(), Index(0));
    if (static_cast<int>(coords.size()) > fd_coords) {
      std::shuffle(coords.begin(), coords.end(), gen);
      coords.resize(static_cast<std::size_t>(fd_coords));
    }
    const double eps = 1e-6;
    double worst = 0.0;
    Vector probe = theta;
    for (Index c : coords) {
      probe[c] = theta[c] + eps;
      const double fp = objective(net, probe, data.images, data.labels, C, whole).f;
      probe[c] = theta[c] - eps;
      const double fm = objective(net, probe, data.images, data.labels, C, whole).f;
      probe[c] = theta[c];
      const double fd = (fp - fm) / (2.0 * eps);
      worst = std::max(worst, std::abs(fd - gr.grad[c]) / (1.0 + std::abs(gr.grad[c])));
    }
    detail::push(rep, "gradient vs coordinate differences", worst, 5e-5);
  }

  // 5. directional derivative along a random direction
  {
    Vector u = Vector::NullaryExpr(theta.size(), [&](Index) { return normal(gen); });
    u.normalize();
    const double eps = 1e-6;
    const double fp = objective(net, theta + eps * u, data.images, data.labels, C, whole).f;
    const double fm = objective(net, theta - eps * u, data.images, data.labels, C, whole).f;
    const double fd = (fp - fm) / (2.0 * eps);
    const double an = gr.grad.dot(u);
    detail::push(rep, "directional derivative vs difference quotient",
                 std::abs(fd - an) / (1.0 + std::abs(an)), 1e-6);
  }

  GNContext ctx = make_gn_context(net, theta, gr.cache, C, /*lambda=*/0.5);
  const Index lS = ctx.jac.lS;

  // 6. the two derivative products are adjoint
  {
    const Vector v = Vector::NullaryExpr(theta.size(), [&](Index) { return normal(gen); });
    const Vector q =
        Vector::NullaryExpr(Index(K) * lS, [&](Index) { return normal(gen); });
    const double lhs = jv(*ctx.net, *ctx.theta, ctx.jac, *ctx.cache, v).dot(q);
    const double rhs = v.dot(jtq(*ctx.net, *ctx.theta, ctx.jac, *ctx.cache, q));
    detail::push(rep, "derivative product adjoint", std::abs(lhs - rhs),
                 1e-9 * (1.0 + std::abs(lhs)));
  }

  // 7. curvature operator is symmetric
  {
    const Vector u = Vector::NullaryExpr(theta.size(), [&](Index) { return normal(gen); });
    const Vector v = Vector::NullaryExpr(theta.size(), [&](Index) { return normal(gen); });
    const double lhs = u.dot(gn_matvec(ctx, v));
    const double rhs = v.dot(gn_matvec(ctx, u));
    detail::push(rep, "curvature operator symmetry", std::abs(lhs - rhs),
                 1e-9 * (1.0 + std::abs(lhs)));
  }

  // 8. damped curvature is at least as positive as its ridge term
  {
    const Vector v = Vector::NullaryExpr(theta.size(), [&](Index) { return normal(gen); });
    const double quad = v.dot(gn_matvec(ctx, v));
    const double ridge = (1.0 / C + ctx.lambda) * v.squaredNorm();
    detail::push(rep, "curvature positive definiteness", std::max(0.0, ridge - quad),
                 1e-9 * ridge);
  }

  // 9. matrix-free product vs the operator assembled column by column
  //    (only when the parameter vector is small enough to assemble)
  if (theta.size() <= 2000) {
    Matrix J(Index(K) * lS, theta.size());
    Vector e = Vector::Zero(theta.size());
    for (Index c = 0; c < theta.size(); ++c) {
      e[c] = 1.0;
      J.col(c) = jv(*ctx.net, *ctx.theta, ctx.jac, *ctx.cache, e);
      e[c] = 0.0;
    }
    const Vector v = Vector::NullaryExpr(theta.size(), [&](Index) { return normal(gen); });
    const Vector dense = (1.0 / C + ctx.lambda) * v +
                         J.transpose() * (2.0 * (J * v)) / double(lS);
    const Vector ours = gn_matvec(ctx, v);
    detail::push(rep, "curvature product vs assembled operator",
                 (dense - ours).norm() / (1.0 + dense.norm()), 1e-11);
  }

  return rep;
}

inline void print_report(std::ostream& out, const CheckReport& rep) {
  for (const auto& it : rep.items)
    out << (it.passed ? "PASS" : "FAIL") << "  " << it.name << "  [" << it.detail << "]\n";
  out << (rep.all_passed() ? "all checks passed\n" : "CHECK FAILURES PRESENT\n");
}

}  // namespace newton_cnn
