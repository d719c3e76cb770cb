#pragma once

#include <newton_cnn/data.hpp>
#include <newton_cnn/gauss_newton.hpp>

#include <chrono>
#include <functional>
#include <limits>
#include <sstream>

namespace newton_cnn {

struct SolverConfig {
  int iters = 100;
  double sample_rate = 0.05;   // curvature subset fraction of the training set
  int cg_max = 250;
  double cg_tol = 0.1;         // relative residual stop for the inner solves
  double armijo_c = 1e-4;      // sufficient-decrease constant
  double alpha_floor = 9.5367431640625e-7;  // 2^-20, line-search abort threshold
  double lambda_init = 1.0;
  double lambda_min = 1e-10, lambda_max = 1e10;
  double lambda_drop = 2.0 / 3.0, lambda_boost = 1.5;
  double rho_upper = 0.75, rho_lower = 0.25;
  double C = 1.0;              // regularization constant
  std::uint64_t seed = 0;
  bool rho_with_lambda = false;  // include the damping term in the predicted reduction
};

struct CgResult {
  Vector x;
  int iters = 0;
  double residual_norm = 0.0;
  bool reached_tol = false;
};

// Conjugate gradients from x = 0 on an SPD operator, stopping when the
// residual falls under rel_tol * ||rhs||.  Non-positive curvature along a
// search direction aborts: the operator is positive definite by
// construction, so that can only be a bug upstream.
template <class MatVec>
CgResult cg_solve(MatVec&& A, const Vector& rhs, double rel_tol, int max_iters) {
  CgResult r;
  r.x = Vector::Zero(rhs.size());
  Vector res = rhs;  // residual of x = 0
  const double target = rel_tol * rhs.norm();
  double rs = res.squaredNorm();
  if (std::sqrt(rs) <= target) {
    r.residual_norm = std::sqrt(rs);
    r.reached_tol = true;
    return r;
  }
  Vector p = res, Ap;
  for (int it = 1; it <= max_iters; ++it) {
    Ap = A(p);
    const double pAp = p.dot(Ap);
    if (!std::isfinite(pAp) || pAp <= 0.0)
      fail("cg_solve: non-positive curvature " + std::to_string(pAp) +
           " along a search direction; the operator is not positive definite");
    const double step = rs / pAp;
    r.x += step * p;
    res -= step * Ap;
    const double rs_new = res.squaredNorm();
    r.iters = it;
    if (std::sqrt(rs_new) <= target) {
      rs = rs_new;
      r.reached_tol = true;
      break;
    }
    p = res + (rs_new / rs) * p;
    rs = rs_new;
  }
  r.residual_norm = std::sqrt(rs);
  return r;
}

struct LineSearchResult {
  double alpha = 0.0;
  double f_new = 0.0;
  double f_full_step = 0.0;  // objective at the unit step (always evaluated first)
  int steps = 0;
  bool ok = false;
};

// Backtracking over alpha = 1, 1/2, 1/4, ... until the sufficient-decrease
// condition f(alpha) <= f0 + c * alpha * g.d holds.  Fails once alpha drops
// under the floor.
template <class Eval>
LineSearchResult line_search(Eval&& f_at, double f0, double gTd, double armijo_c,
                             double alpha_floor) {
  require(gTd < 0.0, "line_search: not a descent direction (g.d = " + std::to_string(gTd) + ")");
  LineSearchResult r;
  for (double alpha = 1.0; alpha >= alpha_floor; alpha *= 0.5) {
    ++r.steps;
    const double f_try = f_at(alpha);
    if (alpha == 1.0) r.f_full_step = f_try;
    if (f_try <= f0 + armijo_c * alpha * gTd) {
      r.alpha = alpha;
      r.f_new = f_try;
      r.ok = true;
      return r;
    }
  }
  return r;
}

// Trust-region-style damping control: shrink on a very successful step
// (ratio above rho_upper), keep on an ordinary one, grow otherwise; always
// clamped to [lambda_min, lambda_max].
inline double lm_update(double lambda, double rho, const SolverConfig& cfg) {
  double next;
  if (rho > cfg.rho_upper)
    next = lambda * cfg.lambda_drop;
  else if (rho >= cfg.rho_lower)
    next = lambda;
  else
    next = lambda * cfg.lambda_boost;
  return std::clamp(next, cfg.lambda_min, cfg.lambda_max);
}

// Reduction the local quadratic model promises for the full step d:
// g.d + (1/2) d.(G d), with G d supplied by the caller (damped or not).
inline double predicted_reduction(const Vector& g, const Vector& d, const Vector& Gd) {
  return g.dot(d) + 0.5 * d.dot(Gd);
}

struct LineSearchFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One row of the training log plus solver internals tests may inspect.
struct NewtonState {
  int iter = 0;
  double f = 0.0;
  double train_acc = 0.0;
  double test_acc = std::numeric_limits<double>::quiet_NaN();
  double lambda = 0.0;   // damping used for this iteration's inner solve
  int cg_iters = 0;
  double alpha = 0.0;
  double seconds = 0.0;
  // extra internals (not part of the CSV schema)
  double rho = 0.0;
  double gnorm = 0.0;
  double cg_residual = 0.0;
  bool cg_reached_tol = false;
  int ls_steps = 0;
};

struct TrainResult {
  Vector theta;
  std::vector<NewtonState> history;
};

struct TrainHooks {
  // Called after every accepted iteration with the new iterate and the
  // serialized sampling-generator state (for exact resume).
  std::function<void(const NewtonState&, const Vector& theta, const std::string& rng_state)>
      on_iteration;
};

struct ResumeState {
  Vector theta;
  double lambda = 1.0;
  int iteration = 0;        // iterations already completed
  std::string rng_state;    // serialized sampling generator
};

// The sampling generator is decorrelated from the init stream (both are
// seeded from cfg.seed) by a fixed tweak.
inline std::mt19937_64 sampling_generator(std::uint64_t seed) {
  return std::mt19937_64(seed ^ 0x9e3779b97f4a7c15ULL);
}

// Subsampled-curvature Newton training:
// per iteration, draw a fresh batch plan, take gradient and objective over
// the full set, solve the damped curvature system on the plan's subset by
// CG, backtrack along the step, and adapt the damping from the ratio of
// actual to predicted reduction at the unit step.
inline TrainResult newton_train(const Network& net, const Dataset& train, const Dataset* test,
                                const SolverConfig& cfg, const TrainHooks& hooks = {},
                                const ResumeState* resume = nullptr) {
  require(train.labels.size() > 0, "newton_train: labels missing (call one_hot first)");
  require(train.labels.rows() == net.num_classes(),
          "newton_train: label rows do not match the network output");
  require(cfg.C > 0.0, "newton_train: regularization constant must be positive");
  const Index l = train.size();

  std::mt19937_64 gen = sampling_generator(cfg.seed);
  TrainResult result;
  double lambda = cfg.lambda_init;
  int start_iter = 0;
  if (resume) {
    require(resume->theta.size() == net.params(), "newton_train: resume state has wrong size");
    result.theta = resume->theta;
    lambda = resume->lambda;
    start_iter = resume->iteration;
    if (!resume->rng_state.empty()) {
      std::istringstream in(resume->rng_state);
      in >> gen;
      if (!in) fail("newton_train: cannot parse resumed generator state");
    }
  } else {
    result.theta = init_params(net.shapes, cfg.seed);
  }

  for (int k = start_iter; k < cfg.iters; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    NewtonState st;
    st.iter = k + 1;
    st.lambda = lambda;

    BatchPlan plan = make_training_plan(l, cfg.sample_rate, gen);
    GradientResult gr =
        gradient(net, result.theta, train.images, train.labels, cfg.C, plan, true);
    const Vector& g = gr.grad;
    st.gnorm = g.norm();

    GNContext ctx = make_gn_context(net, result.theta, gr.cache, cfg.C, lambda);
    CgResult cg = cg_solve([&](const Vector& p) { return gn_matvec(ctx, p, true); }, -g,
                           cfg.cg_tol, cfg.cg_max);
    st.cg_iters = cg.iters;
    st.cg_residual = cg.residual_norm;
    st.cg_reached_tol = cg.reached_tol;
    const Vector& d = cg.x;
    const double gTd = g.dot(d);

    const Vector Gd = gn_matvec(ctx, d, cfg.rho_with_lambda);
    const double predicted = predicted_reduction(g, d, Gd);

    auto f_at = [&](double alpha) {
      const Vector trial = result.theta + alpha * d;
      return objective(net, trial, train.images, train.labels, cfg.C, plan, false).f;
    };
    LineSearchResult ls = line_search(f_at, gr.f, gTd, cfg.armijo_c, cfg.alpha_floor);
    if (!ls.ok)
      throw LineSearchFailure(
          "line search failed at iteration " + std::to_string(k + 1) + ": f = " +
          std::to_string(gr.f) + ", g.d = " + std::to_string(gTd) + ", lambda = " +
          std::to_string(lambda) + "; no step above 2^-20 gave sufficient decrease");

    result.theta += ls.alpha * d;
    st.alpha = ls.alpha;
    st.ls_steps = ls.steps;
    st.f = ls.f_new;
    st.rho = predicted < 0.0
                 ? (ls.f_full_step - gr.f) / predicted
                 : -std::numeric_limits<double>::infinity();
    lambda = lm_update(lambda, st.rho, cfg);

    st.train_acc =
        accuracy(network_outputs(net, result.theta, train.images), train.raw_labels);
    if (test && test->size() > 0)
      st.test_acc =
          accuracy(network_outputs(net, result.theta, test->images), test->raw_labels);
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    result.history.push_back(st);
    if (hooks.on_iteration) {
      std::ostringstream state;
      state << gen;
      hooks.on_iteration(st, result.theta, state.str());
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Size and cost planning: element counts for the large allocations and rough
// FLOP totals, so subset sizes can be chosen before touching real data.

struct ResourceEstimate {
  Index params = 0;                    // parameter/gradient vector length
  Index index_table_elems = 0;         // all precomputed index tables
  Index activations_per_instance = 0;  // forward stacks for one instance
  Index activation_total = 0;          // forward stacks for l instances
  Index jacobian_elems = 0;            // derivative stacks for the curvature subset
  Index phi_stack_peak = 0;            // largest window expansion (curvature subset)
  double gflop_function = 0.0;         // one full-data function evaluation
  double gflop_gn_matvec = 0.0;        // one curvature product on the subset
};

inline ResourceEstimate estimate_resources(const Network& net, Index l, Index subset) {
  require(l >= 1 && subset >= 1 && subset <= l, "estimate_resources: bad sizes");
  ResourceEstimate e;
  e.params = net.params();
  const int K = net.num_classes();
  Index jac_per_copy = 0;
  for (int m = 0; m < net.layer_count(); ++m) {
    const LayerShape& sh = net.shapes.layers[static_cast<std::size_t>(m)];
    if (sh.kind == LayerKind::Conv) {
      const LayerIndexMaps& maps = net.maps[static_cast<std::size_t>(m)];
      e.index_table_elems += static_cast<Index>(maps.phi.idx.size()) +
                             static_cast<Index>(maps.pad_map.idx.size()) +
                             static_cast<Index>(maps.pool_phi.idx.size());
      e.activations_per_instance += Index(sh.d_in) * sh.a_in * sh.b_in;
      jac_per_copy += Index(sh.d_out) * sh.a_conv * sh.b_conv;
      const Index phi_elems = maps.phi.rows() * maps.phi.cols();
      e.phi_stack_peak = std::max(e.phi_stack_peak, phi_elems * subset);
      const double gemm = 2.0 * double(maps.phi.rows()) * sh.d_out * maps.phi.cols();
      e.gflop_function += gemm * double(l) / 1e9;
      e.gflop_gn_matvec += 2.0 * gemm * double(subset) / 1e9;  // jv and jtq products
      e.gflop_gn_matvec +=
          4.0 * double(K) * sh.d_out * sh.a_conv * sh.b_conv * double(subset) / 1e9;
    } else {
      e.activations_per_instance += sh.n_in;
      jac_per_copy += sh.n_out;
      const double gemm = 2.0 * double(sh.n_in) * sh.n_out;
      e.gflop_function += gemm * double(l) / 1e9;
      e.gflop_gn_matvec += 2.0 * gemm * double(subset) / 1e9;
      e.gflop_gn_matvec += 4.0 * double(K) * sh.n_out * double(subset) / 1e9;
    }
  }
  e.activations_per_instance += K;  // final outputs
  e.activation_total = e.activations_per_instance * l;
  e.jacobian_elems = jac_per_copy * Index(K) * subset;
  return e;
}

inline std::string format_resources(const ResourceEstimate& e, Index l, Index subset) {
  auto mb = [](Index elems) {
    std::ostringstream os;
    os.precision(1);
    os << std::fixed << double(elems) * 8.0 / (1024.0 * 1024.0) << " MB";
    return os.str();
  };
  std::ostringstream os;
  os << "resource estimate (l = " << l << ", curvature subset = " << subset << ")\n"
     << "  parameters:            " << e.params << " (" << mb(e.params) << ")\n"
     << "  index tables:          " << e.index_table_elems << " entries ("
     << mb(e.index_table_elems) << ")\n"
     << "  activations, total:    " << e.activation_total << " (" << mb(e.activation_total)
     << ")\n"
     << "  derivative stacks:     " << e.jacobian_elems << " (" << mb(e.jacobian_elems)
     << ")\n"
     << "  window expansion peak: " << e.phi_stack_peak << " (" << mb(e.phi_stack_peak)
     << ")\n";
  os.precision(2);
  os << std::fixed
     << "  ~GFLOP per function evaluation: " << e.gflop_function << "\n"
     << "  ~GFLOP per curvature product:   " << e.gflop_gn_matvec << "\n";
  return os.str();
}

}  // namespace newton_cnn
