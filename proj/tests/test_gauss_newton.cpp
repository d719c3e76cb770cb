#include <newton_cnn/gauss_newton.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace newton_cnn;

namespace {

ModelConfig tiny_config() {
  return parse_model_config_string(
      "input a=5 b=4 d=1\n"
      "conv h=3 out=2 stride=1 pad=1 pool=2\n"
      "fc out=3\n",
      "<test>");
}

ModelConfig deeper_config() {
  return parse_model_config_string(
      "input a=7 b=6 d=2\n"
      "conv h=3 out=3 stride=1 pad=1 pool=2\n"
      "conv h=2 out=4 stride=1 pad=0 pool=0\n"
      "fc out=6\n"
      "fc out=5\n",
      "<test>");
}

Matrix random_images(const ModelConfig& cfg, Index l, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal;
  return Matrix::NullaryExpr(cfg.input_channels,
                             Index(cfg.input_height) * cfg.input_width * l,
                             [&](Index, Index) { return normal(gen); });
}

// Output Jacobian over the whole batch by central differences:
// row i*K + u is d(output_u of instance i)/d(theta), matching the product
// functions' instance-outermost layout.
Matrix fd_jacobian(const Network& net, const Vector& theta, const Matrix& X, Index l) {
  const int K = net.num_classes();
  Matrix J(Index(K) * l, theta.size());
  const double eps = 1e-6;
  Vector probe = theta;
  for (Index c = 0; c < theta.size(); ++c) {
    probe[c] = theta[c] + eps;
    Matrix zp = forward_pass(net, probe, X).outputs();
    probe[c] = theta[c] - eps;
    Matrix zm = forward_pass(net, probe, X).outputs();
    probe[c] = theta[c];
    Matrix diff = (zp - zm) / (2.0 * eps);
    for (Index i = 0; i < l; ++i) J.block(i * K, c, K, 1) = diff.col(i);
  }
  return J;
}

}  // namespace

TEST_CASE("derivative products match a finite-difference Jacobian", "[gn]") {
  ModelConfig cfg = tiny_config();
  Network net = make_network(cfg);
  Vector theta = init_params(net.shapes, 103);
  const Index l = 4;
  Matrix X = random_images(cfg, l, 104);
  ForwardCache cache = forward_pass(net, theta, X);
  JacobianCache jac = build_jacobian_cache(net, theta, cache);
  CHECK(jac.K == 3);
  CHECK(jac.lS == l);

  Matrix J = fd_jacobian(net, theta, X, l);
  std::mt19937_64 gen(9);
  std::normal_distribution<double> normal;

  // forward product against random vectors
  for (int rep = 0; rep < 3; ++rep) {
    Vector v = Vector::NullaryExpr(theta.size(), [&](Index) { return normal(gen); });
    Vector got = jv(net, theta, jac, cache, v);
    Vector want = J * v;
    CHECK((got - want).norm() < 1e-7 * (1.0 + want.norm()));
  }
  // transposed product
  for (int rep = 0; rep < 3; ++rep) {
    Vector q = Vector::NullaryExpr(Index(3) * l, [&](Index) { return normal(gen); });
    Vector got = jtq(net, theta, jac, cache, q);
    Vector want = J.transpose() * q;
    CHECK((got - want).norm() < 1e-7 * (1.0 + want.norm()));
  }
  // per-column layout: unit vectors hit exactly one Jacobian column
  for (Index c = 0; c < theta.size(); c += 11) {
    Vector e = Vector::Zero(theta.size());
    e[c] = 1.0;
    Vector got = jv(net, theta, jac, cache, e);
    CHECK((got - J.col(c)).cwiseAbs().maxCoeff() < 1e-7);
  }
}

TEST_CASE("curvature product equals its definition on the FD Jacobian", "[gn]") {
  ModelConfig cfg = tiny_config();
  Network net = make_network(cfg);
  Vector theta = init_params(net.shapes, 113);
  const Index l = 5;
  Matrix X = random_images(cfg, l, 114);
  ForwardCache cache = forward_pass(net, theta, X);
  const double C = 0.7, lambda = 0.3;
  GNContext ctx = make_gn_context(net, theta, cache, C, lambda);

  Matrix J = fd_jacobian(net, theta, X, l);
  std::mt19937_64 gen(19);
  std::normal_distribution<double> normal;
  for (int rep = 0; rep < 3; ++rep) {
    Vector v = Vector::NullaryExpr(theta.size(), [&](Index) { return normal(gen); });
    Vector want =
        (1.0 / C + lambda) * v + J.transpose() * (2.0 * (J * v)) / double(l);
    Vector got = gn_matvec(ctx, v, true);
    CHECK((got - want).norm() < 1e-6 * (1.0 + want.norm()));
    // damping toggle shifts by exactly lambda * v
    Vector undamped = gn_matvec(ctx, v, false);
    CHECK((got - undamped - lambda * v).cwiseAbs().maxCoeff() <
          1e-13 * (1.0 + v.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("products are adjoint and linear on a deeper net", "[gn]") {
  ModelConfig cfg = deeper_config();
  Network net = make_network(cfg);
  Vector theta = init_params(net.shapes, 123);
  const Index l = 6;
  Matrix X = random_images(cfg, l, 124);
  ForwardCache cache = forward_pass(net, theta, X);
  JacobianCache jac = build_jacobian_cache(net, theta, cache);
  const int K = net.num_classes();

  std::mt19937_64 gen(29);
  std::normal_distribution<double> normal;
  for (int rep = 0; rep < 4; ++rep) {
    Vector v = Vector::NullaryExpr(theta.size(), [&](Index) { return normal(gen); });
    Vector q = Vector::NullaryExpr(Index(K) * l, [&](Index) { return normal(gen); });
    const double lhs = jv(net, theta, jac, cache, v).dot(q);
    const double rhs = v.dot(jtq(net, theta, jac, cache, q));
    CHECK_THAT(lhs, Catch::Matchers::WithinRel(rhs, 1e-11));
  }

  Vector v1 = Vector::NullaryExpr(theta.size(), [&](Index) { return normal(gen); });
  Vector v2 = Vector::NullaryExpr(theta.size(), [&](Index) { return normal(gen); });
  Vector lin = jv(net, theta, jac, cache, 2.0 * v1 - 3.0 * v2);
  Vector sep = 2.0 * jv(net, theta, jac, cache, v1) - 3.0 * jv(net, theta, jac, cache, v2);
  CHECK((lin - sep).cwiseAbs().maxCoeff() < 1e-11 * (1.0 + sep.cwiseAbs().maxCoeff()));
}

TEST_CASE("derivative stacks do not depend on the build chunking", "[gn]") {
  ModelConfig cfg = deeper_config();
  Network net = make_network(cfg);
  Vector theta = init_params(net.shapes, 133);
  const Index l = 7;
  Matrix X = random_images(cfg, l, 134);
  ForwardCache cache = forward_pass(net, theta, X);
  JacobianCache big = build_jacobian_cache(net, theta, cache, 50);
  JacobianCache tiny = build_jacobian_cache(net, theta, cache, 2);
  REQUIRE(big.conv.size() == tiny.conv.size());
  REQUIRE(big.fc.size() == tiny.fc.size());
  for (std::size_t m = 0; m < big.conv.size(); ++m)
    CHECK(big.conv[m] == tiny.conv[m]);
  for (std::size_t m = 0; m < big.fc.size(); ++m)
    CHECK(big.fc[m] == tiny.fc[m]);
}

TEST_CASE("curvature context built on a sampled subset sees only that subset", "[gn]") {
  ModelConfig cfg = tiny_config();
  Network net = make_network(cfg);
  Vector theta = init_params(net.shapes, 143);
  const Index l = 9;
  Matrix X = random_images(cfg, l, 144);
  const int K = net.num_classes();
  Matrix Y = Matrix::Zero(K, l);
  for (Index i = 0; i < l; ++i) Y(i % K, i) = 1.0;

  std::mt19937_64 gen(39);
  BatchPlan plan = make_training_plan(l, 0.33, gen);
  GradientResult gr = gradient(net, theta, X, Y, 0.5, plan, true);
  GNContext ctx = make_gn_context(net, theta, gr.cache, 0.5, 0.0);
  const Index lS = static_cast<Index>(plan.hessian_subset().size());
  REQUIRE(ctx.jac.lS == lS);

  Matrix J = fd_jacobian(net, theta, X, l);
  std::mt19937_64 rgen(49);
  std::normal_distribution<double> normal;
  Vector v = Vector::NullaryExpr(theta.size(), [&](Index) { return normal(rgen); });
  Vector got = jv(net, theta, ctx.jac, gr.cache, v);
  for (Index k = 0; k < lS; ++k) {
    const Index src = plan.hessian_subset()[static_cast<std::size_t>(k)];
    Vector want = J.middleRows(src * K, K) * v;
    CHECK((got.segment(k * K, K) - want).cwiseAbs().maxCoeff() < 1e-7);
  }
}

TEST_CASE("loss-curvature block doubles the vector", "[gn]") {
  Vector q(3);
  q << 1, -2, 0.5;
  apply_B(q);
  CHECK(q[0] == 2.0);
  CHECK(q[1] == -4.0);
  CHECK(q[2] == 1.0);
}
