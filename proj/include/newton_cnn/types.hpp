#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace newton_cnn {

// Dense double-precision matrices, column-major throughout.  All batched
// tensors are stored as matrices whose columns enumerate (spatial position,
// instance) with the channel dimension along rows; vec() of such a matrix is
// its raw column-major storage.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Index tables use 64-bit signed entries (0-based internally; file dumps and
// documentation use 1-based positions).
using Index = std::int64_t;
using IndexVector = std::vector<Index>;

// Parameter and gradient vectors share one flat layout: per layer, the
// column-major weight block followed by the bias block.
using ParamVector = Vector;
using GradVector = Vector;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

}  // namespace newton_cnn
