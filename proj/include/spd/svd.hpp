#pragma once

#include <vector>

#include "spd/tensor.hpp"

namespace spd::linalg {

// Thin SVD g = U * diag(s) * Vt with p = min(M, d).
//   u:  [M, p]   columns for zero singular values are left as zero vectors
//   s:  p values, non-increasing, nonnegative
//   vt: [p, d]   orthonormal rows
struct Svd {
  Tensor u;
  std::vector<double> s;
  Tensor vt;
};

// Householder QR down to a p x p triangle, then one-sided (Hestenes) Jacobi on
// the triangle. Small singular values keep high relative accuracy, which the
// Gram-matrix route would lose. Throws NumericError on non-finite input.
Svd svd(const Tensor& g);

// Top-r right-singular vectors as columns, [d, r].
Tensor top_right_vectors(const Svd& s, std::size_t r);

}  // namespace spd::linalg
