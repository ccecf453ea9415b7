#include "spd/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace spd::linalg {

namespace {

constexpr double kJacobiTol = 1e-15;
constexpr int kMaxSweeps = 80;

struct Reflector {
  std::vector<double> v;  // acts on rows [k, M)
  double beta = 0.0;      // H = I - beta v v^T
};

// Householder QR of a (M x n, M >= n). Returns the reflectors and writes the
// n x n upper triangle into r.
std::vector<Reflector> householder_qr(Tensor a, Tensor& r) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<Reflector> refl(n);
  for (std::size_t k = 0; k < n; ++k) {
    double norm = 0.0;
    for (std::size_t i = k; i < m; ++i) norm += a(i, k) * a(i, k);
    norm = std::sqrt(norm);
    Reflector& h = refl[k];
    h.v.assign(m - k, 0.0);
    if (norm == 0.0) continue;
    const double alpha = a(k, k) >= 0.0 ? -norm : norm;
    for (std::size_t i = k; i < m; ++i) h.v[i - k] = a(i, k);
    h.v[0] -= alpha;
    double vnorm2 = 0.0;
    for (double x : h.v) vnorm2 += x * x;
    if (vnorm2 == 0.0) continue;
    h.beta = 2.0 / vnorm2;
    for (std::size_t j = k; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t i = k; i < m; ++i) dot += h.v[i - k] * a(i, j);
      dot *= h.beta;
      for (std::size_t i = k; i < m; ++i) a(i, j) -= dot * h.v[i - k];
    }
  }
  r = Tensor({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) r(i, j) = a(i, j);
  return refl;
}

// Applies Q = H_0 H_1 ... H_{n-1} to the columns of x (M x c).
void apply_q(const std::vector<Reflector>& refl, Tensor& x) {
  const std::size_t m = x.rows();
  for (std::size_t kk = refl.size(); kk-- > 0;) {
    const Reflector& h = refl[kk];
    if (h.beta == 0.0) continue;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      double dot = 0.0;
      for (std::size_t i = kk; i < m; ++i) dot += h.v[i - kk] * x(i, j);
      dot *= h.beta;
      for (std::size_t i = kk; i < m; ++i) x(i, j) -= dot * h.v[i - kk];
    }
  }
}

// Fills zero columns of u (M x p) with unit vectors orthogonal to all others.
void complete_orthonormal(Tensor& u) {
  const std::size_t m = u.rows(), p = u.cols();
  std::vector<bool> filled(p);
  for (std::size_t j = 0; j < p; ++j) {
    double n2 = 0.0;
    for (std::size_t i = 0; i < m; ++i) n2 += u(i, j) * u(i, j);
    filled[j] = n2 > 0.0;
  }
  std::size_t basis = 0;
  for (std::size_t j = 0; j < p; ++j) {
    if (filled[j]) continue;
    for (; basis < m; ++basis) {
      std::vector<double> cand(m, 0.0);
      cand[basis] = 1.0;
      // two passes of classical Gram-Schmidt
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t k = 0; k < p; ++k) {
          if (!filled[k]) continue;
          double dot = 0.0;
          for (std::size_t i = 0; i < m; ++i) dot += u(i, k) * cand[i];
          for (std::size_t i = 0; i < m; ++i) cand[i] -= dot * u(i, k);
        }
      }
      double n2 = 0.0;
      for (double c : cand) n2 += c * c;
      if (n2 > 1e-2) {
        const double inv = 1.0 / std::sqrt(n2);
        for (std::size_t i = 0; i < m; ++i) u(i, j) = cand[i] * inv;
        filled[j] = true;
        ++basis;
        break;
      }
    }
  }
}

// Tall case, M >= d.
Svd svd_tall(const Tensor& g) {
  const std::size_t m = g.rows(), n = g.cols();
  Tensor r;
  const auto refl = householder_qr(g, r);

  // Work on columns of R stored as rows of w for contiguous access.
  Tensor w = r.transposed();
  Tensor v = Tensor::identity(n);  // rows of v are columns of V
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto wp = w.row(p), wq = w.row(q);
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          alpha += wp[i] * wp[i];
          beta += wq[i] * wq[i];
          gamma += wp[i] * wq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= kJacobiTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < n; ++i) {
          const double a = wp[i], b = wq[i];
          wp[i] = c * a - s * b;
          wq[i] = s * a + c * b;
        }
        auto vp = v.row(p), vq = v.row(q);
        for (std::size_t i = 0; i < n; ++i) {
          const double a = vp[i], b = vq[i];
          vp[i] = c * a - s * b;
          vq[i] = s * a + c * b;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sig(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s2 = 0.0;
    for (double x : w.row(j)) s2 += x * x;
    sig[j] = std::sqrt(s2);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sig[a] > sig[b]; });

  Svd out;
  out.s.resize(n);
  out.vt = Tensor({n, n});
  Tensor ur({m, n});  // [U_R; 0], rows beyond n stay zero
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.s[k] = sig[j];
    auto src = v.row(j);
    std::copy(src.begin(), src.end(), out.vt.row(k).begin());
    if (sig[j] > 0.0) {
      for (std::size_t i = 0; i < n; ++i) ur(i, k) = w(j, i) / sig[j];
    }
  }
  apply_q(refl, ur);
  complete_orthonormal(ur);
  out.u = std::move(ur);
  return out;
}

}  // namespace

Svd svd(const Tensor& g) {
  if (g.rows() == 0 || g.cols() == 0) throw DimensionError("svd of an empty matrix");
  if (!g.all_finite()) throw NumericError("svd input contains non-finite entries");
  if (g.rows() >= g.cols()) return svd_tall(g);
  // Wide: g^T = U' S V'^T, so g = V' S U'^T.
  Svd t = svd_tall(g.transposed());
  Svd out;
  out.s = std::move(t.s);
  out.u = t.vt.transposed();
  out.vt = t.u.transposed();
  return out;
}

Tensor top_right_vectors(const Svd& s, std::size_t r) {
  const std::size_t d = s.vt.cols();
  if (r > s.vt.rows()) throw DimensionError("top_right_vectors: rank exceeds available vectors");
  Tensor v({d, r});
  for (std::size_t k = 0; k < r; ++k)
    for (std::size_t i = 0; i < d; ++i) v(i, k) = s.vt(k, i);
  return v;
}

}  // namespace spd::linalg
