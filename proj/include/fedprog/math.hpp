#pragma once

// Small shared numeric helpers: quantiles, order statistics, subspace angles.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "fedprog/errors.hpp"

namespace fedprog {

// Inverse standard normal CDF.  Acklam's rational approximation polished with
// one Halley step against std::erfc; accurate to ~1e-15 over (0,1).
inline double standard_normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ArgumentError("standard_normal_quantile: p must lie in (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425, phigh = 1.0 - plow;
  double x;
  if (p < plow) {
    double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= phigh) {
    double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // Halley refinement on Phi(x) - p = 0.
  double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
  x = x - u / (1.0 + x * u / 2.0);
  return x;
}

// Median of a sample (average of middle pair for even n).
inline double median(std::vector<double> v) {
  if (v.empty()) throw ArgumentError("median: empty sample");
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Interquartile range using the linear-interpolation quantile (type 7).
inline double quantile_type7(std::vector<double> v, double q) {
  if (v.empty()) throw ArgumentError("quantile: empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw ArgumentError("quantile: q must lie in [0,1]");
  std::sort(v.begin(), v.end());
  double h = (static_cast<double>(v.size()) - 1.0) * q;
  size_t lo = static_cast<size_t>(std::floor(h));
  size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double iqr(const std::vector<double>& v) {
  return quantile_type7(v, 0.75) - quantile_type7(v, 0.25);
}

// Largest principal angle (radians) between the column spans of two
// orthonormal-column matrices of equal rank.
inline double largest_principal_angle(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  if (A.rows() != B.rows() || A.cols() != B.cols())
    throw ArgumentError("largest_principal_angle: dimension mismatch");
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A.transpose() * B);
  double smin = svd.singularValues().minCoeff();
  smin = std::clamp(smin, -1.0, 1.0);
  return std::acos(smin);
}

// Deviation of U from orthonormal columns: max |U'U - I|.
inline double orthonormality_error(const Eigen::MatrixXd& U) {
  Eigen::MatrixXd G = U.transpose() * U;
  G -= Eigen::MatrixXd::Identity(U.cols(), U.cols());
  return G.cwiseAbs().maxCoeff();
}

// Thin QR orthonormalization with the sign convention R_ii >= 0 so the result
// is deterministic.
inline Eigen::MatrixXd orthonormalize(const Eigen::MatrixXd& M) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(M);
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(M.rows(), M.cols());
  Eigen::MatrixXd R = qr.matrixQR().topLeftCorner(M.cols(), M.cols());
  for (Eigen::Index k = 0; k < M.cols(); ++k)
    if (R(k, k) < 0.0) Q.col(k) = -Q.col(k);
  return Q;
}

// 64-bit seed mixer (splitmix64 finalizer); used to derive independent
// sub-seeds from a master seed and a stream index or name hash.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_name(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace fedprog
