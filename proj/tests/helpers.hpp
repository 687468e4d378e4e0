#pragma once

// Shared fixtures and independent oracles for the unit tests.

#include <Eigen/Dense>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fedprog/signals.hpp"

namespace testutil {

// Scratch directory that cleans up after itself.
struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag = "scratch") {
    static std::atomic<int> counter{0};
    path = std::filesystem::temp_directory_path() /
           ("fedprog_" + tag + "_" + std::to_string(counter.fetch_add(1)) + "_" +
            std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline Eigen::MatrixXd random_matrix(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd M(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) M(i, j) = gauss(rng);
  return M;
}

inline Eigen::MatrixXd random_orthonormal(int rows, int cols, std::uint64_t seed) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(random_matrix(rows, cols, seed));
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
  return Q;
}

// Minimum-norm least squares through a Jacobi SVD pseudoinverse; the oracle
// for the production solver, which goes through a different decomposition.
inline Eigen::VectorXd pinv_solve(const Eigen::MatrixXd& A, const Eigen::VectorXd& b,
                                  double cutoff = 1e-10) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(s.size());
  const double tol = s.size() ? cutoff * s[0] : 0.0;
  for (int i = 0; i < s.size(); ++i)
    if (s[i] > tol) inv[i] = 1.0 / s[i];
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose() * b;
}

// Exact rank-r data: columns of X lie in the span of U0.
struct LowRank {
  Eigen::MatrixXd X;   // N x J
  Eigen::MatrixXd U0;  // N x r, orthonormal
};

inline LowRank lowrank(int N, int J, int r, std::uint64_t seed) {
  LowRank d;
  d.U0 = random_orthonormal(N, r, seed);
  d.X = d.U0 * random_matrix(r, J, seed + 1);
  return d;
}

inline fedprog::ObservedSignal column_signal(const std::string& id, const Eigen::VectorXd& x) {
  std::vector<int> omega(x.size());
  std::iota(omega.begin(), omega.end(), 0);
  return fedprog::make_signal(id, x, std::move(omega), static_cast<int>(x.size()));
}

inline fedprog::ObservedSignal column_signal_missing(const std::string& id,
                                                     const Eigen::VectorXd& x, double fraction,
                                                     std::uint64_t seed) {
  return fedprog::apply_missingness(column_signal(id, x), fraction, seed);
}

inline std::vector<const fedprog::ObservedSignal*> pointers(
    const std::vector<fedprog::ObservedSignal>& signals) {
  std::vector<const fedprog::ObservedSignal*> out;
  for (const auto& s : signals) out.push_back(&s);
  return out;
}

}  // namespace testutil
