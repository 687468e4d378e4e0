#pragma once

// Incremental subspace tracking over incomplete signals.
//
// The basis U (N x K, orthonormal columns) is refined one signal at a time:
//   1. w = argmin || U^O w - x^O ||  over the observed rows O (minimum-norm
//      least squares; singular values below 1e-10 * s_max are treated as zero),
//   2. the signal is completed as x~ = x on O, (U w) elsewhere,
//   3. the residual r = x~ - U w (supported on O) is folded into the basis by
//      an SVD of the (K+1)x(K+1) middle factor [[I, w],[0, ||r||]], keeping the
//      top K directions of [U, r/||r||] * that factor.
// Updates with ||r|| <= 1e-10 * ||x~|| are skipped.  Columns are re-orthonormalized
// by thin QR every 100 applied updates to bound floating-point drift.

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "fedprog/errors.hpp"
#include "fedprog/math.hpp"
#include "fedprog/signals.hpp"

namespace fedprog {

inline constexpr double kRankCutoff = 1e-10;      // relative singular-value cutoff
inline constexpr double kSkipThreshold = 1e-10;   // ||r|| <= thr * ||x~||  => skip
inline constexpr int kReorthPeriod = 100;         // applied updates between QR passes

struct SubspaceBasis {
  Eigen::MatrixXd U;  // N x K, orthonormal columns

  int dim() const { return static_cast<int>(U.rows()); }
  int rank() const { return static_cast<int>(U.cols()); }
};

// Random orthonormal initial basis; deterministic in (N, K, seed).
inline SubspaceBasis init_subspace(int N, int K, std::uint64_t seed) {
  if (K < 1) throw ArgumentError("init_subspace: rank must be >= 1, got " + std::to_string(K));
  if (K > N)
    throw ArgumentError("init_subspace: rank " + std::to_string(K) +
                        " exceeds ambient dimension " + std::to_string(N));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd G(N, K);
  for (int i = 0; i < N; ++i)
    for (int k = 0; k < K; ++k) G(i, k) = gauss(rng);
  return SubspaceBasis{orthonormalize(G)};
}

struct ProjectionResult {
  Eigen::VectorXd w;     // K weights
  double residual_norm;  // || x^O - U^O w ||
  double signal_norm;    // || x^O ||
};

namespace detail {

// Minimum-norm least-squares solve, routed by shape: normal equations when
// heavily overdetermined (the systems solved here restrict orthonormal
// columns to observed rows, which keeps A^T A well conditioned), pivoted QR
// when moderately overdetermined and full rank, and an SVD with pseudoinverse
// semantics for underdetermined or rank-deficient systems.
inline Eigen::VectorXd lsq_min_norm(const Eigen::MatrixXd& A, const Eigen::VectorXd& b) {
  const Eigen::Index m = A.rows(), K = A.cols();
  if (m >= 2 * K) {
    Eigen::LLT<Eigen::MatrixXd> llt(A.transpose() * A);
    if (llt.info() == Eigen::Success) return llt.solve(A.transpose() * b);
  }
  if (m >= K) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
    qr.setThreshold(kRankCutoff);
    if (qr.rank() == K) return qr.solve(b);
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  svd.setThreshold(kRankCutoff);
  return svd.solve(b);
}

}  // namespace detail

// Minimum-norm least-squares weights of x against U restricted to the
// observed rows.  Rank-deficient U^O (e.g. |O| < K) is handled through the
// pseudoinverse semantics of an SVD solve.
inline ProjectionResult project_weights(const Eigen::MatrixXd& U, const ObservedSignal& x) {
  if (U.rows() != x.values.size())
    throw StructuralError("project_weights: basis has " + std::to_string(U.rows()) +
                          " rows but signal '" + x.system_id + "' lives on a grid of " +
                          std::to_string(x.values.size()));
  const int m = x.observed_count();
  const int K = static_cast<int>(U.cols());
  Eigen::MatrixXd A(m, K);
  Eigen::VectorXd b(m);
  for (int t = 0; t < m; ++t) {
    A.row(t) = U.row(x.omega[t]);
    b[t] = x.values[x.omega[t]];
  }
  const double signal_norm = b.norm();
  if (signal_norm == 0.0)
    throw DataError("project_weights: signal '" + x.system_id + "' has zero observed norm");
  Eigen::VectorXd w = detail::lsq_min_norm(A, b);
  const double residual_norm = (A * w - b).norm();
  return ProjectionResult{std::move(w), residual_norm, signal_norm};
}

// Complete a signal on the tracked subspace: observed entries are copied,
// unobserved entries read from U w.
inline Eigen::VectorXd impute(const Eigen::MatrixXd& U, const Eigen::VectorXd& w,
                              const ObservedSignal& x) {
  if (U.cols() != w.size())
    throw StructuralError("impute: weight length " + std::to_string(w.size()) +
                          " does not match basis rank " + std::to_string(U.cols()));
  Eigen::VectorXd full = U * w;
  for (int i : x.omega) full[i] = x.values[i];
  return full;
}

struct UpdateOutcome {
  bool applied;          // false when the residual was below the skip threshold
  Eigen::VectorXd w;     // projection weights against the pre-update basis
  double residual_norm;  // projection residual against the pre-update basis
  double signal_norm;    // observed-entry norm of the signal
};

// One incremental update of the basis by one (possibly incomplete) signal.
inline UpdateOutcome update_basis(SubspaceBasis& basis, const ObservedSignal& x) {
  ProjectionResult proj = project_weights(basis.U, x);
  const int K = basis.rank();
  Eigen::VectorXd xt = impute(basis.U, proj.w, x);
  const double rnorm = proj.residual_norm;  // r vanishes off O, so ||r|| = ||r^O||
  if (rnorm <= kSkipThreshold * xt.norm())
    return UpdateOutcome{false, std::move(proj.w), rnorm, proj.signal_norm};

  Eigen::VectorXd r = xt - basis.U * proj.w;  // supported on O up to roundoff

  // Top-K left singular directions of the arrow matrix M = [[I, w], [0, rho]]
  // via the eigendecomposition of its O(K^2)-assembled Gram matrix.  The K
  // retained singular values interlace above 1, so M v / sigma is stable.
  Eigen::MatrixXd gram(K + 1, K + 1);
  gram.setIdentity();
  gram.topRightCorner(K, 1) = proj.w;
  gram.bottomLeftCorner(1, K) = proj.w.transpose();
  gram(K, K) = proj.w.squaredNorm() + rnorm * rnorm;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
  if (es.info() != Eigen::Success)
    throw StructuralError("update_basis: eigensolver failed on the update Gram matrix");

  Eigen::MatrixXd rot(K + 1, K);  // columns ordered by descending singular value
  for (int j = 0; j < K; ++j) {
    const Eigen::VectorXd& v = es.eigenvectors().col(K - j);  // ascending -> descending
    const double sigma = std::sqrt(std::max(es.eigenvalues()[K - j], 0.0));
    // M v = [v_head + w v_last; rho v_last]
    rot.col(j).head(K) = (v.head(K) + proj.w * v[K]) / sigma;
    rot(K, j) = rnorm * v[K] / sigma;
  }

  Eigen::MatrixXd ext(basis.dim(), K + 1);
  ext.leftCols(K) = basis.U;
  ext.col(K) = r / rnorm;
  basis.U = ext * rot;
  return UpdateOutcome{true, std::move(proj.w), rnorm, proj.signal_norm};
}

// Basis plus the bookkeeping shared by every sweep driver (single-node and
// federated): the applied-update counter that triggers periodic QR passes.
class SubspaceTracker {
 public:
  SubspaceTracker(SubspaceBasis basis, long applied_updates = 0)
      : basis_(std::move(basis)), applied_(applied_updates) {}

  UpdateOutcome process(const ObservedSignal& x) {
    UpdateOutcome out = update_basis(basis_, x);
    if (out.applied && ++applied_ % kReorthPeriod == 0)
      basis_.U = orthonormalize(basis_.U);
    return out;
  }

  const SubspaceBasis& basis() const { return basis_; }
  SubspaceBasis& basis() { return basis_; }
  long applied_updates() const { return applied_; }

 private:
  SubspaceBasis basis_;
  long applied_;
};

struct TrackOptions {
  int max_sweeps = 100;
  double conv_eps = 1e-6;      // stop when the summed relative residual e < conv_eps
  double stability_eps = 0.0;  // optional: stop when the per-sweep subspace movement
                               // (chordal distance) drops below this; 0 disables
};

struct TrackResult {
  SubspaceBasis basis;
  std::vector<double> sweep_errors;  // e per executed sweep
  int sweeps = 0;
  bool converged = false;
  std::string stop_reason;  // "residual", "stability", or "max_sweeps"
};

// Single-node tracking loop: repeated sweeps over the signals in order.
inline TrackResult track_subspace(const std::vector<const ObservedSignal*>& signals, int K,
                                  std::uint64_t seed, const TrackOptions& opt = {}) {
  if (signals.empty()) throw ArgumentError("track_subspace: no signals");
  const int N = static_cast<int>(signals.front()->values.size());
  SubspaceTracker tracker(init_subspace(N, K, seed));
  TrackResult res;
  for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
    Eigen::MatrixXd U_before;
    if (opt.stability_eps > 0.0) U_before = tracker.basis().U;
    double e = 0.0;
    for (const ObservedSignal* s : signals) {
      UpdateOutcome out = tracker.process(*s);
      if (out.signal_norm == 0.0)
        throw DataError("track_subspace: zero-norm signal '" + s->system_id + "'");
      e += out.residual_norm / out.signal_norm;
    }
    res.sweep_errors.push_back(e);
    res.sweeps = sweep + 1;
    if (e < opt.conv_eps) {
      res.converged = true;
      res.stop_reason = "residual";
      break;
    }
    if (opt.stability_eps > 0.0) {
      double affinity = (U_before.transpose() * tracker.basis().U).squaredNorm();
      double movement = std::sqrt(std::max(0.0, static_cast<double>(K) - affinity));
      if (movement < opt.stability_eps) {
        res.converged = true;
        res.stop_reason = "stability";
        break;
      }
    }
  }
  if (res.stop_reason.empty()) res.stop_reason = "max_sweeps";
  res.basis = tracker.basis();
  return res;
}

// Summed relative projection residual of a signal collection against a fixed
// basis (the convergence functional, evaluated without updating).
inline double total_residual(const Eigen::MatrixXd& U,
                             const std::vector<const ObservedSignal*>& signals) {
  double e = 0.0;
  for (const ObservedSignal* s : signals) {
    ProjectionResult p = project_weights(U, *s);
    if (p.signal_norm == 0.0)
      throw DataError("total_residual: zero-norm signal '" + s->system_id + "'");
    e += p.residual_norm / p.signal_norm;
  }
  return e;
}

// ---- binary checkpoint ---------------------------------------------------------
// Layout (little-endian): magic "FPSB", u8 version, u32 N, u32 K, N*K f64 row-major.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

inline std::uint32_t get_u32(const std::string& in, size_t& pos, const std::string& what) {
  if (pos + 4 > in.size()) throw ParseError("truncated " + what);
  std::uint32_t v;
  std::memcpy(&v, in.data() + pos, 4);
  pos += 4;
  return v;
}

inline void put_f64(std::string& out, double v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

inline double get_f64(const std::string& in, size_t& pos, const std::string& what) {
  if (pos + 8 > in.size()) throw ParseError("truncated " + what);
  double v;
  std::memcpy(&v, in.data() + pos, 8);
  pos += 8;
  return v;
}

}  // namespace detail

inline std::string serialize_basis(const SubspaceBasis& basis) {
  std::string out;
  out.append("FPSB", 4);
  out.push_back(static_cast<char>(1));
  detail::put_u32(out, static_cast<std::uint32_t>(basis.dim()));
  detail::put_u32(out, static_cast<std::uint32_t>(basis.rank()));
  for (int i = 0; i < basis.dim(); ++i)
    for (int k = 0; k < basis.rank(); ++k) detail::put_f64(out, basis.U(i, k));
  return out;
}

inline SubspaceBasis deserialize_basis(const std::string& bytes, const std::string& origin) {
  size_t pos = 0;
  if (bytes.size() < 5 || bytes.compare(0, 4, "FPSB") != 0)
    throw ParseError(origin + ": not a basis checkpoint (bad magic)");
  pos = 4;
  const unsigned version = static_cast<unsigned char>(bytes[pos++]);
  if (version != 1)
    throw ParseError(origin + ": unsupported basis checkpoint version " + std::to_string(version));
  const std::uint32_t N = detail::get_u32(bytes, pos, origin + " header");
  const std::uint32_t K = detail::get_u32(bytes, pos, origin + " header");
  if (N == 0 || K == 0 || K > N)
    throw ParseError(origin + ": implausible basis shape " + std::to_string(N) + "x" +
                     std::to_string(K));
  if (bytes.size() != pos + static_cast<size_t>(N) * K * 8)
    throw ParseError(origin + ": payload size does not match " + std::to_string(N) + "x" +
                     std::to_string(K) + " doubles");
  SubspaceBasis basis{Eigen::MatrixXd(N, K)};
  for (std::uint32_t i = 0; i < N; ++i)
    for (std::uint32_t k = 0; k < K; ++k) basis.U(i, k) = detail::get_f64(bytes, pos, origin);
  return basis;
}

inline void save_basis(const SubspaceBasis& basis, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open " + path.string() + " for writing");
  const std::string bytes = serialize_basis(basis);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline SubspaceBasis load_basis(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open basis checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_basis(bytes, path.string());
}

}  // namespace fedprog
