#pragma once

// Federated MFPC-score computation.
//
// Each participant projects its signals onto the shared basis U and ships only
// the K x J_i weight block.  The server centers the pooled weights, takes the
// SVD  W - wbar 1' = P D Q', and returns per-participant score blocks
// Z_i = P' (W_i - wbar 1') together with (P, wbar, D).  When the centered
// dominant subspace of the data lies inside span(U), these scores coincide
// with the centralized MFPCA scores and U P spans the same dominant directions
// -- the server never needs raw signals.

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fedprog/baseline.hpp"
#include "fedprog/errors.hpp"
#include "fedprog/signals.hpp"
#include "fedprog/subspace.hpp"

namespace fedprog {

struct WeightBlock {
  std::string participant_id;
  std::vector<std::string> system_ids;  // J_i entries
  Eigen::MatrixXd W;                    // K x J_i
};

// Project every signal of a participant onto the shared basis.
inline WeightBlock local_weights(const SubspaceBasis& basis, const LocalDataset& ds) {
  ds.validate();
  WeightBlock block;
  block.participant_id = ds.participant_id;
  block.W.resize(basis.rank(), ds.size());
  for (int j = 0; j < ds.size(); ++j) {
    block.W.col(j) = project_weights(basis.U, ds.signals[j]).w;
    block.system_ids.push_back(ds.signals[j].system_id);
  }
  return block;
}

struct ScoreBlock {
  std::string participant_id;
  std::vector<std::string> system_ids;
  Eigen::MatrixXd Z;  // K x J_i
};

struct ScoreBundle {
  Eigen::MatrixXd P;                // K x K orthogonal rotation
  Eigen::VectorXd mean_weight;      // K  (wbar)
  Eigen::VectorXd singular_values;  // K, nonincreasing, zero-padded when J < K
  std::vector<ScoreBlock> blocks;

  int rank() const { return static_cast<int>(P.rows()); }

  int total_systems() const {
    int j = 0;
    for (const auto& b : blocks) j += static_cast<int>(b.Z.cols());
    return j;
  }
};

// Server step: center pooled weights, rotate onto their principal axes.
inline ScoreBundle server_scores(const std::vector<WeightBlock>& blocks) {
  if (blocks.empty()) throw ArgumentError("server_scores: no weight blocks");
  const int K = static_cast<int>(blocks.front().W.rows());
  int J = 0;
  for (const auto& b : blocks) {
    if (static_cast<int>(b.W.rows()) != K)
      throw StructuralError("server_scores: weight block from '" + b.participant_id +
                            "' has rank " + std::to_string(b.W.rows()) + ", expected " +
                            std::to_string(K));
    if (b.system_ids.size() != static_cast<size_t>(b.W.cols()))
      throw StructuralError("server_scores: weight block from '" + b.participant_id +
                            "' has mismatched system-id list");
    J += static_cast<int>(b.W.cols());
  }
  if (J < 2)
    throw ArgumentError("server_scores: need at least 2 pooled systems, got " + std::to_string(J));

  Eigen::MatrixXd W(K, J);
  int at = 0;
  for (const auto& b : blocks) {
    W.middleCols(at, b.W.cols()) = b.W;
    at += static_cast<int>(b.W.cols());
  }
  ScoreBundle out;
  out.mean_weight = W.rowwise().mean();
  Eigen::MatrixXd centered = W.colwise() - out.mean_weight;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeFullU);
  out.P = svd.matrixU();  // K x K
  out.singular_values = Eigen::VectorXd::Zero(K);
  out.singular_values.head(svd.singularValues().size()) = svd.singularValues();
  Eigen::MatrixXd Z = out.P.transpose() * centered;
  at = 0;
  for (const auto& b : blocks) {
    out.blocks.push_back(ScoreBlock{b.participant_id, b.system_ids,
                                    Z.middleCols(at, b.W.cols())});
    at += static_cast<int>(b.W.cols());
  }
  return out;
}

// Apply the shared sign canon to the bundle: each column of the effective
// component matrix U P gets a positive largest-magnitude entry.  Flipping a
// column of P flips the matching score row in every block.  Any holder of the
// shared basis can apply this; it is deterministic.
inline void canonicalize_bundle_signs(ScoreBundle& bundle, const SubspaceBasis& basis) {
  if (basis.rank() != bundle.rank())
    throw StructuralError("canonicalize_bundle_signs: basis rank " + std::to_string(basis.rank()) +
                          " does not match bundle rank " + std::to_string(bundle.rank()));
  Eigen::MatrixXd effective = basis.U * bundle.P;
  for (int k = 0; k < bundle.rank(); ++k) {
    Eigen::Index at = 0;
    effective.col(k).cwiseAbs().maxCoeff(&at);
    if (effective(at, k) < 0.0) {
      bundle.P.col(k) = -bundle.P.col(k);
      for (auto& b : bundle.blocks) b.Z.row(k) = -b.Z.row(k);
    }
  }
}

// Smallest component count whose cumulative squared singular values reach the
// given fraction of the total.
inline int fve_select(const Eigen::VectorXd& singular_values, double threshold = 0.9) {
  if (singular_values.size() == 0) throw ArgumentError("fve_select: empty spectrum");
  if (!(threshold > 0.0 && threshold <= 1.0))
    throw ArgumentError("fve_select: threshold must lie in (0,1], got " + std::to_string(threshold));
  const double total = singular_values.array().square().sum();
  if (total == 0.0) throw ArgumentError("fve_select: all singular values are zero");
  double cum = 0.0;
  for (int k = 0; k < singular_values.size(); ++k) {
    cum += singular_values[k] * singular_values[k];
    if (cum / total >= threshold) return k + 1;
  }
  return static_cast<int>(singular_values.size());
}

// Score a previously unseen signal against a trained (basis, bundle) pair.
// Least-squares scores of an incomplete signal against explicit principal
// directions and a mean function, using only the observed rows.
inline Eigen::VectorXd score_against_directions(const Eigen::MatrixXd& phi,
                                                const Eigen::VectorXd& mean,
                                                const ObservedSignal& x) {
  if (phi.rows() != x.values.size() || mean.size() != x.values.size())
    throw StructuralError("score_against_directions: direction/mean length does not match "
                          "signal '" + x.system_id + "'");
  const int m = x.observed_count();
  if (m < 1) throw DataError("score_against_directions: signal '" + x.system_id +
                             "' has no observations");
  const int k = static_cast<int>(phi.cols());
  Eigen::MatrixXd A(m, k);
  Eigen::VectorXd b(m);
  for (int t = 0; t < m; ++t) {
    A.row(t) = phi.row(x.omega[t]);
    b[t] = x.values[x.omega[t]] - mean[x.omega[t]];
  }
  if (b.norm() == 0.0) return Eigen::VectorXd::Zero(k);
  return detail::lsq_min_norm(A, b);
}

// Scores of a new (possibly incomplete) signal: solve against the first k
// effective directions U P only, so the estimate uses k parameters rather
// than the full tracker rank.  k < 0 means the full rank.
inline Eigen::VectorXd score_new_signal(const ScoreBundle& bundle, const SubspaceBasis& basis,
                                        const ObservedSignal& x, int k = -1) {
  if (basis.rank() != bundle.rank())
    throw StructuralError("score_new_signal: basis rank does not match bundle rank");
  if (k < 0) k = bundle.rank();
  if (k < 1 || k > bundle.rank())
    throw ArgumentError("score_new_signal: k must lie in [1," + std::to_string(bundle.rank()) +
                        "], got " + std::to_string(k));
  const Eigen::MatrixXd phi = basis.U * bundle.P.leftCols(k);
  const Eigen::VectorXd mean = basis.U * bundle.mean_weight;
  return score_against_directions(phi, mean, x);
}

// ---- binary bundle serialization ------------------------------------------------
// Layout (little-endian): magic "FPSC", u8 version, u32 K, P (KxK row-major f64),
// wbar (K f64), d (K f64), u32 block_count, then per block: u32 len + participant
// id, u32 J_i, J_i x (u32 len + system id), Z_i (KxJ_i row-major f64).

inline std::string serialize_bundle(const ScoreBundle& b) {
  std::string out;
  out.append("FPSC", 4);
  out.push_back(static_cast<char>(1));
  const int K = b.rank();
  detail::put_u32(out, static_cast<std::uint32_t>(K));
  for (int i = 0; i < K; ++i)
    for (int k = 0; k < K; ++k) detail::put_f64(out, b.P(i, k));
  for (int k = 0; k < K; ++k) detail::put_f64(out, b.mean_weight[k]);
  for (int k = 0; k < K; ++k) detail::put_f64(out, b.singular_values[k]);
  detail::put_u32(out, static_cast<std::uint32_t>(b.blocks.size()));
  for (const auto& blk : b.blocks) {
    detail::put_u32(out, static_cast<std::uint32_t>(blk.participant_id.size()));
    out += blk.participant_id;
    detail::put_u32(out, static_cast<std::uint32_t>(blk.Z.cols()));
    for (const auto& id : blk.system_ids) {
      detail::put_u32(out, static_cast<std::uint32_t>(id.size()));
      out += id;
    }
    for (int i = 0; i < K; ++i)
      for (int j = 0; j < blk.Z.cols(); ++j) detail::put_f64(out, blk.Z(i, j));
  }
  return out;
}

inline ScoreBundle deserialize_bundle(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 5 || bytes.compare(0, 4, "FPSC") != 0)
    throw ParseError(origin + ": not a score bundle (bad magic)");
  size_t pos = 4;
  const unsigned version = static_cast<unsigned char>(bytes[pos++]);
  if (version != 1)
    throw ParseError(origin + ": unsupported score bundle version " + std::to_string(version));
  const std::uint32_t K = detail::get_u32(bytes, pos, origin);
  if (K == 0 || K > 100000) throw ParseError(origin + ": implausible bundle rank");
  ScoreBundle b;
  b.P.resize(K, K);
  for (std::uint32_t i = 0; i < K; ++i)
    for (std::uint32_t k = 0; k < K; ++k) b.P(i, k) = detail::get_f64(bytes, pos, origin);
  b.mean_weight.resize(K);
  for (std::uint32_t k = 0; k < K; ++k) b.mean_weight[k] = detail::get_f64(bytes, pos, origin);
  b.singular_values.resize(K);
  for (std::uint32_t k = 0; k < K; ++k) b.singular_values[k] = detail::get_f64(bytes, pos, origin);
  const std::uint32_t nblocks = detail::get_u32(bytes, pos, origin);
  auto get_string = [&](const char* what) {
    std::uint32_t len = detail::get_u32(bytes, pos, origin + std::string(" ") + what);
    if (pos + len > bytes.size()) throw ParseError(origin + ": truncated " + what);
    std::string s = bytes.substr(pos, len);
    pos += len;
    return s;
  };
  for (std::uint32_t t = 0; t < nblocks; ++t) {
    ScoreBlock blk;
    blk.participant_id = get_string("participant id");
    const std::uint32_t J = detail::get_u32(bytes, pos, origin);
    for (std::uint32_t j = 0; j < J; ++j) blk.system_ids.push_back(get_string("system id"));
    blk.Z.resize(K, J);
    for (std::uint32_t i = 0; i < K; ++i)
      for (std::uint32_t j = 0; j < J; ++j) blk.Z(i, j) = detail::get_f64(bytes, pos, origin);
    b.blocks.push_back(std::move(blk));
  }
  if (pos != bytes.size()) throw ParseError(origin + ": trailing bytes after score bundle");
  return b;
}

inline void save_bundle(const ScoreBundle& b, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open " + path.string() + " for writing");
  const std::string bytes = serialize_bundle(b);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline ScoreBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open score bundle " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_bundle(bytes, path.string());
}

}  // namespace fedprog
