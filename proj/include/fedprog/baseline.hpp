#pragma once

// Centralized multivariate FPCA on a complete signal matrix, plus the
// aggregate-impute-decompose pipeline used as the non-federated benchmark.
// These routines double as the independent oracle the federated score path is
// checked against.

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <string>
#include <vector>

#include "fedprog/errors.hpp"
#include "fedprog/signals.hpp"
#include "fedprog/subspace.hpp"

namespace fedprog {

struct SignalMatrix {
  Eigen::MatrixXd data;                 // N x J, complete
  std::vector<std::string> column_ids;  // size J
};

struct CentralFactors {
  Eigen::VectorXd mean;          // N
  Eigen::MatrixXd eigenvectors;  // N x K, orthonormal, sign-canonical
  Eigen::VectorXd eigenvalues;   // K, nonincreasing (squared singular values)
  Eigen::MatrixXd scores;        // K x J
};

// Sign canon: make each column's largest-magnitude entry positive (first
// occurrence on ties); the paired score row flips with the column.
inline void canonicalize_column_signs(Eigen::MatrixXd& cols, Eigen::MatrixXd* paired_rows) {
  for (Eigen::Index k = 0; k < cols.cols(); ++k) {
    Eigen::Index at = 0;
    cols.col(k).cwiseAbs().maxCoeff(&at);
    if (cols(at, k) < 0.0) {
      cols.col(k) = -cols.col(k);
      if (paired_rows) paired_rows->row(k) = -paired_rows->row(k);
    }
  }
}

// Classic sample MFPCA: center columns, thin SVD, keep the top K left singular
// vectors; scores are their inner products with the centered columns.
inline CentralFactors central_mfpca(const SignalMatrix& X, int K) {
  const Eigen::Index N = X.data.rows(), J = X.data.cols();
  if (J < 2) throw ArgumentError("central_mfpca: need at least 2 signals, got " + std::to_string(J));
  if (!X.data.allFinite())
    throw StructuralError("central_mfpca: signal matrix has non-finite entries (incomplete input?)");
  const int kmax = static_cast<int>(std::min<Eigen::Index>(N, J - 1));
  if (K < 1 || K > kmax)
    throw ArgumentError("central_mfpca: K must lie in [1," + std::to_string(kmax) + "], got " +
                        std::to_string(K));

  CentralFactors f;
  f.mean = X.data.rowwise().mean();
  Eigen::MatrixXd centered = X.data.colwise() - f.mean;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinU);
  f.eigenvectors = svd.matrixU().leftCols(K);
  f.eigenvalues = svd.singularValues().head(K).array().square();
  f.scores = f.eigenvectors.transpose() * centered;
  canonicalize_column_signs(f.eigenvectors, &f.scores);
  return f;
}

// Pool every participant's signals (roster order) into one incomplete matrix,
// complete it with the subspace tracker run on the pooled data, and apply
// central_mfpca to the completed matrix.
//
// `tracker_rank` 0 means min(N, J): enough room for the tracked span to
// interpolate every signal, which drives the completion residuals to ~0.
struct ImputedCentral {
  CentralFactors factors;
  SignalMatrix completed;
  SubspaceBasis basis;          // the tracker's final basis
  TrackResult track;
};

inline ImputedCentral impute_then_centralize(const std::vector<LocalDataset>& datasets, int K,
                                             int tracker_rank = 0, std::uint64_t seed = 0,
                                             const TrackOptions& opt = {}) {
  if (datasets.empty()) throw ArgumentError("impute_then_centralize: no datasets");
  for (const auto& ds : datasets) ds.validate();
  const GridSpec& grid = datasets.front().grid;
  for (const auto& ds : datasets)
    if (!(ds.grid == grid))
      throw StructuralError("impute_then_centralize: participant '" + ds.participant_id +
                            "' is on a different grid");
  std::vector<const ObservedSignal*> pooled;
  std::vector<std::string> ids;
  for (const auto& ds : datasets)
    for (const auto& s : ds.signals) {
      pooled.push_back(&s);
      ids.push_back(s.system_id);
    }
  const int N = grid.total();
  const int J = static_cast<int>(pooled.size());
  if (J < 2)
    throw ArgumentError("impute_then_centralize: need at least 2 pooled signals, got " +
                        std::to_string(J));

  bool complete = true;
  for (const ObservedSignal* s : pooled)
    if (s->observed_count() != N) {
      complete = false;
      break;
    }

  ImputedCentral out;
  out.completed.column_ids = std::move(ids);
  out.completed.data.resize(N, J);
  if (complete) {
    // Imputation is a no-op; copy the columns through untouched.
    for (int j = 0; j < J; ++j) out.completed.data.col(j) = pooled[j]->values;
  } else {
    int rank = tracker_rank > 0 ? tracker_rank : std::min(N, J);
    out.track = track_subspace(pooled, rank, seed, opt);
    out.basis = out.track.basis;
    for (int j = 0; j < J; ++j) {
      ProjectionResult p = project_weights(out.basis.U, *pooled[j]);
      out.completed.data.col(j) = impute(out.basis.U, p.w, *pooled[j]);
    }
  }
  out.factors = central_mfpca(out.completed, K);
  return out;
}

}  // namespace fedprog
