#include <catch2/catch_amalgamated.hpp>

using Catch::Approx;

#include "fedprog/baseline.hpp"
#include "helpers.hpp"

using namespace fedprog;

namespace {

SignalMatrix wrap(const Eigen::MatrixXd& X) {
  SignalMatrix m;
  m.data = X;
  for (int j = 0; j < X.cols(); ++j) m.column_ids.push_back("col_" + std::to_string(j));
  return m;
}

}  // namespace

TEST_CASE("pooled factorization recovers exact low-rank structure") {
  const int N = 40, J = 25, r = 3;
  testutil::LowRank d = testutil::lowrank(N, J, r, 17);
  CentralFactors f = central_mfpca(wrap(d.X), r);

  REQUIRE(f.mean.size() == N);
  REQUIRE(f.eigenvectors.rows() == N);
  REQUIRE(f.eigenvectors.cols() == r);
  REQUIRE(f.scores.rows() == r);
  REQUIRE(f.scores.cols() == J);

  // mean is the row mean; directions are orthonormal
  Eigen::VectorXd mean = d.X.rowwise().mean();
  REQUIRE((f.mean - mean).norm() == Approx(0.0).margin(1e-12));
  REQUIRE(orthonormality_error(f.eigenvectors) < 1e-12);

  // scores are projections of the centered data
  Eigen::MatrixXd centered = d.X.colwise() - mean;
  REQUIRE((f.scores - f.eigenvectors.transpose() * centered).norm() <
          1e-10 * centered.norm());

  // rank-r truncation of exactly rank-r centered data is lossless
  REQUIRE((f.eigenvectors * f.scores - centered).norm() < 1e-9 * centered.norm());

  // eigenvalues match the squared singular values of an independent SVD
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered);
  for (int k = 0; k < r; ++k)
    REQUIRE(f.eigenvalues[k] ==
            Approx(svd.singularValues()[k] * svd.singularValues()[k]).epsilon(1e-9));
}

TEST_CASE("column signs are canonical") {
  const int N = 30, J = 12;
  Eigen::MatrixXd X = testutil::random_matrix(N, J, 23);
  CentralFactors f = central_mfpca(wrap(X), 4);

  for (int k = 0; k < 4; ++k) {
    int arg = 0;
    f.eigenvectors.col(k).cwiseAbs().maxCoeff(&arg);
    REQUIRE(f.eigenvectors(arg, k) > 0.0);
  }

  // sign flips leave the reconstruction invariant: flipping a column must
  // flip its score row, so products agree with an un-canonicalized SVD
  Eigen::VectorXd mean = X.rowwise().mean();
  Eigen::MatrixXd centered = X.colwise() - mean;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Eigen::MatrixXd recon_plain = svd.matrixU().leftCols(4) *
                                svd.singularValues().head(4).asDiagonal() *
                                svd.matrixV().leftCols(4).transpose();
  REQUIRE((f.eigenvectors * f.scores - recon_plain).norm() < 1e-9 * centered.norm());
}

TEST_CASE("canonicalize_column_signs flips paired rows") {
  Eigen::MatrixXd cols(3, 2);
  cols << 1, -5, -2, 1, 0.5, 2;
  Eigen::MatrixXd rows = testutil::random_matrix(2, 4, 3);
  Eigen::MatrixXd cols0 = cols, rows0 = rows;
  canonicalize_column_signs(cols, &rows);
  // column 0: largest |entry| is -2 -> flipped; column 1: -5 -> flipped
  REQUIRE((cols.col(0) + cols0.col(0)).norm() == 0.0);
  REQUIRE((cols.col(1) + cols0.col(1)).norm() == 0.0);
  REQUIRE((rows.row(0) + rows0.row(0)).norm() == 0.0);
  REQUIRE((rows.row(1) + rows0.row(1)).norm() == 0.0);
  // idempotent
  Eigen::MatrixXd cols1 = cols;
  canonicalize_column_signs(cols, &rows);
  REQUIRE((cols - cols1).norm() == 0.0);
}

TEST_CASE("pooled factorization rejects bad shapes") {
  Eigen::MatrixXd X = testutil::random_matrix(10, 5, 31);
  REQUIRE_THROWS_AS(central_mfpca(wrap(X), 0), ArgumentError);
  REQUIRE_THROWS_AS(central_mfpca(wrap(X), 5), ArgumentError);  // K > J-1
  REQUIRE_NOTHROW(central_mfpca(wrap(X), 4));
  Eigen::MatrixXd one = testutil::random_matrix(10, 1, 32);
  REQUIRE_THROWS_AS(central_mfpca(wrap(one), 1), ArgumentError);  // J < 2
}

TEST_CASE("impute-then-centralize equals the dense factorization on complete data") {
  const int N = 20, J = 10;
  Eigen::MatrixXd X = testutil::random_matrix(N, J, 41);
  GridSpec grid{{N}};

  LocalDataset a, b;
  a.participant_id = "a";
  a.grid = grid;
  b.participant_id = "b";
  b.grid = grid;
  for (int j = 0; j < J; ++j) {
    auto sig = testutil::column_signal("sys_" + std::to_string(j), X.col(j));
    if (j < 6) {
      a.signals.push_back(sig);
      a.ttfs.push_back(0.5);
    } else {
      b.signals.push_back(sig);
      b.ttfs.push_back(0.5);
    }
  }

  ImputedCentral ic = impute_then_centralize({a, b}, 3);
  CentralFactors direct = central_mfpca(wrap(X), 3);
  REQUIRE((ic.factors.scores - direct.scores).norm() < 1e-12 * direct.scores.norm());
  REQUIRE((ic.factors.eigenvectors - direct.eigenvectors).norm() < 1e-12);
  REQUIRE(ic.completed.column_ids.size() == static_cast<size_t>(J));
}
