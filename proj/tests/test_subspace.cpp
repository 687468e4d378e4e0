#include <catch2/catch_amalgamated.hpp>

using Catch::Approx;

#include "fedprog/subspace.hpp"
#include "helpers.hpp"

using namespace fedprog;
using testutil::TempDir;

TEST_CASE("initial basis is orthonormal and deterministic") {
  SubspaceBasis b = init_subspace(50, 4, 7);
  REQUIRE(b.dim() == 50);
  REQUIRE(b.rank() == 4);
  REQUIRE(orthonormality_error(b.U) < 1e-12);
  REQUIRE((init_subspace(50, 4, 7).U - b.U).norm() == 0.0);
  REQUIRE((init_subspace(50, 4, 8).U - b.U).norm() != 0.0);
  REQUIRE_THROWS_AS(init_subspace(3, 4, 1), ArgumentError);
  REQUIRE_THROWS_AS(init_subspace(3, 0, 1), ArgumentError);
}

TEST_CASE("projection weights match a pseudoinverse oracle") {
  const int N = 60, K = 5;
  Eigen::MatrixXd U = testutil::random_orthonormal(N, K, 2);
  Eigen::VectorXd x = testutil::random_matrix(N, 1, 3).col(0);

  SECTION("well-posed observed set") {
    ObservedSignal s = testutil::column_signal_missing("s", x, 0.4, 4);
    ProjectionResult p = project_weights(U, s);

    Eigen::MatrixXd A(s.observed_count(), K);
    Eigen::VectorXd b(s.observed_count());
    for (int t = 0; t < s.observed_count(); ++t) {
      A.row(t) = U.row(s.omega[t]);
      b[t] = s.values[s.omega[t]];
    }
    Eigen::VectorXd w_oracle = testutil::pinv_solve(A, b);
    REQUIRE((p.w - w_oracle).norm() < 1e-10 * (1.0 + w_oracle.norm()));
    REQUIRE(p.residual_norm == Approx((A * p.w - b).norm()).margin(1e-12));
    REQUIRE(p.signal_norm == Approx(b.norm()).margin(1e-14));

    // least-squares optimality: the residual is orthogonal to the columns
    REQUIRE((A.transpose() * (b - A * p.w)).cwiseAbs().maxCoeff() < 1e-10);
  }

  SECTION("underdetermined observed set takes the minimum-norm solution") {
    ObservedSignal s = make_signal("s", x, {0, 7, 19}, N);  // 3 rows for 5 unknowns
    ProjectionResult p = project_weights(U, s);
    Eigen::MatrixXd A(3, K);
    Eigen::VectorXd b(3);
    for (int t = 0; t < 3; ++t) {
      A.row(t) = U.row(s.omega[t]);
      b[t] = s.values[s.omega[t]];
    }
    Eigen::VectorXd w_oracle = testutil::pinv_solve(A, b);
    REQUIRE((p.w - w_oracle).norm() < 1e-10 * (1.0 + w_oracle.norm()));
    REQUIRE(p.residual_norm < 1e-10);  // interpolates
  }

  SECTION("shape and degenerate input errors") {
    Eigen::VectorXd shorty = testutil::random_matrix(N - 1, 1, 5).col(0);
    REQUIRE_THROWS_AS(project_weights(U, testutil::column_signal("t", shorty)),
                      StructuralError);
    Eigen::VectorXd zero = Eigen::VectorXd::Zero(N);
    REQUIRE_THROWS_AS(project_weights(U, make_signal("z", zero, {1, 2}, N)), DataError);
  }
}

TEST_CASE("imputation copies observed entries and fills from the subspace") {
  const int N = 30, K = 3;
  Eigen::MatrixXd U = testutil::random_orthonormal(N, K, 6);
  Eigen::VectorXd x = testutil::random_matrix(N, 1, 7).col(0);
  ObservedSignal s = testutil::column_signal_missing("s", x, 0.5, 8);
  ProjectionResult p = project_weights(U, s);
  Eigen::VectorXd full = impute(U, p.w, s);

  std::vector<bool> observed(N, false);
  for (int i : s.omega) {
    REQUIRE(full[i] == s.values[i]);  // bit-exact copy
    observed[i] = true;
  }
  Eigen::VectorXd uw = U * p.w;
  for (int i = 0; i < N; ++i)
    if (!observed[i]) REQUIRE(full[i] == uw[i]);

  Eigen::VectorXd badw(K + 1);
  REQUIRE_THROWS_AS(impute(U, badw, s), StructuralError);
}

TEST_CASE("a vector already in the span is skipped") {
  const int N = 25, K = 3;
  SubspaceBasis basis = init_subspace(N, K, 9);
  Eigen::VectorXd inspan = basis.U * Eigen::Vector3d(1.0, -2.0, 0.5);
  Eigen::MatrixXd before = basis.U;
  UpdateOutcome out = update_basis(basis, testutil::column_signal("s", inspan));
  REQUIRE_FALSE(out.applied);
  REQUIRE((basis.U - before).norm() == 0.0);

  SubspaceTracker tracker(basis);
  tracker.process(testutil::column_signal("s", inspan));
  REQUIRE(tracker.applied_updates() == 0);
}

TEST_CASE("an applied update matches the batch rank-1 oracle") {
  // One incremental step treats the current basis (unit weights) plus the
  // completed signal as the data matrix [U | x]; the updated basis must span
  // the top-K left singular space of that matrix.
  const int N = 25, K = 2;
  SubspaceBasis basis = init_subspace(N, K, 10);
  Eigen::MatrixXd before = basis.U;
  Eigen::VectorXd x = testutil::random_matrix(N, 1, 11).col(0);
  UpdateOutcome out = update_basis(basis, testutil::column_signal("s", x));
  REQUIRE(out.applied);
  REQUIRE(orthonormality_error(basis.U) < 1e-10);

  Eigen::MatrixXd D(N, K + 1);
  D.leftCols(K) = before;
  D.col(K) = x;  // complete signal, so the completion is x itself
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(D, Eigen::ComputeThinU);
  Eigen::MatrixXd expect = svd.matrixU().leftCols(K);
  REQUIRE(largest_principal_angle(basis.U, expect) < 1e-7);
}

TEST_CASE("tracking recovers an exact low-rank subspace") {
  const int N = 80, J = 50, r = 3;
  testutil::LowRank d = testutil::lowrank(N, J, r, 12);

  SECTION("complete data") {
    std::vector<ObservedSignal> sigs;
    for (int j = 0; j < J; ++j)
      sigs.push_back(testutil::column_signal("s" + std::to_string(j), d.X.col(j)));
    TrackResult res = track_subspace(testutil::pointers(sigs), r, 13, {});
    REQUIRE(res.converged);
    REQUIRE(res.stop_reason == "residual");
    REQUIRE(res.sweep_errors.back() < 1e-6);
    REQUIRE(largest_principal_angle(res.basis.U, d.U0) < 1e-6);
    REQUIRE(orthonormality_error(res.basis.U) < 1e-10);
  }

  SECTION("30 percent missing") {
    std::vector<ObservedSignal> sigs;
    for (int j = 0; j < J; ++j)
      sigs.push_back(testutil::column_signal_missing("s" + std::to_string(j), d.X.col(j), 0.3,
                                                     100 + j));
    TrackOptions opt;
    opt.max_sweeps = 200;
    TrackResult res = track_subspace(testutil::pointers(sigs), r, 13, opt);
    REQUIRE(res.converged);
    REQUIRE(largest_principal_angle(res.basis.U, d.U0) < 1e-3);
  }

  SECTION("sweep budget exhausts on full-rank noise") {
    std::vector<ObservedSignal> sigs;
    Eigen::MatrixXd noise = testutil::random_matrix(N, 10, 77);
    for (int j = 0; j < 10; ++j)
      sigs.push_back(testutil::column_signal("n" + std::to_string(j), noise.col(j)));
    TrackOptions opt;
    opt.max_sweeps = 3;
    TrackResult res = track_subspace(testutil::pointers(sigs), 2, 13, opt);
    REQUIRE_FALSE(res.converged);
    REQUIRE(res.stop_reason == "max_sweeps");
    REQUIRE(res.sweeps == 3);
    REQUIRE(res.sweep_errors.size() == 3);
  }

  SECTION("stability stop") {
    std::vector<ObservedSignal> sigs;
    for (int j = 0; j < J; ++j)
      sigs.push_back(testutil::column_signal("s" + std::to_string(j), d.X.col(j)));
    TrackOptions opt;
    opt.conv_eps = 0.0;  // never stop on residual
    opt.stability_eps = 1e-6;
    opt.max_sweeps = 500;
    TrackResult res = track_subspace(testutil::pointers(sigs), r, 13, opt);
    REQUIRE(res.converged);
    REQUIRE(res.stop_reason == "stability");
    REQUIRE(res.sweeps < 500);
  }
}

TEST_CASE("orthonormality survives long runs") {
  const int N = 40;
  std::vector<ObservedSignal> sigs;
  Eigen::MatrixXd X = testutil::random_matrix(N, 30, 14);
  for (int j = 0; j < 30; ++j)
    sigs.push_back(testutil::column_signal_missing("s" + std::to_string(j), X.col(j), 0.2,
                                                   200 + j));
  TrackOptions opt;
  opt.max_sweeps = 30;  // 900 updates, crossing several re-orth periods
  opt.conv_eps = 0.0;
  TrackResult res = track_subspace(testutil::pointers(sigs), 4, 15, opt);
  REQUIRE(orthonormality_error(res.basis.U) < 1e-8);
}

TEST_CASE("total_residual sums per-signal relative residuals") {
  const int N = 20;
  Eigen::MatrixXd U = testutil::random_orthonormal(N, 2, 16);
  std::vector<ObservedSignal> sigs;
  Eigen::MatrixXd X = testutil::random_matrix(N, 4, 17);
  for (int j = 0; j < 4; ++j)
    sigs.push_back(testutil::column_signal("s" + std::to_string(j), X.col(j)));
  double expect = 0.0;
  for (const auto& s : sigs) {
    ProjectionResult p = project_weights(U, s);
    expect += p.residual_norm / p.signal_norm;
  }
  REQUIRE(total_residual(U, testutil::pointers(sigs)) == Approx(expect).epsilon(1e-15));
}

TEST_CASE("basis serialization round-trips bitwise") {
  SubspaceBasis b = init_subspace(33, 5, 18);
  std::string bytes = serialize_basis(b);
  SubspaceBasis back = deserialize_basis(bytes, "test");
  REQUIRE(back.dim() == 33);
  REQUIRE(back.rank() == 5);
  REQUIRE((back.U - b.U).norm() == 0.0);
  for (int i = 0; i < b.dim(); ++i)
    for (int k = 0; k < b.rank(); ++k) REQUIRE(back.U(i, k) == b.U(i, k));

  SECTION("file round trip") {
    TempDir tmp("basis");
    save_basis(b, tmp.path / "b.fpsb");
    SubspaceBasis loaded = load_basis(tmp.path / "b.fpsb");
    REQUIRE((loaded.U - b.U).norm() == 0.0);
    REQUIRE_THROWS_AS(load_basis(tmp.path / "nope.fpsb"), ParseError);
  }

  SECTION("corruption is rejected") {
    REQUIRE_THROWS_AS(deserialize_basis(bytes.substr(0, bytes.size() - 3), "test"), ParseError);
    std::string bad = bytes;
    bad[0] = 'X';
    REQUIRE_THROWS_AS(deserialize_basis(bad, "test"), ParseError);
    REQUIRE_THROWS_AS(deserialize_basis("", "test"), ParseError);
  }
}

TEST_CASE("tracking validates its inputs") {
  REQUIRE_THROWS_AS(track_subspace({}, 2, 1, {}), ArgumentError);
  Eigen::VectorXd x = testutil::random_matrix(10, 1, 19).col(0);
  ObservedSignal s = testutil::column_signal("s", x);
  std::vector<const ObservedSignal*> one = {&s};
  REQUIRE_THROWS_AS(track_subspace(one, 11, 1, {}), ArgumentError);  // rank > N
  REQUIRE_THROWS_AS(track_subspace(one, 0, 1, {}), ArgumentError);
}
