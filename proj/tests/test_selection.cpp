#include <catch2/catch_amalgamated.hpp>

using Catch::Approx;
#include <set>

#include "fedprog/datagen.hpp"
#include "fedprog/selection.hpp"
#include "helpers.hpp"

using namespace fedprog;

TEST_CASE("fold assignment is balanced, covering, and roster-independent") {
  auto folds = detail::fold_assignment("user_1", 23, 5, 42);
  REQUIRE(folds.size() == 23);
  std::vector<int> counts(5, 0);
  for (int f : folds) {
    REQUIRE(f >= 0);
    REQUIRE(f < 5);
    ++counts[f];
  }
  for (int c : counts) {
    REQUIRE(c >= 23 / 5);
    REQUIRE(c <= 23 / 5 + 1);
  }
  REQUIRE(detail::fold_assignment("user_1", 23, 5, 42) == folds);   // deterministic
  REQUIRE(detail::fold_assignment("user_2", 23, 5, 42) != folds);   // id-keyed
  REQUIRE(detail::fold_assignment("user_1", 23, 5, 43) != folds);   // seed-keyed
}

TEST_CASE("variance-explained choice reads the bundle's spectrum") {
  ScoreBundle bundle;
  bundle.singular_values = Eigen::VectorXd(4);
  bundle.singular_values << 10.0, 5.0, 1.0, 0.5;
  // energies: 100, 125, 126, 126.25; fractions 0.7921, 0.9901, 0.99802, 1
  REQUIRE(choose_k_fve(bundle, 0.79) == 1);
  REQUIRE(choose_k_fve(bundle, 0.9) == 2);
  REQUIRE(choose_k_fve(bundle, 0.998) == 3);
  REQUIRE(choose_k_fve(bundle, 0.999) == 4);
  REQUIRE_THROWS_AS(choose_k_fve(bundle, 0.0), ArgumentError);
  REQUIRE_THROWS_AS(choose_k_fve(bundle, 1.2), ArgumentError);
}

namespace {

std::vector<const LocalDataset*> small_roster(StudyData& data) {
  std::vector<const LocalDataset*> roster;
  for (const auto& ds : data.participants) roster.push_back(&ds);
  return roster;
}

StudyData small_study(std::uint64_t seed, std::vector<int> split = {12, 8, 6}) {
  SimConfig cfg;
  cfg.user_split = std::move(split);
  cfg.n_test = 4;
  cfg.step = 8e-3;  // coarse grid keeps the fold trackers cheap
  cfg.missing_fraction = 0.3;
  cfg.seed = seed;
  return generate_study(cfg);
}

}  // namespace

TEST_CASE("cross-validation selects the empirical argmin over candidates") {
  StudyData data = small_study(31);
  CVPlan plan;
  plan.folds = 3;
  plan.candidates = {1, 2, 3};
  plan.track = TrackOptions{20, 1e-6, 1e-5};
  plan.fit.tol = 1e-8;
  CVResult res = cross_validate_k(small_roster(data), plan);

  REQUIRE(res.candidates == std::vector<int>{1, 2, 3});
  REQUIRE(res.mean_errors.size() == 3);
  REQUIRE(res.candidate_ok.size() == 3);
  REQUIRE(res.heldout_per_fold.size() == 3);
  REQUIRE(res.excluded.empty());

  int held_total = 0;
  for (int h : res.heldout_per_fold) held_total += h;
  REQUIRE(held_total == 26);  // every training system held out exactly once

  // the reported winner is the argmin over converged candidates (ties to
  // the smaller k)
  int best = -1;
  for (size_t i = 0; i < res.candidates.size(); ++i) {
    if (!res.candidate_ok[i]) continue;
    if (best < 0 || res.mean_errors[i] < res.mean_errors[best]) best = static_cast<int>(i);
  }
  REQUIRE(best >= 0);
  REQUIRE(res.selected_k == res.candidates[best]);
  for (size_t i = 0; i < res.candidates.size(); ++i)
    if (res.candidate_ok[i]) REQUIRE(res.mean_errors[i] >= 0.0);

  // deterministic end to end
  CVResult again = cross_validate_k(small_roster(data), plan);
  REQUIRE(again.selected_k == res.selected_k);
  REQUIRE(again.mean_errors == res.mean_errors);
}

TEST_CASE("cross-validation respects feasibility") {
  StudyData data = small_study(32);

  SECTION("default candidate grid is nonempty and bounded") {
    CVPlan plan;
    plan.folds = 3;
    plan.track = TrackOptions{15, 1e-6, 1e-4};
    CVResult res = cross_validate_k(small_roster(data), plan);
    REQUIRE_FALSE(res.candidates.empty());
    REQUIRE(res.candidates.front() >= 1);
    REQUIRE(res.candidates.back() <= 10);
    REQUIRE(res.selected_k >= 1);
  }

  SECTION("infeasibly large candidates are dropped") {
    CVPlan plan;
    plan.folds = 3;
    plan.candidates = {2, 500};
    plan.track = TrackOptions{15, 1e-6, 1e-4};
    CVResult res = cross_validate_k(small_roster(data), plan);
    REQUIRE(res.candidates == std::vector<int>{2});
  }

  SECTION("nothing feasible") {
    CVPlan plan;
    plan.folds = 3;
    plan.candidates = {500};
    REQUIRE_THROWS_AS(cross_validate_k(small_roster(data), plan), ConfigError);
  }

  SECTION("fewer than two folds") {
    CVPlan plan;
    plan.folds = 1;
    REQUIRE_THROWS_AS(cross_validate_k(small_roster(data), plan), ArgumentError);
  }

  SECTION("empty roster") {
    CVPlan plan;
    REQUIRE_THROWS_AS(cross_validate_k({}, plan), ArgumentError);
  }
}

TEST_CASE("participants with fewer systems than folds sit out") {
  StudyData data = small_study(33, {12, 8, 2});  // user_3 has 2 < 3 folds
  CVPlan plan;
  plan.folds = 3;
  plan.candidates = {1, 2};
  plan.track = TrackOptions{15, 1e-6, 1e-4};
  CVResult res = cross_validate_k(small_roster(data), plan);
  REQUIRE(res.excluded == std::vector<std::string>{"user_3"});

  int held_total = 0;
  for (int h : res.heldout_per_fold) held_total += h;
  REQUIRE(held_total == 20);  // only the active participants' systems

  SECTION("everyone too small") {
    StudyData tiny = small_study(34, {2, 2});
    CVPlan p2;
    p2.folds = 3;
    REQUIRE_THROWS_AS(cross_validate_k(small_roster(tiny), p2), ConfigError);
  }
}
