#pragma once

// Choosing the subspace dimension / number of retained score dimensions.
//
// The selected quantity K plays a double role: it is both the rank of the
// tracked dominant subspace and the number of score components fed to the
// regression.  Two selectors:
//   * fixed-variance-explained: smallest k whose cumulative squared singular
//     values reach a threshold of the total (delegates to fve_select);
//   * M-fold cross-validation: each participant deals its own systems into M
//     folds (seeded locally, so the assignment is invariant to roster order);
//     for every fold and every candidate k the full training pipeline is
//     re-run on the fold-training systems at subspace rank k — tracking,
//     score computation, and a regression fit — and the held-out systems are
//     scored against that basis and predicted.  The k with the smallest
//     pooled mean relative prediction error wins; ties go to the smaller k.
//
// Re-running the tracker per candidate matters: a rank-k tracker regularizes
// the completion of missing entries, so small candidates are judged on their
// own clean basis rather than on a truncation of a higher-rank one.
//
// Participants with fewer systems than folds sit out the cross-validation
// (their data would starve a fold) and simply rejoin the final training run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fedprog/errors.hpp"
#include "fedprog/lls.hpp"
#include "fedprog/math.hpp"
#include "fedprog/scores.hpp"
#include "fedprog/signals.hpp"
#include "fedprog/subspace.hpp"

namespace fedprog {

struct CVPlan {
  int folds = 5;
  std::vector<int> candidates;  // empty: try 1..min(10, feasible maximum)
  Family family = Family::lognormal;
  std::uint64_t seed = 42;
  // Controls for the per-fold, per-candidate tracking loops.  The residual
  // criterion cannot fire at rank k below the number of signals, so the
  // stability (subspace-movement) criterion is the effective stop.
  TrackOptions track{300, 0.0, 1e-6};
  FitOptions fit;  // controls for the per-fold regression fits
};

struct CVResult {
  int selected_k = 0;
  std::vector<int> candidates;
  std::vector<double> mean_errors;     // pooled mean relative error per candidate
  std::vector<bool> candidate_ok;      // false when a fold's fit failed to converge
  std::vector<int> heldout_per_fold;   // diagnostics
  std::vector<std::string> excluded;   // participants that sat out (too few systems)
};

// Smallest k explaining at least `threshold` of the score variance.
inline int choose_k_fve(const ScoreBundle& bundle, double threshold = 0.9) {
  if (!(threshold > 0.0) || threshold > 1.0)
    throw ArgumentError("choose_k_fve: threshold must be in (0, 1], got " +
                        std::to_string(threshold));
  return fve_select(bundle.singular_values, threshold);
}

namespace detail {

// Deal a participant's system indices into `folds` folds: locally seeded
// shuffle, then round-robin.  Depends only on the participant's own id and
// size, never on the roster.
inline std::vector<int> fold_assignment(const std::string& participant_id, int n, int folds,
                                        std::uint64_t seed) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, hash_name(participant_id)));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> fold_of(n);
  for (int j = 0; j < n; ++j) fold_of[order[j]] = j % folds;
  return fold_of;
}

}  // namespace detail

inline CVResult cross_validate_k(const std::vector<const LocalDataset*>& roster,
                                 const CVPlan& plan) {
  if (plan.folds < 2)
    throw ArgumentError("cross_validate_k: need at least 2 folds, got " +
                        std::to_string(plan.folds));
  if (roster.empty()) throw ArgumentError("cross_validate_k: empty roster");
  for (const LocalDataset* ds : roster) {
    if (!ds) throw ArgumentError("cross_validate_k: null dataset in roster");
    ds->validate();
  }

  CVResult result;
  std::vector<const LocalDataset*> active;
  for (const LocalDataset* ds : roster) {
    if (ds->size() < plan.folds)
      result.excluded.push_back(ds->participant_id);
    else
      active.push_back(ds);
  }
  if (active.empty())
    throw ConfigError("cross_validate_k: every participant has fewer systems than the " +
                      std::to_string(plan.folds) + " folds");

  const int N = active.front()->grid.total();
  for (const LocalDataset* ds : active)
    if (ds->grid.total() != N)
      throw StructuralError("cross_validate_k: participant '" + ds->participant_id +
                            "' uses a different sensor grid");

  // Fold assignments and per-fold training sizes.
  std::vector<std::vector<int>> fold_of(active.size());
  std::vector<int> fold_train_n(plan.folds, 0), fold_held_n(plan.folds, 0);
  for (size_t p = 0; p < active.size(); ++p) {
    fold_of[p] =
        detail::fold_assignment(active[p]->participant_id, active[p]->size(), plan.folds, plan.seed);
    for (int f : fold_of[p]) ++fold_held_n[f];
  }
  int total_n = 0;
  for (size_t p = 0; p < active.size(); ++p) total_n += active[p]->size();
  for (int f = 0; f < plan.folds; ++f) fold_train_n[f] = total_n - fold_held_n[f];

  // Feasibility: a candidate k needs k + 2 training responses and a tracker
  // of at least k columns in every fold.
  int feasible = std::numeric_limits<int>::max();
  for (int f = 0; f < plan.folds; ++f)
    feasible = std::min(feasible, std::min(N, fold_train_n[f] - 2));
  if (feasible < 1)
    throw ConfigError("cross_validate_k: too few systems (" + std::to_string(total_n) +
                      ") for " + std::to_string(plan.folds) + "-fold selection");

  std::vector<int> candidates = plan.candidates;
  if (candidates.empty()) {
    for (int k = 1; k <= std::min(10, feasible); ++k) candidates.push_back(k);
  } else {
    std::set<int> unique;
    for (int k : candidates) {
      if (k < 1) throw ArgumentError("cross_validate_k: candidate k must be >= 1");
      if (k <= feasible) unique.insert(k);
    }
    candidates.assign(unique.begin(), unique.end());
    if (candidates.empty())
      throw ConfigError("cross_validate_k: no candidate is feasible (max feasible k is " +
                        std::to_string(feasible) + ")");
  }
  std::vector<double> error_sum(candidates.size(), 0.0);
  std::vector<bool> ok(candidates.size(), true);
  int heldout_total = 0;

  for (int f = 0; f < plan.folds; ++f) {
    // Fold-training datasets and the held-out list.
    std::vector<LocalDataset> train(active.size());
    struct Heldout {
      const ObservedSignal* signal;
      double ttf;
    };
    std::vector<Heldout> heldout;
    for (size_t p = 0; p < active.size(); ++p) {
      train[p].participant_id = active[p]->participant_id;
      train[p].grid = active[p]->grid;
      for (int j = 0; j < active[p]->size(); ++j) {
        if (fold_of[p][j] == f) {
          heldout.push_back({&active[p]->signals[j], active[p]->ttfs[j]});
        } else {
          train[p].signals.push_back(active[p]->signals[j]);
          train[p].ttfs.push_back(active[p]->ttfs[j]);
        }
      }
    }
    if (heldout.empty()) continue;
    result.heldout_per_fold.push_back(static_cast<int>(heldout.size()));
    heldout_total += static_cast<int>(heldout.size());

    std::vector<const ObservedSignal*> pool;
    for (const LocalDataset& ds : train)
      for (const ObservedSignal& s : ds.signals) pool.push_back(&s);

    for (size_t c = 0; c < candidates.size(); ++c) {
      if (!ok[c]) continue;
      const int k = candidates[c];
      // The full pipeline is re-run at subspace rank k for this fold.
      TrackResult tracked = track_subspace(pool, k, mix_seed(plan.seed, 9001 + f), plan.track);
      std::vector<WeightBlock> blocks;
      for (const LocalDataset& ds : train)
        if (!ds.signals.empty()) blocks.push_back(local_weights(tracked.basis, ds));
      ScoreBundle bundle = server_scores(blocks);
      canonicalize_bundle_signs(bundle, tracked.basis);

      std::vector<ScoreShard> shards;
      size_t at = 0;
      for (const LocalDataset& ds : train) {
        if (ds.signals.empty()) continue;
        const ScoreBlock& blk = bundle.blocks.at(at++);
        ScoreShard sh;
        sh.participant_id = ds.participant_id;
        sh.z = blk.Z;
        sh.ttf = Eigen::Map<const Eigen::VectorXd>(ds.ttfs.data(),
                                                   static_cast<int>(ds.ttfs.size()));
        shards.push_back(std::move(sh));
      }
      try {
        LLSModel model = federated_fit(shards, plan.family, plan.fit);
        for (const Heldout& h : heldout) {
          const Eigen::VectorXd z = score_new_signal(bundle, tracked.basis, *h.signal);
          const double pred = predict_ttf(model, z);
          error_sum[c] += relative_error(pred, h.ttf);
        }
      } catch (const DiagnosticError&) {
        ok[c] = false;  // a non-converging candidate is disqualified
      }
    }
  }

  if (heldout_total == 0)
    throw ConfigError("cross_validate_k: no held-out systems in any fold");

  result.candidates = candidates;
  result.mean_errors.resize(candidates.size());
  result.candidate_ok.assign(ok.begin(), ok.end());
  int best = -1;
  for (size_t c = 0; c < candidates.size(); ++c) {
    result.mean_errors[c] =
        ok[c] ? error_sum[c] / heldout_total : std::numeric_limits<double>::infinity();
    if (ok[c] && (best < 0 || result.mean_errors[c] < result.mean_errors[best])) {
      best = static_cast<int>(c);
    }
  }
  if (best < 0)
    throw DiagnosticError("cross_validate_k: no candidate produced a convergent fit");
  result.selected_k = candidates[best];
  return result;
}

}  // namespace fedprog
