#pragma once

// Synthetic degradation studies.
//
// Each system i draws a severity c_i ~ N(c_mean, c_sd^2) (redrawn while
// c <= 0).  Its underlying degradation path is s(t) = -c / ln(t) on t in (0,1),
// which crosses the failure threshold D at the true failure time
// t = exp(-c/D).  The recorded TTF label adds acquisition noise:
// ln y = -c/D + eps, eps ~ N(0, ttf_noise_sd^2).  The sensor samples the path
// on the index grid tau_k = k * step for k = 1 .. floor(t_true/step) (slot 0
// is never observed, and the path physically ends at the true failure time),
// with additive N(0, obs_noise_sd^2) noise; uniform missingness then removes
// a fraction of the observed slots.
//
// Label convention: training participants carry the noisy recorded TTFs
// (that is what a user's maintenance log would hold), while the held-out
// test block carries the true failure times, which are the ground truth that
// prediction errors are measured against.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "fedprog/errors.hpp"
#include "fedprog/math.hpp"
#include "fedprog/signals.hpp"

namespace fedprog {

struct SimConfig {
  double threshold_d = 2.0;
  double c_mean = 1.0;
  double c_sd = 0.5;
  double ttf_noise_sd = 0.025;
  double obs_noise_sd = std::sqrt(0.2);  // N(0, 0.2) observation noise, given as sd
  double step = 15e-4;
  double missing_fraction = 0.0;
  std::vector<int> user_split = {54, 27, 9};
  int n_test = 30;
  std::uint64_t seed = 42;
  std::uint64_t permutation_seed = 0;  // 0: deterministic sequential assignment

  int n_systems() const {
    return std::accumulate(user_split.begin(), user_split.end(), 0) + n_test;
  }

  void validate() const {
    if (!(threshold_d > 0.0)) throw ArgumentError("SimConfig: threshold_d must be positive");
    if (!(c_sd > 0.0) || !(step > 0.0) || ttf_noise_sd < 0.0 || obs_noise_sd < 0.0)
      throw ArgumentError("SimConfig: nonpositive scale parameter");
    if (missing_fraction < 0.0 || missing_fraction >= 1.0)
      throw ArgumentError("SimConfig: missing_fraction must lie in [0,1)");
    if (user_split.empty()) throw ArgumentError("SimConfig: empty user split");
    for (int j : user_split)
      if (j < 1) throw ArgumentError("SimConfig: every user needs at least one system");
    if (n_test < 1) throw ArgumentError("SimConfig: need at least one test system");
  }
};

// Noise-free degradation path value.
inline double underlying_value(double c, double tau) {
  if (!(tau > 0.0 && tau < 1.0))
    throw ArgumentError("underlying_value: tau must lie in (0,1)");
  return -c / std::log(tau);
}

struct GeneratedSystem {
  double c = 0.0;
  double ttf = 0.0;       // recorded (noisy) TTF label: exp(-c/D + eps)
  double ttf_true = 0.0;  // actual threshold-crossing time: exp(-c/D)
  std::vector<double> values;  // samples at tau_k = k*step, k = 1..floor(ttf_true/step)
};

// One system's TTF and truncated sample path; deterministic in (c, cfg, seed).
inline GeneratedSystem generate_system(double c, const SimConfig& cfg, std::uint64_t seed) {
  if (!(c > 0.0)) throw ArgumentError("generate_system: severity c must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  GeneratedSystem sys;
  sys.c = c;
  sys.ttf = std::exp(-c / cfg.threshold_d + cfg.ttf_noise_sd * gauss(rng));
  sys.ttf_true = std::exp(-c / cfg.threshold_d);
  const int L = static_cast<int>(std::floor(sys.ttf_true / cfg.step));
  if (L < 1)
    throw DataError("generate_system: drawn TTF " + std::to_string(sys.ttf_true) +
                    " is below one grid step; resample");
  if (sys.ttf_true >= 1.0)
    throw DataError("generate_system: drawn TTF " + std::to_string(sys.ttf_true) +
                    " reaches the end of the observable horizon; resample");
  sys.values.reserve(L);
  for (int k = 1; k <= L; ++k)
    sys.values.push_back(underlying_value(c, k * cfg.step) + cfg.obs_noise_sd * gauss(rng));
  return sys;
}

struct StudyData {
  GridSpec grid;
  std::vector<LocalDataset> participants;  // ttfs = recorded (noisy) labels
  LocalDataset test;                       // ttfs = true failure times (eval targets)
  std::vector<double> c_values;            // per generated system, assignment order
};

// Full study draw: systems, common grid, user split, held-out test block, and
// per-signal missingness.  Bit-reproducible from cfg alone.
inline StudyData generate_study(const SimConfig& cfg) {
  cfg.validate();
  const int n = cfg.n_systems();

  std::mt19937_64 c_rng(mix_seed(cfg.seed, 0));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<GeneratedSystem> systems;
  systems.reserve(n);
  for (int i = 0; i < n; ++i) {
    GeneratedSystem sys;
    bool drawn = false;
    for (std::uint64_t attempt = 0; attempt < 100 && !drawn; ++attempt) {
      double c;
      do {
        c = cfg.c_mean + cfg.c_sd * gauss(c_rng);
      } while (!(c > 0.0));
      try {
        sys = generate_system(c, cfg, mix_seed(cfg.seed, 1000003ull + i + 7919ull * attempt));
        drawn = true;
      } catch (const DataError&) {
        // The drawn failure time fell outside the observable horizon;
        // redraw this system with a fresh severity and noise stream.
      }
    }
    if (!drawn)
      throw DataError("generate_study: no feasible system after 100 draws; check step/threshold");
    systems.push_back(std::move(sys));
  }

  int max_len = 0;
  for (const auto& s : systems)
    max_len = std::max(max_len, static_cast<int>(s.values.size()));
  const int N = max_len + 1;  // slot 0 exists on the grid but is never observed

  // Permutations reshuffle which training system lands with which user; the
  // held-out test block (the last n_test draws) stays fixed across them.
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (cfg.permutation_seed != 0) {
    std::mt19937_64 prng(mix_seed(cfg.permutation_seed, 777));
    std::shuffle(order.begin(), order.begin() + (n - cfg.n_test), prng);
  }

  StudyData out;
  out.grid = GridSpec{{N}};
  auto take = [&](const std::string& participant, int count, int& cursor, bool true_labels) {
    LocalDataset ds;
    ds.participant_id = participant;
    ds.grid = out.grid;
    for (int t = 0; t < count; ++t, ++cursor) {
      const int i = order[cursor];
      const GeneratedSystem& sys = systems[i];
      char name[32];
      std::snprintf(name, sizeof(name), "sys_%03d", i + 1);
      const int L = static_cast<int>(sys.values.size());
      Eigen::VectorXd values =
          Eigen::VectorXd::Constant(N, std::numeric_limits<double>::quiet_NaN());
      std::vector<int> omega(L);
      for (int k = 1; k <= L; ++k) {
        values[k] = sys.values[k - 1];
        omega[k - 1] = k;
      }
      ObservedSignal sig = make_signal(name, std::move(values), std::move(omega), N);
      if (cfg.missing_fraction > 0.0)
        sig = apply_missingness(sig, cfg.missing_fraction, mix_seed(cfg.seed, 2000003ull + i));
      ds.signals.push_back(std::move(sig));
      ds.ttfs.push_back(true_labels ? sys.ttf_true : sys.ttf);
      out.c_values.push_back(sys.c);
    }
    return ds;
  };

  int cursor = 0;
  for (size_t u = 0; u < cfg.user_split.size(); ++u)
    out.participants.push_back(
        take("user_" + std::to_string(u + 1), cfg.user_split[u], cursor, false));
  out.test = take("test", cfg.n_test, cursor, true);
  return out;
}

// User split for the many-participant study: sizes uniform on [lo, hi].
inline std::vector<int> make_scale_split(int n_users, int lo, int hi, std::uint64_t seed) {
  if (n_users < 1 || lo < 1 || hi < lo)
    throw ArgumentError("make_scale_split: need n_users >= 1 and 1 <= lo <= hi");
  std::mt19937_64 rng(mix_seed(seed, 31337));
  std::uniform_int_distribution<int> uni(lo, hi);
  std::vector<int> split(n_users);
  for (int& s : split) s = uni(rng);
  return split;
}

}  // namespace fedprog
