#pragma once

// Turbofan run-to-failure data adapter (26-column whitespace format: unit,
// cycle, 3 operational settings, 21 sensor channels).  Selected sensor
// channels are concatenated onto a common per-sensor grid of length
// max-cycle-count; an engine observed for L cycles fills slots 0..L-1 of every
// selected sensor block.  Training TTF is the final cycle; evaluation TTF of a
// test engine is its observed cycles plus the provided remaining life.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fedprog/errors.hpp"
#include "fedprog/math.hpp"
#include "fedprog/signals.hpp"

namespace fedprog {

struct CmapssRecord {
  int unit = 0;
  int cycle = 0;
  std::array<double, 3> settings{};
  std::array<double, 21> sensors{};
};

inline std::vector<CmapssRecord> parse_cmapss(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<CmapssRecord> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    std::istringstream is(line);
    std::vector<double> fields;
    double v;
    while (is >> v) fields.push_back(v);
    std::string leftover;
    if (!is.eof() && (is >> leftover, !leftover.empty()))
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": non-numeric field '" +
                       leftover + "'");
    if (fields.size() != 26)
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected 26 columns, got " +
                       std::to_string(fields.size()));
    CmapssRecord r;
    r.unit = static_cast<int>(fields[0]);
    r.cycle = static_cast<int>(fields[1]);
    for (int i = 0; i < 3; ++i) r.settings[i] = fields[2 + i];
    for (int i = 0; i < 21; ++i) r.sensors[i] = fields[5 + i];
    records.push_back(r);
  }
  if (records.empty()) throw ParseError(path.string() + ": no data rows");
  return records;
}

inline std::vector<double> parse_rul(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<double> rul;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    try {
      rul.push_back(std::stod(line));
    } catch (const std::exception&) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": unparseable value");
    }
  }
  if (rul.empty()) throw ParseError(path.string() + ": no values");
  return rul;
}

namespace detail {

// Group per unit in order of first appearance and check cycles run 1..L.
inline std::vector<std::pair<int, std::vector<const CmapssRecord*>>> group_units(
    const std::vector<CmapssRecord>& records, const std::string& origin) {
  std::vector<std::pair<int, std::vector<const CmapssRecord*>>> units;
  std::map<int, size_t> where;
  for (const auto& r : records) {
    auto it = where.find(r.unit);
    if (it == where.end()) {
      where[r.unit] = units.size();
      units.push_back({r.unit, {}});
      it = where.find(r.unit);
    }
    units[it->second].second.push_back(&r);
  }
  for (const auto& [unit, rows] : units)
    for (size_t t = 0; t < rows.size(); ++t)
      if (rows[t]->cycle != static_cast<int>(t) + 1)
        throw ValidationError(origin + ": unit " + std::to_string(unit) +
                              " has non-consecutive cycles (saw " + std::to_string(rows[t]->cycle) +
                              " at position " + std::to_string(t + 1) + ")");
  return units;
}

}  // namespace detail

struct CaseStudyConfig {
  std::vector<int> selected_sensors = {4, 15, 17, 20};  // 1-based among the 21 channels
  std::vector<double> user_fractions = {0.6, 0.3, 0.1};
  double missing_fraction = 0.0;
  std::uint64_t seed = 42;
  std::uint64_t permutation_seed = 0;  // 0: engines assigned to users in file order
};

struct CaseStudyData {
  GridSpec grid;
  std::vector<LocalDataset> participants;
  LocalDataset test;
};

inline CaseStudyData build_case_study(const std::vector<CmapssRecord>& train_records,
                                      const std::vector<CmapssRecord>& test_records,
                                      const std::vector<double>& rul,
                                      const CaseStudyConfig& cfg) {
  if (cfg.selected_sensors.empty())
    throw ConfigError("build_case_study: no sensors selected");
  for (int s : cfg.selected_sensors)
    if (s < 1 || s > 21)
      throw ConfigError("build_case_study: sensor index " + std::to_string(s) +
                        " outside 1..21");
  if (cfg.user_fractions.empty())
    throw ConfigError("build_case_study: empty user split");
  if (cfg.missing_fraction < 0.0 || cfg.missing_fraction >= 1.0)
    throw ConfigError("build_case_study: missing_fraction must lie in [0,1)");

  auto train_units = detail::group_units(train_records, "training data");
  auto test_units = detail::group_units(test_records, "test data");
  if (rul.size() != test_units.size())
    throw ConfigError("build_case_study: " + std::to_string(test_units.size()) +
                      " test engines but " + std::to_string(rul.size()) +
                      " remaining-life values; the RUL file does not match the test set");

  size_t max_cycles = 0;
  for (const auto& [unit, rows] : train_units) max_cycles = std::max(max_cycles, rows.size());
  for (const auto& [unit, rows] : test_units) max_cycles = std::max(max_cycles, rows.size());
  const int L = static_cast<int>(max_cycles);
  const int P = static_cast<int>(cfg.selected_sensors.size());

  CaseStudyData out;
  out.grid = GridSpec{std::vector<int>(P, L)};

  auto build_signal = [&](const std::string& id,
                          const std::vector<const CmapssRecord*>& rows) {
    std::vector<std::pair<Eigen::VectorXd, std::vector<int>>> per_sensor;
    for (int p = 0; p < P; ++p) {
      Eigen::VectorXd v = Eigen::VectorXd::Constant(L, std::numeric_limits<double>::quiet_NaN());
      std::vector<int> local;
      for (size_t t = 0; t < rows.size(); ++t) {
        v[static_cast<int>(t)] = rows[t]->sensors[cfg.selected_sensors[p] - 1];
        local.push_back(static_cast<int>(t));
      }
      per_sensor.emplace_back(std::move(v), std::move(local));
    }
    return concatenate_sensors(id, per_sensor, out.grid);
  };

  // Split the training engines 60/30/10 (fractions rounded down, remainder to
  // the first user).
  const int n_train = static_cast<int>(train_units.size());
  std::vector<int> counts;
  int assigned = 0;
  for (double f : cfg.user_fractions) {
    if (!(f > 0.0)) throw ConfigError("build_case_study: nonpositive user fraction");
    counts.push_back(static_cast<int>(std::floor(f * n_train)));
    assigned += counts.back();
  }
  counts.front() += n_train - assigned;
  for (int c : counts)
    if (c < 1)
      throw ConfigError("build_case_study: a user would receive no engines; adjust fractions");

  // Permutations reshuffle which engine lands with which user; missingness is
  // keyed to the engine itself, so only the assignment moves.
  std::vector<int> assignment(train_units.size());
  std::iota(assignment.begin(), assignment.end(), 0);
  if (cfg.permutation_seed != 0) {
    std::mt19937_64 prng(mix_seed(cfg.permutation_seed, 778));
    std::shuffle(assignment.begin(), assignment.end(), prng);
  }

  int cursor = 0;
  for (size_t u = 0; u < counts.size(); ++u) {
    LocalDataset ds;
    ds.participant_id = "user_" + std::to_string(u + 1);
    ds.grid = out.grid;
    for (int t = 0; t < counts[u]; ++t, ++cursor) {
      const auto& [unit, rows] = train_units[assignment[cursor]];
      char name[32];
      std::snprintf(name, sizeof(name), "train_%03d", unit);
      ObservedSignal sig = build_signal(name, rows);
      if (cfg.missing_fraction > 0.0)
        sig = apply_missingness(sig, cfg.missing_fraction,
                                mix_seed(cfg.seed, 3000003ull + static_cast<std::uint64_t>(unit)));
      ds.signals.push_back(std::move(sig));
      ds.ttfs.push_back(static_cast<double>(rows.size()));  // failed at its final cycle
    }
    out.participants.push_back(std::move(ds));
  }

  out.test.participant_id = "test";
  out.test.grid = out.grid;
  for (size_t t = 0; t < test_units.size(); ++t) {
    const auto& [unit, rows] = test_units[t];
    char name[32];
    std::snprintf(name, sizeof(name), "test_%03d", unit);
    ObservedSignal sig = build_signal(name, rows);
    if (cfg.missing_fraction > 0.0)
      sig = apply_missingness(sig, cfg.missing_fraction, mix_seed(cfg.seed, 4000003ull + t));
    out.test.signals.push_back(std::move(sig));
    out.test.ttfs.push_back(static_cast<double>(rows.size()) + rul[t]);
  }
  return out;
}

}  // namespace fedprog
