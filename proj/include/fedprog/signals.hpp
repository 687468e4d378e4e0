#pragma once

// Core data model: index-based observation grids, incomplete multi-sensor
// signals, per-participant datasets, and their on-disk layout.
//
// A signal lives on a common grid of N slots formed by concatenating the
// per-sensor grids.  Missingness and truncation are represented by the index
// set omega: a slot is observed iff its index appears in omega.  Values off
// omega are stored as NaN and must never enter numeric kernels.

#include <Eigen/Dense>
#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fedprog/errors.hpp"
#include "fedprog/math.hpp"

namespace fedprog {

struct GridSpec {
  std::vector<int> sensor_lengths;

  int sensors() const { return static_cast<int>(sensor_lengths.size()); }

  int total() const {
    return std::accumulate(sensor_lengths.begin(), sensor_lengths.end(), 0);
  }

  // Offset of sensor p's block within the concatenated grid.
  int offset(int p) const {
    if (p < 0 || p >= sensors()) throw ArgumentError("GridSpec::offset: sensor index out of range");
    return std::accumulate(sensor_lengths.begin(), sensor_lengths.begin() + p, 0);
  }

  void validate() const {
    if (sensor_lengths.empty()) throw StructuralError("GridSpec: no sensors");
    for (size_t p = 0; p < sensor_lengths.size(); ++p)
      if (sensor_lengths[p] <= 0)
        throw StructuralError("GridSpec: sensor " + std::to_string(p) +
                              " has nonpositive length " + std::to_string(sensor_lengths[p]));
  }

  bool operator==(const GridSpec& o) const { return sensor_lengths == o.sensor_lengths; }
};

struct ObservedSignal {
  std::string system_id;
  Eigen::VectorXd values;   // length N, NaN off omega
  std::vector<int> omega;   // sorted, unique, within [0, N)

  int observed_count() const { return static_cast<int>(omega.size()); }

  // Euclidean norm over observed entries.
  double observed_norm() const {
    double s = 0.0;
    for (int i : omega) s += values[i] * values[i];
    return std::sqrt(s);
  }
};

// Validating factory.  `values` may be given either full-length (N) or as a
// full-length vector with arbitrary content off omega; off-omega slots are
// normalized to NaN.
inline ObservedSignal make_signal(std::string system_id, Eigen::VectorXd values,
                                  std::vector<int> omega, int N) {
  if (values.size() != N)
    throw StructuralError("signal '" + system_id + "': values length " +
                          std::to_string(values.size()) + " does not match grid total " +
                          std::to_string(N));
  if (omega.empty())
    throw StructuralError("signal '" + system_id + "': empty observation set");
  std::sort(omega.begin(), omega.end());
  for (size_t k = 0; k < omega.size(); ++k) {
    if (omega[k] < 0 || omega[k] >= N)
      throw StructuralError("signal '" + system_id + "': observed index " +
                            std::to_string(omega[k]) + " outside grid [0," + std::to_string(N) + ")");
    if (k > 0 && omega[k] == omega[k - 1])
      throw StructuralError("signal '" + system_id + "': duplicate observed index " +
                            std::to_string(omega[k]));
  }
  for (int i : omega)
    if (!std::isfinite(values[i]))
      throw StructuralError("signal '" + system_id + "': non-finite value at observed index " +
                            std::to_string(i));
  ObservedSignal s{std::move(system_id), std::move(values), std::move(omega)};
  const double nan = std::numeric_limits<double>::quiet_NaN();
  int pos = 0;
  for (int i = 0; i < N; ++i) {
    if (pos < s.observed_count() && s.omega[pos] == i) {
      ++pos;
    } else {
      s.values[i] = nan;
    }
  }
  return s;
}

// Fuse one system's per-sensor streams into a single signal on the
// concatenated grid.  Each entry is (values over that sensor's grid, observed
// indices local to that sensor).
inline ObservedSignal concatenate_sensors(
    const std::string& system_id,
    const std::vector<std::pair<Eigen::VectorXd, std::vector<int>>>& per_sensor,
    const GridSpec& grid) {
  grid.validate();
  if (static_cast<int>(per_sensor.size()) != grid.sensors())
    throw StructuralError("signal '" + system_id + "': " + std::to_string(per_sensor.size()) +
                          " sensor streams for a grid with " + std::to_string(grid.sensors()) +
                          " sensors");
  const int N = grid.total();
  Eigen::VectorXd values = Eigen::VectorXd::Constant(N, std::numeric_limits<double>::quiet_NaN());
  std::vector<int> omega;
  for (int p = 0; p < grid.sensors(); ++p) {
    const auto& [v, local] = per_sensor[p];
    if (v.size() != grid.sensor_lengths[p])
      throw StructuralError("signal '" + system_id + "': sensor " + std::to_string(p) +
                            " stream length " + std::to_string(v.size()) + " does not match grid length " +
                            std::to_string(grid.sensor_lengths[p]));
    const int off = grid.offset(p);
    for (int i : local) {
      if (i < 0 || i >= grid.sensor_lengths[p])
        throw StructuralError("signal '" + system_id + "': sensor " + std::to_string(p) +
                              " observed index " + std::to_string(i) + " outside its grid");
      values[off + i] = v[i];
      omega.push_back(off + i);
    }
  }
  return make_signal(system_id, std::move(values), std::move(omega), N);
}

// Remove a uniformly random subset of observed entries, keeping
// floor((1-fraction)*|omega|).  Surviving values are preserved bit-exactly.
inline ObservedSignal apply_missingness(const ObservedSignal& s, double fraction,
                                        std::uint64_t rng_seed) {
  if (fraction < 0.0 || fraction >= 1.0)
    throw ArgumentError("apply_missingness: fraction must lie in [0,1), got " +
                        std::to_string(fraction));
  if (fraction == 0.0) return s;
  const size_t keep = static_cast<size_t>(
      std::floor((1.0 - fraction) * static_cast<double>(s.omega.size())));
  if (keep == 0)
    throw ArgumentError("apply_missingness: fraction " + std::to_string(fraction) +
                        " would leave signal '" + s.system_id + "' empty");
  std::vector<int> pool = s.omega;
  std::mt19937_64 rng(rng_seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(keep);
  std::sort(pool.begin(), pool.end());
  Eigen::VectorXd values = Eigen::VectorXd::Constant(
      s.values.size(), std::numeric_limits<double>::quiet_NaN());
  for (int i : pool) values[i] = s.values[i];
  return ObservedSignal{s.system_id, std::move(values), std::move(pool)};
}

// Drop observations past `last_index` (inclusive bound), modelling a signal
// that stops at failure.
inline ObservedSignal truncate_at_index(const ObservedSignal& s, int last_index) {
  std::vector<int> kept;
  for (int i : s.omega)
    if (i <= last_index) kept.push_back(i);
  if (kept.empty())
    throw ArgumentError("truncate_at_index: no observations of signal '" + s.system_id +
                        "' at or before index " + std::to_string(last_index));
  Eigen::VectorXd values = Eigen::VectorXd::Constant(
      s.values.size(), std::numeric_limits<double>::quiet_NaN());
  for (int i : kept) values[i] = s.values[i];
  return ObservedSignal{s.system_id, std::move(values), std::move(kept)};
}

struct LocalDataset {
  std::string participant_id;
  GridSpec grid;
  std::vector<ObservedSignal> signals;
  std::vector<double> ttfs;  // aligned with signals

  int size() const { return static_cast<int>(signals.size()); }

  void validate() const {
    grid.validate();
    if (signals.size() != ttfs.size())
      throw StructuralError("dataset '" + participant_id + "': " + std::to_string(signals.size()) +
                            " signals but " + std::to_string(ttfs.size()) + " TTF entries");
    const int N = grid.total();
    for (const auto& s : signals)
      if (s.values.size() != N)
        throw StructuralError("dataset '" + participant_id + "': signal '" + s.system_id +
                              "' is on a different grid (length " + std::to_string(s.values.size()) +
                              " vs " + std::to_string(N) + ")");
    for (size_t j = 0; j < ttfs.size(); ++j)
      if (!(ttfs[j] > 0.0) || !std::isfinite(ttfs[j]))
        throw DataError("dataset '" + participant_id + "': nonpositive TTF for system '" +
                        signals[j].system_id + "'");
  }
};

// ---- persistence -------------------------------------------------------------
//
// Layout of a study directory:
//   grid.json                      sidecar: {"sensor_lengths": [...]}
//   <participant>/signals.csv      header system_id,index,value (observed rows only)
//   <participant>/ttf.csv          header system_id,ttf

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

}  // namespace detail

inline void save_grid(const GridSpec& grid, const std::filesystem::path& path) {
  grid.validate();
  nlohmann::json j;
  j["sensor_lengths"] = grid.sensor_lengths;
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
}

inline GridSpec load_grid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open grid sidecar " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ParseError("malformed grid sidecar " + path.string() + ": " + e.what());
  }
  if (!j.contains("sensor_lengths") || !j["sensor_lengths"].is_array())
    throw ParseError("grid sidecar " + path.string() + " lacks a sensor_lengths array");
  GridSpec grid;
  for (const auto& v : j["sensor_lengths"]) grid.sensor_lengths.push_back(v.get<int>());
  grid.validate();
  return grid;
}

inline void save_dataset(const LocalDataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "signals.csv");
    if (!out) throw ParseError("cannot open " + (dir / "signals.csv").string() + " for writing");
    out << "system_id,index,value\n";
    for (const auto& s : ds.signals)
      for (int i : s.omega)
        out << s.system_id << "," << i << "," << detail::format_double(s.values[i]) << "\n";
  }
  {
    std::ofstream out(dir / "ttf.csv");
    if (!out) throw ParseError("cannot open " + (dir / "ttf.csv").string() + " for writing");
    out << "system_id,ttf\n";
    for (size_t j = 0; j < ds.ttfs.size(); ++j)
      out << ds.signals[j].system_id << "," << detail::format_double(ds.ttfs[j]) << "\n";
  }
}

inline LocalDataset load_dataset(const std::string& participant_id, const GridSpec& grid,
                                 const std::filesystem::path& dir) {
  grid.validate();
  const int N = grid.total();
  const auto sig_path = dir / "signals.csv";
  std::ifstream in(sig_path);
  if (!in) throw ParseError("cannot open " + sig_path.string());
  std::string line;
  if (!std::getline(in, line) || detail::split_csv_line(line) !=
                                     std::vector<std::string>{"system_id", "index", "value"})
    throw ParseError(sig_path.string() + ": expected header system_id,index,value");

  // Group rows by system in order of first appearance.
  std::vector<std::string> order;
  std::map<std::string, std::pair<Eigen::VectorXd, std::vector<int>>> by_system;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 3)
      throw ParseError(sig_path.string() + ":" + std::to_string(lineno) +
                       ": expected 3 fields, got " + std::to_string(f.size()));
    const std::string& id = f[0];
    int idx;
    double val;
    try {
      idx = std::stoi(f[1]);
      val = std::stod(f[2]);
    } catch (const std::exception&) {
      throw ParseError(sig_path.string() + ":" + std::to_string(lineno) + ": unparseable row");
    }
    auto it = by_system.find(id);
    if (it == by_system.end()) {
      order.push_back(id);
      it = by_system
               .emplace(id, std::make_pair(Eigen::VectorXd::Constant(
                                               N, std::numeric_limits<double>::quiet_NaN()),
                                           std::vector<int>{}))
               .first;
    }
    if (idx < 0 || idx >= N)
      throw ParseError(sig_path.string() + ":" + std::to_string(lineno) + ": index " +
                       std::to_string(idx) + " outside grid [0," + std::to_string(N) + ")");
    it->second.first[idx] = val;
    it->second.second.push_back(idx);
  }

  const auto ttf_path = dir / "ttf.csv";
  std::ifstream tin(ttf_path);
  if (!tin) throw ParseError("cannot open " + ttf_path.string());
  if (!std::getline(tin, line) ||
      detail::split_csv_line(line) != std::vector<std::string>{"system_id", "ttf"})
    throw ParseError(ttf_path.string() + ": expected header system_id,ttf");
  std::map<std::string, double> ttf_by_system;
  lineno = 1;
  while (std::getline(tin, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 2)
      throw ParseError(ttf_path.string() + ":" + std::to_string(lineno) +
                       ": expected 2 fields, got " + std::to_string(f.size()));
    if (ttf_by_system.count(f[0]))
      throw ValidationError(ttf_path.string() + ": duplicate TTF row for system '" + f[0] + "'");
    try {
      ttf_by_system[f[0]] = std::stod(f[1]);
    } catch (const std::exception&) {
      throw ParseError(ttf_path.string() + ":" + std::to_string(lineno) + ": unparseable TTF");
    }
  }

  LocalDataset ds;
  ds.participant_id = participant_id;
  ds.grid = grid;
  for (const auto& id : order) {
    auto& [values, omega] = by_system[id];
    ds.signals.push_back(make_signal(id, std::move(values), std::move(omega), N));
    auto it = ttf_by_system.find(id);
    if (it == ttf_by_system.end())
      throw ValidationError(ttf_path.string() + ": no TTF for system '" + id + "'");
    ds.ttfs.push_back(it->second);
    ttf_by_system.erase(it);
  }
  if (!ttf_by_system.empty())
    throw ValidationError(ttf_path.string() + ": TTF rows for unknown systems (first: '" +
                          ttf_by_system.begin()->first + "')");
  ds.validate();
  return ds;
}

}  // namespace fedprog
