#pragma once

// (Log-)location-scale TTF regression on MFPC-scores, fitted by server-side
// gradient aggregation.
//
// Families:  normal, logistic, sev  model the TTF directly;
//            lognormal, loglogistic, weibull  model log(TTF) with the matching
//            location-scale core (normal, logistic, sev).
// Log-likelihood with standardized residual e = (y - beta0 - beta'z) / sigma:
//   l = sum_j [ -log sigma + log f(e_j) ]
// maximized over (beta0, beta, log sigma) by gradient ascent with a
// backtracking (halving) Armijo line search on the aggregated likelihood.
// Participants only ever ship likelihood/gradient aggregates ("packets");
// the same optimizer loop runs over any packet source, so the in-process and
// wire-transport fits are bitwise identical.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fedprog/errors.hpp"
#include "fedprog/math.hpp"
#include "fedprog/signals.hpp"

namespace fedprog {

enum class Family { normal, lognormal, sev, weibull, logistic, loglogistic };

inline std::string family_name(Family f) {
  switch (f) {
    case Family::normal: return "normal";
    case Family::lognormal: return "lognormal";
    case Family::sev: return "sev";
    case Family::weibull: return "weibull";
    case Family::logistic: return "logistic";
    case Family::loglogistic: return "loglogistic";
  }
  throw ArgumentError("family_name: unknown family");
}

inline Family family_from_name(const std::string& name) {
  if (name == "normal") return Family::normal;
  if (name == "lognormal") return Family::lognormal;
  if (name == "sev") return Family::sev;
  if (name == "weibull") return Family::weibull;
  if (name == "logistic") return Family::logistic;
  if (name == "loglogistic") return Family::loglogistic;
  throw ArgumentError("unknown family '" + name +
                      "' (expected one of normal, lognormal, sev, weibull, logistic, loglogistic)");
}

inline bool is_log_family(Family f) {
  return f == Family::lognormal || f == Family::weibull || f == Family::loglogistic;
}

// Location-scale core acting on the standardized residual.
enum class Core { normal, sev, logistic };

inline Core family_core(Family f) {
  switch (f) {
    case Family::normal:
    case Family::lognormal: return Core::normal;
    case Family::sev:
    case Family::weibull: return Core::sev;
    case Family::logistic:
    case Family::loglogistic: return Core::logistic;
  }
  throw ArgumentError("family_core: unknown family");
}

inline double core_logf(Core c, double e) {
  switch (c) {
    case Core::normal: return -0.5 * std::log(2.0 * M_PI) - 0.5 * e * e;
    case Core::sev: return e - std::exp(e);
    case Core::logistic:
      return e <= 0.0 ? e - 2.0 * std::log1p(std::exp(e)) : -e - 2.0 * std::log1p(std::exp(-e));
  }
  throw ArgumentError("core_logf: unknown core");
}

// d/de log f(e)
inline double core_dlogf(Core c, double e) {
  switch (c) {
    case Core::normal: return -e;
    case Core::sev: return 1.0 - std::exp(e);
    case Core::logistic: return -std::tanh(0.5 * e);
  }
  throw ArgumentError("core_dlogf: unknown core");
}

// Quantile of the standardized core distribution.
inline double core_quantile(Core c, double q) {
  if (!(q > 0.0 && q < 1.0)) throw ArgumentError("core_quantile: q must lie in (0,1)");
  switch (c) {
    case Core::normal: return standard_normal_quantile(q);
    case Core::sev: return std::log(-std::log1p(-q));
    case Core::logistic: return std::log(q / (1.0 - q));
  }
  throw ArgumentError("core_quantile: unknown core");
}

struct LLSModel {
  Family family = Family::lognormal;
  double beta0 = 0.0;
  Eigen::VectorXd beta;  // K coefficients
  double sigma = 1.0;

  int k() const { return static_cast<int>(beta.size()); }
};

// One participant's regression data: scores (K x J_i) and TTFs (J_i).
struct ScoreShard {
  std::string participant_id;
  Eigen::MatrixXd z;
  Eigen::VectorXd ttf;
};

struct GradientPacket {
  std::string participant_id;
  double grad_beta0 = 0.0;
  Eigen::VectorXd grad_beta;
  double grad_log_sigma = 0.0;
  std::uint32_t n = 0;
  double loglik = 0.0;
};

struct MomentPacket {
  std::string participant_id;
  std::uint32_t n = 0;
  double sum_y = 0.0;
  double sum_y2 = 0.0;
};

// Response on the model scale (log for the log families).
inline double response(Family family, double ttf, const std::string& system_hint = "") {
  if (is_log_family(family)) {
    if (!(ttf > 0.0))
      throw DataError("family " + family_name(family) + " needs positive TTFs" +
                      (system_hint.empty() ? "" : " (offender: " + system_hint + ")"));
    return std::log(ttf);
  }
  return ttf;
}

inline MomentPacket local_moments(const ScoreShard& shard, Family family) {
  MomentPacket p;
  p.participant_id = shard.participant_id;
  p.n = static_cast<std::uint32_t>(shard.ttf.size());
  for (int j = 0; j < shard.ttf.size(); ++j) {
    double y = response(family, shard.ttf[j], shard.participant_id);
    p.sum_y += y;
    p.sum_y2 += y * y;
  }
  return p;
}

// Local log-likelihood and its gradient in (beta0, beta, log sigma).
inline GradientPacket local_loglik_grad(const LLSModel& m, const ScoreShard& shard) {
  if (shard.z.rows() != m.k())
    throw StructuralError("local_loglik_grad: shard '" + shard.participant_id + "' carries " +
                          std::to_string(shard.z.rows()) + " score rows but the model has k=" +
                          std::to_string(m.k()));
  if (shard.z.cols() != shard.ttf.size())
    throw StructuralError("local_loglik_grad: shard '" + shard.participant_id +
                          "' has mismatched score/TTF counts");
  const Core core = family_core(m.family);
  GradientPacket p;
  p.participant_id = shard.participant_id;
  p.grad_beta = Eigen::VectorXd::Zero(m.k());
  p.n = static_cast<std::uint32_t>(shard.ttf.size());
  const double inv_sigma = 1.0 / m.sigma;
  for (int j = 0; j < shard.ttf.size(); ++j) {
    const double y = response(m.family, shard.ttf[j], shard.participant_id);
    const double e = (y - m.beta0 - m.beta.dot(shard.z.col(j))) * inv_sigma;
    const double g = core_dlogf(core, e);
    p.loglik += -std::log(m.sigma) + core_logf(core, e);
    p.grad_beta0 += -inv_sigma * g;
    p.grad_beta += -inv_sigma * g * shard.z.col(j);
    p.grad_log_sigma += -(1.0 + g * e);
  }
  return p;
}

struct FitOptions {
  int max_iters = 20000;
  double tol = 1e-8;       // on the accepted step, max-norm over all parameters
  double armijo = 1e-4;
  bool random_init = false;
  std::uint64_t seed = 0;
};

struct FitTrace {
  std::vector<double> loglik;  // aggregated likelihood at each accepted iterate
  int iterations = 0;
  bool converged = false;
  double final_grad_norm = 0.0;
};

namespace detail {

// Canonical aggregation: packets sorted by participant id, then summed
// sequentially, so the result is independent of arrival order.
inline GradientPacket aggregate(std::vector<GradientPacket> packets, int k) {
  std::sort(packets.begin(), packets.end(),
            [](const GradientPacket& a, const GradientPacket& b) {
              return a.participant_id < b.participant_id;
            });
  GradientPacket total;
  total.participant_id = "aggregate";
  total.grad_beta = Eigen::VectorXd::Zero(k);
  for (const auto& p : packets) {
    total.grad_beta0 += p.grad_beta0;
    total.grad_beta += p.grad_beta;
    total.grad_log_sigma += p.grad_log_sigma;
    total.n += p.n;
    total.loglik += p.loglik;
  }
  return total;
}

}  // namespace detail

// Packet source abstraction: the optimizer below is the single implementation
// used both in-process (shards in memory) and across a transport.
struct LLSRounds {
  std::function<std::vector<MomentPacket>()> moments;
  std::function<std::vector<GradientPacket>(const LLSModel&)> evaluate;
};

inline LLSModel fit_lls_rounds(const LLSRounds& rounds, Family family, int k,
                               const FitOptions& opt = {}, FitTrace* trace = nullptr) {
  if (k < 0) throw ArgumentError("fit_lls_rounds: negative score dimension");

  // Moment round: n, mean and variance of the (transformed) responses.
  std::vector<MomentPacket> moments = rounds.moments();
  std::sort(moments.begin(), moments.end(),
            [](const MomentPacket& a, const MomentPacket& b) {
              return a.participant_id < b.participant_id;
            });
  double n = 0.0, sum_y = 0.0, sum_y2 = 0.0;
  for (const auto& mp : moments) {
    n += mp.n;
    sum_y += mp.sum_y;
    sum_y2 += mp.sum_y2;
  }
  if (n < k + 2)
    throw ArgumentError("fit_lls_rounds: need at least k+2 = " + std::to_string(k + 2) +
                        " observations, got " + std::to_string(static_cast<long>(n)));
  const double ybar = sum_y / n;
  const double yvar = std::max(sum_y2 / n - ybar * ybar, 0.0);
  if (!(yvar > 0.0))
    throw DataError("fit_lls_rounds: responses are degenerate (zero variance); "
                    "the scale parameter is not identifiable");

  LLSModel m;
  m.family = family;
  m.beta = Eigen::VectorXd::Zero(k);
  if (opt.random_init) {
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    m.beta0 = ybar + 0.1 * std::sqrt(yvar) * gauss(rng);
    for (int i = 0; i < k; ++i) m.beta[i] = 0.1 * gauss(rng);
    m.sigma = std::sqrt(yvar) * std::exp(0.25 * gauss(rng));
  } else {
    m.beta0 = ybar;
    m.sigma = std::sqrt(yvar);
  }

  double log_sigma = std::log(m.sigma);
  GradientPacket g = detail::aggregate(rounds.evaluate(m), k);
  if (trace) trace->loglik.push_back(g.loglik);

  // Ascent with Barzilai-Borwein step sizes under a non-monotone Armijo
  // safeguard.  The spectral step adapts to the curvature of each likelihood
  // surface, which gradient ascent with a scalar step cannot do when the
  // score components carry very different variances.
  auto pack = [k](double b0, const Eigen::VectorXd& b, double ls) {
    Eigen::VectorXd t(k + 2);
    t[0] = b0;
    t.segment(1, k) = b;
    t[k + 1] = ls;
    return t;
  };
  Eigen::VectorXd theta = pack(m.beta0, m.beta, log_sigma);
  Eigen::VectorXd grad = pack(g.grad_beta0, g.grad_beta, g.grad_log_sigma);

  constexpr int kWindow = 10;        // non-monotone reference window
  constexpr double kStepMin = 1e-14;
  constexpr double kStepMax = 1e8;
  std::vector<double> recent = {g.loglik};
  bool have_prev = false;
  Eigen::VectorXd theta_prev, grad_prev;

  double step = 1.0;
  bool converged = false;
  int it = 0;
  for (; it < opt.max_iters && !converged; ++it) {
    const double gnorm2 = grad.squaredNorm();
    if (gnorm2 == 0.0) {
      converged = true;
      break;
    }
    if (have_prev) {
      // Alternating BB1/BB2 spectral steps; s = theta change, y = change of
      // the descent gradient (-grad), so sty > 0 on locally concave stretches.
      const Eigen::VectorXd s = theta - theta_prev;
      const Eigen::VectorXd y = grad_prev - grad;
      const double sty = s.dot(y);
      if (sty > 0.0) {
        const double bb = (it % 2 == 0) ? s.squaredNorm() / sty : sty / y.squaredNorm();
        step = std::clamp(bb, kStepMin, kStepMax);
      } else {
        step = std::min(step * 2.0, kStepMax);
      }
    } else {
      step = std::min(step * 2.0, kStepMax);
    }
    const double ref = *std::min_element(recent.begin(), recent.end());
    bool accepted = false;
    for (int half = 0; half < 80; ++half) {
      LLSModel cand = m;
      cand.beta0 = theta[0] + step * grad[0];
      cand.beta = theta.segment(1, k) + step * grad.segment(1, k);
      const double cand_log_sigma = theta[k + 1] + step * grad[k + 1];
      cand.sigma = std::exp(cand_log_sigma);
      GradientPacket cg = detail::aggregate(rounds.evaluate(cand), k);
      if (std::isfinite(cg.loglik) && cg.loglik >= ref + opt.armijo * step * gnorm2) {
        const double delta = step * grad.cwiseAbs().maxCoeff();
        theta_prev = theta;
        grad_prev = grad;
        have_prev = true;
        m = cand;
        log_sigma = cand_log_sigma;
        theta = pack(m.beta0, m.beta, log_sigma);
        g = cg;
        grad = pack(g.grad_beta0, g.grad_beta, g.grad_log_sigma);
        if (trace) trace->loglik.push_back(g.loglik);
        recent.push_back(g.loglik);
        if (recent.size() > kWindow) recent.erase(recent.begin());
        accepted = true;
        if (delta < opt.tol) converged = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // The line search bottomed out at the floating-point floor of the
      // likelihood surface; no representable ascent step remains.
      converged = true;
    }
  }
  if (trace) {
    trace->iterations = it;
    trace->converged = converged;
    trace->final_grad_norm = std::max({std::abs(g.grad_beta0),
                                       g.grad_beta.size() ? g.grad_beta.cwiseAbs().maxCoeff() : 0.0,
                                       std::abs(g.grad_log_sigma)});
  }
  if (!converged) {
    std::ostringstream os;
    os << "fit_lls_rounds: no convergence after " << opt.max_iters
       << " iterations (family " << family_name(family) << ", |grad|_inf "
       << std::max({std::abs(g.grad_beta0),
                    g.grad_beta.size() ? g.grad_beta.cwiseAbs().maxCoeff() : 0.0,
                    std::abs(g.grad_log_sigma)})
       << ", beta0 " << m.beta0 << ", sigma " << m.sigma << ")";
    throw DiagnosticError(os.str());
  }
  return m;
}

namespace detail {

inline void validate_shards(const std::vector<ScoreShard>& shards, int& k) {
  if (shards.empty()) throw ArgumentError("federated_fit: no shards");
  k = static_cast<int>(shards.front().z.rows());
  for (const auto& s : shards) {
    if (static_cast<int>(s.z.rows()) != k)
      throw StructuralError("federated_fit: shard '" + s.participant_id +
                            "' has score dimension " + std::to_string(s.z.rows()) +
                            ", expected " + std::to_string(k));
    if (s.z.cols() != s.ttf.size())
      throw StructuralError("federated_fit: shard '" + s.participant_id +
                            "' has mismatched score/TTF counts");
  }
}

}  // namespace detail

// In-process federated fit over score shards.  The pooled (non-federated) fit
// is this same routine; centralizing the data changes the transport, not the
// arithmetic.
inline LLSModel federated_fit(const std::vector<ScoreShard>& shards, Family family,
                              const FitOptions& opt = {}, FitTrace* trace = nullptr) {
  int k = 0;
  detail::validate_shards(shards, k);
  LLSRounds rounds;
  rounds.moments = [&shards, family] {
    std::vector<MomentPacket> out;
    for (const auto& s : shards) out.push_back(local_moments(s, family));
    return out;
  };
  rounds.evaluate = [&shards](const LLSModel& m) {
    std::vector<GradientPacket> out;
    for (const auto& s : shards) out.push_back(local_loglik_grad(m, s));
    return out;
  };
  return fit_lls_rounds(rounds, family, k, opt, trace);
}

// ---- prediction ---------------------------------------------------------------

struct PredictiveDistribution {
  Family family;
  double mu;     // location on the model scale
  double sigma;  // scale

  double quantile(double q) const {
    const double x = mu + sigma * core_quantile(family_core(family), q);
    return is_log_family(family) ? std::exp(x) : x;
  }

  double median() const { return quantile(0.5); }
};

inline PredictiveDistribution predictive_distribution(const LLSModel& m, const Eigen::VectorXd& z) {
  if (z.size() != m.k())
    throw ArgumentError("predictive_distribution: score vector has length " +
                        std::to_string(z.size()) + ", model expects " + std::to_string(m.k()));
  return PredictiveDistribution{m.family, m.beta0 + m.beta.dot(z), m.sigma};
}

// Point prediction: the median of the predictive distribution.
inline double predict_ttf(const LLSModel& m, const Eigen::VectorXd& z) {
  return predictive_distribution(m, z).median();
}

// Relative TTF error in percent: |pred - real| / real * 100.
inline double prediction_error(double predicted, double real) {
  if (!(real > 0.0)) throw ArgumentError("prediction_error: real TTF must be positive");
  return std::abs(predicted - real) / real * 100.0;
}

// Same quantity as a fraction (how study tables report it).
inline double relative_error(double predicted, double real) {
  return prediction_error(predicted, real) / 100.0;
}

// ---- model file -----------------------------------------------------------------
// Textual key-value format:
//   family=lognormal
//   k=2
//   beta0=...
//   beta=...,...
//   sigma=...

inline void save_model(const LLSModel& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open " + path.string() + " for writing");
  out << "family=" << family_name(m.family) << "\n";
  out << "k=" << m.k() << "\n";
  out << "beta0=" << detail::format_double(m.beta0) << "\n";
  out << "beta=";
  for (int i = 0; i < m.k(); ++i) out << (i ? "," : "") << detail::format_double(m.beta[i]);
  out << "\n";
  out << "sigma=" << detail::format_double(m.sigma) << "\n";
}

inline LLSModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open model file " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  for (const char* key : {"family", "k", "beta0", "beta", "sigma"})
    if (!kv.count(key))
      throw ParseError(path.string() + ": missing required key '" + std::string(key) + "'");
  LLSModel m;
  m.family = family_from_name(kv["family"]);
  int k;
  try {
    k = std::stoi(kv["k"]);
    m.beta0 = std::stod(kv["beta0"]);
    m.sigma = std::stod(kv["sigma"]);
  } catch (const std::exception&) {
    throw ParseError(path.string() + ": unparseable numeric field");
  }
  std::vector<double> beta;
  if (!kv["beta"].empty()) {
    std::istringstream is(kv["beta"]);
    std::string field;
    while (std::getline(is, field, ',')) {
      try {
        beta.push_back(std::stod(field));
      } catch (const std::exception&) {
        throw ParseError(path.string() + ": unparseable beta entry '" + field + "'");
      }
    }
  }
  if (static_cast<int>(beta.size()) != k)
    throw ValidationError(path.string() + ": k=" + std::to_string(k) + " but beta has " +
                          std::to_string(beta.size()) + " entries");
  if (!(m.sigma > 0.0)) throw ValidationError(path.string() + ": sigma must be positive");
  m.beta = Eigen::Map<Eigen::VectorXd>(beta.data(), static_cast<Eigen::Index>(beta.size()));
  return m;
}

}  // namespace fedprog
