#pragma once

// Federated orchestration.
//
// Three protocols run over a roster of participants, each holding a private
// LocalDataset that never leaves its process boundary:
//
//   1. subspace:  a token (basis, running residual sum, update counter) walks
//      the ring in roster order; each participant folds its own signals into
//      the basis and forwards the token.  Sweeps repeat until the summed
//      relative residual, a basis-stability criterion, or the sweep budget
//      stops them.
//   2. scores:    participants send weight blocks for the final basis; the
//      orchestrator rotates them into uncorrelated scores and returns each
//      participant its own slice.
//   3. regression: the orchestrator broadcasts trial parameters and sums the
//      returned per-participant gradient/likelihood packets (and a one-shot
//      moment round for initialization).
//
// Both transports drive the same participant-side arithmetic in the same
// order, so an in-process run and a socket run produce bit-identical results;
// a single-participant run is likewise bit-identical to the single-node
// tracking loop in subspace.hpp.  Participants add their per-signal residual
// ratios directly into the token's running sum, so the summation order (and
// hence every stopping decision) matches a pooled single-node sweep exactly.

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedprog/errors.hpp"
#include "fedprog/lls.hpp"
#include "fedprog/math.hpp"
#include "fedprog/scores.hpp"
#include "fedprog/signals.hpp"
#include "fedprog/subspace.hpp"
#include "fedprog/wire.hpp"

namespace fedprog {

enum class Transport { in_process, sockets };

inline const char* transport_name(Transport t) {
  return t == Transport::in_process ? "inproc" : "socket";
}

inline Transport transport_from_name(const std::string& s) {
  if (s == "inproc") return Transport::in_process;
  if (s == "socket") return Transport::sockets;
  throw ArgumentError("unknown transport '" + s + "' (expected inproc or socket)");
}

enum class StragglerPolicy { none, drop_one_uniform };

inline const char* straggler_name(StragglerPolicy p) {
  return p == StragglerPolicy::none ? "none" : "drop-one";
}

inline StragglerPolicy straggler_from_name(const std::string& s) {
  if (s == "none") return StragglerPolicy::none;
  if (s == "drop-one") return StragglerPolicy::drop_one_uniform;
  throw ArgumentError("unknown straggler policy '" + s + "' (expected none or drop-one)");
}

struct FederationPlan {
  int subspace_rank = 0;  // required; columns of the tracked basis
  int max_sweeps = 100;
  double conv_eps = 1e-6;      // stop when the summed relative residual e < conv_eps
  double stability_eps = 0.0;  // optional stop on per-sweep subspace movement; 0 disables
  StragglerPolicy straggler = StragglerPolicy::none;
  std::uint64_t straggler_seed = 0;  // 0: derive the drop draws from `seed`
  double tau_comm = 2.048e-3;        // modeled seconds per token handoff
  std::uint64_t seed = 42;

  TrackOptions track_options() const { return TrackOptions{max_sweeps, conv_eps, stability_eps}; }
};

struct SweepLog {
  int sweep = 0;                                  // 1-based
  std::vector<wire::ResidualReportMsg> reports;   // one per visited participant
  double e = 0.0;                                 // residual sum after the sweep
  double basis_movement = -1.0;                   // chordal movement; -1 when not tracked
  double modeled_comm_seconds = 0.0;              // handoffs this sweep * tau
};

struct SubspaceRunResult {
  SubspaceBasis basis;
  std::uint64_t applied_updates = 0;
  std::vector<SweepLog> sweeps;
  bool converged = false;
  std::string stop_reason;  // "residual", "stability", or "max_sweeps"
  double modeled_comm_seconds = 0.0;
  double local_compute_seconds = 0.0;  // summed participant-side work
  double wall_seconds = 0.0;

  int sweep_count() const { return static_cast<int>(sweeps.size()); }

  std::int64_t total_handoffs() const {
    std::int64_t h = 0;
    for (const auto& s : sweeps) h += static_cast<std::int64_t>(s.reports.size());
    return h;
  }
};

// Modeled communication cost of n sweeps over I participants.
inline double modeled_comm_time(std::int64_t participants, std::int64_t sweeps, double tau) {
  return static_cast<double>(participants) * static_cast<double>(sweeps) * tau;
}

// ---- participant-side work (shared by both transports) --------------------------

// Fold every local signal into the tracker, adding each relative residual
// directly into `running_e` (preserving the pooled summation order).
inline wire::ResidualReportMsg local_sweep(SubspaceTracker& tracker, const LocalDataset& ds,
                                           double& running_e) {
  const auto t0 = std::chrono::steady_clock::now();
  wire::ResidualReportMsg report;
  report.participant_id = ds.participant_id;
  const double e_before = running_e;
  for (const ObservedSignal& s : ds.signals) {
    UpdateOutcome out = tracker.process(s);
    running_e += out.residual_norm / out.signal_norm;
  }
  report.contribution = running_e - e_before;
  report.signals_visited = static_cast<std::uint32_t>(ds.signals.size());
  report.local_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// Build the participant's regression shard from its delivered score slice:
// the top k score rows paired with the local time-to-failure responses.
inline ScoreShard shard_from_slice(const ScoreBundle& slice, const LocalDataset& ds, int k) {
  if (slice.blocks.size() != 1)
    throw StructuralError("shard_from_slice: expected exactly one score block, got " +
                          std::to_string(slice.blocks.size()));
  const ScoreBlock& blk = slice.blocks.front();
  if (k < 0 || k > blk.Z.rows())
    throw ArgumentError("shard_from_slice: cannot keep " + std::to_string(k) +
                        " score rows out of " + std::to_string(blk.Z.rows()));
  std::map<std::string, double> ttf_by_id;
  for (size_t j = 0; j < ds.signals.size(); ++j)
    ttf_by_id[ds.signals[j].system_id] = ds.ttfs[j];
  ScoreShard shard;
  shard.participant_id = ds.participant_id;
  shard.z = blk.Z.topRows(k);
  shard.ttf.resize(static_cast<int>(blk.system_ids.size()));
  for (size_t j = 0; j < blk.system_ids.size(); ++j) {
    auto it = ttf_by_id.find(blk.system_ids[j]);
    if (it == ttf_by_id.end())
      throw StructuralError("shard_from_slice: score slice names system '" + blk.system_ids[j] +
                            "' unknown to participant '" + ds.participant_id + "'");
    shard.ttf[static_cast<int>(j)] = it->second;
  }
  return shard;
}

// ---- orchestrator's handle to one participant ------------------------------------

class ParticipantLink {
 public:
  virtual ~ParticipantLink() = default;
  virtual const std::string& id() const = 0;
  // Subspace sweep: hand the token over, get it back updated (plus a report).
  virtual wire::ResidualReportMsg sweep(wire::BasisToken& token) = 0;
  virtual WeightBlock weights(const SubspaceBasis& basis) = 0;
  virtual void deliver_slice(const ScoreBundle& slice) = 0;
  virtual MomentPacket moments(Family family, int k) = 0;
  virtual GradientPacket evaluate(const LLSModel& model) = 0;
  virtual void finish() = 0;
};

class InProcLink final : public ParticipantLink {
 public:
  explicit InProcLink(const LocalDataset* ds) : ds_(ds) {}

  const std::string& id() const override { return ds_->participant_id; }

  wire::ResidualReportMsg sweep(wire::BasisToken& token) override {
    SubspaceTracker tracker(std::move(token.basis),
                            static_cast<long>(token.applied_updates));
    wire::ResidualReportMsg report = local_sweep(tracker, *ds_, token.running_e);
    token.basis = std::move(tracker.basis());
    token.applied_updates = static_cast<std::uint64_t>(tracker.applied_updates());
    return report;
  }

  WeightBlock weights(const SubspaceBasis& basis) override { return local_weights(basis, *ds_); }

  void deliver_slice(const ScoreBundle& slice) override {
    slice_ = slice;
    has_slice_ = true;
  }

  MomentPacket moments(Family family, int k) override {
    return local_moments(shard(k), family);
  }

  GradientPacket evaluate(const LLSModel& model) override {
    return local_loglik_grad(model, shard(model.k()));
  }

  void finish() override {}

 private:
  ScoreShard shard(int k) const {
    if (!has_slice_)
      throw StructuralError("participant '" + ds_->participant_id +
                            "': regression round before any score slice was delivered");
    return shard_from_slice(slice_, *ds_, k);
  }

  const LocalDataset* ds_;
  ScoreBundle slice_;
  bool has_slice_ = false;
};

class SocketLink final : public ParticipantLink {
 public:
  SocketLink(std::string id, SocketChannel channel, WireRecorder* recorder)
      : id_(std::move(id)), channel_(std::move(channel)), recorder_(recorder) {}

  const std::string& id() const override { return id_; }

  wire::ResidualReportMsg sweep(wire::BasisToken& token) override {
    token.purpose = 0;
    send(wire::encode_basis_token(token));
    token = wire::decode_basis_token(recv());
    return wire::decode_residual_report(recv());
  }

  WeightBlock weights(const SubspaceBasis& basis) override {
    wire::BasisToken token;
    token.basis = basis;
    token.purpose = 1;
    send(wire::encode_basis_token(token));
    return wire::decode_weight_block(recv());
  }

  void deliver_slice(const ScoreBundle& slice) override {
    send(wire::encode_score_bundle(slice));
  }

  MomentPacket moments(Family family, int k) override {
    wire::ParamBroadcastMsg pb;
    pb.phase = 2;
    pb.model.family = family;
    pb.model.beta = Eigen::VectorXd::Zero(k);
    send(wire::encode_param_broadcast(pb));
    return wire::decode_moment_report(recv());
  }

  GradientPacket evaluate(const LLSModel& model) override {
    wire::ParamBroadcastMsg pb;
    pb.phase = 0;
    pb.round = ++round_;
    pb.model = model;
    send(wire::encode_param_broadcast(pb));
    return wire::decode_gradient_packet(recv());
  }

  void finish() override {
    if (finished_) return;
    finished_ = true;
    wire::ParamBroadcastMsg pb;
    pb.phase = 1;
    send(wire::encode_param_broadcast(pb));
  }

 private:
  void send(const WireMessage& m) {
    if (recorder_) recorder_->record(m);
    channel_.send(m);
  }
  WireMessage recv() {
    WireMessage m = channel_.recv();
    if (recorder_) recorder_->record(m);
    return m;
  }

  std::string id_;
  SocketChannel channel_;
  WireRecorder* recorder_;
  std::uint32_t round_ = 0;
  bool finished_ = false;
};

// ---- socket participant loop ------------------------------------------------------

// Runs in the participant's own thread: connect, announce, then answer
// protocol requests until the done broadcast arrives.  All state (dataset,
// tracker snapshots, score slice) stays on this side of the socket.
inline void participant_serve(const LocalDataset& ds, int port) {
  try {
    SocketChannel channel = connect_loopback(port);
    wire::ResidualReportMsg hello;
    hello.participant_id = ds.participant_id;
    channel.send(wire::encode_residual_report(hello));

    SubspaceBasis last_basis;
    ScoreBundle slice;
    bool has_slice = false;

    for (;;) {
      WireMessage m = channel.recv();
      switch (m.type) {
        case MessageType::BasisHandoff: {
          wire::BasisToken token = wire::decode_basis_token(m);
          if (token.purpose == 0) {
            SubspaceTracker tracker(std::move(token.basis),
                                    static_cast<long>(token.applied_updates));
            wire::ResidualReportMsg report = local_sweep(tracker, ds, token.running_e);
            token.basis = std::move(tracker.basis());
            token.applied_updates = static_cast<std::uint64_t>(tracker.applied_updates());
            channel.send(wire::encode_basis_token(token));
            channel.send(wire::encode_residual_report(report));
          } else {
            last_basis = token.basis;
            channel.send(wire::encode_weight_block(local_weights(last_basis, ds)));
          }
          break;
        }
        case MessageType::ScoreBundle: {
          slice = wire::decode_score_bundle(m);
          has_slice = true;
          break;
        }
        case MessageType::ParamBroadcast: {
          wire::ParamBroadcastMsg pb = wire::decode_param_broadcast(m);
          if (pb.phase == 1) return;
          if (!has_slice)
            throw StructuralError("participant '" + ds.participant_id +
                                  "': regression round before any score slice was delivered");
          ScoreShard shard = shard_from_slice(slice, ds, pb.model.k());
          if (pb.phase == 2) {
            channel.send(wire::encode_moment_report(local_moments(shard, pb.model.family)));
          } else {
            channel.send(wire::encode_gradient_packet(local_loglik_grad(pb.model, shard)));
          }
          break;
        }
        default:
          throw ParseError("participant '" + ds.participant_id + "': unexpected message type");
      }
    }
  } catch (...) {
    // Closing the socket surfaces the failure on the orchestrator side.
  }
}

// ---- clusters -----------------------------------------------------------------------

inline void validate_roster(const std::vector<const LocalDataset*>& roster) {
  if (roster.empty()) throw ArgumentError("federation: empty roster");
  std::map<std::string, int> seen;
  for (const LocalDataset* ds : roster) {
    if (!ds) throw ArgumentError("federation: null dataset in roster");
    ds->validate();
    if (ds->signals.empty())
      throw DataError("federation: participant '" + ds->participant_id + "' has no signals");
    if (++seen[ds->participant_id] > 1)
      throw ConfigError("federation: duplicate participant id '" + ds->participant_id + "'");
    if (!(ds->grid == roster.front()->grid))
      throw StructuralError("federation: participant '" + ds->participant_id +
                            "' uses a different sensor grid than '" +
                            roster.front()->participant_id + "'");
  }
}

class Cluster {
 public:
  virtual ~Cluster() = default;
  virtual std::vector<ParticipantLink*> links() = 0;
};

class InProcCluster final : public Cluster {
 public:
  explicit InProcCluster(const std::vector<const LocalDataset*>& roster) {
    validate_roster(roster);
    for (const LocalDataset* ds : roster) links_.push_back(std::make_unique<InProcLink>(ds));
  }
  std::vector<ParticipantLink*> links() override {
    std::vector<ParticipantLink*> out;
    for (auto& l : links_) out.push_back(l.get());
    return out;
  }

 private:
  std::vector<std::unique_ptr<InProcLink>> links_;
};

class SocketCluster final : public Cluster {
 public:
  explicit SocketCluster(const std::vector<const LocalDataset*>& roster,
                         WireRecorder* recorder = nullptr) {
    validate_roster(roster);
    LoopbackListener listener;
    threads_.reserve(roster.size());
    for (const LocalDataset* ds : roster)
      threads_.emplace_back([ds, port = listener.port()] { participant_serve(*ds, port); });

    std::map<std::string, SocketChannel> by_id;
    for (size_t i = 0; i < roster.size(); ++i) {
      SocketChannel channel = listener.accept();
      WireMessage join = channel.recv();
      if (recorder) recorder->record(join);
      wire::ResidualReportMsg hello = wire::decode_residual_report(join);
      if (!by_id.emplace(hello.participant_id, std::move(channel)).second)
        throw StructuralError("socket cluster: duplicate join from '" + hello.participant_id +
                              "'");
    }
    for (const LocalDataset* ds : roster) {
      auto it = by_id.find(ds->participant_id);
      if (it == by_id.end())
        throw ConfigError("socket cluster: participant '" + ds->participant_id +
                          "' never joined");
      links_.push_back(
          std::make_unique<SocketLink>(ds->participant_id, std::move(it->second), recorder));
    }
  }

  ~SocketCluster() override {
    for (auto& l : links_) {
      try {
        l->finish();
      } catch (...) {
      }
    }
    links_.clear();  // closes the channels, releasing any blocked participant
    for (auto& t : threads_)
      if (t.joinable()) t.join();
  }

  std::vector<ParticipantLink*> links() override {
    std::vector<ParticipantLink*> out;
    for (auto& l : links_) out.push_back(l.get());
    return out;
  }

 private:
  std::vector<std::unique_ptr<SocketLink>> links_;
  std::vector<std::thread> threads_;
};

inline std::unique_ptr<Cluster> make_cluster(Transport transport,
                                             const std::vector<const LocalDataset*>& roster,
                                             WireRecorder* recorder = nullptr) {
  if (transport == Transport::in_process) return std::make_unique<InProcCluster>(roster);
  return std::make_unique<SocketCluster>(roster, recorder);
}

// ---- protocols -----------------------------------------------------------------------

inline SubspaceRunResult run_subspace_protocol(const std::vector<ParticipantLink*>& links, int N,
                                               const FederationPlan& plan) {
  if (links.empty()) throw ArgumentError("run_subspace_protocol: no participants");
  if (plan.subspace_rank < 1)
    throw ArgumentError("run_subspace_protocol: subspace rank must be >= 1, got " +
                        std::to_string(plan.subspace_rank));
  const auto t0 = std::chrono::steady_clock::now();

  wire::BasisToken token;
  token.basis = init_subspace(N, plan.subspace_rank, plan.seed);
  std::mt19937_64 straggler_rng(
      mix_seed(plan.straggler_seed ? plan.straggler_seed : plan.seed, 0x5712));

  SubspaceRunResult res;
  for (int sweep = 1; sweep <= plan.max_sweeps; ++sweep) {
    Eigen::MatrixXd U_before;
    if (plan.stability_eps > 0.0) U_before = token.basis.U;

    size_t skip = links.size();  // out of range: nobody skipped
    if (plan.straggler == StragglerPolicy::drop_one_uniform && links.size() >= 2)
      skip = static_cast<size_t>(straggler_rng() % links.size());

    token.running_e = 0.0;
    SweepLog log;
    log.sweep = sweep;
    for (size_t i = 0; i < links.size(); ++i) {
      if (i == skip) continue;
      log.reports.push_back(links[i]->sweep(token));
    }
    log.e = token.running_e;
    log.modeled_comm_seconds = static_cast<double>(log.reports.size()) * plan.tau_comm;
    if (plan.stability_eps > 0.0) {
      const double affinity = (U_before.transpose() * token.basis.U).squaredNorm();
      log.basis_movement =
          std::sqrt(std::max(0.0, static_cast<double>(plan.subspace_rank) - affinity));
    }
    res.sweeps.push_back(log);

    if (!log.reports.empty() && log.e < plan.conv_eps) {
      res.converged = true;
      res.stop_reason = "residual";
      break;
    }
    if (plan.stability_eps > 0.0 && log.basis_movement >= 0.0 &&
        log.basis_movement < plan.stability_eps) {
      res.converged = true;
      res.stop_reason = "stability";
      break;
    }
  }
  if (res.stop_reason.empty()) res.stop_reason = "max_sweeps";

  res.basis = std::move(token.basis);
  res.applied_updates = token.applied_updates;
  for (const auto& s : res.sweeps) {
    res.modeled_comm_seconds += s.modeled_comm_seconds;
    for (const auto& r : s.reports) res.local_compute_seconds += r.local_seconds;
  }
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// Collect weight blocks, rotate into scores, return each participant its slice.
// The returned bundle (the orchestrator's view) holds every block.
inline ScoreBundle run_scores_protocol(const std::vector<ParticipantLink*>& links,
                                       const SubspaceBasis& basis) {
  if (links.empty()) throw ArgumentError("run_scores_protocol: no participants");
  std::vector<WeightBlock> blocks;
  blocks.reserve(links.size());
  for (ParticipantLink* l : links) blocks.push_back(l->weights(basis));
  ScoreBundle bundle = server_scores(blocks);
  canonicalize_bundle_signs(bundle, basis);
  for (size_t i = 0; i < links.size(); ++i) {
    ScoreBundle slice;
    slice.P = bundle.P;
    slice.mean_weight = bundle.mean_weight;
    slice.singular_values = bundle.singular_values;
    slice.blocks.push_back(bundle.blocks[i]);
    links[i]->deliver_slice(slice);
  }
  return bundle;
}

// Server-aggregated maximum-likelihood fit over the delivered score slices.
// `rounds_out`, when given, receives the number of evaluation broadcasts.
inline LLSModel run_lls_protocol(const std::vector<ParticipantLink*>& links, Family family, int k,
                                 const FitOptions& opt = {}, FitTrace* trace = nullptr,
                                 int* rounds_out = nullptr) {
  if (links.empty()) throw ArgumentError("run_lls_protocol: no participants");
  int rounds = 0;
  LLSRounds relay;
  relay.moments = [&links, family, k]() {
    std::vector<MomentPacket> out;
    out.reserve(links.size());
    for (ParticipantLink* l : links) out.push_back(l->moments(family, k));
    return out;
  };
  relay.evaluate = [&links, &rounds](const LLSModel& m) {
    ++rounds;
    std::vector<GradientPacket> out;
    out.reserve(links.size());
    for (ParticipantLink* l : links) out.push_back(l->evaluate(m));
    return out;
  };
  LLSModel model = fit_lls_rounds(relay, family, k, opt, trace);
  if (rounds_out) *rounds_out = rounds;
  return model;
}

}  // namespace fedprog
