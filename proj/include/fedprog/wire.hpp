#pragma once

// Wire protocol for the multi-process simulator.
//
// Frame layout: 4-byte big-endian length (counting everything after the
// length field), 1-byte message type, payload.  All multi-byte payload fields
// are little-endian; doubles are raw IEEE-754 bits, so serialization
// round-trips exactly and the wire transport is bit-identical to the
// in-process one.
//
// Only aggregates travel: bases, residual scalars, weight/score blocks,
// model parameters, gradients, response moments.  Raw signal values and
// observation index sets never appear in any payload.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstdint>
#include <cstring>
#include <mutex>
#include <string>
#include <vector>

#include "fedprog/errors.hpp"
#include "fedprog/lls.hpp"
#include "fedprog/scores.hpp"
#include "fedprog/subspace.hpp"

namespace fedprog {

enum class MessageType : std::uint8_t {
  BasisHandoff = 0x01,
  ResidualReport = 0x02,
  WeightBlock = 0x03,
  ScoreBundle = 0x04,
  ParamBroadcast = 0x05,
  GradientPacket = 0x06,
  MomentReport = 0x07,
};

inline const char* message_type_name(MessageType t) {
  switch (t) {
    case MessageType::BasisHandoff: return "BasisHandoff";
    case MessageType::ResidualReport: return "ResidualReport";
    case MessageType::WeightBlock: return "WeightBlock";
    case MessageType::ScoreBundle: return "ScoreBundle";
    case MessageType::ParamBroadcast: return "ParamBroadcast";
    case MessageType::GradientPacket: return "GradientPacket";
    case MessageType::MomentReport: return "MomentReport";
  }
  return "unknown";
}

struct WireMessage {
  MessageType type;
  std::string payload;
};

// Thread-safe capture of every frame that crosses the orchestrator boundary;
// used by the privacy-boundary audit.
class WireRecorder {
 public:
  void record(const WireMessage& m) {
    std::lock_guard<std::mutex> lock(mu_);
    messages_.push_back(m);
  }
  std::vector<WireMessage> snapshot() const {
    std::lock_guard<std::mutex> lock(mu_);
    return messages_;
  }
  size_t size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return messages_.size();
  }

 private:
  mutable std::mutex mu_;
  std::vector<WireMessage> messages_;
};

// ---- frame codec ---------------------------------------------------------------

inline std::string encode_frame(const WireMessage& m) {
  const std::uint32_t length = static_cast<std::uint32_t>(1 + m.payload.size());
  const std::uint32_t be = htonl(length);
  std::string out;
  out.reserve(4 + length);
  out.append(reinterpret_cast<const char*>(&be), 4);
  out.push_back(static_cast<char>(m.type));
  out += m.payload;
  return out;
}

// Decode one frame from `bytes` starting at `pos`; advances pos.
inline WireMessage decode_frame(const std::string& bytes, size_t& pos) {
  if (pos + 4 > bytes.size()) throw ParseError("wire: truncated frame length");
  std::uint32_t be;
  std::memcpy(&be, bytes.data() + pos, 4);
  const std::uint32_t length = ntohl(be);
  pos += 4;
  if (length < 1 || pos + length > bytes.size()) throw ParseError("wire: truncated frame body");
  WireMessage m;
  m.type = static_cast<MessageType>(static_cast<std::uint8_t>(bytes[pos]));
  m.payload = bytes.substr(pos + 1, length - 1);
  pos += length;
  return m;
}

// ---- payload codecs --------------------------------------------------------------

namespace wire {

inline void put_string(std::string& out, const std::string& s) {
  detail::put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

inline std::string get_string(const std::string& in, size_t& pos, const char* what) {
  std::uint32_t len = detail::get_u32(in, pos, what);
  if (pos + len > in.size()) throw ParseError(std::string("wire: truncated ") + what);
  std::string s = in.substr(pos, len);
  pos += len;
  return s;
}

inline void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

inline std::uint64_t get_u64(const std::string& in, size_t& pos, const char* what) {
  if (pos + 8 > in.size()) throw ParseError(std::string("wire: truncated ") + what);
  std::uint64_t v;
  std::memcpy(&v, in.data() + pos, 8);
  pos += 8;
  return v;
}

// BasisHandoff: the ring token.  purpose 0 = apply a sweep, 1 = reply with a
// weight block.  Carries the running residual sum and the applied-update
// counter so the periodic re-orthonormalization cadence is transport-invariant.
struct BasisToken {
  SubspaceBasis basis;
  double running_e = 0.0;
  std::uint64_t applied_updates = 0;
  std::uint8_t purpose = 0;
};

inline WireMessage encode_basis_token(const BasisToken& t) {
  std::string p;
  p.push_back(static_cast<char>(t.purpose));
  detail::put_f64(p, t.running_e);
  put_u64(p, t.applied_updates);
  p += serialize_basis(t.basis);
  return WireMessage{MessageType::BasisHandoff, std::move(p)};
}

inline BasisToken decode_basis_token(const WireMessage& m) {
  if (m.type != MessageType::BasisHandoff) throw ParseError("wire: expected BasisHandoff");
  if (m.payload.size() < 17) throw ParseError("wire: truncated BasisHandoff");
  BasisToken t;
  size_t pos = 0;
  t.purpose = static_cast<std::uint8_t>(m.payload[pos++]);
  t.running_e = detail::get_f64(m.payload, pos, "BasisHandoff");
  t.applied_updates = get_u64(m.payload, pos, "BasisHandoff");
  t.basis = deserialize_basis(m.payload.substr(pos), "BasisHandoff");
  return t;
}

// ResidualReport: per-sweep bookkeeping (also the join handshake, with id set
// and every numeric field zero).
struct ResidualReportMsg {
  std::string participant_id;
  double contribution = 0.0;
  std::uint32_t signals_visited = 0;
  double local_seconds = 0.0;
};

inline WireMessage encode_residual_report(const ResidualReportMsg& r) {
  std::string p;
  put_string(p, r.participant_id);
  detail::put_f64(p, r.contribution);
  detail::put_u32(p, r.signals_visited);
  detail::put_f64(p, r.local_seconds);
  return WireMessage{MessageType::ResidualReport, std::move(p)};
}

inline ResidualReportMsg decode_residual_report(const WireMessage& m) {
  if (m.type != MessageType::ResidualReport) throw ParseError("wire: expected ResidualReport");
  ResidualReportMsg r;
  size_t pos = 0;
  r.participant_id = get_string(m.payload, pos, "ResidualReport id");
  r.contribution = detail::get_f64(m.payload, pos, "ResidualReport");
  r.signals_visited = detail::get_u32(m.payload, pos, "ResidualReport");
  r.local_seconds = detail::get_f64(m.payload, pos, "ResidualReport");
  return r;
}

inline WireMessage encode_weight_block(const WeightBlock& b) {
  std::string p;
  put_string(p, b.participant_id);
  detail::put_u32(p, static_cast<std::uint32_t>(b.W.rows()));
  detail::put_u32(p, static_cast<std::uint32_t>(b.W.cols()));
  for (const auto& id : b.system_ids) put_string(p, id);
  for (int i = 0; i < b.W.rows(); ++i)
    for (int j = 0; j < b.W.cols(); ++j) detail::put_f64(p, b.W(i, j));
  return WireMessage{MessageType::WeightBlock, std::move(p)};
}

inline WeightBlock decode_weight_block(const WireMessage& m) {
  if (m.type != MessageType::WeightBlock) throw ParseError("wire: expected WeightBlock");
  WeightBlock b;
  size_t pos = 0;
  b.participant_id = get_string(m.payload, pos, "WeightBlock id");
  const std::uint32_t K = detail::get_u32(m.payload, pos, "WeightBlock");
  const std::uint32_t J = detail::get_u32(m.payload, pos, "WeightBlock");
  for (std::uint32_t j = 0; j < J; ++j)
    b.system_ids.push_back(get_string(m.payload, pos, "WeightBlock system id"));
  b.W.resize(K, J);
  for (std::uint32_t i = 0; i < K; ++i)
    for (std::uint32_t j = 0; j < J; ++j) b.W(i, j) = detail::get_f64(m.payload, pos, "WeightBlock");
  if (pos != m.payload.size()) throw ParseError("wire: trailing bytes in WeightBlock");
  return b;
}

inline WireMessage encode_score_bundle(const ScoreBundle& b) {
  return WireMessage{MessageType::ScoreBundle, serialize_bundle(b)};
}

inline ScoreBundle decode_score_bundle(const WireMessage& m) {
  if (m.type != MessageType::ScoreBundle) throw ParseError("wire: expected ScoreBundle");
  return deserialize_bundle(m.payload, "ScoreBundle");
}

// ParamBroadcast: phase 0 = evaluate likelihood/gradient at these parameters,
// phase 1 = protocol finished, phase 2 = send response moments.
struct ParamBroadcastMsg {
  std::uint8_t phase = 0;
  std::uint32_t round = 0;
  LLSModel model;
};

inline WireMessage encode_param_broadcast(const ParamBroadcastMsg& pb) {
  std::string p;
  p.push_back(static_cast<char>(pb.phase));
  detail::put_u32(p, pb.round);
  p.push_back(static_cast<char>(static_cast<int>(pb.model.family)));
  detail::put_u32(p, static_cast<std::uint32_t>(pb.model.k()));
  detail::put_f64(p, pb.model.beta0);
  for (int i = 0; i < pb.model.k(); ++i) detail::put_f64(p, pb.model.beta[i]);
  detail::put_f64(p, pb.model.sigma);
  return WireMessage{MessageType::ParamBroadcast, std::move(p)};
}

inline ParamBroadcastMsg decode_param_broadcast(const WireMessage& m) {
  if (m.type != MessageType::ParamBroadcast) throw ParseError("wire: expected ParamBroadcast");
  ParamBroadcastMsg pb;
  size_t pos = 0;
  if (m.payload.empty()) throw ParseError("wire: empty ParamBroadcast");
  pb.phase = static_cast<std::uint8_t>(m.payload[pos++]);
  pb.round = detail::get_u32(m.payload, pos, "ParamBroadcast");
  pb.model.family = static_cast<Family>(static_cast<std::uint8_t>(m.payload[pos++]));
  const std::uint32_t k = detail::get_u32(m.payload, pos, "ParamBroadcast");
  pb.model.beta0 = detail::get_f64(m.payload, pos, "ParamBroadcast");
  pb.model.beta.resize(k);
  for (std::uint32_t i = 0; i < k; ++i)
    pb.model.beta[i] = detail::get_f64(m.payload, pos, "ParamBroadcast");
  pb.model.sigma = detail::get_f64(m.payload, pos, "ParamBroadcast");
  return pb;
}

inline WireMessage encode_gradient_packet(const GradientPacket& g) {
  std::string p;
  put_string(p, g.participant_id);
  detail::put_u32(p, static_cast<std::uint32_t>(g.grad_beta.size()));
  detail::put_f64(p, g.grad_beta0);
  for (int i = 0; i < g.grad_beta.size(); ++i) detail::put_f64(p, g.grad_beta[i]);
  detail::put_f64(p, g.grad_log_sigma);
  detail::put_u32(p, g.n);
  detail::put_f64(p, g.loglik);
  return WireMessage{MessageType::GradientPacket, std::move(p)};
}

inline GradientPacket decode_gradient_packet(const WireMessage& m) {
  if (m.type != MessageType::GradientPacket) throw ParseError("wire: expected GradientPacket");
  GradientPacket g;
  size_t pos = 0;
  g.participant_id = get_string(m.payload, pos, "GradientPacket id");
  const std::uint32_t k = detail::get_u32(m.payload, pos, "GradientPacket");
  g.grad_beta0 = detail::get_f64(m.payload, pos, "GradientPacket");
  g.grad_beta.resize(k);
  for (std::uint32_t i = 0; i < k; ++i)
    g.grad_beta[i] = detail::get_f64(m.payload, pos, "GradientPacket");
  g.grad_log_sigma = detail::get_f64(m.payload, pos, "GradientPacket");
  g.n = detail::get_u32(m.payload, pos, "GradientPacket");
  g.loglik = detail::get_f64(m.payload, pos, "GradientPacket");
  return g;
}

inline WireMessage encode_moment_report(const MomentPacket& mp) {
  std::string p;
  put_string(p, mp.participant_id);
  detail::put_u32(p, mp.n);
  detail::put_f64(p, mp.sum_y);
  detail::put_f64(p, mp.sum_y2);
  return WireMessage{MessageType::MomentReport, std::move(p)};
}

inline MomentPacket decode_moment_report(const WireMessage& m) {
  if (m.type != MessageType::MomentReport) throw ParseError("wire: expected MomentReport");
  MomentPacket mp;
  size_t pos = 0;
  mp.participant_id = get_string(m.payload, pos, "MomentReport id");
  mp.n = detail::get_u32(m.payload, pos, "MomentReport");
  mp.sum_y = detail::get_f64(m.payload, pos, "MomentReport");
  mp.sum_y2 = detail::get_f64(m.payload, pos, "MomentReport");
  return mp;
}

}  // namespace wire

// ---- blocking socket IO -----------------------------------------------------------

class SocketChannel {
 public:
  explicit SocketChannel(int fd = -1) : fd_(fd) {}
  SocketChannel(const SocketChannel&) = delete;
  SocketChannel& operator=(const SocketChannel&) = delete;
  SocketChannel(SocketChannel&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  SocketChannel& operator=(SocketChannel&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = o.fd_;
      o.fd_ = -1;
    }
    return *this;
  }
  ~SocketChannel() { close(); }

  bool valid() const { return fd_ >= 0; }

  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

  void send(const WireMessage& m) const {
    const std::string frame = encode_frame(m);
    size_t sent = 0;
    while (sent < frame.size()) {
      ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent, 0);
      if (n <= 0) throw ParseError("wire: socket send failed");
      sent += static_cast<size_t>(n);
    }
  }

  WireMessage recv() const {
    char head[4];
    read_exact(head, 4);
    std::uint32_t be;
    std::memcpy(&be, head, 4);
    const std::uint32_t length = ntohl(be);
    if (length < 1 || length > (1u << 30)) throw ParseError("wire: implausible frame length");
    std::string body(length, '\0');
    read_exact(body.data(), length);
    WireMessage m;
    m.type = static_cast<MessageType>(static_cast<std::uint8_t>(body[0]));
    m.payload = body.substr(1);
    return m;
  }

 private:
  void read_exact(char* buf, size_t n) const {
    size_t got = 0;
    while (got < n) {
      ssize_t r = ::recv(fd_, buf + got, n - got, 0);
      if (r <= 0) throw ParseError("wire: socket closed mid-frame");
      got += static_cast<size_t>(r);
    }
  }

  int fd_;
};

// Loopback listener bound to an ephemeral port.
class LoopbackListener {
 public:
  LoopbackListener() {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw ConfigError("wire: cannot create listening socket");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(fd_, 64) != 0) {
      ::close(fd_);
      throw ConfigError("wire: cannot bind loopback listener");
    }
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }
  ~LoopbackListener() {
    if (fd_ >= 0) ::close(fd_);
  }

  int port() const { return port_; }

  SocketChannel accept() const {
    int cfd = ::accept(fd_, nullptr, nullptr);
    if (cfd < 0) throw ConfigError("wire: accept failed");
    return SocketChannel(cfd);
  }

 private:
  int fd_ = -1;
  int port_ = 0;
};

inline SocketChannel connect_loopback(int port) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw ConfigError("wire: cannot create socket");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    throw ConfigError("wire: cannot connect to loopback port " + std::to_string(port));
  }
  return SocketChannel(fd);
}

}  // namespace fedprog
