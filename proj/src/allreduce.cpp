// SPDX-License-Identifier: Apache-2.0
#include "matml/allreduce.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "matml/common.hpp"

namespace matml {

ParamMap allreduce_mean(std::span<const ParamMap> worker_grads) {
  if (worker_grads.empty()) fail("allreduce_mean: no workers");
  const ParamMap& first = worker_grads[0];
  for (std::size_t w = 1; w < worker_grads.size(); ++w) {
    const ParamMap& other = worker_grads[w];
    if (other.size() != first.size()) fail("allreduce_mean: key sets differ across workers");
    auto ita = first.begin();
    auto itb = other.begin();
    for (; ita != first.end(); ++ita, ++itb) {
      if (ita->first != itb->first)
        fail("allreduce_mean: key mismatch '" + ita->first + "' vs '" + itb->first + "'");
      if (ita->second.shape != itb->second.shape)
        fail("allreduce_mean: shape mismatch for '" + ita->first + "': " +
             shape_str(ita->second.shape) + " vs " + shape_str(itb->second.shape));
    }
  }
  ParamMap out;
  const double scale = 1.0 / static_cast<double>(worker_grads.size());
  for (const auto& [name, t] : first) {
    Tensor acc = t.detached();
    for (std::size_t w = 1; w < worker_grads.size(); ++w) {
      const Tensor& other = worker_grads[w].at(name);
      for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += other.data[i];
    }
    for (double& v : acc.data) v *= scale;
    out.emplace(name, std::move(acc));
  }
  return out;
}

std::vector<double> flatten_params(const ParamMap& params) {
  std::vector<double> out;
  for (const auto& [name, t] : params) out.insert(out.end(), t.data.begin(), t.data.end());
  return out;
}

ParamMap unflatten_params(const ParamMap& reference, std::span<const double> values) {
  ParamMap out;
  std::size_t cursor = 0;
  for (const auto& [name, t] : reference) {
    if (cursor + t.numel() > values.size()) fail("unflatten_params: payload too short");
    out.emplace(name, Tensor(t.shape, std::vector<double>(values.begin() + cursor,
                                                          values.begin() + cursor + t.numel())));
    cursor += t.numel();
  }
  if (cursor != values.size()) fail("unflatten_params: payload too long");
  return out;
}

namespace {

constexpr std::uint32_t kWireVersion = 1;

struct FrameHeader {
  std::uint32_t version;
  std::uint32_t sequence;
  std::uint64_t payload_bytes;
};

[[noreturn]] void sys_fail(const std::string& what) {
  fail(what + ": " + std::strerror(errno));
}

void wait_ready(int fd, short events, int timeout_ms, const char* what) {
  pollfd p{fd, events, 0};
  const int r = ::poll(&p, 1, timeout_ms);
  if (r == 0) fail(std::string("ring: peer timeout while ") + what);
  if (r < 0) sys_fail("ring: poll");
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

}  // namespace

std::vector<RingListener> open_ring_listeners(std::size_t world) {
  std::vector<RingListener> out(world);
  for (std::size_t r = 0; r < world; ++r) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) sys_fail("ring: socket");
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) sys_fail("ring: bind");
    if (::listen(fd, 1) < 0) sys_fail("ring: listen");
    socklen_t len = sizeof addr;
    if (::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) < 0)
      sys_fail("ring: getsockname");
    out[r].fd = fd;
    out[r].port = ntohs(addr.sin_port);
  }
  return out;
}

RingPeer::RingPeer(std::size_t rank, std::size_t world,
                   const std::vector<RingListener>& listeners, int timeout_ms)
    : rank_(rank), world_(world), timeout_ms_(timeout_ms) {
  if (world < 2) return;  // single worker: no links needed
  if (listeners.size() != world) fail("ring: listener table size mismatch");

  // connect to the successor; its listener is already bound, so retries are
  // only needed against kernel backlog pressure
  const std::uint16_t next_port = listeners[(rank + 1) % world].port;
  out_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (out_fd_ < 0) sys_fail("ring: socket");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(next_port);
  if (::connect(out_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0)
    sys_fail("ring: connect to successor");
  set_nodelay(out_fd_);

  // accept the predecessor on our own listener
  wait_ready(listeners[rank].fd, POLLIN, timeout_ms_, "waiting for predecessor");
  in_fd_ = ::accept(listeners[rank].fd, nullptr, nullptr);
  if (in_fd_ < 0) sys_fail("ring: accept");
  set_nodelay(in_fd_);
}

RingPeer::~RingPeer() {
  if (in_fd_ >= 0) ::close(in_fd_);
  if (out_fd_ >= 0) ::close(out_fd_);
}

std::vector<double> RingPeer::exchange(std::uint32_t sequence, std::span<const double> out) {
  if (world_ < 2) return std::vector<double>(out.begin(), out.end());

  // assemble the outgoing frame
  FrameHeader header{kWireVersion, sequence, out.size() * sizeof(double)};
  std::vector<unsigned char> tx(sizeof header + header.payload_bytes + sizeof(std::uint64_t));
  std::memcpy(tx.data(), &header, sizeof header);
  std::memcpy(tx.data() + sizeof header, out.data(), header.payload_bytes);
  const std::uint64_t checksum = fnv1a64(out.data(), header.payload_bytes);
  std::memcpy(tx.data() + sizeof header + header.payload_bytes, &checksum, sizeof checksum);

  std::vector<unsigned char> rx(sizeof(FrameHeader));
  std::size_t sent = 0, received = 0;
  std::size_t expect = rx.size();
  bool header_parsed = false;

  // full-duplex pump: keep both directions moving so neither side blocks on
  // a filled kernel buffer
  while (sent < tx.size() || received < expect) {
    pollfd fds[2];
    nfds_t n = 0;
    int send_slot = -1, recv_slot = -1;
    if (sent < tx.size()) {
      send_slot = static_cast<int>(n);
      fds[n++] = {out_fd_, POLLOUT, 0};
    }
    if (received < expect) {
      recv_slot = static_cast<int>(n);
      fds[n++] = {in_fd_, POLLIN, 0};
    }
    const int r = ::poll(fds, n, timeout_ms_);
    if (r == 0) fail("ring: peer timeout during exchange");
    if (r < 0) sys_fail("ring: poll");

    if (send_slot >= 0 && (fds[send_slot].revents & (POLLOUT | POLLERR | POLLHUP))) {
      const ssize_t w = ::send(out_fd_, tx.data() + sent, tx.size() - sent, MSG_NOSIGNAL);
      if (w < 0 && errno != EAGAIN && errno != EWOULDBLOCK) sys_fail("ring: send");
      if (w > 0) sent += static_cast<std::size_t>(w);
    }
    if (recv_slot >= 0 && (fds[recv_slot].revents & (POLLIN | POLLERR | POLLHUP))) {
      const ssize_t w = ::recv(in_fd_, rx.data() + received, expect - received, 0);
      if (w == 0) fail("ring: peer closed the connection");
      if (w < 0 && errno != EAGAIN && errno != EWOULDBLOCK) sys_fail("ring: recv");
      if (w > 0) received += static_cast<std::size_t>(w);
    }
    if (!header_parsed && received == sizeof(FrameHeader)) {
      FrameHeader in_header;
      std::memcpy(&in_header, rx.data(), sizeof in_header);
      if (in_header.version != kWireVersion)
        fail("ring: wire version " + std::to_string(in_header.version) + ", expected " +
             std::to_string(kWireVersion));
      if (in_header.sequence != sequence)
        fail("ring: out-of-order frame " + std::to_string(in_header.sequence) + ", expected " +
             std::to_string(sequence));
      expect = sizeof(FrameHeader) + in_header.payload_bytes + sizeof(std::uint64_t);
      rx.resize(expect);
      header_parsed = true;
    }
  }

  FrameHeader in_header;
  std::memcpy(&in_header, rx.data(), sizeof in_header);
  const std::size_t count = in_header.payload_bytes / sizeof(double);
  std::vector<double> payload(count);
  std::memcpy(payload.data(), rx.data() + sizeof in_header, in_header.payload_bytes);
  std::uint64_t stated;
  std::memcpy(&stated, rx.data() + sizeof in_header + in_header.payload_bytes, sizeof stated);
  if (stated != fnv1a64(payload.data(), in_header.payload_bytes))
    fail("ring: checksum mismatch on frame " + std::to_string(sequence));
  return payload;
}

std::vector<double> ring_allreduce_mean(RingPeer& peer, std::span<const double> values) {
  const std::size_t world = peer.world();
  std::vector<double> buf(values.begin(), values.end());
  if (world < 2) return buf;

  const std::size_t n = buf.size();
  auto chunk_begin = [&](std::size_t c) { return c * n / world; };
  auto chunk_end = [&](std::size_t c) { return (c + 1) * n / world; };
  auto chunk_of = [&](std::size_t offset) {
    return (peer.rank() + world - offset) % world;
  };

  std::uint32_t sequence = 0;

  // reduce-scatter: after W-1 steps rank r holds the full sum of chunk r+1
  for (std::size_t s = 0; s + 1 < world; ++s) {
    const std::size_t send_c = chunk_of(s);
    const std::size_t recv_c = chunk_of(s + 1);
    std::span<const double> out(buf.data() + chunk_begin(send_c),
                                chunk_end(send_c) - chunk_begin(send_c));
    std::vector<double> in = peer.exchange(sequence++, out);
    if (in.size() != chunk_end(recv_c) - chunk_begin(recv_c))
      fail("ring: chunk size mismatch during reduce-scatter");
    double* dst = buf.data() + chunk_begin(recv_c);
    for (std::size_t i = 0; i < in.size(); ++i) dst[i] += in[i];
  }

  // all-gather: circulate the owned (fully reduced) chunks
  for (std::size_t s = 0; s + 1 < world; ++s) {
    const std::size_t send_c = (peer.rank() + 1 + world - s) % world;
    const std::size_t recv_c = (peer.rank() + world - s) % world;
    std::span<const double> out(buf.data() + chunk_begin(send_c),
                                chunk_end(send_c) - chunk_begin(send_c));
    std::vector<double> in = peer.exchange(sequence++, out);
    if (in.size() != chunk_end(recv_c) - chunk_begin(recv_c))
      fail("ring: chunk size mismatch during all-gather");
    std::copy(in.begin(), in.end(), buf.begin() + static_cast<std::ptrdiff_t>(chunk_begin(recv_c)));
  }

  const double scale = 1.0 / static_cast<double>(world);
  for (double& v : buf) v *= scale;
  return buf;
}

ParamMap ring_allreduce_mean(RingPeer& peer, const ParamMap& grads) {
  std::vector<double> flat = flatten_params(grads);
  std::vector<double> reduced = ring_allreduce_mean(peer, flat);
  return unflatten_params(grads, reduced);
}

}  // namespace matml
