// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "matml/models.hpp"

namespace matml {

// Elementwise arithmetic mean per parameter across workers. Key sets and
// shapes must agree.
ParamMap allreduce_mean(std::span<const ParamMap> worker_grads);

// A bound-but-unaccepted loopback listener plus the port table of the whole
// ring. Binding happens before workers start (or fork), so there is no
// connect/accept race.
struct RingListener {
  int fd = -1;
  std::uint16_t port = 0;
};

// One listener per rank on 127.0.0.1, ports chosen by the kernel.
std::vector<RingListener> open_ring_listeners(std::size_t world);

// Duplex link to the ring neighbours: accepts the predecessor's connection
// on our listener and connects to the successor. Frames are length-prefixed:
// {u32 version, u32 sequence, u64 payload bytes, float64 LE payload,
// u64 FNV-1a checksum}. A peer that stays silent past the timeout aborts the
// run, as does any checksum mismatch.
class RingPeer {
 public:
  RingPeer(std::size_t rank, std::size_t world, const std::vector<RingListener>& listeners,
           int timeout_ms = 30000);
  ~RingPeer();
  RingPeer(const RingPeer&) = delete;
  RingPeer& operator=(const RingPeer&) = delete;

  std::size_t rank() const { return rank_; }
  std::size_t world() const { return world_; }

  // Sends `out` to the successor while receiving the predecessor's frame of
  // the same sequence number; full-duplex so large frames cannot deadlock.
  std::vector<double> exchange(std::uint32_t sequence, std::span<const double> out);

 private:
  std::size_t rank_ = 0;
  std::size_t world_ = 1;
  int in_fd_ = -1;
  int out_fd_ = -1;
  int timeout_ms_ = 30000;
};

// Ring all-reduce (reduce-scatter then all-gather); every rank returns the
// elementwise mean. Each worker moves 2*(W-1)/W of the payload.
std::vector<double> ring_allreduce_mean(RingPeer& peer, std::span<const double> values);
ParamMap ring_allreduce_mean(RingPeer& peer, const ParamMap& grads);

// Flatten/unflatten in key order, shared by the collectives and checksums.
std::vector<double> flatten_params(const ParamMap& params);
ParamMap unflatten_params(const ParamMap& reference, std::span<const double> values);

}  // namespace matml
