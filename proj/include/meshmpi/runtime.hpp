/*
 * Copyright 2026 The meshmpi Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

/// Threaded message-passing runtime on top of the simulated mesh.
///
/// A host-side mpiexec launches one thread per rank (fork-join, row-major
/// rank-to-core mapping) and joins them all before returning. Rank code
/// uses a small MPI-like subset: init/finalize, communicator queries,
/// Cartesian topologies, and a buffered sendrecv-replace exchange.
///
/// The exchange cannot be zero-copy: payloads are staged through a per-rank
/// internal buffer of B bytes, segmenting each m-byte message into
/// ceil(m / B) chunk transactions. Its modeled cost is comm_time(m, B).
/// Completion time follows a blocking-rendezvous rule:
///
///     clock' = max(own clock, source clock at its call,
///                  dest clock at its call) + comm_time(m, B)
///
/// Partner clock stamps travel on control chunks: a header sent toward the
/// destination and an ack returned to the source, so both parties observe
/// each other's call-entry clocks. Payload contents never depend on B or
/// on thread scheduling; B affects modeled time only.

#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <cstring>
#include <functional>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "meshmpi/errors.hpp"
#include "meshmpi/mesh.hpp"
#include "meshmpi/perf_model.hpp"

namespace meshmpi {

/// Sentinel for "no neighbor" (non-periodic boundary). Exchanges addressed
/// to it are no-ops; a call whose partners are both null takes zero
/// modeled time.
inline constexpr int null_rank = -1;

enum class DataType : std::uint8_t { float32, complex64, byte };

constexpr std::size_t datatype_size(DataType t) {
  switch (t) {
    case DataType::float32: return 4;
    case DataType::complex64: return 8;
    case DataType::byte: return 1;
  }
  return 0;
}

/// Per-run tunables of the runtime itself.
struct RuntimeConfig {
  /// Internal staging buffer per rank, allocated at init against the
  /// core's memory budget.
  std::uint64_t internal_buffer_bytes = 512;

  void validate() const {
    if (internal_buffer_bytes < 32)
      throw ConfigError("internal buffer must be at least 32 bytes");
  }
};

/// Opaque communicator handle, valid on the rank that created it.
struct Comm {
  int id = -1;
  bool is_null() const { return id < 0; }
};
inline constexpr Comm comm_null{};

struct LaunchResult {
  int status = 0;                        // 0 iff every rank returned 0
  std::vector<int> rank_status;          // per-rank exit status
  std::vector<std::string> rank_error;   // diagnostic for failed ranks
  std::vector<RankState> ranks;          // final per-rank ledgers
  double job_time_ns = 0.0;              // max final logical clock
  std::string first_error;
};

class Rank;
using RankMain = std::function<int(Rank&)>;

namespace detail {

struct CommData {
  bool valid = false;
  std::vector<int> ranks;          // members, as world ranks, in rank order
  int my_index = -1;               // caller's rank within this communicator
  bool cartesian = false;
  std::vector<int> dims;
  std::vector<std::uint8_t> periods;
};

/// Shared state of one mpiexec invocation.
struct Job {
  Mesh& mesh;
  int np;
  RuntimeConfig config;
  std::vector<std::byte> args;
  std::vector<RankState> states;

  std::mutex barrier_mutex;
  std::condition_variable barrier_cv;
  int barrier_arrived = 0;
  double barrier_max_clock = 0.0;
  std::atomic<bool> aborted{false};

  Job(Mesh& mesh_, int np_, RuntimeConfig config_, std::span<const std::byte> args_)
      : mesh(mesh_), np(np_), config(config_), args(args_.begin(), args_.end()) {
    states.resize(static_cast<std::size_t>(np));
    for (int r = 0; r < np; ++r) {
      states[static_cast<std::size_t>(r)].rank = r;
      states[static_cast<std::size_t>(r)].row = r / mesh.config().cols;
      states[static_cast<std::size_t>(r)].col = r % mesh.config().cols;
    }
  }

  void abort() {
    aborted.store(true);
    mesh.abort_job();
    barrier_cv.notify_all();
  }

  /// Completion barrier: every rank's clock becomes the maximum clock
  /// over all ranks at their finalize call.
  double finalize_barrier(double clock_at_call) {
    std::unique_lock lock(barrier_mutex);
    barrier_max_clock = std::max(barrier_max_clock, clock_at_call);
    if (++barrier_arrived == np) {
      barrier_cv.notify_all();
    } else {
      barrier_cv.wait(lock, [&] { return barrier_arrived == np || aborted.load(); });
      if (aborted.load() && barrier_arrived != np) throw JobAborted();
    }
    return barrier_max_clock;
  }
};

}  // namespace detail

/// Per-rank handle passed to the entry function. All operations charge the
/// calling rank's logical clock only; the single cross-rank channel is the
/// mesh chunk transport used by sendrecv_replace.
class Rank {
public:
  Rank(detail::Job& job, int rank)
      : job_(job), st_(job.states[static_cast<std::size_t>(rank)]) {}

  Rank(const Rank&) = delete;
  Rank& operator=(const Rank&) = delete;

  int world_rank() const { return st_.rank; }
  std::pair<int, int> core_coords() const { return {st_.row, st_.col}; }
  const MeshConfig& config() const { return job_.mesh.config(); }
  const RuntimeConfig& runtime_config() const { return job_.config; }
  std::span<const std::byte> args() const { return job_.args; }
  const RankState& state() const { return st_; }

  void charge_compute(std::uint64_t flop_count) {
    job_.mesh.charge_compute(st_, flop_count);
  }

  LocalAlloc alloc(std::uint64_t nbytes) {
    return job_.mesh.local_alloc(st_, nbytes);
  }

  /// Starts the MPI phase of this rank: allocates the internal staging
  /// buffer against the memory budget and returns the world communicator.
  Comm init() {
    if (initialized_) throw CommError("init called twice");
    if (finalized_) throw CommError("init after finalize");
    staging_ = job_.mesh.local_alloc(st_, job_.config.internal_buffer_bytes);
    detail::CommData world;
    world.valid = true;
    world.ranks.resize(static_cast<std::size_t>(job_.np));
    for (int r = 0; r < job_.np; ++r) world.ranks[static_cast<std::size_t>(r)] = r;
    world.my_index = st_.rank;
    comms_.clear();
    comms_.push_back(std::move(world));
    initialized_ = true;
    return Comm{0};
  }

  /// Ends the MPI phase: releases the staging buffer and synchronizes the
  /// modeled clock with all other ranks (final clock = max over ranks).
  void finalize() {
    require_initialized();
    staging_.release();
    const double job_clock = job_.finalize_barrier(st_.clock_ns);
    st_.clock_ns = job_clock;
    finalized_ = true;
  }

  std::pair<int, int> comm_query(Comm comm) const {
    const auto& c = comm_data(comm);
    return {static_cast<int>(c.ranks.size()), c.my_index};
  }
  int comm_size(Comm comm) const { return comm_query(comm).first; }
  int comm_rank(Comm comm) const { return comm_query(comm).second; }

  /// New communicator of product(dims) ranks with Cartesian topology.
  /// Rank order is preserved (reorder accepted, ignored); callers beyond
  /// product(dims) receive the null communicator.
  Comm cart_create(Comm parent, const std::vector<int>& dims,
                   const std::vector<std::uint8_t>& periods, bool /*reorder*/ = false) {
    const auto& p = comm_data(parent);
    if (dims.empty() || dims.size() != periods.size())
      throw CommError("dims and periods must be non-empty and equal length");
    long long total = 1;
    for (int d : dims) {
      if (d < 1) throw CommError("cartesian dims must be positive");
      total *= d;
    }
    if (total > static_cast<long long>(p.ranks.size()))
      throw CommError("cartesian grid of " + std::to_string(total) +
                      " ranks exceeds parent size " + std::to_string(p.ranks.size()));
    if (p.my_index >= total) return comm_null;
    detail::CommData c;
    c.valid = true;
    c.ranks.assign(p.ranks.begin(), p.ranks.begin() + total);
    c.my_index = p.my_index;
    c.cartesian = true;
    c.dims = dims;
    c.periods = periods;
    comms_.push_back(std::move(c));
    return Comm{static_cast<int>(comms_.size()) - 1};
  }

  /// Row-major coordinates (last dimension varying fastest).
  std::vector<int> cart_coords(Comm comm, int rank) const {
    const auto& c = cart_data(comm);
    if (rank < 0 || rank >= static_cast<int>(c.ranks.size()))
      throw CommError("rank out of range for communicator");
    std::vector<int> coords(c.dims.size());
    int rem = rank;
    for (std::size_t d = c.dims.size(); d-- > 0;) {
      coords[d] = rem % c.dims[d];
      rem /= c.dims[d];
    }
    return coords;
  }

  /// (source, dest) pair for a displacement along one grid dimension.
  /// Periodic dimensions wrap; otherwise off-grid neighbors are null_rank.
  std::pair<int, int> cart_shift(Comm comm, int dim, int disp) const {
    const auto& c = cart_data(comm);
    if (dim < 0 || dim >= static_cast<int>(c.dims.size()))
      throw CommError("invalid cartesian dimension index");
    auto displaced = [&](int delta) -> int {
      std::vector<int> coords = cart_coords(comm, c.my_index);
      long long v = coords[static_cast<std::size_t>(dim)] + delta;
      const int extent = c.dims[static_cast<std::size_t>(dim)];
      if (c.periods[static_cast<std::size_t>(dim)]) {
        v = ((v % extent) + extent) % extent;
      } else if (v < 0 || v >= extent) {
        return null_rank;
      }
      coords[static_cast<std::size_t>(dim)] = static_cast<int>(v);
      int rank = 0;
      for (std::size_t d = 0; d < c.dims.size(); ++d)
        rank = rank * c.dims[d] + coords[d];
      return rank;
    };
    return {displaced(-disp), displaced(+disp)};
  }

  void comm_free(Comm comm) {
    if (comm.is_null() || comm.id >= static_cast<int>(comms_.size()))
      throw CommError("cannot free an invalid communicator");
    if (comm.id == 0) throw CommError("cannot free the world communicator");
    auto& c = comms_[static_cast<std::size_t>(comm.id)];
    if (!c.valid) throw CommError("communicator already freed");
    c.valid = false;
  }

  /// Blocking exchange: sends the buffer to dest and replaces it with the
  /// message received from source, both of exactly count elements. Data
  /// moves in ceil(m / B) buffered chunk transactions; the modeled cost is
  /// one comm_time(m, B) per call.
  void sendrecv_replace(std::span<std::byte> buf, std::size_t count, DataType dtype,
                        int dest, int sendtag, int source, int recvtag, Comm comm) {
    require_initialized();
    const auto& c = comm_data(comm);
    const std::uint64_t m = count * datatype_size(dtype);
    if (buf.size() < m) throw CommError("buffer smaller than count elements");
    const int dest_world = resolve(c, dest, "destination");
    const int source_world = resolve(c, source, "source");
    if (dest_world == null_rank && source_world == null_rank) return;

    const double clock_at_call = st_.clock_ns;
    const std::uint64_t B = job_.config.internal_buffer_bytes;
    const std::uint64_t k = chunk_count(m, B);

    // Control phase: headers toward dest, acks back to source, so every
    // party learns its partners' call-entry clocks.
    if (dest_world != null_rank) {
      ChunkEnvelope h;
      h.kind = ChunkEnvelope::Kind::header;
      h.tag = sendtag;
      h.msg_bytes = m;
      h.sender_clock_ns = clock_at_call;
      job_.mesh.transport_chunk(st_.rank, dest_world, std::move(h));
    }
    double source_clock = clock_at_call;
    double dest_clock = clock_at_call;
    if (source_world != null_rank) {
      ChunkEnvelope h = job_.mesh.retrieve_chunk(source_world, st_.rank);
      if (h.kind != ChunkEnvelope::Kind::header)
        throw CommError("protocol error: expected message header");
      if (h.tag != recvtag)
        throw CommError("tag mismatch: expected " + std::to_string(recvtag) +
                        ", partner sent " + std::to_string(h.tag));
      if (h.msg_bytes != m)
        throw CommError("message size mismatch: expected " + std::to_string(m) +
                        " B, partner sent " + std::to_string(h.msg_bytes) + " B");
      source_clock = h.sender_clock_ns;
      ChunkEnvelope ack;
      ack.kind = ChunkEnvelope::Kind::ack;
      ack.sender_clock_ns = clock_at_call;
      job_.mesh.transport_chunk(st_.rank, source_world, std::move(ack));
    }
    if (dest_world != null_rank) {
      ChunkEnvelope ack = job_.mesh.retrieve_chunk(dest_world, st_.rank);
      if (ack.kind != ChunkEnvelope::Kind::ack)
        throw CommError("protocol error: expected ack");
      dest_clock = ack.sender_clock_ns;
    }

    // Data phase: alternate one pushed and one popped chunk so any
    // permutation pattern makes progress with bounded mailboxes.
    std::vector<std::byte> incoming;
    if (source_world != null_rank) incoming.reserve(m);
    for (std::uint64_t i = 0; i < k; ++i) {
      if (dest_world != null_rank) {
        ChunkEnvelope d;
        d.kind = ChunkEnvelope::Kind::data;
        d.tag = sendtag;
        d.seq = i;
        d.msg_bytes = m;
        d.sender_clock_ns = clock_at_call;
        const std::uint64_t off = i * B;
        const std::uint64_t len = std::min(B, m - off);
        d.payload.assign(buf.begin() + static_cast<std::ptrdiff_t>(off),
                         buf.begin() + static_cast<std::ptrdiff_t>(off + len));
        job_.mesh.transport_chunk(st_.rank, dest_world, std::move(d));
      }
      if (source_world != null_rank) {
        ChunkEnvelope d = job_.mesh.retrieve_chunk(source_world, st_.rank);
        if (d.kind != ChunkEnvelope::Kind::data || d.seq != i)
          throw CommError("protocol error: chunk out of sequence");
        incoming.insert(incoming.end(), d.payload.begin(), d.payload.end());
      }
    }
    if (source_world != null_rank) {
      if (incoming.size() != m) throw CommError("protocol error: truncated message");
      std::copy(incoming.begin(), incoming.end(), buf.begin());
    }

    // Blocking-rendezvous completion time.
    const double t_comm = comm_time(m, B, job_.mesh.config().model);
    const double start = std::max({clock_at_call, source_clock, dest_clock});
    st_.clock_ns = start + t_comm;
    st_.comm_ns += t_comm;
    if (dest_world != null_rank) {
      st_.bytes_sent += m;
      st_.msgs_sent += 1;
      st_.chunks_sent += k;
    }
  }

  /// Typed convenience overload.
  template <typename T>
  void sendrecv_replace(std::span<T> buf, int dest, int sendtag, int source,
                        int recvtag, Comm comm) {
    sendrecv_replace(std::as_writable_bytes(buf), buf.size(), datatype_of<T>(),
                     dest, sendtag, source, recvtag, comm);
  }

private:
  template <typename T>
  static constexpr DataType datatype_of() {
    if constexpr (std::is_same_v<T, float>) return DataType::float32;
    else if constexpr (sizeof(T) == 8) return DataType::complex64;
    else return DataType::byte;
  }

  void require_initialized() const {
    if (!initialized_) throw CommError("MPI operation before init");
    if (finalized_) throw CommError("MPI operation after finalize");
  }

  const detail::CommData& comm_data(Comm comm) const {
    require_initialized();
    if (comm.is_null() || comm.id >= static_cast<int>(comms_.size()))
      throw CommError("invalid communicator handle");
    const auto& c = comms_[static_cast<std::size_t>(comm.id)];
    if (!c.valid) throw CommError("communicator has been freed");
    return c;
  }

  const detail::CommData& cart_data(Comm comm) const {
    const auto& c = comm_data(comm);
    if (!c.cartesian) throw CommError("communicator has no cartesian topology");
    return c;
  }

  int resolve(const detail::CommData& c, int rank, const char* role) const {
    if (rank == null_rank) return null_rank;
    if (rank < 0 || rank >= static_cast<int>(c.ranks.size()))
      throw CommError(std::string("invalid ") + role + " rank " + std::to_string(rank));
    return c.ranks[static_cast<std::size_t>(rank)];
  }

  detail::Job& job_;
  RankState& st_;
  std::vector<detail::CommData> comms_;
  LocalAlloc staging_;
  bool initialized_ = false;
  bool finalized_ = false;
};

/// Fork-join launcher: runs np rank threads mapped row-major onto the mesh
/// cores and returns once all have completed. Logical clocks start at zero
/// on every call; per-rank ledgers are collected into the result. A rank
/// failure aborts the remaining ranks and is reported in the status.
inline LaunchResult mpiexec(Mesh& mesh, int np, const RankMain& entry,
                            std::span<const std::byte> args = {},
                            RuntimeConfig config = {}) {
  if (np < 1) throw ConfigError("np must be >= 1");
  if (np > mesh.core_count())
    throw ConfigError("np = " + std::to_string(np) + " exceeds core count " +
                      std::to_string(mesh.core_count()));
  config.validate();
  mesh.reset();

  detail::Job job(mesh, np, config, args);
  LaunchResult result;
  result.rank_status.assign(static_cast<std::size_t>(np), 0);
  result.rank_error.assign(static_cast<std::size_t>(np), {});

  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(np));
  for (int r = 0; r < np; ++r) {
    threads.emplace_back([&, r] {
      Rank rank(job, r);
      try {
        const int status = entry(rank);
        result.rank_status[static_cast<std::size_t>(r)] = status;
        if (status != 0) job.abort();
      } catch (const JobAborted& e) {
        result.rank_status[static_cast<std::size_t>(r)] = -2;
        result.rank_error[static_cast<std::size_t>(r)] = e.what();
      } catch (const std::exception& e) {
        result.rank_status[static_cast<std::size_t>(r)] = -1;
        result.rank_error[static_cast<std::size_t>(r)] = e.what();
        job.abort();
      }
    });
  }
  for (auto& t : threads) t.join();

  result.ranks = job.states;
  for (int r = 0; r < np; ++r) {
    const auto idx = static_cast<std::size_t>(r);
    result.job_time_ns = std::max(result.job_time_ns, result.ranks[idx].clock_ns);
    if (result.rank_status[idx] != 0 && result.status == 0)
      result.status = result.rank_status[idx];
    if (result.first_error.empty() && result.rank_status[idx] == -1)
      result.first_error = result.rank_error[idx];
  }
  if (result.status == -2 && !result.first_error.empty()) result.status = -1;
  return result;
}

}  // namespace meshmpi
