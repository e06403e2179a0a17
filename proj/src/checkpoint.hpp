#ifndef INSITU_CHECKPOINT_HPP
#define INSITU_CHECKPOINT_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdc.hpp"
#include "writer.hpp"

namespace insitu::ckpt {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kVersion = 1;

// The five persisted state areas of the writer federator:
//   1 registry: file targets, claimed boundaries, chunk geometry, clock
//   2 time-manipulation buffers
//   3 ordered intake queues
//   4 pending file write states (accumulating and launched)
//   5 stored-but-unwritten emitted values
inline constexpr int kAreas = 5;

using AreaBytes = std::array<std::vector<std::uint8_t>, kAreas>;

struct Measurement {
  std::array<std::uint64_t, kAreas> sizes{};
  std::uint64_t epoch = 0;
};

// Phase 1: walk the state and count bytes, recording the lock epoch.
Measurement measure(const writer::WriterFederator& w);
// Phase 2: serialize. Throws if the state mutated since the measurement or
// if any area's length disagrees with phase 1. Each area is produced with a
// single up-front allocation.
AreaBytes serialize(const writer::WriterFederator& w, const Measurement& m);
// Both phases under one hold of the state lock.
AreaBytes capture(const writer::WriterFederator& w);

// Replaces the writer state with a captured one. The federator must have
// been built from the same configuration.
void restore_into(writer::WriterFederator& w, const AreaBytes& areas);

struct Meta {
  long timestep = 0;
  double model_time = 0;
  int nservers = 0;
};

// One checkpoint file: per-area variables holding every rank's bytes at
// its directory offset, the rank directory, and global metadata.
sdc::FileImage write_checkpoint(const std::vector<AreaBytes>& rank_areas, const Meta& meta);
Meta read_meta(const sdc::FileImage& file);
// Extracts one rank's areas; errors if the file was captured with a
// different server count than expected.
AreaBytes read_rank(const sdc::FileImage& file, int rank, int expected_nservers);

// Polls until the system is drained (no pending rule states, no
// outstanding collectives); throws after timeout_ms naming what is stuck.
void quiesce(const std::function<long()>& pending_count,
             const std::function<std::vector<std::string>()>& outstanding_uids,
             long timeout_ms);

}  // namespace insitu::ckpt

#endif
