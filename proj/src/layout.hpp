#ifndef INSITU_LAYOUT_HPP
#define INSITU_LAYOUT_HPP

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace insitu::layout {

struct LayoutError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A producer's rectangular sub-domain. Offsets and sizes are in declared
// dimension order (z,y,x for the 3-D fields).
struct ChunkRect {
  int owner = -1;
  std::vector<long> start;
  std::vector<long> extent;

  long area() const {
    long a = 1;
    for (long e : extent) a *= e;
    return a;
  }
  bool operator==(const ChunkRect&) const = default;
};

// A contiguous rectangle exactly tiled by its member chunks.
struct Region {
  std::vector<long> start;
  std::vector<long> extent;
  std::vector<ChunkRect> members;

  long area() const {
    long a = 1;
    for (long e : extent) a *= e;
    return a;
  }
};

struct WritePlan {
  std::vector<Region> regions;
  long global_write_count = 0;  // max region count over all servers
  long dummy_writes = 0;        // this server's shortfall
};

// Partitions disjoint chunks into rectangular regions, preferring larger
// regions. Throws on overlapping chunks.
std::vector<Region> merge_chunks(std::vector<ChunkRect> chunks);

// dummy count = max over all servers - local count.
long balance_write_counts(long local_count, std::span<const long> all_counts);

// Places a chunk payload (row-major in the chunk's own extents) at its
// offset within the region buffer (row-major in the region's extents).
void copy_into_region(std::span<double> region_buffer, const Region& region,
                      const ChunkRect& chunk, std::span<const double> payload);

bool rects_overlap(const ChunkRect& a, const ChunkRect& b);

// Staging buffer for one region; complete once every member chunk has
// been copied in.
class RegionBuffer {
 public:
  explicit RegionBuffer(Region region)
      : region_(std::move(region)), data_(std::size_t(region_.area()), 0.0) {}

  void copy_chunk(const ChunkRect& chunk, std::span<const double> payload) {
    copy_into_region(data_, region_, chunk, payload);
    ++copied_;
  }

  bool complete() const { return copied_ == region_.members.size(); }
  const Region& region() const { return region_; }
  const std::vector<double>& data() const { return data_; }

 private:
  Region region_;
  std::vector<double> data_;
  std::size_t copied_ = 0;
};

}  // namespace insitu::layout

#endif
