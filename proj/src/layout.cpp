#include "layout.hpp"

#include <algorithm>
#include <numeric>

namespace insitu::layout {

bool rects_overlap(const ChunkRect& a, const ChunkRect& b) {
  for (std::size_t d = 0; d < a.start.size(); ++d) {
    if (a.start[d] + a.extent[d] <= b.start[d]) return false;
    if (b.start[d] + b.extent[d] <= a.start[d]) return false;
  }
  return true;
}

namespace {

struct Candidate {
  std::vector<long> start;
  std::vector<long> extent;
  std::vector<int> members;  // indices into the chunk list
  long area = 0;
};

bool better(const Candidate& a, const Candidate& b) {
  if (a.area != b.area) return a.area > b.area;
  if (a.start != b.start) return a.start < b.start;
  return a.members.size() < b.members.size();
}

// Grows a maximal run of unassigned chunks through `seed` along run_dim:
// equal bounds in every other dimension, adjacent in run_dim.
Candidate grow_run(const std::vector<ChunkRect>& chunks, const std::vector<bool>& assigned,
                   int seed, std::size_t run_dim) {
  const std::size_t ndim = chunks[seed].start.size();
  Candidate c;
  c.start = chunks[seed].start;
  c.extent = chunks[seed].extent;
  c.members = {seed};

  auto matches_other_dims = [&](const ChunkRect& r) {
    for (std::size_t d = 0; d < ndim; ++d) {
      if (d == run_dim) continue;
      if (r.start[d] != c.start[d] || r.extent[d] != c.extent[d]) return false;
    }
    return true;
  };

  bool grew = true;
  while (grew) {
    grew = false;
    long lo = c.start[run_dim];
    long hi = lo + c.extent[run_dim];
    for (std::size_t i = 0; i < chunks.size(); ++i) {
      if (assigned[i] || !matches_other_dims(chunks[i])) continue;
      if (std::find(c.members.begin(), c.members.end(), int(i)) != c.members.end()) continue;
      if (chunks[i].start[run_dim] == hi) {
        c.extent[run_dim] += chunks[i].extent[run_dim];
        c.members.push_back(int(i));
        grew = true;
        break;
      }
      if (chunks[i].start[run_dim] + chunks[i].extent[run_dim] == lo) {
        c.start[run_dim] = chunks[i].start[run_dim];
        c.extent[run_dim] += chunks[i].extent[run_dim];
        c.members.push_back(int(i));
        grew = true;
        break;
      }
    }
  }
  return c;
}

// Tries to extend the candidate box along ext_dim by whole slabs: chunk
// sets sharing one ext_dim interval whose run_dim projections exactly tile
// the box span, matching the box in every remaining dimension.
void extend(const std::vector<ChunkRect>& chunks, const std::vector<bool>& assigned,
            Candidate& c, std::size_t run_dim, std::size_t ext_dim) {
  const std::size_t ndim = c.start.size();
  auto try_slab = [&](long pos, bool forward) {
    std::vector<int> slab;
    long thickness = -1;
    for (std::size_t i = 0; i < chunks.size(); ++i) {
      if (assigned[i]) continue;
      if (std::find(c.members.begin(), c.members.end(), int(i)) != c.members.end()) continue;
      const ChunkRect& r = chunks[i];
      long r_pos = forward ? r.start[ext_dim] : r.start[ext_dim] + r.extent[ext_dim];
      if (r_pos != pos) continue;
      bool ok = true;
      for (std::size_t d = 0; d < ndim; ++d) {
        if (d == ext_dim || d == run_dim) {
          if (d == run_dim &&
              (r.start[d] < c.start[d] ||
               r.start[d] + r.extent[d] > c.start[d] + c.extent[d]))
            ok = false;
          continue;
        }
        if (r.start[d] != c.start[d] || r.extent[d] != c.extent[d]) ok = false;
      }
      if (!ok) continue;
      if (thickness < 0) thickness = r.extent[ext_dim];
      if (r.extent[ext_dim] != thickness) return false;
      slab.push_back(int(i));
    }
    if (slab.empty()) return false;
    // run_dim projections must exactly tile the box span.
    std::sort(slab.begin(), slab.end(), [&](int a, int b) {
      return chunks[a].start[run_dim] < chunks[b].start[run_dim];
    });
    long cursor = c.start[run_dim];
    for (int i : slab) {
      if (chunks[i].start[run_dim] != cursor) return false;
      cursor += chunks[i].extent[run_dim];
    }
    if (cursor != c.start[run_dim] + c.extent[run_dim]) return false;
    for (int i : slab) c.members.push_back(i);
    c.extent[ext_dim] += thickness;
    if (!forward) c.start[ext_dim] -= thickness;
    return true;
  };

  for (;;) {
    if (!try_slab(c.start[ext_dim] + c.extent[ext_dim], true)) break;
  }
  for (;;) {
    if (!try_slab(c.start[ext_dim], false)) break;
  }
}

}  // namespace

std::vector<Region> merge_chunks(std::vector<ChunkRect> chunks) {
  if (chunks.empty()) return {};
  const std::size_t ndim = chunks[0].start.size();
  for (const auto& c : chunks) {
    if (c.start.size() != ndim || c.extent.size() != ndim)
      throw LayoutError("chunks differ in dimensionality");
    for (long e : c.extent)
      if (e <= 0) throw LayoutError("chunk extent must be positive");
  }
  for (std::size_t i = 0; i < chunks.size(); ++i)
    for (std::size_t j = i + 1; j < chunks.size(); ++j)
      if (rects_overlap(chunks[i], chunks[j])) throw LayoutError("overlapping chunks");

  std::sort(chunks.begin(), chunks.end(), [](const ChunkRect& a, const ChunkRect& b) {
    return std::tie(a.start, a.extent, a.owner) < std::tie(b.start, b.extent, b.owner);
  });

  std::vector<bool> assigned(chunks.size(), false);
  std::vector<Region> regions;
  std::size_t remaining = chunks.size();
  while (remaining > 0) {
    Candidate best;
    best.area = -1;
    for (std::size_t seed = 0; seed < chunks.size(); ++seed) {
      if (assigned[seed]) continue;
      // Runs along the fastest-varying dimension first, each optionally
      // widened along every other dimension.
      for (std::size_t rd = ndim; rd-- > 0;) {
        for (std::size_t ext_dim = 0; ext_dim <= ndim; ++ext_dim) {
          Candidate c = grow_run(chunks, assigned, int(seed), rd);
          if (ext_dim < ndim && ext_dim != rd) extend(chunks, assigned, c, rd, ext_dim);
          c.area = 1;
          for (long e : c.extent) c.area *= e;
          if (best.area < 0 || better(c, best)) best = c;
        }
      }
    }
    Region region;
    region.start = best.start;
    region.extent = best.extent;
    for (int i : best.members) {
      region.members.push_back(chunks[std::size_t(i)]);
      assigned[std::size_t(i)] = true;
    }
    std::sort(region.members.begin(), region.members.end(),
              [](const ChunkRect& a, const ChunkRect& b) { return a.start < b.start; });
    remaining -= best.members.size();
    regions.push_back(std::move(region));
  }
  std::sort(regions.begin(), regions.end(),
            [](const Region& a, const Region& b) { return a.start < b.start; });
  return regions;
}

long balance_write_counts(long local_count, std::span<const long> all_counts) {
  long max_count = local_count;
  for (long c : all_counts) max_count = std::max(max_count, c);
  return max_count - local_count;
}

void copy_into_region(std::span<double> region_buffer, const Region& region,
                      const ChunkRect& chunk, std::span<const double> payload) {
  const std::size_t ndim = region.start.size();
  if (payload.size() != std::size_t(chunk.area()))
    throw LayoutError("payload size does not match chunk extents");
  bool member = false;
  for (const auto& m : region.members)
    if (m.start == chunk.start && m.extent == chunk.extent) member = true;
  if (!member) throw LayoutError("chunk is not a member of region");

  // Row-major strides for the region.
  std::vector<long> stride(ndim, 1);
  for (std::size_t d = ndim - 1; d > 0; --d)
    stride[d - 1] = stride[d] * region.extent[d];

  const long row_len = chunk.extent[ndim - 1];
  const long rows = chunk.area() / row_len;
  std::vector<long> idx(ndim, 0);  // index within the chunk, last dim fixed 0
  for (long r = 0; r < rows; ++r) {
    long offset = 0;
    for (std::size_t d = 0; d < ndim; ++d)
      offset += (chunk.start[d] - region.start[d] + idx[d]) * stride[d];
    std::copy_n(payload.begin() + r * row_len, row_len, region_buffer.begin() + offset);
    for (std::size_t d = ndim - 1; d-- > 0;) {
      if (++idx[d] < chunk.extent[d]) break;
      idx[d] = 0;
    }
  }
}

}  // namespace insitu::layout
