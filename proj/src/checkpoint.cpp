#include "checkpoint.hpp"

#include <chrono>
#include <thread>

#include "bytesio.hpp"

namespace insitu::writer {

// Serialization of the writer federator's five state areas. Template sink
// so the size walk (ByteCounter) and the byte walk (ByteWriter) are the
// same code and cannot diverge.
struct CheckpointCodec {
  template <class S>
  static void put_timed(S& s, const TimedValue& v) {
    s.put_i64(v.timestep);
    s.put_f64(v.model_time);
    s.put_value(v.value);
  }
  static TimedValue get_timed(ByteReader& r) {
    TimedValue v;
    v.timestep = r.get_i64();
    v.model_time = r.get_f64();
    v.value = r.get_value();
    return v;
  }

  template <class S>
  static void put_emitted(S& s, const EmittedValue& v) {
    s.put_f64(v.time);
    s.put_value(v.value);
    s.put_i64(v.sample_count);
  }
  static EmittedValue get_emitted(ByteReader& r) {
    EmittedValue v;
    v.time = r.get_f64();
    v.value = r.get_value();
    v.sample_count = r.get_i64();
    return v;
  }

  template <class S>
  static void put_key(S& s, const WriterFederator::SeriesKey& k) {
    s.put_str(k.field);
    s.put_i64(k.source);
  }
  static WriterFederator::SeriesKey get_key(ByteReader& r) {
    WriterFederator::SeriesKey k;
    k.field = r.get_str();
    k.source = int(r.get_i64());
    return k;
  }

  template <class S>
  static void put_buffer(S& s, const TimeSeriesBuffer& b) {
    s.put_u8(std::uint8_t(b.manipulation));
    s.put_f64(b.frequency);
    s.put_i64(b.window);
    s.put_f64_vec(b.sum);
    s.put_i64(b.count);
    s.put_f64(b.next_end);
    s.put_f64(b.last_time);
    s.put_value(b.last_value);
    s.put_size_vec(b.shape);
    s.put_u8(b.any_sample ? 1 : 0);
    s.put_u8(b.finished ? 1 : 0);
  }
  static TimeSeriesBuffer get_buffer(ByteReader& r) {
    TimeSeriesBuffer b;
    b.manipulation = cfg::TimeManipulation(r.get_u8());
    b.frequency = r.get_f64();
    b.window = r.get_i64();
    b.sum = r.get_f64_vec();
    b.count = r.get_i64();
    b.next_end = r.get_f64();
    b.last_time = r.get_f64();
    b.last_value = r.get_value();
    b.shape = r.get_size_vec();
    b.any_sample = r.get_u8() != 0;
    b.finished = r.get_u8() != 0;
    return b;
  }

  template <class S>
  static void put_queue(S& s, const OrderedFieldQueue& q) {
    s.put_i64(q.interval);
    s.put_i64(q.expected_next);
    s.put_u64(q.pending.size());
    for (const auto& [ts, ev] : q.pending) {
      s.put_i64(ts);
      put_timed(s, ev);
    }
  }
  static OrderedFieldQueue get_queue(ByteReader& r) {
    OrderedFieldQueue q;
    q.interval = r.get_i64();
    q.expected_next = r.get_i64();
    std::uint64_t n = r.get_u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      long ts = r.get_i64();
      q.pending.emplace(ts, get_timed(r));
    }
    return q;
  }

  template <class S>
  static void put_chunk(S& s, const ChunkInfo& c) {
    s.put_u64(c.dim_names.size());
    for (const auto& d : c.dim_names) s.put_str(d);
    s.put_u64(c.global_dims.size());
    for (long d : c.global_dims) s.put_i64(d);
    s.put_i64(c.rect.owner);
    s.put_u64(c.rect.start.size());
    for (long d : c.rect.start) s.put_i64(d);
    s.put_u64(c.rect.extent.size());
    for (long d : c.rect.extent) s.put_i64(d);
  }
  static ChunkInfo get_chunk(ByteReader& r) {
    ChunkInfo c;
    for (std::uint64_t i = 0, n = r.get_u64(); i < n; ++i) c.dim_names.push_back(r.get_str());
    for (std::uint64_t i = 0, n = r.get_u64(); i < n; ++i) c.global_dims.push_back(r.get_i64());
    c.rect.owner = int(r.get_i64());
    for (std::uint64_t i = 0, n = r.get_u64(); i < n; ++i) c.rect.start.push_back(r.get_i64());
    for (std::uint64_t i = 0, n = r.get_u64(); i < n; ++i) c.rect.extent.push_back(r.get_i64());
    return c;
  }

  template <class S>
  static void put_state(S& s, const FileWriteState& st) {
    s.put_f64(st.prev_boundary);
    s.put_f64(st.boundary);
    s.put_f64(st.cutoff);
    s.put_str(st.filename);
    s.put_u8(st.launched ? 1 : 0);
    s.put_u8(st.final_flush ? 1 : 0);
    s.put_u64(st.entries.size());
    for (const auto& [field, by_source] : st.entries) {
      s.put_str(field);
      s.put_u64(by_source.size());
      for (const auto& [src, entries] : by_source) {
        s.put_i64(src);
        s.put_u64(entries.size());
        for (const auto& e : entries) put_emitted(s, e);
      }
    }
  }
  static FileWriteState get_state(ByteReader& r) {
    FileWriteState st;
    st.prev_boundary = r.get_f64();
    st.boundary = r.get_f64();
    st.cutoff = r.get_f64();
    st.filename = r.get_str();
    st.launched = r.get_u8() != 0;
    st.final_flush = r.get_u8() != 0;
    for (std::uint64_t i = 0, nf = r.get_u64(); i < nf; ++i) {
      std::string field = r.get_str();
      for (std::uint64_t j = 0, ns = r.get_u64(); j < ns; ++j) {
        int src = int(r.get_i64());
        auto& entries = st.entries[field][src];
        for (std::uint64_t k = 0, ne = r.get_u64(); k < ne; ++k)
          entries.push_back(get_emitted(r));
      }
    }
    return st;
  }

  // ---- the five areas ----

  template <class S>
  static void put_area1(const WriterFederator& w, S& s) {
    s.put_u32(ckpt::kVersion);
    s.put_f64(w.last_model_time_);
    s.put_u8(w.finalized_ ? 1 : 0);
    s.put_i64(w.writes_performed_);
    s.put_u64(w.targets_.size());
    for (const auto& [name, t] : w.targets_) {
      s.put_str(name);
      s.put_f64(t.last_boundary);
    }
    s.put_u64(w.chunks_.size());
    for (const auto& [key, info] : w.chunks_) {
      put_key(s, key);
      put_chunk(s, info);
    }
  }

  template <class S>
  static void put_area2(const WriterFederator& w, S& s) {
    s.put_u64(w.buffers_.size());
    for (const auto& [target, by_key] : w.buffers_) {
      s.put_str(target);
      s.put_u64(by_key.size());
      for (const auto& [key, buf] : by_key) {
        put_key(s, key);
        put_buffer(s, buf);
      }
    }
  }

  template <class S>
  static void put_area3(const WriterFederator& w, S& s) {
    s.put_u64(w.queues_.size());
    for (const auto& [key, q] : w.queues_) {
      put_key(s, key);
      put_queue(s, q);
    }
  }

  template <class S>
  static void put_area4(const WriterFederator& w, S& s) {
    s.put_u64(w.targets_.size());
    for (const auto& [name, t] : w.targets_) {
      s.put_str(name);
      s.put_u64(t.states.size());
      for (const auto& st : t.states) put_state(s, st);
    }
    s.put_u64(w.in_flight_.size());
    for (const auto& [fn, st] : w.in_flight_) {
      s.put_str(fn);
      put_state(s, st);
    }
  }

  template <class S>
  static void put_area5(const WriterFederator& w, S& s) {
    s.put_u64(w.unclaimed_.size());
    for (const auto& [target, by_key] : w.unclaimed_) {
      s.put_str(target);
      s.put_u64(by_key.size());
      for (const auto& [key, entries] : by_key) {
        put_key(s, key);
        s.put_u64(entries.size());
        for (const auto& e : entries) put_emitted(s, e);
      }
    }
  }

  template <class S>
  static void put_area(const WriterFederator& w, int area, S& s) {
    switch (area) {
      case 0: put_area1(w, s); break;
      case 1: put_area2(w, s); break;
      case 2: put_area3(w, s); break;
      case 3: put_area4(w, s); break;
      case 4: put_area5(w, s); break;
    }
  }

  static void restore(WriterFederator& w, const ckpt::AreaBytes& areas) {
    std::lock_guard lock(w.mu_);
    ++w.epoch_;
    ByteReader r1(areas[0]);
    std::uint32_t version = r1.get_u32();
    if (version != ckpt::kVersion)
      throw ckpt::CheckpointError("checkpoint version " + std::to_string(version) +
                                  " not supported");
    w.last_model_time_ = r1.get_f64();
    w.finalized_ = r1.get_u8() != 0;
    w.writes_performed_ = r1.get_i64();
    for (std::uint64_t i = 0, n = r1.get_u64(); i < n; ++i) {
      std::string name = r1.get_str();
      double last_boundary = r1.get_f64();
      auto it = w.targets_.find(name);
      if (it == w.targets_.end())
        throw ckpt::CheckpointError("checkpoint references unconfigured file \"" + name + "\"");
      it->second.last_boundary = last_boundary;
      it->second.states.clear();
    }
    w.chunks_.clear();
    for (std::uint64_t i = 0, n = r1.get_u64(); i < n; ++i) {
      auto key = get_key(r1);
      w.chunks_.emplace(key, get_chunk(r1));
    }

    ByteReader r2(areas[1]);
    w.buffers_.clear();
    for (std::uint64_t i = 0, nt = r2.get_u64(); i < nt; ++i) {
      std::string target = r2.get_str();
      auto& by_key = w.buffers_[target];
      for (std::uint64_t j = 0, nk = r2.get_u64(); j < nk; ++j) {
        auto key = get_key(r2);
        by_key.emplace(key, get_buffer(r2));
      }
    }

    ByteReader r3(areas[2]);
    w.queues_.clear();
    for (std::uint64_t i = 0, n = r3.get_u64(); i < n; ++i) {
      auto key = get_key(r3);
      w.queues_.emplace(key, get_queue(r3));
    }

    ByteReader r4(areas[3]);
    for (std::uint64_t i = 0, nt = r4.get_u64(); i < nt; ++i) {
      std::string name = r4.get_str();
      auto it = w.targets_.find(name);
      if (it == w.targets_.end())
        throw ckpt::CheckpointError("checkpoint references unconfigured file \"" + name + "\"");
      it->second.states.clear();
      for (std::uint64_t j = 0, ns = r4.get_u64(); j < ns; ++j)
        it->second.states.push_back(get_state(r4));
    }
    w.in_flight_.clear();
    for (std::uint64_t i = 0, n = r4.get_u64(); i < n; ++i) {
      std::string fn = r4.get_str();
      w.in_flight_.emplace(fn, get_state(r4));
    }

    ByteReader r5(areas[4]);
    w.unclaimed_.clear();
    for (std::uint64_t i = 0, nt = r5.get_u64(); i < nt; ++i) {
      std::string target = r5.get_str();
      auto& by_key = w.unclaimed_[target];
      for (std::uint64_t j = 0, nk = r5.get_u64(); j < nk; ++j) {
        auto key = get_key(r5);
        std::uint64_t ne = r5.get_u64();
        auto& entries = by_key[key];
        for (std::uint64_t k = 0; k < ne; ++k) entries.push_back(get_emitted(r5));
      }
    }
    if (!r1.done() || !r2.done() || !r3.done() || !r4.done() || !r5.done())
      throw ckpt::CheckpointError("trailing bytes in checkpoint area");
  }

  static ckpt::Measurement measure(const WriterFederator& w) {
    std::lock_guard lock(w.mu_);
    return measure_locked(w);
  }
  static ckpt::Measurement measure_locked(const WriterFederator& w) {
    ckpt::Measurement m;
    m.epoch = w.epoch_;
    for (int a = 0; a < ckpt::kAreas; ++a) {
      ByteCounter c;
      put_area(w, a, c);
      m.sizes[std::size_t(a)] = c.size();
    }
    return m;
  }

  static ckpt::AreaBytes serialize(const WriterFederator& w, const ckpt::Measurement& m) {
    std::lock_guard lock(w.mu_);
    return serialize_locked(w, m);
  }
  static ckpt::AreaBytes serialize_locked(const WriterFederator& w,
                                          const ckpt::Measurement& m) {
    if (w.epoch_ != m.epoch)
      throw ckpt::CheckpointError("writer state mutated between checkpoint phases (epoch " +
                                  std::to_string(m.epoch) + " -> " +
                                  std::to_string(w.epoch_) + ")");
    ckpt::AreaBytes out;
    for (int a = 0; a < ckpt::kAreas; ++a) {
      ByteWriter bw(m.sizes[std::size_t(a)]);
      put_area(w, a, bw);
      if (bw.size() != m.sizes[std::size_t(a)])
        throw ckpt::CheckpointError("area " + std::to_string(a + 1) +
                                    " serialized length disagrees with measured size");
      if (bw.alloc_count() != 0)
        throw ckpt::CheckpointError("area " + std::to_string(a + 1) +
                                    " serialization reallocated");
      out[std::size_t(a)] = bw.take();
    }
    return out;
  }

  static ckpt::AreaBytes capture(const WriterFederator& w) {
    std::lock_guard lock(w.mu_);
    return serialize_locked(w, measure_locked(w));
  }
};

}  // namespace insitu::writer

namespace insitu::ckpt {

Measurement measure(const writer::WriterFederator& w) {
  return writer::CheckpointCodec::measure(w);
}
AreaBytes serialize(const writer::WriterFederator& w, const Measurement& m) {
  return writer::CheckpointCodec::serialize(w, m);
}
AreaBytes capture(const writer::WriterFederator& w) {
  return writer::CheckpointCodec::capture(w);
}
void restore_into(writer::WriterFederator& w, const AreaBytes& areas) {
  writer::CheckpointCodec::restore(w, areas);
}

sdc::FileImage write_checkpoint(const std::vector<AreaBytes>& rank_areas, const Meta& meta) {
  int n = int(rank_areas.size());
  if (n == 0) throw CheckpointError("no rank states to checkpoint");
  sdc::FileImage img;
  img.set_attr("version", kVersion);
  img.define_dim("ckpt.rank", std::uint64_t(n));
  img.define_dim("ckpt.dircols", 2 * kAreas);
  img.define_dim("ckpt.metalen", 3);
  std::vector<std::uint64_t> totals(kAreas, 0);
  std::vector<std::vector<std::uint64_t>> offsets(kAreas);
  for (int a = 0; a < kAreas; ++a) {
    for (int r = 0; r < n; ++r) {
      offsets[std::size_t(a)].push_back(totals[std::size_t(a)]);
      totals[std::size_t(a)] += rank_areas[std::size_t(r)][std::size_t(a)].size();
    }
    std::string nm = "ckpt.area" + std::to_string(a + 1);
    img.define_dim(nm + ".bytes", totals[std::size_t(a)]);
    img.define_var(nm, DataType::String, {nm + ".bytes"});
  }
  img.define_var("ckpt.directory", DataType::Integer, {"ckpt.rank", "ckpt.dircols"});
  img.define_var("ckpt.meta", DataType::Double, {"ckpt.metalen"});
  img.end_define();

  auto dir = img.integers("ckpt.directory");
  for (int a = 0; a < kAreas; ++a) {
    auto dst = img.raw("ckpt.area" + std::to_string(a + 1));
    for (int r = 0; r < n; ++r) {
      const auto& bytes = rank_areas[std::size_t(r)][std::size_t(a)];
      std::copy(bytes.begin(), bytes.end(),
                dst.begin() + long(offsets[std::size_t(a)][std::size_t(r)]));
      dir[std::size_t(r) * (2 * kAreas) + std::size_t(a) * 2] =
          std::int64_t(offsets[std::size_t(a)][std::size_t(r)]);
      dir[std::size_t(r) * (2 * kAreas) + std::size_t(a) * 2 + 1] = std::int64_t(bytes.size());
    }
  }
  auto m = img.doubles("ckpt.meta");
  m[0] = double(meta.timestep);
  m[1] = meta.model_time;
  m[2] = double(meta.nservers);
  return img;
}

Meta read_meta(const sdc::FileImage& file) {
  if (!file.attrs().contains("version") || file.attrs().at("version") != kVersion)
    throw CheckpointError("not a supported checkpoint file");
  auto m = file.doubles("ckpt.meta");
  Meta meta;
  meta.timestep = long(m[0]);
  meta.model_time = m[1];
  meta.nservers = int(m[2]);
  return meta;
}

AreaBytes read_rank(const sdc::FileImage& file, int rank, int expected_nservers) {
  Meta meta = read_meta(file);
  if (meta.nservers != expected_nservers)
    throw CheckpointError("checkpoint was taken with " + std::to_string(meta.nservers) +
                          " servers but " + std::to_string(expected_nservers) +
                          " are running; restart requires the same server count");
  if (rank < 0 || rank >= meta.nservers)
    throw CheckpointError("rank " + std::to_string(rank) + " not in checkpoint directory");
  auto dir = file.integers("ckpt.directory");
  AreaBytes out;
  for (int a = 0; a < kAreas; ++a) {
    auto src = file.raw("ckpt.area" + std::to_string(a + 1));
    std::uint64_t off = std::uint64_t(dir[std::size_t(rank) * (2 * kAreas) + std::size_t(a) * 2]);
    std::uint64_t len =
        std::uint64_t(dir[std::size_t(rank) * (2 * kAreas) + std::size_t(a) * 2 + 1]);
    if (off + len > src.size()) throw CheckpointError("corrupt checkpoint directory");
    out[std::size_t(a)].assign(src.begin() + long(off), src.begin() + long(off + len));
  }
  return out;
}

void quiesce(const std::function<long()>& pending_count,
             const std::function<std::vector<std::string>()>& outstanding_uids,
             long timeout_ms) {
  auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  for (;;) {
    long pending = pending_count();
    auto uids = outstanding_uids();
    if (pending == 0 && uids.empty()) return;
    if (std::chrono::steady_clock::now() >= deadline) {
      std::string msg = "quiesce timed out; pending states: " + std::to_string(pending) +
                        ", outstanding collectives:";
      if (uids.empty()) msg += " none";
      for (const auto& u : uids) msg += " " + u;
      throw CheckpointError(msg);
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
}

}  // namespace insitu::ckpt
