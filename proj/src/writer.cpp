#include "writer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace insitu::writer {

namespace {

constexpr double kEps = 1e-9;

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

long window_index(double t, double f) { return long(std::ceil(t / f - kEps)) - 1; }

Value elementwise_mean(const std::vector<double>& sum, long count,
                       const std::vector<std::size_t>& shape) {
  Value v;
  v.type = DataType::Double;
  v.shape = shape;
  v.dbl.resize(sum.size());
  for (std::size_t i = 0; i < sum.size(); ++i) v.dbl[i] = sum[i] / double(count);
  return v;
}

}  // namespace

std::vector<TimedValue> OrderedFieldQueue::intake(TimedValue event) {
  if (event.timestep < expected_next)
    throw WriterError("stale or duplicate timestep " + std::to_string(event.timestep));
  if ((event.timestep - expected_next) % interval != 0)
    throw WriterError("timestep " + std::to_string(event.timestep) +
                      " is off the sampling grid (expected " + std::to_string(expected_next) +
                      " step " + std::to_string(interval) + ")");
  if (pending.count(event.timestep))
    throw WriterError("duplicate timestep " + std::to_string(event.timestep));
  pending.emplace(event.timestep, std::move(event));
  std::vector<TimedValue> released;
  while (!pending.empty() && pending.begin()->first == expected_next) {
    released.push_back(std::move(pending.begin()->second));
    pending.erase(pending.begin());
    expected_next += interval;
  }
  return released;
}

std::vector<EmittedValue> TimeSeriesBuffer::accumulate(const Value& v, long timestep,
                                                       double model_time) {
  (void)timestep;
  if (any_sample && model_time <= last_time + kEps)
    throw WriterError("model time not increasing: " + format_number(model_time));
  std::vector<EmittedValue> out;
  using cfg::TimeManipulation;
  if (manipulation == TimeManipulation::None) {
    out.push_back({model_time, v, 1});
  } else if (manipulation == TimeManipulation::Averaged) {
    long k = window_index(model_time, frequency);
    if (window < 0) {
      window = k;
      sum = v.dbl;
      count = 1;
    } else if (k == window) {
      if (v.dbl.size() != sum.size()) throw WriterError("sample shape changed mid-window");
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += v.dbl[i];
      ++count;
    } else {
      out.push_back({double(window + 1) * frequency, elementwise_mean(sum, count, shape), count});
      // The spanning sample stands in for every window it stepped over.
      for (long j = window + 1; j < k; ++j) out.push_back({double(j + 1) * frequency, v, 0});
      window = k;
      sum = v.dbl;
      count = 1;
    }
  } else {  // Instantaneous: first sample at or past each boundary is the snapshot.
    if (!any_sample) next_end = frequency;
    while (model_time >= next_end - kEps) {
      out.push_back({next_end, v, 1});
      next_end += frequency;
    }
  }
  any_sample = true;
  last_time = model_time;
  last_value = v;
  shape = v.shape;
  return out;
}

double TimeSeriesBuffer::last_coordinate_before(double boundary) const {
  if (manipulation == cfg::TimeManipulation::None) return boundary;
  return frequency * std::floor(boundary / frequency + kEps);
}

bool TimeSeriesBuffer::complete_through(double boundary) const {
  if (finished) return true;
  if (!any_sample) return false;
  double e = last_coordinate_before(boundary);
  switch (manipulation) {
    case cfg::TimeManipulation::None:
      return last_time >= boundary - kEps;
    case cfg::TimeManipulation::Averaged:
      return double(window + 1) * frequency > e + kEps;
    case cfg::TimeManipulation::Instantaneous:
      return next_end > e + kEps;
  }
  return false;
}

std::vector<EmittedValue> TimeSeriesBuffer::finish() {
  std::vector<EmittedValue> out;
  if (finished || !any_sample) {
    finished = true;
    return out;
  }
  using cfg::TimeManipulation;
  if (manipulation == TimeManipulation::Averaged && window >= 0)
    out.push_back({double(window + 1) * frequency, elementwise_mean(sum, count, shape), count});
  else if (manipulation == TimeManipulation::Instantaneous && last_time > next_end - frequency)
    out.push_back({next_end, last_value, 1});
  window = -1;
  count = 0;
  finished = true;
  return out;
}

std::optional<double> check_write_trigger(double prev, double new_time, double W) {
  if (!(new_time > prev)) return std::nullopt;
  long kp = long(std::ceil(prev / W - kEps)) - 1;
  long kn = long(std::ceil(new_time / W - kEps)) - 1;
  if (kn > kp && kn >= 1) return prev;
  return std::nullopt;
}

double write_boundary(double t, double W) {
  return W * double(long(std::ceil(t / W - kEps)) - 1);
}

WriterFederator::WriterFederator(int rank, int nservers, const cfg::Config& config,
                                 WriterHooks hooks)
    : rank_(rank), nservers_(nservers), config_(config), hooks_(std::move(hooks)) {
  if (!hooks_.on_error) hooks_.on_error = [](const std::string&) {};
  for (const auto& def : config_.files) {
    FileTarget t;
    t.def = def;
    for (const auto& inc : def.includes)
      for (const auto& qf : config_.expand_include(inc))
        t.fields[qf] = {inc.manipulation, inc.output_frequency};
    targets_.emplace(def.name, std::move(t));
  }
}

long WriterFederator::sampling_interval(const std::string& qualified_field) const {
  if (const auto* dd = config_.definition_of_field(qualified_field)) return dd->frequency;
  if (const auto* diag = config_.find_diagnostic(qualified_field)) {
    // A diagnostic inherits the cadence of the raw fields feeding it.
    for (const auto& rule : diag->rules)
      for (const auto& in : rule.inputs) {
        try {
          std::string q = config_.resolve_field(in);
          if (const auto* d2 = config_.definition_of_field(q)) return d2->frequency;
        } catch (const cfg::ConfigError&) {
        }
      }
  }
  return 1;
}

void WriterFederator::register_chunk(const std::string& qualified_field, int source,
                                     ChunkInfo info) {
  std::lock_guard lock(mu_);
  ++epoch_;
  for (const auto& [key, existing] : chunks_)
    if (key.field == qualified_field &&
        (existing.dim_names != info.dim_names || existing.global_dims != info.global_dims))
      throw WriterError("chunk geometry disagrees for " + qualified_field);
  info.rect.owner = source;
  chunks_[SeriesKey{qualified_field, source}] = std::move(info);
}

void WriterFederator::handle_value(const std::string& qualified_field, int source,
                                   TimedValue event) {
  std::lock_guard lock(mu_);
  ++epoch_;
  SeriesKey key{qualified_field, source};
  auto qit = queues_.find(key);
  if (qit == queues_.end()) {
    long iv = sampling_interval(qualified_field);
    qit = queues_.emplace(key, OrderedFieldQueue(iv, iv)).first;
  }
  for (auto& ev : qit->second.intake(std::move(event))) {
    advance_time(ev.model_time);
    for (auto& [tname, target] : targets_) {
      auto fit = target.fields.find(qualified_field);
      if (fit == target.fields.end()) continue;
      auto& buf = buffers_[tname][key];
      if (!buf.any_sample && buf.frequency == 0) {
        buf.manipulation = fit->second.first;
        buf.frequency = fit->second.second;
      }
      route_entries(tname, key, buf.accumulate(ev.value, ev.timestep, ev.model_time));
    }
  }
  check_completion();
}

void WriterFederator::advance_time(double model_time) {
  if (model_time <= last_model_time_) return;
  for (auto& [tname, target] : targets_) {
    auto cutoff = check_write_trigger(last_model_time_, model_time, target.def.write_time_frequency);
    if (!cutoff) continue;
    double boundary = write_boundary(model_time, target.def.write_time_frequency);
    if (boundary <= target.last_boundary + kEps) continue;
    FileWriteState s;
    s.prev_boundary = target.last_boundary;
    s.boundary = boundary;
    s.cutoff = *cutoff;
    s.filename = instance_name(target, s);
    target.last_boundary = boundary;
    target.states.push_back(std::move(s));
    // Entries that arrived before the trigger existed now have a home.
    auto uit = unclaimed_.find(tname);
    if (uit != unclaimed_.end()) {
      auto moved = std::move(uit->second);
      uit->second.clear();
      for (auto& [key, entries] : moved)
        for (auto& e : entries) route_one(target, tname, key, std::move(e));
    }
  }
  last_model_time_ = model_time;
}

void WriterFederator::route_entries(const std::string& target, const SeriesKey& key,
                                    std::vector<EmittedValue> emitted) {
  auto& t = targets_.at(target);
  for (auto& e : emitted) route_one(t, target, key, std::move(e));
}

void WriterFederator::route_one(FileTarget& t, const std::string& target, const SeriesKey& key,
                                EmittedValue entry) {
  for (auto& s : t.states)
    if (entry.time > s.prev_boundary + kEps && entry.time <= s.boundary + kEps) {
      s.entries[key.field][key.source].push_back(std::move(entry));
      return;
    }
  unclaimed_[target][key].push_back(std::move(entry));
}

bool WriterFederator::state_complete(const std::string& target, const FileTarget& t,
                                     const FileWriteState& s) const {
  if (finalized_) return true;
  auto bit = buffers_.find(target);
  for (const auto& [field, mf] : t.fields) {
    // Which series must exist locally: one per registered chunk source for
    // arrays, the diagnostic's home series when this server owns it.
    std::set<int> expected_sources;
    for (const auto& [key, info] : chunks_)
      if (key.field == field) expected_sources.insert(key.source);
    if (expected_sources.empty() && config_.find_diagnostic(field) &&
        msg::stable_hash(field) % std::uint64_t(nservers_) == std::uint64_t(rank_))
      expected_sources.insert(-1);
    if (bit != buffers_.end())
      for (const auto& [key, buf] : bit->second)
        if (key.field == field) expected_sources.insert(key.source);
    for (int src : expected_sources) {
      if (bit == buffers_.end()) return false;
      auto sit = bit->second.find(SeriesKey{field, src});
      if (sit == bit->second.end() || !sit->second.complete_through(s.boundary)) return false;
    }
  }
  return true;
}

void WriterFederator::check_completion() {
  for (auto& [tname, target] : targets_) {
    for (auto it = target.states.begin(); it != target.states.end();) {
      if (!it->launched && state_complete(tname, target, *it)) {
        it->launched = true;
        std::string filename = it->filename;
        in_flight_.emplace(filename, std::move(*it));
        it = target.states.erase(it);
        launch_chain(tname, filename);
      } else {
        ++it;
      }
    }
  }
}

std::string WriterFederator::instance_name(const FileTarget& t, const FileWriteState& s) const {
  std::string base = t.def.name;
  std::string suffix = s.final_flush ? "end" : format_number(s.boundary);
  auto dot = base.rfind('.');
  if (dot == std::string::npos) return base + "_" + suffix;
  return base.substr(0, dot) + "_" + suffix + base.substr(dot);
}

void WriterFederator::launch_chain(const std::string& target, const std::string& filename) {
  hooks_.barrier(filename + "|def",
                 [this, target, filename] { declare_phase(target, filename); });
}

void WriterFederator::declare_phase(const std::string& target, const std::string& filename) {
  try {
    auto& cf = hooks_.open_file(filename);
    std::map<std::string, std::pair<cfg::TimeManipulation, double>> fields;
    FileWriteState state;
    {
      std::lock_guard lock(mu_);
      fields = targets_.at(target).fields;
      state = in_flight_.at(filename);
    }
    cf.set_attr("title", targets_.at(target).def.title);
    cf.set_attr("write_boundary", state.final_flush ? nlohmann::json() : nlohmann::json(state.boundary));
    cf.set_attr("cutoff", state.cutoff);
    cf.set_attr("previous_boundary", state.prev_boundary);
    for (const auto& [field, mf] : fields) {
      auto eit = state.entries.find(field);
      bool is_array = false;
      {
        std::lock_guard lock(mu_);
        for (const auto& [key, info] : chunks_)
          if (key.field == field) is_array = true;
      }
      if (eit == state.entries.end() && !is_array) continue;  // series lives elsewhere

      // Coordinates must agree across this field's sources.
      std::vector<double> coords;
      if (eit != state.entries.end()) {
        bool first = true;
        for (const auto& [src, entries] : eit->second) {
          std::vector<double> c;
          for (const auto& e : entries) c.push_back(e.time);
          std::sort(c.begin(), c.end());
          if (first) {
            coords = c;
            first = false;
          } else if (c != coords) {
            throw sdc::SdcError("sources disagree on time coordinates for " + field);
          }
        }
      }
      std::string dim;
      switch (mf.first) {
        case cfg::TimeManipulation::Averaged:
          dim = "time_avg_" + format_number(mf.second);
          break;
        case cfg::TimeManipulation::Instantaneous:
          dim = "time_inst_" + format_number(mf.second);
          break;
        case cfg::TimeManipulation::None:
          dim = "time";
          break;
      }
      cf.declare_dim_coords(rank_, dim, coords);

      std::string short_name = field.substr(field.rfind("::") + 2);
      nlohmann::json attrs = nlohmann::json::object();
      if (const auto* diag = config_.find_diagnostic(field)) {
        if (!diag->units.empty()) attrs["units"] = diag->units;
        for (const auto& [k, v] : diag->extra_attrs) attrs[k] = v;
      }
      if (is_array) {
        ChunkInfo geom;
        {
          std::lock_guard lock(mu_);
          for (const auto& [key, info] : chunks_)
            if (key.field == field) geom = info;
        }
        std::vector<std::string> dims = {dim};
        for (std::size_t d = 0; d < geom.dim_names.size(); ++d) {
          cf.declare_dim(rank_, geom.dim_names[d], std::uint64_t(geom.global_dims[d]));
          dims.push_back(geom.dim_names[d]);
        }
        cf.declare_var(rank_, short_name, DataType::Double, dims, attrs);
      } else {
        cf.declare_var(rank_, short_name, DataType::Double, {dim}, attrs);
      }
    }
    hooks_.barrier(filename + "|enddef",
                   [this, target, filename] { write_phase(target, filename); });
  } catch (const std::exception& e) {
    hooks_.on_error(std::string("file definition failed for ") + filename + ": " + e.what());
  }
}

void WriterFederator::write_phase(const std::string& target, const std::string& filename) {
  try {
    auto& cf = hooks_.open_file(filename);
    cf.end_define();
    long local_writes = 0;
    FileWriteState state;
    std::map<std::string, std::vector<layout::ChunkRect>> field_chunks;
    {
      std::lock_guard lock(mu_);
      state = in_flight_.at(filename);
      for (const auto& [key, info] : chunks_) field_chunks[key.field].push_back(info.rect);
    }
    for (auto& [field, by_source] : state.entries) {
      std::string short_name = field.substr(field.rfind("::") + 2);
      auto fc = field_chunks.find(field);
      if (fc == field_chunks.end()) {
        // Scalar series held on this server.
        auto& entries = by_source.begin()->second;
        std::sort(entries.begin(), entries.end(),
                  [](const EmittedValue& a, const EmittedValue& b) { return a.time < b.time; });
        std::vector<double> values;
        for (const auto& e : entries) values.push_back(e.value.as_scalar());
        if (!values.empty()) {
          cf.write_scalar_series(rank_, short_name, values);
          ++local_writes;
        }
        continue;
      }
      // Array field: merge this server's chunks and write per time index.
      auto regions = layout::merge_chunks(fc->second);
      std::map<int, std::vector<EmittedValue>> sorted = by_source;
      std::vector<double> coords;
      for (auto& [src, entries] : sorted) {
        std::sort(entries.begin(), entries.end(),
                  [](const EmittedValue& a, const EmittedValue& b) { return a.time < b.time; });
        if (coords.empty())
          for (const auto& e : entries) coords.push_back(e.time);
      }
      for (std::size_t wi = 0; wi < coords.size(); ++wi) {
        for (const auto& region : regions) {
          layout::RegionBuffer buf(region);
          for (const auto& member : region.members)
            buf.copy_chunk(member, sorted.at(member.owner)[wi].value.dbl);
          std::vector<long> start = {long(wi)}, extent = {1};
          for (std::size_t d = 0; d < region.start.size(); ++d) {
            start.push_back(region.start[d]);
            extent.push_back(region.extent[d]);
          }
          cf.write_region(rank_, short_name, start, extent, buf.data());
          ++local_writes;
        }
      }
    }
    {
      std::lock_guard lock(mu_);
      writes_performed_ += local_writes;
    }
    // Level every server's write count with dummy writes so the collective
    // pattern is symmetric.
    hooks_.allreduce(filename + "|cnt", double(local_writes), msg::ReduceOp::Max,
                     [this, target, filename, local_writes, &cf](double max_count) {
                       for (long i = 0; i < long(max_count) - local_writes; ++i)
                         cf.dummy_write(rank_);
                       hooks_.barrier(filename + "|close", [this, target, filename] {
                         close_phase(target, filename);
                       });
                     });
  } catch (const std::exception& e) {
    hooks_.on_error(std::string("file write failed for ") + filename + ": " + e.what());
  }
}

void WriterFederator::close_phase(const std::string& target, const std::string& filename) {
  (void)target;
  try {
    if (rank_ == 0) {
      auto& cf = hooks_.open_file(filename);
      hooks_.file_done(filename, cf.finish());
    }
    std::lock_guard lock(mu_);
    ++epoch_;
    in_flight_.erase(filename);  // frees the stored values for this file
  } catch (const std::exception& e) {
    hooks_.on_error(std::string("file close failed for ") + filename + ": " + e.what());
  }
}

void WriterFederator::finalize() {
  std::lock_guard lock(mu_);
  if (finalized_) return;
  ++epoch_;
  for (auto& [tname, by_key] : buffers_)
    for (auto& [key, buf] : by_key) route_entries(tname, key, buf.finish());
  finalized_ = true;
  for (auto& [tname, target] : targets_) {
    FileWriteState s;
    s.prev_boundary = target.last_boundary;
    s.boundary = std::numeric_limits<double>::infinity();
    s.cutoff = last_model_time_;
    s.final_flush = true;
    s.filename = instance_name(target, s);
    target.states.push_back(std::move(s));
    auto uit = unclaimed_.find(tname);
    if (uit != unclaimed_.end()) {
      auto moved = std::move(uit->second);
      uit->second.clear();
      for (auto& [key, entries] : moved)
        for (auto& e : entries) route_one(target, tname, key, std::move(e));
    }
  }
  check_completion();
}

long WriterFederator::stored_entry_count() const {
  std::lock_guard lock(mu_);
  long n = 0;
  auto count_state = [&n](const FileWriteState& s) {
    for (const auto& [f, by_source] : s.entries)
      for (const auto& [src, entries] : by_source) n += long(entries.size());
  };
  for (const auto& [tname, target] : targets_)
    for (const auto& s : target.states) count_state(s);
  for (const auto& [fn, s] : in_flight_) count_state(s);
  for (const auto& [tname, by_key] : unclaimed_)
    for (const auto& [key, entries] : by_key) n += long(entries.size());
  return n;
}

long WriterFederator::open_file_count() const {
  std::lock_guard lock(mu_);
  long n = long(in_flight_.size());
  for (const auto& [tname, target] : targets_) n += long(target.states.size());
  return n;
}

double WriterFederator::model_time() const {
  std::lock_guard lock(mu_);
  return last_model_time_;
}

}  // namespace insitu::writer
