#include "harness.hpp"

#include <algorithm>
#include <cmath>

#include "bytesio.hpp"

namespace insitu::harness {

namespace {

// 53 uniform bits -> [0, 1).
double unit_uniform(std::mt19937_64& rng) {
  return double(rng() >> 11) * (1.0 / 9007199254740992.0);
}

}  // namespace

std::vector<std::pair<long, double>> timestep_trace(const SimParams& p) {
  std::vector<std::pair<long, double>> out;
  std::mt19937_64 rng(p.sim_seed);
  double dt = p.dt_initial;
  double t = 0;
  for (long k = 1;; ++k) {
    t += dt;
    if (t > p.end_time + 1e-9) break;
    out.emplace_back(k, t);
    double u = 0.85 + 0.35 * unit_uniform(rng);
    dt = std::clamp(dt * u, p.dt_min, p.dt_max);
  }
  return out;
}

double synth_value(int producer, long timestep, std::size_t index) {
  return double(producer) * 10000.0 + double(timestep) + double(index) / 64.0;
}

std::pair<long, long> split_block(long size, int parts, int which) {
  long base = size / parts;
  long rem = size % parts;
  long start = long(which) * base + std::min(long(which), rem);
  long extent = base + (long(which) < rem ? 1 : 0);
  return {start, extent};
}

World::World(cfg::Config config, SimParams params, TransportConfig transport,
             const sdc::FileImage* restore_from)
    : config_(std::move(config)),
      sp_(std::move(params)),
      tc_(std::move(transport)),
      trace_(sp_.explicit_trace.empty() ? timestep_trace(sp_) : sp_.explicit_trace),
      delay_rng_(tc_.seed),
      drop_armed_(!tc_.drop_active_uid.empty()) {
  int total = sp_.nservers * sp_.producers_per_server;
  if (sp_.nservers < 1 || sp_.producers_per_server < 1)
    throw HarnessError("need at least one server and one producer");
  grid_rows_ = int(std::sqrt(double(total)));
  while (total % grid_rows_ != 0) --grid_rows_;
  grid_cols_ = total / grid_rows_;

  for (const auto& f : config_.files)
    for (const auto& inc : f.includes)
      for (const auto& q : config_.expand_include(inc))
        if (!config_.find_diagnostic(q)) raw_writer_fields_.insert(q);

  for (int rank = 0; rank < sp_.nservers; ++rank) {
    auto srv = std::make_unique<Server>();
    Server* s = srv.get();
    s->pool = std::make_unique<ThreadPool>(std::size_t(sp_.pool_size));
    auto err = [this, rank](const std::string& m) {
      record_error("rank " + std::to_string(rank) + ": " + m);
    };
    s->messaging = std::make_unique<msg::ActiveMessaging>(
        rank, sp_.nservers, *s->pool,
        [this](msg::TransportMessage m) {
          double base;
          {
            std::lock_guard lock(queue_mu_);
            base = now_;
          }
          schedule(std::move(m), base);
        },
        err);

    writer::WriterHooks hooks;
    hooks.barrier = [s](const std::string& uid, std::function<void()> done) {
      s->messaging->active_barrier(uid,
                                   [done = std::move(done)](const msg::ActiveResult&) { done(); });
    };
    int nservers = sp_.nservers;
    hooks.allreduce = [s, rank, nservers](const std::string& uid, double value, msg::ReduceOp op,
                                          std::function<void(double)> done) {
      int root = int(msg::stable_hash(uid) % std::uint64_t(nservers));
      msg::ActiveResult contribution;
      contribution.uid = uid;
      contribution.dbl = {value};
      auto bc_cb = [done = std::move(done)](const msg::ActiveResult& r) { done(r.dbl.at(0)); };
      if (rank == root) {
        s->messaging->active_reduce(uid + "#r", contribution, op, root,
                                    [s, uid, root, bc_cb](const msg::ActiveResult& reduced) {
                                      s->messaging->active_broadcast(uid + "#b", &reduced, root,
                                                                     bc_cb);
                                    });
      } else {
        s->messaging->active_reduce(uid + "#r", contribution, op, root, {});
        s->messaging->active_broadcast(uid + "#b", nullptr, root, bc_cb);
      }
    };
    hooks.open_file = [this](const std::string& name) -> sdc::CollectiveFile& {
      std::lock_guard lock(out_mu_);
      auto& p = open_files_[name];
      if (!p) p = std::make_unique<sdc::CollectiveFile>(sp_.nservers);
      return *p;
    };
    hooks.file_done = [this](const std::string& name, sdc::FileImage img) {
      std::lock_guard lock(out_mu_);
      finished_.emplace(name, std::move(img));
      open_files_.erase(name);
    };
    hooks.on_error = err;
    s->writer = std::make_unique<writer::WriterFederator>(rank, sp_.nservers, config_,
                                                          std::move(hooks));
    s->diags = std::make_unique<pipeline::DiagnosticsFederator>(
        rank, sp_.nservers, config_, *s->messaging,
        [this, s, err](const std::string& diag, writer::TimedValue v) {
          try {
            s->writer->handle_value(diag, -1, std::move(v));
          } catch (const std::exception& e) {
            err(e.what());
          }
        },
        err);
    servers_.push_back(std::move(srv));
  }

  if (restore_from) {
    ckpt::Meta meta = ckpt::read_meta(*restore_from);
    resume_after_ = meta.timestep;
    for (int rank = 0; rank < sp_.nservers; ++rank)
      ckpt::restore_into(*servers_[std::size_t(rank)]->writer,
                         ckpt::read_rank(*restore_from, rank, sp_.nservers));
  }
}

World::~World() = default;

void World::record_error(const std::string& m) {
  std::lock_guard lock(out_mu_);
  errors_.push_back(m);
}

void World::schedule(msg::TransportMessage m, double base_time) {
  std::lock_guard lock(queue_mu_);
  if (drop_armed_ && m.type == msg::MsgType::Active && m.tag == tc_.drop_active_uid) {
    drop_armed_ = false;
    return;
  }
  double delay = tc_.min_delay + (tc_.max_delay - tc_.min_delay) * unit_uniform(delay_rng_);
  double& last = last_delivery_[{m.source, m.dest}];
  double t = std::max(base_time + delay, last + 1e-9);
  last = t;
  queue_.push(Event{t, seq_++, std::move(m)});
}

void World::pump() {
  for (;;) {
    bool have = false;
    Event e;
    {
      std::lock_guard lock(queue_mu_);
      if (!queue_.empty()) {
        e = queue_.top();
        queue_.pop();
        now_ = std::max(now_, e.time);
        have = true;
      }
    }
    if (have) {
      dispatch(e);
      continue;
    }
    // Quiescence: the queue stays empty across a full pass of idle pools.
    // A pool task can refill the queue, which restarts the loop; an idle
    // pool cannot wake itself without a new delivery.
    for (auto& s : servers_) s->pool->wait_idle();
    std::lock_guard lock(queue_mu_);
    if (queue_.empty()) return;
  }
}

void World::dispatch(const Event& e) {
  tls_exec_context = ExecContext::Courier;
  if (e.msg.dest < sp_.nservers)
    on_server_message(e.msg.dest, e.msg);
  else
    on_producer_message(e.msg.dest - sp_.nservers, e.msg);
  tls_exec_context = ExecContext::External;
}

void World::on_server_message(int rank, const msg::TransportMessage& m) {
  Server& s = *servers_[std::size_t(rank)];
  switch (m.type) {
    case msg::MsgType::Register:
      handle_register(rank, m.source - sp_.nservers);
      break;
    case msg::MsgType::FieldSizes:
      handle_field_sizes(rank, m);
      break;
    case msg::MsgType::Data:
      record_arrival(rank, m);
      s.pool->submit([this, rank, m] { handle_data(rank, m); });
      break;
    case msg::MsgType::Done:
      ++s.done_producers;
      break;
    case msg::MsgType::Active:
      s.messaging->deliver(m);
      break;
    default:
      record_error("rank " + std::to_string(rank) + ": unexpected message type");
  }
}

void World::handle_register(int rank, int producer) {
  // Reply with the fields this server expects from the producer.
  ByteWriter w;
  w.put_u32(std::uint32_t(config_.definitions.size()));
  for (const auto& def : config_.definitions) {
    w.put_str(def.name);
    w.put_i64(def.frequency);
    w.put_u32(std::uint32_t(def.fields.size()));
    for (const auto& f : def.fields) {
      w.put_str(f.name);
      w.put_u8(f.kind == cfg::FieldKind::Scalar ? 0 : 1);
      w.put_u8(f.collective ? 1 : 0);
      w.put_u8(f.optional ? 1 : 0);
    }
  }
  msg::TransportMessage reply;
  reply.type = msg::MsgType::FieldSpec;
  reply.source = rank;
  reply.dest = sp_.nservers + producer;
  reply.payload = w.take();
  double base;
  {
    std::lock_guard lock(queue_mu_);
    base = now_;
  }
  schedule(std::move(reply), base);
}

bool World::provides(int producer, const std::string& field) const {
  auto it = sp_.omit_fields.find(producer);
  return it == sp_.omit_fields.end() || !it->second.count(field);
}

void World::on_producer_message(int producer, const msg::TransportMessage& m) {
  if (m.type != msg::MsgType::FieldSpec) {
    record_error("producer " + std::to_string(producer) + ": unexpected message");
    return;
  }
  // Answer with the concrete per-field shapes this producer will send,
  // including sizes only known at runtime.
  ByteReader r(m.payload);
  ByteWriter w;
  std::uint32_t ndefs = r.get_u32();
  w.put_u32(ndefs);
  for (std::uint32_t d = 0; d < ndefs; ++d) {
    std::string def_name = r.get_str();
    r.get_i64();  // frequency, known from config
    std::uint32_t nfields = r.get_u32();
    std::vector<std::string> provided;
    for (std::uint32_t i = 0; i < nfields; ++i) {
      std::string fname = r.get_str();
      r.get_u8();
      r.get_u8();
      r.get_u8();
      if (provides(producer, fname)) provided.push_back(fname);
    }
    w.put_str(def_name);
    w.put_u32(std::uint32_t(provided.size()));
    const cfg::DataDefinition* def = nullptr;
    for (const auto& dd : config_.definitions)
      if (dd.name == def_name) def = &dd;
    for (const auto& fname : provided) {
      const cfg::FieldSpec* spec = nullptr;
      for (const auto& f : def->fields)
        if (f.name == fname) spec = &f;
      w.put_str(fname);
      Value sample = field_payload(*spec, producer, 0);
      w.put_size_vec(sample.shape);
    }
  }
  msg::TransportMessage reply;
  reply.type = msg::MsgType::FieldSizes;
  reply.source = sp_.nservers + producer;
  reply.dest = m.source;
  reply.payload = w.take();
  double base;
  {
    std::lock_guard lock(queue_mu_);
    base = now_;
  }
  schedule(std::move(reply), base);
  producer_send_plan(producer);
}

void World::handle_field_sizes(int rank, const msg::TransportMessage& m) {
  Server& s = *servers_[std::size_t(rank)];
  int producer = m.source - sp_.nservers;
  ByteReader r(m.payload);
  std::uint32_t ndefs = r.get_u32();
  for (std::uint32_t d = 0; d < ndefs; ++d) {
    std::string def_name = r.get_str();
    std::uint32_t nprov = r.get_u32();
    std::set<std::string> provided;
    for (std::uint32_t i = 0; i < nprov; ++i) {
      provided.insert(r.get_str());
      r.get_size_vec();
    }
    const cfg::DataDefinition* def = nullptr;
    for (const auto& dd : config_.definitions)
      if (dd.name == def_name) def = &dd;
    if (!def) {
      record_error("rank " + std::to_string(rank) + ": sizes for unknown group " + def_name);
      continue;
    }
    bool ok = true;
    for (const auto& f : def->fields)
      if (!f.optional && !provided.count(f.name)) {
        record_error("producer " + std::to_string(producer) + " omitted required field " +
                     f.qualified());
        ok = false;
      }
    if (!ok) continue;
    for (const auto& f : def->fields) {
      if (!provided.count(f.name)) continue;
      if (f.collective && f.kind == cfg::FieldKind::Array)
        s.writer->register_chunk(f.qualified(), producer, chunk_for(f, producer));
    }
    if (!provided.empty()) s.diags->register_local_source(def_name, producer);
  }
}

void World::producer_send_plan(int producer) {
  int dest = producer / sp_.producers_per_server;
  double last_time = 0;
  for (const auto& [k, t] : trace_) {
    if (k <= resume_after_) continue;
    if (sp_.checkpoint_at >= 0 && k > sp_.checkpoint_at) break;
    last_time = t;
    for (const auto& def : config_.definitions) {
      if (k % def.frequency != 0) continue;
      ByteWriter w;
      w.put_i64(k);
      w.put_f64(t);
      std::vector<const cfg::FieldSpec*> fields;
      for (const auto& f : def.fields)
        if (provides(producer, f.name)) fields.push_back(&f);
      w.put_u32(std::uint32_t(fields.size()));
      for (const auto* f : fields) {
        w.put_str(f->name);
        w.put_value(field_payload(*f, producer, k));
      }
      msg::TransportMessage msg;
      msg.type = msg::MsgType::Data;
      msg.source = sp_.nservers + producer;
      msg.dest = dest;
      msg.tag = def.name;
      msg.payload = w.take();
      schedule(std::move(msg), t);
    }
  }
  if (sp_.checkpoint_at < 0) {
    msg::TransportMessage done;
    done.type = msg::MsgType::Done;
    done.source = sp_.nservers + producer;
    done.dest = dest;
    schedule(std::move(done), last_time + 0.001);
  }
}

writer::ChunkInfo World::chunk_for(const cfg::FieldSpec& field, int producer) const {
  writer::ChunkInfo c;
  c.dim_names = field.dims;
  c.rect.owner = producer;
  int n = int(field.dims.size());
  int row = producer / grid_cols_;
  int col = producer % grid_cols_;
  for (int i = 0; i < n; ++i) {
    auto it = sp_.dim_sizes.find(field.dims[std::size_t(i)]);
    if (it == sp_.dim_sizes.end())
      throw HarnessError("no size configured for dimension " + field.dims[std::size_t(i)]);
    long size = it->second;
    c.global_dims.push_back(size);
    long start = 0, extent = size;
    if (n >= 2 && i == n - 2) {
      std::tie(start, extent) = split_block(size, grid_rows_, row);
    } else if (i == n - 1) {
      if (n >= 2)
        std::tie(start, extent) = split_block(size, grid_cols_, col);
      else
        std::tie(start, extent) = split_block(size, grid_rows_ * grid_cols_, producer);
    }
    if (extent <= 0)
      throw HarnessError("dimension " + field.dims[std::size_t(i)] +
                         " too small for the producer grid");
    c.rect.start.push_back(start);
    c.rect.extent.push_back(extent);
  }
  return c;
}

Value World::field_payload(const cfg::FieldSpec& field, int producer, long timestep) const {
  if (field.kind == cfg::FieldKind::Scalar)
    return Value::scalar(synth_value(producer, timestep, 0));
  std::vector<std::size_t> shape;
  if (!field.dims.empty()) {
    writer::ChunkInfo c = chunk_for(field, producer);
    if (field.collective) {
      for (long e : c.rect.extent) shape.push_back(std::size_t(e));
    } else {
      for (long g : c.global_dims) shape.push_back(std::size_t(g));
    }
  } else {
    // Runtime-inferred 1-D size: one element per column of this producer's
    // horizontal sub-domain when the grid dims are known, else a fixed 4.
    auto y = sp_.dim_sizes.find("y");
    auto x = sp_.dim_sizes.find("x");
    if (y != sp_.dim_sizes.end() && x != sp_.dim_sizes.end()) {
      int row = producer / grid_cols_;
      int col = producer % grid_cols_;
      long ny = split_block(y->second, grid_rows_, row).second;
      long nx = split_block(x->second, grid_cols_, col).second;
      shape.push_back(std::size_t(ny * nx));
    } else {
      shape.push_back(4);
    }
  }
  std::size_t count = 1;
  for (auto s : shape) count *= s;
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) data[i] = synth_value(producer, timestep, i);
  return Value::array(std::move(data), std::move(shape));
}

void World::record_arrival(int rank, const msg::TransportMessage& m) {
  Server& s = *servers_[std::size_t(rank)];
  ByteReader r(m.payload);
  long step = long(r.get_i64());
  double t = r.get_f64();
  s.arrivals.push_back(now_);
  s.arrival_steps.push_back(step);
  if (t > s.max_model_time) {
    for (const auto& f : config_.files) {
      if (writer::check_write_trigger(s.max_model_time, t, f.write_time_frequency)) {
        double boundary = writer::write_boundary(t, f.write_time_frequency);
        auto& per_file = s.pending_writes[f.name];
        if (!per_file.count(boundary))
          per_file.emplace(boundary, PendingWrite{boundary, now_, step});
      }
    }
    s.max_model_time = t;
  }
}

void World::handle_data(int rank, const msg::TransportMessage& m) {
  if (tls_exec_context != ExecContext::Pool)
    record_error("data handler executed on the transport delivery path");
  Server& s = *servers_[std::size_t(rank)];
  int producer = m.source - sp_.nservers;
  ByteReader r(m.payload);
  pipeline::DataEvent ev;
  ev.source = producer;
  ev.group = m.tag;
  ev.timestep = r.get_i64();
  ev.model_time = r.get_f64();
  std::uint32_t nfields = r.get_u32();
  for (std::uint32_t i = 0; i < nfields; ++i) {
    std::string name = r.get_str();
    ev.fields.emplace(name, r.get_value());
  }
  const cfg::DataDefinition* def = nullptr;
  for (const auto& dd : config_.definitions)
    if (dd.name == ev.group) def = &dd;
  if (!def) {
    record_error("rank " + std::to_string(rank) + ": data for unknown group " + ev.group);
    return;
  }
  try {
    s.diags->on_data_event(ev);
  } catch (const std::exception& e) {
    record_error("rank " + std::to_string(rank) + ": " + e.what());
  }
  for (const auto& [name, value] : ev.fields) {
    const cfg::FieldSpec* spec = nullptr;
    for (const auto& f : def->fields)
      if (f.name == name) spec = &f;
    if (!spec || !raw_writer_fields_.count(spec->qualified())) continue;
    try {
      s.writer->handle_value(spec->qualified(), producer,
                             {ev.timestep, ev.model_time, value});
    } catch (const std::exception& e) {
      record_error("rank " + std::to_string(rank) + ": " + e.what());
    }
  }
}

void World::compute_overheads(RunResult& out) {
  for (int rank = 0; rank < sp_.nservers; ++rank) {
    Server& s = *servers_[std::size_t(rank)];
    // Deterministic queueing model: pool_size workers, fixed per-message
    // service cost, arrivals in delivery order.
    std::priority_queue<double, std::vector<double>, std::greater<>> free;
    for (int i = 0; i < sp_.pool_size; ++i) free.push(0.0);
    std::vector<double> completion(s.arrivals.size());
    for (std::size_t i = 0; i < s.arrivals.size(); ++i) {
      double start = std::max(s.arrivals[i], free.top());
      free.pop();
      completion[i] = start + sp_.service_cost;
      free.push(completion[i]);
    }
    for (const auto& [target, per_file] : s.pending_writes) {
      for (const auto& [boundary, p] : per_file) {
        // The write needs every producer's data for the cutoff timestep,
        // so it completes only after the batch drains through the pool.
        double batch_done = p.trigger_time;
        for (std::size_t i = 0; i < s.arrivals.size(); ++i)
          if (s.arrival_steps[i] == p.trigger_step)
            batch_done = std::max(batch_done, completion[i]);
        OverheadRecord rec;
        rec.server = rank;
        rec.target = target;
        rec.boundary = boundary;
        rec.trigger_time = p.trigger_time;
        rec.completion_time = batch_done + sp_.write_cost;
        rec.overhead = rec.completion_time - rec.trigger_time;
        out.overheads.push_back(rec);
      }
    }
  }
  if (!out.overheads.empty()) {
    double sum = 0;
    for (const auto& r : out.overheads) {
      sum += r.overhead;
      out.max_overhead = std::max(out.max_overhead, r.overhead);
    }
    out.mean_overhead = sum / double(out.overheads.size());
  }
}

void World::check_termination(RunResult& out) {
  bool ok = true;
  for (int rank = 0; rank < sp_.nservers; ++rank) {
    Server& s = *servers_[std::size_t(rank)];
    if (sp_.checkpoint_at < 0 && s.done_producers != sp_.producers_per_server) ok = false;
    if (s.diags->pending_count() != 0) ok = false;
    if (s.messaging->outstanding_count() != 0) {
      ok = false;
      for (const auto& uid : s.messaging->outstanding_uids())
        out.stuck.push_back("rank " + std::to_string(rank) + ": " + uid);
    }
  }
  out.terminated = ok;
}

RunResult World::run() {
  RunResult out;
  for (int p = 0; p < sp_.nservers * sp_.producers_per_server; ++p) {
    msg::TransportMessage reg;
    reg.type = msg::MsgType::Register;
    reg.source = sp_.nservers + p;
    reg.dest = p / sp_.producers_per_server;
    schedule(std::move(reg), 0.0);
  }
  pump();

  if (sp_.checkpoint_at >= 0) {
    std::vector<ckpt::AreaBytes> areas;
    for (int rank = 0; rank < sp_.nservers; ++rank) {
      Server& s = *servers_[std::size_t(rank)];
      try {
        ckpt::quiesce([&] { return s.diags->pending_count(); },
                      [&] { return s.messaging->outstanding_uids(); }, 2000);
        areas.push_back(ckpt::capture(*s.writer));
      } catch (const std::exception& e) {
        record_error("rank " + std::to_string(rank) + ": " + e.what());
        areas.push_back({});
      }
    }
    double t_at = 0;
    for (const auto& [k, t] : trace_)
      if (k <= sp_.checkpoint_at) t_at = t;
    out.checkpoint = ckpt::write_checkpoint(areas, {sp_.checkpoint_at, t_at, sp_.nservers});
  } else {
    for (auto& s : servers_) {
      try {
        s->writer->finalize();
      } catch (const std::exception& e) {
        record_error(e.what());
      }
    }
    pump();
  }

  check_termination(out);
  compute_overheads(out);
  {
    std::lock_guard lock(out_mu_);
    out.files = std::move(finished_);
    out.errors = errors_;
  }
  return out;
}

}  // namespace insitu::harness
