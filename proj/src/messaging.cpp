#include "messaging.hpp"

#include <algorithm>

#include "bytesio.hpp"

namespace insitu::msg {

ReduceOp reduce_op_from_name(const std::string& name) {
  if (name == "sum") return ReduceOp::Sum;
  if (name == "min") return ReduceOp::Min;
  if (name == "max") return ReduceOp::Max;
  throw MessagingError("unknown reduction operator: " + name);
}

std::string reduce_op_name(ReduceOp op) {
  switch (op) {
    case ReduceOp::Sum: return "sum";
    case ReduceOp::Min: return "min";
    case ReduceOp::Max: return "max";
    default: return "none";
  }
}

std::uint64_t stable_hash(const std::string& key) {
  // FNV-1a, 64 bit.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : key) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::vector<std::uint8_t> ActivePayload::encode() const {
  ByteWriter w;
  w.put_u16(std::uint16_t(uid.size()));
  w.put_bytes(uid.data(), uid.size());
  w.put_u8(std::uint8_t(kind));
  w.put_u8(std::uint8_t(op));
  w.put_u32(root);
  w.put_u8(std::uint8_t(dtype));
  if (dtype == DataType::Integer) {
    w.put_u64(i64.size());
    for (auto v : i64) w.put_i64(v);
  } else {
    w.put_u64(dbl.size());
    for (auto v : dbl) w.put_f64(v);
  }
  return w.take();
}

ActivePayload ActivePayload::decode(const std::vector<std::uint8_t>& bytes) {
  try {
    ByteReader r(bytes);
    ActivePayload p;
    std::uint16_t n = r.get_u16();
    p.uid.resize(n);
    r.get_bytes(p.uid.data(), n);
    p.kind = static_cast<CollectiveKind>(r.get_u8());
    p.op = static_cast<ReduceOp>(r.get_u8());
    p.root = r.get_u32();
    p.dtype = static_cast<DataType>(r.get_u8());
    std::uint64_t count = r.get_u64();
    if (p.kind != CollectiveKind::Reduce && p.kind != CollectiveKind::Broadcast &&
        p.kind != CollectiveKind::Barrier)
      throw MessagingError("bad collective kind");
    if (p.dtype == DataType::Integer) {
      p.i64.resize(count);
      for (auto& v : p.i64) v = r.get_i64();
    } else if (p.dtype == DataType::Double) {
      p.dbl.resize(count);
      for (auto& v : p.dbl) v = r.get_f64();
    } else if (count != 0) {
      throw MessagingError("bad element type");
    }
    if (!r.done()) throw MessagingError("trailing bytes");
    return p;
  } catch (const std::exception& e) {
    throw MessagingError(std::string("malformed active message: ") + e.what());
  }
}

ActiveMessaging::ActiveMessaging(int rank, int nservers, ThreadPool& pool, SendFn send,
                                 ErrorFn on_error)
    : rank_(rank), nservers_(nservers), pool_(pool), send_(std::move(send)),
      on_error_(std::move(on_error)) {
  if (!on_error_) on_error_ = [](const std::string&) {};
}

void ActiveMessaging::send_active(int dest, const ActivePayload& p) {
  TransportMessage m;
  m.type = MsgType::Active;
  m.source = rank_;
  m.dest = dest;
  m.tag = p.uid;
  m.payload = p.encode();
  send_(std::move(m));
}

void ActiveMessaging::register_handle(const std::string& uid, Handle h) {
  if (handles_.count(uid))
    throw MessagingError("identifier already active on server " + std::to_string(rank_) + ": " +
                         uid);
  h.issued_at = ++clock_;
  handles_.emplace(uid, std::move(h));
}

void ActiveMessaging::active_reduce(const std::string& uid, const ActiveResult& data, ReduceOp op,
                                    int root, ActiveCallback cb) {
  ActivePayload p;
  p.uid = uid;
  p.kind = CollectiveKind::Reduce;
  p.op = op;
  p.root = std::uint32_t(root);
  p.dtype = data.dtype;
  p.dbl = data.dbl;
  p.i64 = data.i64;
  {
    std::unique_lock lock(mu_);
    if (rank_ == root) {
      Handle h;
      h.kind = CollectiveKind::Reduce;
      h.op = op;
      h.root = root;
      h.cb = std::move(cb);
      register_handle(uid, std::move(h));
    }
  }
  // Every participant, root included, routes its contribution through the
  // transport so completion logic has a single path.
  send_active(root, p);
}

void ActiveMessaging::active_broadcast(const std::string& uid, const ActiveResult* data, int root,
                                       ActiveCallback cb) {
  {
    std::unique_lock lock(mu_);
    Handle h;
    h.kind = CollectiveKind::Broadcast;
    h.root = root;
    h.cb = std::move(cb);
    register_handle(uid, std::move(h));
    try_complete(lock, uid);
  }
  if (rank_ == root) {
    if (!data) throw MessagingError("broadcast root must supply data: " + uid);
    ActivePayload p;
    p.uid = uid;
    p.kind = CollectiveKind::Broadcast;
    p.root = std::uint32_t(root);
    p.dtype = data->dtype;
    p.dbl = data->dbl;
    p.i64 = data->i64;
    for (int dest = 0; dest < nservers_; ++dest) send_active(dest, p);
  }
}

void ActiveMessaging::active_barrier(const std::string& uid, ActiveCallback cb) {
  int coord = coordinator_of(uid);
  {
    std::unique_lock lock(mu_);
    Handle h;
    h.kind = CollectiveKind::Barrier;
    h.root = coord;
    h.cb = std::move(cb);
    register_handle(uid, std::move(h));
  }
  ActivePayload p;
  p.uid = uid;
  p.kind = CollectiveKind::Barrier;
  p.op = static_cast<ReduceOp>(kBarrierContribution);
  p.root = std::uint32_t(coord);
  send_active(coord, p);
}

void ActiveMessaging::deliver(const TransportMessage& message) {
  ActivePayload p;
  try {
    p = ActivePayload::decode(message.payload);
  } catch (const MessagingError& e) {
    on_error_(e.what());
    return;
  }
  std::unique_lock lock(mu_);
  std::string uid = p.uid;
  pending_[uid][message.source].push_back(std::move(p));
  try_complete(lock, uid);
}

void ActiveMessaging::fire(ActiveCallback cb, ActiveResult result) {
  if (!cb) return;
  pool_.submit([cb = std::move(cb), result = std::move(result)] { cb(result); });
}

namespace {

void combine(ActiveResult& acc, const ActivePayload& in, ReduceOp op) {
  auto apply = [op](auto& a, const auto& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      switch (op) {
        case ReduceOp::Sum: a[i] = a[i] + b[i]; break;
        case ReduceOp::Min: a[i] = std::min(a[i], b[i]); break;
        case ReduceOp::Max: a[i] = std::max(a[i], b[i]); break;
        default: break;
      }
    }
  };
  if (acc.dtype == DataType::Integer)
    apply(acc.i64, in.i64);
  else
    apply(acc.dbl, in.dbl);
}

}  // namespace

void ActiveMessaging::try_complete(std::unique_lock<std::mutex>& lock, const std::string& uid) {
  (void)lock;
  for (bool progress = true; progress;) {
    progress = false;
    auto hit = handles_.find(uid);
    if (hit == handles_.end()) return;
    Handle& h = hit->second;
    auto pit = pending_.find(uid);
    auto cleanup = [&] {
      if (pit != pending_.end()) {
        for (auto it = pit->second.begin(); it != pit->second.end();)
          it = it->second.empty() ? pit->second.erase(it) : std::next(it);
        if (pit->second.empty()) pending_.erase(pit);
      }
    };

    if (h.kind == CollectiveKind::Reduce) {
      if (pit == pending_.end()) return;
      bool all = true;
      for (int s = 0; s < nservers_; ++s) {
        auto q = pit->second.find(s);
        if (q == pit->second.end() || q->second.empty()) {
          all = false;
          break;
        }
      }
      if (!all) return;
      ActiveResult acc;
      acc.uid = uid;
      bool bad = false;
      for (int s = 0; s < nservers_; ++s) {
        ActivePayload in = std::move(pit->second[s].front());
        pit->second[s].pop_front();
        if (s == 0) {
          acc.dtype = in.dtype;
          acc.dbl = std::move(in.dbl);
          acc.i64 = std::move(in.i64);
        } else if (in.dtype != acc.dtype ||
                   in.element_count() != (acc.dtype == DataType::Integer ? acc.i64.size()
                                                                         : acc.dbl.size())) {
          bad = true;
        } else {
          combine(acc, in, h.op);
        }
      }
      cleanup();
      ActiveCallback cb = std::move(h.cb);
      handles_.erase(hit);
      if (bad)
        on_error_("reduce contributions disagree on shape: " + uid);
      else
        fire(std::move(cb), std::move(acc));
      progress = true;
    } else if (h.kind == CollectiveKind::Broadcast) {
      if (pit == pending_.end()) return;
      auto q = pit->second.find(h.root);
      if (q == pit->second.end() || q->second.empty()) return;
      ActivePayload in = std::move(q->second.front());
      q->second.pop_front();
      cleanup();
      ActiveResult res;
      res.uid = uid;
      res.dtype = in.dtype;
      res.dbl = std::move(in.dbl);
      res.i64 = std::move(in.i64);
      ActiveCallback cb = std::move(h.cb);
      handles_.erase(hit);
      fire(std::move(cb), std::move(res));
      progress = true;
    } else {  // Barrier
      // Coordinator step: once every server's entry is in, release them all.
      if (rank_ == h.root && pit != pending_.end()) {
        bool all = true;
        for (int s = 0; s < nservers_; ++s) {
          auto q = pit->second.find(s);
          if (q == pit->second.end() || q->second.empty() ||
              std::uint8_t(q->second.front().op) != kBarrierContribution) {
            all = false;
            break;
          }
        }
        if (all) {
          for (int s = 0; s < nservers_; ++s) pit->second[s].pop_front();
          cleanup();
          pit = pending_.find(uid);
          ActivePayload release;
          release.uid = uid;
          release.kind = CollectiveKind::Barrier;
          release.op = static_cast<ReduceOp>(kBarrierRelease);
          release.root = std::uint32_t(h.root);
          for (int dest = 0; dest < nservers_; ++dest) send_active(dest, release);
          progress = true;
        }
      }
      // Member step: a release from the coordinator completes the barrier.
      if (pit != pending_.end()) {
        auto q = pit->second.find(h.root);
        if (q != pit->second.end() && !q->second.empty() &&
            std::uint8_t(q->second.front().op) == kBarrierRelease) {
          q->second.pop_front();
          cleanup();
          ActiveResult res;
          res.uid = uid;
          ActiveCallback cb = std::move(h.cb);
          handles_.erase(hit);
          fire(std::move(cb), std::move(res));
          return;
        }
      }
      if (!progress) return;
    }
  }
}

long ActiveMessaging::outstanding_count() const {
  std::lock_guard lock(mu_);
  long n = long(handles_.size());
  for (const auto& [uid, by_source] : pending_)
    for (const auto& [src, q] : by_source) n += long(q.size());
  return n;
}

std::vector<std::string> ActiveMessaging::outstanding_uids() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (const auto& [uid, h] : handles_) out.push_back(uid);
  for (const auto& [uid, by_source] : pending_)
    for (const auto& [src, q] : by_source)
      if (!q.empty()) {
        out.push_back(uid);
        break;
      }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace insitu::msg
