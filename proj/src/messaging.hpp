#ifndef INSITU_MESSAGING_HPP
#define INSITU_MESSAGING_HPP

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "threadpool.hpp"
#include "value.hpp"

namespace insitu::msg {

struct MessagingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class MsgType : std::uint8_t {
  Register = 1,
  FieldSpec = 2,
  FieldSizes = 3,
  Data = 4,
  Done = 5,
  Active = 6,
};

struct TransportMessage {
  MsgType type = MsgType::Data;
  int source = -1;
  int dest = -1;
  std::string tag;  // message-kind qualifier, e.g. field name for Data
  std::vector<std::uint8_t> payload;
};

enum class CollectiveKind : std::uint8_t { Reduce = 1, Broadcast = 2, Barrier = 3 };
enum class ReduceOp : std::uint8_t { None = 0, Sum = 1, Min = 2, Max = 3 };

ReduceOp reduce_op_from_name(const std::string& name);
std::string reduce_op_name(ReduceOp op);

// Wire form of an Active message. Layout (all little endian):
//   u16 uid length, uid bytes, u8 kind, u8 op, u32 root, u8 element type,
//   u64 element count, raw elements.
// For barriers the op byte carries the subtype: 0 contribution, 1 release.
struct ActivePayload {
  std::string uid;
  CollectiveKind kind = CollectiveKind::Reduce;
  ReduceOp op = ReduceOp::None;
  std::uint32_t root = 0;
  DataType dtype = DataType::Double;
  std::vector<double> dbl;
  std::vector<std::int64_t> i64;

  std::uint64_t element_count() const {
    return dtype == DataType::Integer ? i64.size() : dbl.size();
  }
  std::vector<std::uint8_t> encode() const;
  static ActivePayload decode(const std::vector<std::uint8_t>& bytes);
};

inline constexpr std::uint8_t kBarrierContribution = 0;
inline constexpr std::uint8_t kBarrierRelease = 1;

// What a completion callback receives.
struct ActiveResult {
  std::string uid;
  DataType dtype = DataType::Double;
  std::vector<double> dbl;
  std::vector<std::int64_t> i64;
};

using ActiveCallback = std::function<void(const ActiveResult&)>;
using SendFn = std::function<void(TransportMessage)>;
using ErrorFn = std::function<void(const std::string&)>;

// Deterministic non-cryptographic hash used wherever a stable rank must be
// derived from a string (barrier coordinators, diagnostic roots).
std::uint64_t stable_hash(const std::string& key);

// Non-blocking uid-matched collectives over an unordered transport.
//
// Matching is by uid, never by issue order. Contributions that arrive
// before the local operation is issued are parked per (uid, source) in
// FIFO order, which also separates back-to-back generations of a reused
// uid without a wire-level generation number. A uid may be reissued only
// after the previous generation completed on this server.
class ActiveMessaging {
 public:
  ActiveMessaging(int rank, int nservers, ThreadPool& pool, SendFn send, ErrorFn on_error);

  // Reduce element-wise onto root (combined in source rank order). Only the
  // root's callback fires; other callers pass a callback that is ignored.
  void active_reduce(const std::string& uid, const ActiveResult& data, ReduceOp op, int root,
                     ActiveCallback cb);
  // Root supplies data and broadcasts; every server's callback fires with it.
  void active_broadcast(const std::string& uid, const ActiveResult* data, int root,
                        ActiveCallback cb);
  // Callback fires once every server has entered the barrier with this uid.
  void active_barrier(const std::string& uid, ActiveCallback cb);

  // Feed an incoming Active transport message into the matcher.
  void deliver(const TransportMessage& message);

  // Handles registered locally plus parked remote contributions; zero when
  // this server is quiescent.
  long outstanding_count() const;
  std::vector<std::string> outstanding_uids() const;

  int rank() const { return rank_; }
  int coordinator_of(const std::string& uid) const {
    return int(stable_hash(uid) % std::uint64_t(nservers_));
  }

 private:
  struct Handle {
    CollectiveKind kind;
    ReduceOp op = ReduceOp::None;
    int root = 0;
    ActiveCallback cb;
    std::uint64_t issued_at = 0;
  };

  void register_handle(const std::string& uid, Handle h);
  void try_complete(std::unique_lock<std::mutex>& lock, const std::string& uid);
  void fire(ActiveCallback cb, ActiveResult result);
  void send_active(int dest, const ActivePayload& p);

  int rank_;
  int nservers_;
  ThreadPool& pool_;
  SendFn send_;
  ErrorFn on_error_;

  mutable std::mutex mu_;
  std::uint64_t clock_ = 0;
  std::map<std::string, Handle> handles_;
  // Early or pending arrivals: uid -> source -> FIFO of payloads.
  std::map<std::string, std::map<int, std::deque<ActivePayload>>> pending_;
};

}  // namespace insitu::msg

#endif
