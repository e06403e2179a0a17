#ifndef INSITU_WRITER_HPP
#define INSITU_WRITER_HPP

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "config.hpp"
#include "layout.hpp"
#include "messaging.hpp"
#include "sdc.hpp"
#include "value.hpp"

namespace insitu::writer {

struct WriterError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TimedValue {
  long timestep = 0;
  double model_time = 0;
  Value value;

  bool operator==(const TimedValue&) const = default;
};

// Releases events strictly in ascending timestep order; arrivals ahead of
// the expected timestep are parked until the gap fills.
struct OrderedFieldQueue {
  long interval = 1;
  long expected_next = 1;
  std::map<long, TimedValue> pending;

  OrderedFieldQueue() = default;
  OrderedFieldQueue(long interval_, long first_expected)
      : interval(interval_), expected_next(first_expected) {}

  std::vector<TimedValue> intake(TimedValue event);

  bool operator==(const OrderedFieldQueue&) const = default;
};

struct EmittedValue {
  double time = 0;  // window end; the coordinate written to the file
  Value value;
  long sample_count = 0;  // 0 marks a window attributed from a spanning sample

  bool operator==(const EmittedValue&) const = default;
};

// Applies the configured time manipulation to a sample stream that is
// already in timestep order. Windows are half-open (k*f, (k+1)*f], so a
// sample exactly on a boundary belongs to the earlier window.
//
// A timestep that jumps over whole windows attributes the spanning sample's
// value to each skipped window (sample_count 0), so every window between
// the first and last sample emits exactly one value.
struct TimeSeriesBuffer {
  cfg::TimeManipulation manipulation = cfg::TimeManipulation::None;
  double frequency = 0;  // model seconds per window; unused for none

  // Running state, all advanced in timestep order.
  long window = -1;  // open window index, -1 when none (averaged)
  std::vector<double> sum;
  long count = 0;
  double next_end = 0;     // next snapshot boundary (instantaneous)
  double last_time = -1;   // most recent sample's model time
  Value last_value;        // for instantaneous end-of-run flush
  std::vector<std::size_t> shape;
  bool any_sample = false;
  bool finished = false;

  TimeSeriesBuffer() = default;
  TimeSeriesBuffer(cfg::TimeManipulation m, double f) : manipulation(m), frequency(f) {}

  std::vector<EmittedValue> accumulate(const Value& v, long timestep, double model_time);

  // Largest coordinate this series can contribute at or below the write
  // boundary.
  double last_coordinate_before(double boundary) const;
  // True once no future sample can emit a coordinate <= boundary.
  bool complete_through(double boundary) const;

  // End of run: emit the open window (averaged uses the running mean,
  // instantaneous snapshots the last sample seen).
  std::vector<EmittedValue> finish();

  bool operator==(const TimeSeriesBuffer&) const = default;
};

// Crossing detection for model-time-triggered writes. Returns the cutoff
// (the previous sampled time) when (prev, new] crosses a multiple of W; a
// sample exactly on a boundary belongs to the earlier period and does not
// itself trigger.
std::optional<double> check_write_trigger(double prev, double new_time, double W);
// Largest boundary strictly below t: W*(ceil(t/W)-1).
double write_boundary(double t, double W);

// Geometry of one producer's slab of a decomposed array field.
struct ChunkInfo {
  std::vector<std::string> dim_names;  // e.g. z,y,x
  std::vector<long> global_dims;
  layout::ChunkRect rect;  // owner = source rank

  bool operator==(const ChunkInfo&) const = default;
};

// One file instance being accumulated toward a write boundary.
struct FileWriteState {
  double prev_boundary = 0;  // entries with coordinate in (prev, boundary]
  double boundary = 0;
  double cutoff = 0;
  std::string filename;
  // field -> source -> entries routed so far.
  std::map<std::string, std::map<int, std::vector<EmittedValue>>> entries;
  bool launched = false;  // gated write chain issued
  bool final_flush = false;

  bool operator==(const FileWriteState&) const = default;
};

// Hooks the writer needs from its surroundings. Barrier and allreduce are
// provided by the active-messaging layer; the file backend hands out the
// shared collective handle per target file.
struct WriterHooks {
  std::function<void(const std::string& uid, std::function<void()> done)> barrier;
  std::function<void(const std::string& uid, double value, msg::ReduceOp,
                     std::function<void(double)> done)>
      allreduce;
  std::function<sdc::CollectiveFile&(const std::string& filename)> open_file;
  // Called exactly once per finished file, on rank 0's chain.
  std::function<void(const std::string& filename, sdc::FileImage image)> file_done;
  std::function<void(const std::string& message)> on_error;
};

// The writer federator for one server: timestep-ordered intake, time
// manipulation, model-time write triggering, and barrier-gated collective
// file assembly.
class WriterFederator {
 public:
  WriterFederator(int rank, int nservers, const cfg::Config& config, WriterHooks hooks);

  // Raw array chunk geometry, once per (field, source) before data flows.
  void register_chunk(const std::string& qualified_field, int source, ChunkInfo info);

  // A field value or finished diagnostic for one source (source -1 for
  // server-local diagnostics). May release queued events, emit windows,
  // trigger writes and launch gated file chains.
  void handle_value(const std::string& qualified_field, int source, TimedValue event);

  // End of run: flush open windows and write whatever remains.
  void finalize();

  // Entries buffered but not yet written to any closed file.
  long stored_entry_count() const;
  // Files currently accumulating or mid-write.
  long open_file_count() const;
  long writes_performed() const { return writes_performed_; }
  double model_time() const;

  // checkpoint support: the five state areas (see checkpoint module).
  struct Snapshot;
  friend struct CheckpointCodec;

 private:
  struct SeriesKey {
    std::string field;
    int source;
    auto operator<=>(const SeriesKey&) const = default;
  };
  struct FileTarget {
    cfg::FileDef def;
    // field -> (manipulation, frequency)
    std::map<std::string, std::pair<cfg::TimeManipulation, double>> fields;
    double last_boundary = 0;  // highest boundary already claimed by a state
    std::deque<FileWriteState> states;
  };

  void route_entries(const std::string& target, const SeriesKey& key,
                     std::vector<EmittedValue> emitted);
  void route_one(FileTarget& t, const std::string& target, const SeriesKey& key,
                 EmittedValue entry);
  void advance_time(double model_time);
  void check_completion();
  bool state_complete(const std::string& target, const FileTarget& t,
                      const FileWriteState& s) const;
  void launch_chain(const std::string& target, const std::string& filename);
  void declare_phase(const std::string& target, const std::string& filename);
  void write_phase(const std::string& target, const std::string& filename);
  void close_phase(const std::string& target, const std::string& filename);
  std::string instance_name(const FileTarget& t, const FileWriteState& s) const;
  long sampling_interval(const std::string& qualified_field) const;

  int rank_;
  int nservers_;
  cfg::Config config_;
  WriterHooks hooks_;

  mutable std::mutex mu_;
  std::uint64_t epoch_ = 0;  // bumped on every state mutation; see checkpoint
  std::map<std::string, FileTarget> targets_;  // by file def name
  std::map<SeriesKey, OrderedFieldQueue> queues_;
  // (file target, field, source) -> manipulation buffer.
  std::map<std::string, std::map<SeriesKey, TimeSeriesBuffer>> buffers_;
  // Emitted but not yet claimed by any file state.
  std::map<std::string, std::map<SeriesKey, std::vector<EmittedValue>>> unclaimed_;
  std::map<SeriesKey, ChunkInfo> chunks_;
  // Launched (gated) file states, keyed by instance filename.
  std::map<std::string, FileWriteState> in_flight_;
  double last_model_time_ = 0;
  bool finalized_ = false;
  long writes_performed_ = 0;
};

}  // namespace insitu::writer

#endif
