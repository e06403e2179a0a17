#ifndef INSITU_HARNESS_HPP
#define INSITU_HARNESS_HPP

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <queue>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "messaging.hpp"
#include "pipeline.hpp"
#include "sdc.hpp"
#include "threadpool.hpp"
#include "writer.hpp"

namespace insitu::harness {

struct HarnessError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// The in-process transport: a virtual clock in model seconds, seeded
// per-message delays, and per-(source, dest) FIFO ordering. Delivery order
// across pairs depends on the seed; everything downstream must be (and is
// tested to be) order independent.
struct TransportConfig {
  std::uint64_t seed = 1;
  double min_delay = 0.001;
  double max_delay = 0.05;
  // Fault injection: silently drop the first collective message whose uid
  // matches, producing an unmatched collective for the watchdog to report.
  std::string drop_active_uid;
};

struct SimParams {
  int nservers = 1;
  int producers_per_server = 1;
  int pool_size = 4;
  std::uint64_t sim_seed = 1;
  double end_time = 10.0;
  // Dynamic timestep: dt(k+1) = clamp(dt(k) * u, dt_min, dt_max) with u
  // drawn uniformly from [0.85, 1.2); the trace depends only on sim_seed.
  double dt_initial = 1.0;
  double dt_min = 0.25;
  double dt_max = 4.0;
  // Global sizes for the symbolic dimension names in the config.
  std::map<std::string, long> dim_sizes;
  // Deterministic queueing model for the overhead metric: every data
  // message costs service_cost seconds on one of pool_size workers, and a
  // completed file adds write_cost on top.
  double service_cost = 0.02;
  double write_cost = 0.05;
  // Stop producers after this timestep and capture the writer state
  // instead of finalizing; -1 runs to the end.
  long checkpoint_at = -1;
  // Optional fields each producer leaves out of its capability list.
  std::map<int, std::set<std::string>> omit_fields;
  // When non-empty, replaces the generated dynamic-timestep trace with an
  // exact (timestep, model time) sequence.
  std::vector<std::pair<long, double>> explicit_trace;
};

// Overhead of one triggered file write: virtual time from the arrival of
// the data message that crossed the write boundary to the modeled
// completion of that write.
struct OverheadRecord {
  int server = 0;
  std::string target;  // file definition name
  double boundary = 0;
  double trigger_time = 0;
  double completion_time = 0;
  double overhead = 0;  // completion - trigger, always >= 0
};

struct RunResult {
  std::map<std::string, sdc::FileImage> files;
  std::vector<OverheadRecord> overheads;
  double mean_overhead = 0;
  double max_overhead = 0;
  std::optional<sdc::FileImage> checkpoint;
  bool terminated = false;
  std::vector<std::string> stuck;  // outstanding collective uids by rank
  std::vector<std::string> errors;
};

// The shared dynamic-timestep trace: (timestep, model time) pairs for
// every step with model time <= end_time. Depends only on sim params.
std::vector<std::pair<long, double>> timestep_trace(const SimParams& p);

// Closed-form synthetic field data, recomputable by any oracle:
//   value(producer, timestep, index) = producer * 10000 + timestep + index / 64.
double synth_value(int producer, long timestep, std::size_t index);

// Contiguous block [start, start+extent) when splitting `size` into
// `parts` pieces with the remainder spread over the front.
std::pair<long, long> split_block(long size, int parts, int which);

// One simulated world: nservers IO-server actors and nservers * M
// producers over the seeded transport. run() performs the registration
// handshake, streams the data trace, finalizes (or checkpoints), and
// reports termination plus the overhead metric.
class World {
 public:
  World(cfg::Config config, SimParams params, TransportConfig transport,
        const sdc::FileImage* restore_from = nullptr);
  ~World();

  RunResult run();

 private:
  struct Event {
    double time = 0;
    std::uint64_t seq = 0;
    msg::TransportMessage msg;
  };
  struct EventLater {
    bool operator()(const Event& a, const Event& b) const {
      return a.time != b.time ? a.time > b.time : a.seq > b.seq;
    }
  };
  struct PendingWrite {
    double boundary = 0;
    double trigger_time = 0;
    long trigger_step = 0;
  };
  struct Server {
    std::unique_ptr<ThreadPool> pool;
    std::unique_ptr<msg::ActiveMessaging> messaging;
    std::unique_ptr<pipeline::DiagnosticsFederator> diags;
    std::unique_ptr<writer::WriterFederator> writer;
    int done_producers = 0;
    // Overhead bookkeeping, touched only on the pump thread.
    std::vector<double> arrivals;
    std::vector<long> arrival_steps;
    double max_model_time = 0;
    std::map<std::string, std::map<double, PendingWrite>> pending_writes;
  };

  void schedule(msg::TransportMessage m, double base_time);
  void pump();
  void dispatch(const Event& e);
  void on_server_message(int rank, const msg::TransportMessage& m);
  void on_producer_message(int producer, const msg::TransportMessage& m);
  void handle_register(int rank, int producer);
  void handle_field_sizes(int rank, const msg::TransportMessage& m);
  void handle_data(int rank, const msg::TransportMessage& m);
  void producer_send_plan(int producer);
  void record_arrival(int rank, const msg::TransportMessage& m);
  void record_error(const std::string& m);
  writer::ChunkInfo chunk_for(const cfg::FieldSpec& field, int producer) const;
  Value field_payload(const cfg::FieldSpec& field, int producer, long timestep) const;
  bool provides(int producer, const std::string& field) const;
  void compute_overheads(RunResult& out);
  void check_termination(RunResult& out);

  cfg::Config config_;
  SimParams sp_;
  TransportConfig tc_;
  std::vector<std::pair<long, double>> trace_;
  long resume_after_ = 0;  // producers skip timesteps <= this (restart)
  int grid_rows_ = 1, grid_cols_ = 1;
  std::set<std::string> raw_writer_fields_;  // qualified fields files take directly

  std::vector<std::unique_ptr<Server>> servers_;

  std::mutex queue_mu_;
  std::priority_queue<Event, std::vector<Event>, EventLater> queue_;
  double now_ = 0;
  std::uint64_t seq_ = 0;
  std::map<std::pair<int, int>, double> last_delivery_;
  std::mt19937_64 delay_rng_;
  bool drop_armed_ = false;

  std::mutex out_mu_;
  std::map<std::string, std::unique_ptr<sdc::CollectiveFile>> open_files_;
  std::map<std::string, sdc::FileImage> finished_;
  std::vector<std::string> errors_;
};

}  // namespace insitu::harness

#endif
