#ifndef INSITU_PIPELINE_HPP
#define INSITU_PIPELINE_HPP

#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "config.hpp"
#include "messaging.hpp"
#include "value.hpp"
#include "writer.hpp"

namespace insitu::pipeline {

struct PipelineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One producer's payload for one sampling timestep.
struct DataEvent {
  int source = -1;
  std::string group;  // DataDefinition name
  long timestep = 0;
  double model_time = 0;
  std::map<std::string, Value> fields;  // unqualified field name -> payload
};

// ---- operator primitives ----

// Combines all elements in index order; index order is what makes local
// sums bit reproducible.
Value exec_localreduce(const Value& field, msg::ReduceOp op);
double eval_arithmetic(const std::string& equation, const std::map<std::string, double>& bindings);
// Extracts the plane at `index` along the named dimension.
Value exec_slice(const Value& field, const std::vector<std::string>& dim_names,
                 const std::string& dimension, long index);
// Stride subsampling along every dimension.
Value exec_coarsen(const Value& field, long stride);

// Deterministic auto-root selection; identical on every server.
int choose_root(const std::string& rule_key, int num_servers);

// The pluggable operator contract: which symbols a rule needs, and how to
// compute its result from them.
struct OperatorContext {
  const cfg::Config* config = nullptr;
};
struct OperatorContract {
  std::string name;
  std::function<std::vector<std::string>(const cfg::RuleDef&)> required_fields;
  std::function<Value(const cfg::RuleDef&, const std::map<std::string, Value>& inputs,
                      const OperatorContext&)>
      execute;
};
const std::map<std::string, OperatorContract>& operator_registry();

// Rules whose inputs are all bound and whose result is not yet produced.
std::vector<int> ready_rules(const cfg::RuleGraph& graph, const std::set<std::string>& bound,
                             const std::set<std::string>& executed);

// The diagnostics federator for one server. Raw field events flow in;
// per-source rules run as contributions arrive; once every local producer
// contributed, local values are combined in ascending source order and the
// communication rules are issued; finished diagnostics are forwarded to
// the writer on the server that owns them.
class DiagnosticsFederator {
 public:
  using WriterSink =
      std::function<void(const std::string& qualified_diag, writer::TimedValue value)>;

  DiagnosticsFederator(int rank, int nservers, const cfg::Config& config,
                       msg::ActiveMessaging& messaging, WriterSink sink,
                       msg::ErrorFn on_error = {});

  // Producers local to this server, per data-definition name; must be
  // complete before events flow.
  void register_local_source(const std::string& group, int source);

  void on_data_event(const DataEvent& event);

  // (diagnostic, timestep) states still in flight on this server.
  long pending_count() const;

  int owner_of(const std::string& qualified_diag) const {
    return choose_root(qualified_diag, nservers_);
  }

 private:
  struct DiagState {
    long timestep = 0;
    double model_time = 0;
    std::map<int, std::map<std::string, Value>> per_source;
    std::set<int> sources_seen;
    std::map<std::string, Value> global;
    std::set<std::string> executed;  // global rule results
    std::vector<cfg::RuleDef> unsent_broadcasts;  // root side, waiting for input
    bool comm_issued = false;
    int callbacks_expected = 0;
    bool done = false;
  };
  using StateKey = std::pair<std::string, long>;

  void advance(const std::string& diag_name, const StateKey& key,
               std::unique_lock<std::mutex>& lock);
  void issue_communications(const cfg::DiagnosticDef& diag, const StateKey& key, DiagState& st);
  void run_global_rules(const cfg::DiagnosticDef& diag, const StateKey& key, DiagState& st);
  void maybe_discard(const StateKey& key);
  const cfg::DiagnosticDef& diag_def(const std::string& qualified) const;

  int rank_;
  int nservers_;
  cfg::Config config_;
  msg::ActiveMessaging& messaging_;
  WriterSink sink_;
  msg::ErrorFn on_error_;

  mutable std::mutex mu_;
  std::map<std::string, std::set<int>> local_sources_;  // group -> producer ranks
  // diagnostic qualified name -> groups/fields feeding it (qualified raw fields).
  std::map<std::string, std::set<std::string>> raw_inputs_;
  // diagnostic qualified name -> results computed once per local producer.
  std::map<std::string, std::set<std::string>> per_source_results_;
  std::map<StateKey, DiagState> states_;
};

}  // namespace insitu::pipeline

#endif
