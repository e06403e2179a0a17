#include "pipeline.hpp"

#include <algorithm>

#include "expr.hpp"

namespace insitu::pipeline {

namespace {

void combine_into(std::vector<double>& acc, const std::vector<double>& v, msg::ReduceOp op) {
  if (acc.size() != v.size()) throw PipelineError("local contributions disagree on shape");
  for (std::size_t i = 0; i < acc.size(); ++i) {
    switch (op) {
      case msg::ReduceOp::Sum: acc[i] += v[i]; break;
      case msg::ReduceOp::Min: acc[i] = std::min(acc[i], v[i]); break;
      case msg::ReduceOp::Max: acc[i] = std::max(acc[i], v[i]); break;
      default: throw PipelineError("bad reduce op");
    }
  }
}

}  // namespace

Value exec_localreduce(const Value& field, msg::ReduceOp op) {
  if (field.dbl.empty()) throw PipelineError("localreduce over empty field");
  double acc = field.dbl[0];
  for (std::size_t i = 1; i < field.dbl.size(); ++i) {
    switch (op) {
      case msg::ReduceOp::Sum: acc = acc + field.dbl[i]; break;
      case msg::ReduceOp::Min: acc = std::min(acc, field.dbl[i]); break;
      case msg::ReduceOp::Max: acc = std::max(acc, field.dbl[i]); break;
      default: throw PipelineError("bad reduce op");
    }
  }
  return Value::scalar(acc);
}

double eval_arithmetic(const std::string& equation,
                       const std::map<std::string, double>& bindings) {
  try {
    return expr::evaluate(equation, bindings);
  } catch (const expr::ExprError& e) {
    throw PipelineError(std::string("arithmetic: ") + e.what());
  }
}

Value exec_slice(const Value& field, const std::vector<std::string>& dim_names,
                 const std::string& dimension, long index) {
  auto dit = std::find(dim_names.begin(), dim_names.end(), dimension);
  if (dit == dim_names.end()) throw PipelineError("slice: unknown dimension " + dimension);
  std::size_t d = std::size_t(dit - dim_names.begin());
  if (field.shape.size() != dim_names.size())
    throw PipelineError("slice: field rank does not match declared dimensions");
  if (index < 0 || std::size_t(index) >= field.shape[d])
    throw PipelineError("slice: index out of range");

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < d; ++i) outer *= field.shape[i];
  for (std::size_t i = d + 1; i < field.shape.size(); ++i) inner *= field.shape[i];
  std::vector<double> out;
  out.reserve(outer * inner);
  std::size_t plane = field.shape[d] * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    const double* base = field.dbl.data() + o * plane + std::size_t(index) * inner;
    out.insert(out.end(), base, base + inner);
  }
  std::vector<std::size_t> shape;
  for (std::size_t i = 0; i < field.shape.size(); ++i)
    if (i != d) shape.push_back(field.shape[i]);
  return Value::array(std::move(out), std::move(shape));
}

Value exec_coarsen(const Value& field, long stride) {
  if (stride <= 0) throw PipelineError("coarsen: stride must be positive");
  if (field.shape.empty()) return field;
  std::vector<std::size_t> out_shape;
  for (auto s : field.shape) out_shape.push_back((s + std::size_t(stride) - 1) / std::size_t(stride));
  std::vector<double> out;
  std::vector<std::size_t> idx(field.shape.size(), 0);
  // Row-major walk over the coarse grid, reading the strided fine index.
  std::function<void(std::size_t)> walk = [&](std::size_t d) {
    if (d == field.shape.size()) {
      std::size_t flat = 0;
      for (std::size_t i = 0; i < idx.size(); ++i) flat = flat * field.shape[i] + idx[i];
      out.push_back(field.dbl[flat]);
      return;
    }
    for (std::size_t i = 0; i < field.shape[d]; i += std::size_t(stride)) {
      idx[d] = i;
      walk(d + 1);
    }
  };
  walk(0);
  return Value::array(std::move(out), std::move(out_shape));
}

int choose_root(const std::string& rule_key, int num_servers) {
  return int(msg::stable_hash(rule_key) % std::uint64_t(num_servers));
}

const std::map<std::string, OperatorContract>& operator_registry() {
  static const std::map<std::string, OperatorContract> registry = [] {
    std::map<std::string, OperatorContract> r;
    r["localreduce"] = {
        "localreduce",
        [](const cfg::RuleDef& rule) { return cfg::rule_inputs(rule); },
        [](const cfg::RuleDef& rule, const std::map<std::string, Value>& in,
           const OperatorContext&) {
          return exec_localreduce(in.at(rule.args.at("field")),
                                  msg::reduce_op_from_name(rule.args.at("operator")));
        }};
    r["arithmetic"] = {
        "arithmetic",
        [](const cfg::RuleDef& rule) { return cfg::rule_inputs(rule); },
        [](const cfg::RuleDef& rule, const std::map<std::string, Value>& in,
           const OperatorContext&) {
          std::map<std::string, double> bindings;
          for (const auto& [k, v] : in) bindings[k] = v.as_scalar();
          return Value::scalar(eval_arithmetic(rule.args.at("equation"), bindings));
        }};
    r["slice"] = {
        "slice",
        [](const cfg::RuleDef& rule) { return cfg::rule_inputs(rule); },
        [](const cfg::RuleDef& rule, const std::map<std::string, Value>& in,
           const OperatorContext& ctx) {
          const std::string& fname = rule.args.at("field");
          const cfg::FieldSpec* spec =
              ctx.config ? ctx.config->find_field(ctx.config->resolve_field(fname)) : nullptr;
          if (!spec || spec->dims.empty())
            throw PipelineError("slice: no declared dimensions for " + fname);
          return exec_slice(in.at(fname), spec->dims, rule.args.at("dimension"),
                            std::stol(rule.args.at("index")));
        }};
    r["coarsen"] = {
        "coarsen",
        [](const cfg::RuleDef& rule) { return cfg::rule_inputs(rule); },
        [](const cfg::RuleDef& rule, const std::map<std::string, Value>& in,
           const OperatorContext&) {
          return exec_coarsen(in.at(rule.args.at("field")), std::stol(rule.args.at("stride")));
        }};
    return r;
  }();
  return registry;
}

std::vector<int> ready_rules(const cfg::RuleGraph& graph, const std::set<std::string>& bound,
                             const std::set<std::string>& executed) {
  std::vector<int> out;
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const auto& node = graph.nodes[i];
    if (executed.count(node.rule.result)) continue;
    bool ok = true;
    for (const auto& in : node.rule.inputs)
      if (!bound.count(in)) {
        ok = false;
        break;
      }
    if (ok) out.push_back(int(i));
  }
  return out;
}

// ---- DiagnosticsFederator ----

DiagnosticsFederator::DiagnosticsFederator(int rank, int nservers, const cfg::Config& config,
                                           msg::ActiveMessaging& messaging, WriterSink sink,
                                           msg::ErrorFn on_error)
    : rank_(rank), nservers_(nservers), config_(config), messaging_(messaging),
      sink_(std::move(sink)), on_error_(std::move(on_error)) {
  if (!on_error_) on_error_ = [](const std::string&) {};
  for (const auto& diag : config_.diagnostics) {
    bool has_comm = false;
    for (const auto& rule : diag.rules) {
      if (rule.kind == cfg::RuleKind::Communication) has_comm = true;
      for (const auto& in : rule.inputs) {
        try {
          std::string q = config_.resolve_field(in);
          if (config_.definition_of_field(q)) raw_inputs_[diag.qualified()].insert(q);
        } catch (const cfg::ConfigError&) {
          // internal symbol; produced by another rule
        }
      }
    }
    if (!has_comm)
      throw PipelineError("diagnostic " + diag.qualified() +
                          " has no communication rule; purely local diagnostics are not "
                          "supported");
  }
  cfg::RuleGraph graph = cfg::build_rule_graph(config_);
  for (const auto& node : graph.nodes)
    if (node.per_source && node.rule.kind == cfg::RuleKind::Operator)
      per_source_results_[node.diagnostic].insert(node.rule.result);
}

void DiagnosticsFederator::register_local_source(const std::string& group, int source) {
  std::lock_guard lock(mu_);
  local_sources_[group].insert(source);
}

const cfg::DiagnosticDef& DiagnosticsFederator::diag_def(const std::string& qualified) const {
  const auto* d = config_.find_diagnostic(qualified);
  if (!d) throw PipelineError("unknown diagnostic " + qualified);
  return *d;
}

void DiagnosticsFederator::on_data_event(const DataEvent& event) {
  const cfg::DataDefinition* def = nullptr;
  for (const auto& d : config_.definitions)
    if (d.name == event.group) def = &d;
  if (!def) {
    on_error_("data event for unknown group " + event.group);
    return;
  }
  std::unique_lock lock(mu_);
  std::set<std::string> affected;
  for (const auto& [name, value] : event.fields) {
    const cfg::FieldSpec* spec = nullptr;
    for (const auto& f : def->fields)
      if (f.name == name) spec = &f;
    if (!spec) {
      on_error_("field " + name + " not in group " + event.group);
      return;
    }
    if (spec->kind == cfg::FieldKind::Scalar && value.element_count() != 1) {
      on_error_("scalar field " + name + " carried " +
                std::to_string(value.element_count()) + " elements");
      return;
    }
    std::string qualified = spec->qualified();
    for (const auto& [diag, inputs] : raw_inputs_) {
      if (!inputs.count(qualified)) continue;
      StateKey key{diag, event.timestep};
      DiagState& st = states_[key];
      st.timestep = event.timestep;
      st.model_time = event.model_time;
      st.per_source[event.source][name] = value;
      st.sources_seen.insert(event.source);
      affected.insert(diag);
    }
  }
  for (const auto& diag : affected) advance(diag, {diag, event.timestep}, lock);
}

void DiagnosticsFederator::advance(const std::string& diag_name, const StateKey& key,
                                   std::unique_lock<std::mutex>& lock) {
  (void)lock;
  auto sit = states_.find(key);
  if (sit == states_.end()) return;
  DiagState& st = sit->second;
  const cfg::DiagnosticDef& diag = diag_def(diag_name);
  OperatorContext ctx{&config_};

  // Per-source rules: everything upstream of the first communication runs
  // once per local producer, as contributions arrive.
  const std::set<std::string>& per_source_results = per_source_results_[diag_name];

  for (int src : st.sources_seen) {
    auto& bindings = st.per_source[src];
    bool progress = true;
    while (progress) {
      progress = false;
      for (const auto& rule : diag.rules) {
        if (rule.kind != cfg::RuleKind::Operator || !per_source_results.count(rule.result) ||
            bindings.count(rule.result))
          continue;
        bool have_all = true;
        for (const auto& in : rule.inputs)
          if (!bindings.count(in)) have_all = false;
        if (!have_all) continue;
        std::map<std::string, Value> inputs;
        for (const auto& in : rule.inputs) inputs[in] = bindings.at(in);
        try {
          bindings[rule.result] = operator_registry().at(rule.name).execute(rule, inputs, ctx);
        } catch (const std::exception& e) {
          on_error_(diag_name + "/" + rule.result + ": " + e.what());
          return;
        }
        progress = true;
      }
    }
  }

  if (!st.comm_issued) {
    // All local producers must have contributed every per-source result.
    std::set<int> expected;
    for (const auto& q : raw_inputs_[diag_name]) {
      const auto* def = config_.definition_of_field(q);
      if (!def) continue;
      auto lit = local_sources_.find(def->name);
      if (lit == local_sources_.end() || lit->second.empty()) return;  // not wired yet
      expected.insert(lit->second.begin(), lit->second.end());
    }
    if (st.sources_seen != expected) {
      run_global_rules(diag, key, st);
      return;
    }
    for (int src : expected)
      for (const auto& r : per_source_results)
        if (!st.per_source[src].count(r)) {
          run_global_rules(diag, key, st);
          return;
        }
    issue_communications(diag, key, st);
  }
  run_global_rules(diag, key, st);
  maybe_discard(key);
}

void DiagnosticsFederator::issue_communications(const cfg::DiagnosticDef& diag,
                                                const StateKey& key, DiagState& st) {
  st.comm_issued = true;
  for (const auto& rule : diag.rules) {
    if (rule.kind != cfg::RuleKind::Communication) continue;
    std::string input = rule.args.at("field");
    std::string root_arg = rule.args.at("root");
    int root = root_arg == "auto" ? choose_root(diag.qualified(), nservers_)
                                  : int(std::stol(root_arg));
    std::string result = rule.result;
    std::string diag_name = key.first;
    long ts = key.second;
    auto cb = [this, diag_name, ts, result](const msg::ActiveResult& res) {
      std::unique_lock lock(mu_);
      StateKey k{diag_name, ts};
      auto it = states_.find(k);
      if (it == states_.end()) return;
      DiagState& s = it->second;
      Value v;
      v.type = DataType::Double;
      v.dbl = res.dbl;
      if (v.dbl.size() == 1) v.shape = {};
      else v.shape = {v.dbl.size()};
      s.global[result] = std::move(v);
      --s.callbacks_expected;
      run_global_rules(diag_def(diag_name), k, s);
      maybe_discard(k);
    };

    if (rule.name == "reduction") {
      std::string uid = input + "_reduced_" + std::to_string(ts);
      auto op = msg::reduce_op_from_name(rule.args.at("operator"));
      // Ascending source order keeps the local pre-combination reproducible.
      msg::ActiveResult data;
      data.dtype = DataType::Double;
      bool first = true;
      for (const auto& [src, bindings] : st.per_source) {
        auto bit = bindings.find(input);
        if (bit == bindings.end()) {
          on_error_(diag_name + ": reduction input " + input + " missing for source " +
                    std::to_string(src));
          return;
        }
        if (first) {
          data.dbl = bit->second.dbl;
          first = false;
        } else {
          combine_into(data.dbl, bit->second.dbl, op);
        }
      }
      if (rank_ == root) ++st.callbacks_expected;
      messaging_.active_reduce(uid, data, op, root, rank_ == root ? cb : msg::ActiveCallback{});
    } else if (rule.name == "broadcast") {
      if (rank_ == root) {
        st.unsent_broadcasts.push_back(rule);  // sent once the input binds
      } else {
        std::string uid = input + "_broadcast_" + std::to_string(ts);
        ++st.callbacks_expected;
        messaging_.active_broadcast(uid, nullptr, root, cb);
      }
    }
  }
}

void DiagnosticsFederator::run_global_rules(const cfg::DiagnosticDef& diag, const StateKey& key,
                                            DiagState& st) {
  OperatorContext ctx{&config_};
  bool progress = true;
  while (progress) {
    progress = false;
    for (const auto& rule : diag.rules) {
      if (rule.kind != cfg::RuleKind::Operator || st.executed.count(rule.result)) continue;
      bool have_all = true;
      for (const auto& in : rule.inputs)
        if (!st.global.count(in)) have_all = false;
      if (!have_all) continue;
      std::map<std::string, Value> inputs;
      for (const auto& in : rule.inputs) inputs[in] = st.global.at(in);
      try {
        st.global[rule.result] = operator_registry().at(rule.name).execute(rule, inputs, ctx);
      } catch (const std::exception& e) {
        on_error_(key.first + "/" + rule.result + ": " + e.what());
        return;
      }
      st.executed.insert(rule.result);
      progress = true;
    }
    // Root-side broadcasts whose input just became available.
    for (auto it = st.unsent_broadcasts.begin(); it != st.unsent_broadcasts.end();) {
      const cfg::RuleDef& rule = *it;
      std::string input = rule.args.at("field");
      auto bit = st.global.find(input);
      if (bit == st.global.end()) {
        ++it;
        continue;
      }
      std::string uid = input + "_broadcast_" + std::to_string(key.second);
      int root = rank_;
      std::string result = rule.result;
      std::string diag_name = key.first;
      long ts = key.second;
      auto cb = [this, diag_name, ts, result](const msg::ActiveResult& res) {
        std::unique_lock lock(mu_);
        StateKey k{diag_name, ts};
        auto sit = states_.find(k);
        if (sit == states_.end()) return;
        Value v;
        v.type = DataType::Double;
        v.dbl = res.dbl;
        if (v.dbl.size() != 1) v.shape = {v.dbl.size()};
        sit->second.global[result] = std::move(v);
        --sit->second.callbacks_expected;
        run_global_rules(diag_def(diag_name), k, sit->second);
        maybe_discard(k);
      };
      msg::ActiveResult data;
      data.dtype = DataType::Double;
      data.dbl = bit->second.dbl;
      ++st.callbacks_expected;
      messaging_.active_broadcast(uid, &data, root, cb);
      it = st.unsent_broadcasts.erase(it);
      progress = true;
    }
  }
  auto fit = st.global.find(diag.field);
  if (!st.done && fit != st.global.end()) {
    st.done = true;
    if (rank_ == choose_root(diag.qualified(), nservers_) && sink_)
      sink_(diag.qualified(), writer::TimedValue{st.timestep, st.model_time, fit->second});
  }
}

void DiagnosticsFederator::maybe_discard(const StateKey& key) {
  auto it = states_.find(key);
  if (it == states_.end()) return;
  DiagState& st = it->second;
  if (st.comm_issued && st.callbacks_expected == 0 && st.unsent_broadcasts.empty())
    states_.erase(it);
}

long DiagnosticsFederator::pending_count() const {
  std::lock_guard lock(mu_);
  return long(states_.size());
}

}  // namespace insitu::pipeline
