#include <atomic>
#include <map>
#include <memory>
#include <random>

#include "doctest.h"
#include "pipeline.hpp"

using namespace insitu;
using namespace insitu::pipeline;

namespace {

// Same pairwise-FIFO seeded delivery harness as the messaging tests.
struct Net {
  int n;
  ThreadPool pool{2};
  std::vector<std::unique_ptr<msg::ActiveMessaging>> node;
  std::mutex mu;
  std::map<std::pair<int, int>, std::deque<msg::TransportMessage>> chans;
  std::vector<std::string> errors;

  explicit Net(int n_) : n(n_) {
    for (int r = 0; r < n; ++r)
      node.push_back(std::make_unique<msg::ActiveMessaging>(
          r, n, pool,
          [this](msg::TransportMessage m) {
            std::lock_guard l(mu);
            chans[{m.source, m.dest}].push_back(std::move(m));
          },
          [this](const std::string& e) {
            std::lock_guard l(mu);
            errors.push_back(e);
          }));
  }

  void pump(std::mt19937_64& rng) {
    for (;;) {
      pool.wait_idle();
      msg::TransportMessage m;
      {
        std::lock_guard l(mu);
        std::vector<std::pair<int, int>> keys;
        for (auto& [k, q] : chans)
          if (!q.empty()) keys.push_back(k);
        if (keys.empty()) return;
        auto k = keys[rng() % keys.size()];
        m = std::move(chans[k].front());
        chans[k].pop_front();
      }
      node[std::size_t(m.dest)]->deliver(m);
    }
  }
};

const char* kVwpXml = R"XML(
<io-configuration>
 <data-definition name="sim" frequency="2">
  <field name="vwp_local" type="array" data_type="double" size="z"/>
 </data-definition>
 <data-handling>
  <diagnostic field="VWP_mean" type="scalar" data_type="double" units="kg/m^2">
   <operator name="localreduce" field="vwp_local" operator="sum" result="VWP_mean_loc"/>
   <communication name="reduction" field="VWP_mean_loc" operator="sum" root="auto" result="VWP_mean_g"/>
   <operator name="arithmetic" equation="VWP_mean_g/({x_size}*{y_size})" result="VWP_mean"/>
  </diagnostic>
 </data-handling>
 <data-writing>
  <file name="profile.sdc" write_time_frequency="100.0">
   <include field="VWP_mean" time_manipulation="averaged" output_frequency="10.0"/>
  </file>
 </data-writing>
</io-configuration>
)XML";

cfg::Config vwp_config() {
  return cfg::parse_config(kVwpXml, {{"x_size", "4"}, {"y_size", "8"}});
}

DataEvent ev(int source, long ts, double t, std::vector<double> vwp) {
  DataEvent e;
  e.source = source;
  e.group = "sim";
  e.timestep = ts;
  e.model_time = t;
  e.fields["vwp_local"] = Value::array(std::move(vwp), {2});
  return e;
}

}  // namespace

TEST_CASE("localreduce combines in index order") {
  CHECK(exec_localreduce(Value::array({1, 2, 3}), msg::ReduceOp::Sum).as_scalar() == 6.0);
  CHECK(exec_localreduce(Value::array({5}), msg::ReduceOp::Min).as_scalar() == 5.0);
  CHECK(exec_localreduce(Value::array({4, -2, 9, 1}), msg::ReduceOp::Max).as_scalar() == 9.0);
  CHECK_THROWS_AS(exec_localreduce(Value::array({}), msg::ReduceOp::Sum), PipelineError);

  // Bitwise-identical to a strict left-to-right sequential sum.
  std::mt19937_64 rng(17);
  std::vector<double> data(1000);
  for (auto& d : data) d = std::uniform_real_distribution<>(-1e6, 1e6)(rng);
  double seq = data[0];
  for (std::size_t i = 1; i < data.size(); ++i) seq = seq + data[i];
  CHECK(exec_localreduce(Value::array(data), msg::ReduceOp::Sum).as_scalar() == seq);
}

TEST_CASE("arithmetic evaluation") {
  CHECK(eval_arithmetic("VWP_mean_g/(4*8)", {{"VWP_mean_g", 64.0}}) == 2.0);
  CHECK(eval_arithmetic("a", {{"a", 3.5}}) == 3.5);
  CHECK(eval_arithmetic("-(1+2)*3/2", {}) == -4.5);
  CHECK_THROWS_AS(eval_arithmetic("a/0", {{"a", 1.0}}), PipelineError);
  CHECK_THROWS_AS(eval_arithmetic("missing+1", {}), PipelineError);
}

TEST_CASE("auto root choice is deterministic and spreads evenly") {
  CHECK(choose_root("anything", 1) == 0);
  CHECK(choose_root("key_a", 8) == choose_root("key_a", 8));
  std::map<int, int> spread;
  for (int i = 0; i < 1000; ++i) spread[choose_root("diag_" + std::to_string(i), 8)] += 1;
  for (int r = 0; r < 8; ++r) {
    CHECK(spread[r] >= 95);
    CHECK(spread[r] <= 155);
  }
}

TEST_CASE("slice extracts a plane along a named dimension") {
  // 2x3 field laid out row-major (y,x).
  Value f = Value::array({1, 2, 3, 4, 5, 6}, {2, 3});
  Value row = exec_slice(f, {"y", "x"}, "y", 1);
  CHECK(row.dbl == std::vector<double>{4, 5, 6});
  CHECK(row.shape == std::vector<std::size_t>{3});
  Value col = exec_slice(f, {"y", "x"}, "x", 2);
  CHECK(col.dbl == std::vector<double>{3, 6});
  CHECK_THROWS_AS(exec_slice(f, {"y", "x"}, "z", 0), PipelineError);
  CHECK_THROWS_AS(exec_slice(f, {"y", "x"}, "x", 3), PipelineError);
}

TEST_CASE("coarsen subsamples with a stride in every dimension") {
  std::vector<double> data(16);
  for (int i = 0; i < 16; ++i) data[std::size_t(i)] = i;
  Value f = Value::array(data, {4, 4});
  Value c = exec_coarsen(f, 2);
  CHECK(c.shape == std::vector<std::size_t>{2, 2});
  CHECK(c.dbl == std::vector<double>{0, 2, 8, 10});
  CHECK(exec_coarsen(f, 1).dbl == data);
}

TEST_CASE("ready_rules returns exactly the runnable frontier") {
  const char* xml = R"XML(
<io-configuration>
 <data-definition name="sim" frequency="1">
  <field name="w" type="array" data_type="double" size="z"/>
 </data-definition>
 <data-handling>
  <diagnostic field="d" type="scalar" data_type="double">
   <operator name="localreduce" field="w" operator="sum" result="r"/>
   <operator name="arithmetic" equation="r*2" result="m1"/>
   <operator name="arithmetic" equation="r+1" result="m2"/>
   <operator name="arithmetic" equation="m1+m2" result="dsum"/>
   <communication name="reduction" field="dsum" operator="sum" root="auto" result="d"/>
  </diagnostic>
 </data-handling>
 <data-writing>
  <file name="f.sdc" write_time_frequency="10.0">
   <include field="d"/>
  </file>
 </data-writing>
</io-configuration>
)XML";
  auto graph = cfg::build_rule_graph(cfg::parse_config(xml, {}));
  auto result_of = [&](int i) { return graph.nodes[std::size_t(i)].rule.result; };

  // Fresh state: only the localreduce can run.
  auto fresh = ready_rules(graph, {"w"}, {});
  REQUIRE(fresh.size() == 1);
  CHECK(result_of(fresh[0]) == "r");

  // Diamond middle: with r bound, both mid rules are runnable concurrently.
  auto mids = ready_rules(graph, {"w", "r"}, {"r"});
  REQUIRE(mids.size() == 2);
  std::set<std::string> names = {result_of(mids[0]), result_of(mids[1])};
  CHECK(names == std::set<std::string>{"m1", "m2"});
  CHECK(graph.independent(mids[0], mids[1]));

  // Everything executed: empty frontier.
  CHECK(ready_rules(graph, {"w", "r", "m1", "m2", "dsum", "d"},
                    {"r", "m1", "m2", "dsum", "d"})
            .empty());
}

TEST_CASE("two-server reduction pipeline computes the configured diagnostic") {
  auto config = vwp_config();
  Net net(2);
  std::mutex smu;
  std::vector<std::pair<std::string, writer::TimedValue>> sunk;
  auto sink = [&](const std::string& d, writer::TimedValue v) {
    std::lock_guard l(smu);
    sunk.emplace_back(d, std::move(v));
  };
  DiagnosticsFederator f0(0, 2, config, *net.node[0], sink);
  DiagnosticsFederator f1(1, 2, config, *net.node[1], sink);
  f0.register_local_source("sim", 0);
  f0.register_local_source("sim", 1);
  f1.register_local_source("sim", 2);
  f1.register_local_source("sim", 3);

  // vwp_local per source: {src+1, src+2}; local sums 8 and 16; global 24;
  // divided by x_size*y_size=32 gives 0.75.
  for (int src = 0; src < 4; ++src) {
    DataEvent e = ev(src, 2, 1.0, {double(src + 1), double(src + 2)});
    (src < 2 ? f0 : f1).on_data_event(e);
  }
  std::mt19937_64 rng(3);
  net.pump(rng);
  REQUIRE(net.errors.empty());
  REQUIRE(sunk.size() == 1);  // exactly once, on the owner only
  CHECK(sunk[0].first == "global::VWP_mean");
  CHECK(sunk[0].second.timestep == 2);
  CHECK(sunk[0].second.value.as_scalar() == 0.75);
  CHECK(f0.pending_count() == 0);
  CHECK(f1.pending_count() == 0);
  int owner = f0.owner_of("global::VWP_mean");
  CHECK(owner == f1.owner_of("global::VWP_mean"));
}

TEST_CASE("timesteps arriving reversed both complete") {
  auto config = vwp_config();
  Net net(2);
  std::mutex smu;
  std::map<long, double> results;
  auto sink = [&](const std::string&, writer::TimedValue v) {
    std::lock_guard l(smu);
    results[v.timestep] = v.value.as_scalar();
  };
  DiagnosticsFederator f0(0, 2, config, *net.node[0], sink);
  DiagnosticsFederator f1(1, 2, config, *net.node[1], sink);
  for (int s : {0, 1}) f0.register_local_source("sim", s);
  for (int s : {2, 3}) f1.register_local_source("sim", s);

  std::mt19937_64 rng(5);
  for (long ts : {4L, 2L}) {
    double scale = double(ts);
    for (int src = 0; src < 4; ++src) {
      DataEvent e = ev(src, ts, double(ts) / 2, {scale * (src + 1), scale * (src + 2)});
      (src < 2 ? f0 : f1).on_data_event(e);
    }
    net.pump(rng);
  }
  REQUIRE(net.errors.empty());
  REQUIRE(results.size() == 2);
  CHECK(results[2] == 2 * 24.0 / 32);
  CHECK(results[4] == 4 * 24.0 / 32);
}

TEST_CASE("event with unreferenced fields dispatches nothing") {
  const char* xml = R"XML(
<io-configuration>
 <data-definition name="sim" frequency="1">
  <field name="w" type="array" data_type="double" size="z"/>
  <field name="unused" type="array" data_type="double" optional="true" size="z"/>
 </data-definition>
 <data-handling>
  <diagnostic field="d" type="scalar" data_type="double">
   <operator name="localreduce" field="w" operator="sum" result="r"/>
   <communication name="reduction" field="r" operator="sum" root="auto" result="d"/>
  </diagnostic>
 </data-handling>
 <data-writing>
  <file name="f.sdc" write_time_frequency="10.0">
   <include field="d"/>
  </file>
 </data-writing>
</io-configuration>
)XML";
  auto config = cfg::parse_config(xml, {});
  Net net(1);
  int fired = 0;
  DiagnosticsFederator fed(0, 1, config, *net.node[0],
                           [&](const std::string&, writer::TimedValue) { ++fired; });
  fed.register_local_source("sim", 0);
  DataEvent e;
  e.source = 0;
  e.group = "sim";
  e.timestep = 1;
  e.model_time = 0.5;
  e.fields["unused"] = Value::array({1, 2}, {2});
  fed.on_data_event(e);
  std::mt19937_64 rng(1);
  net.pump(rng);
  CHECK(fired == 0);
  CHECK(fed.pending_count() == 0);
  CHECK(net.errors.empty());
}

TEST_CASE("any delivery schedule yields the same diagnostic bitwise") {
  auto config = vwp_config();
  std::vector<double> reference;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Net net(2);
    std::mutex smu;
    std::map<long, double> results;
    auto sink = [&](const std::string&, writer::TimedValue v) {
      std::lock_guard l(smu);
      results[v.timestep] = v.value.as_scalar();
    };
    DiagnosticsFederator f0(0, 2, config, *net.node[0], sink);
    DiagnosticsFederator f1(1, 2, config, *net.node[1], sink);
    for (int s : {0, 1}) f0.register_local_source("sim", s);
    for (int s : {2, 3}) f1.register_local_source("sim", s);

    std::mt19937_64 rng(seed);
    // Random interleaving of (source, timestep) event injections.
    std::vector<std::pair<int, long>> plan;
    for (long ts = 2; ts <= 8; ts += 2)
      for (int src = 0; src < 4; ++src) plan.emplace_back(src, ts);
    std::shuffle(plan.begin(), plan.end(), rng);
    for (auto [src, ts] : plan) {
      DataEvent e = ev(src, ts, double(ts) / 2,
                       {0.125 * double(ts) * (src + 1), 0.0625 * double(ts) * (src + 2)});
      (src < 2 ? f0 : f1).on_data_event(e);
      if (rng() % 2 == 0) net.pump(rng);
    }
    net.pump(rng);
    REQUIRE(net.errors.empty());
    REQUIRE(results.size() == 4);
    std::vector<double> run;
    for (auto& [ts, v] : results) run.push_back(v);
    if (seed == 0)
      reference = run;
    else
      REQUIRE(run == reference);
  }
}
