#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "insitu/insitu.h"

namespace {

struct Options {
  std::string config_path;
  std::vector<std::string> model_options;  // key=value
  std::vector<std::string> dims;           // name=size
  int servers = 1;
  int producers = 1;
  int pool_size = 0;
  std::uint64_t seed = 1;
  std::uint64_t transport_seed = 0;  // 0: same as seed
  double end_time = 10.0;
  long checkpoint_at = -1;
  std::string restore_from;
  std::string out_dir = ".";
  std::string metrics_out;
};

std::pair<std::vector<std::string>, std::vector<std::string>> split_pairs(
    const std::vector<std::string>& kvs, const char* what) {
  std::vector<std::string> keys, values;
  for (const auto& kv : kvs) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw CLI::ValidationError(std::string(what) + " must be name=value: " + kv);
    keys.push_back(kv.substr(0, eq));
    values.push_back(kv.substr(eq + 1));
  }
  return {keys, values};
}

insitu_config* load_config(const Options& o) {
  auto [keys, values] = split_pairs(o.model_options, "--option");
  std::vector<const char*> k, v;
  for (const auto& s : keys) k.push_back(s.c_str());
  for (const auto& s : values) v.push_back(s.c_str());
  insitu_config* cfg = nullptr;
  if (insitu_config_parse_file(o.config_path.c_str(), k.data(), v.data(), k.size(), &cfg) !=
      INSITU_OK) {
    std::cerr << "config error: " << insitu_last_error() << "\n";
    return nullptr;
  }
  return cfg;
}

int cmd_validate(const Options& o) {
  insitu_config* cfg = load_config(o);
  if (!cfg) return 1;
  char* canonical = nullptr;
  if (insitu_config_canonical(cfg, &canonical) != INSITU_OK) {
    std::cerr << "error: " << insitu_last_error() << "\n";
    insitu_config_free(cfg);
    return 1;
  }
  std::cout << canonical;
  insitu_string_free(canonical);
  insitu_config_free(cfg);
  return 0;
}

int cmd_run(const Options& o) {
  insitu_config* cfg = load_config(o);
  if (!cfg) return 1;

  auto [dim_keys, dim_values] = split_pairs(o.dims, "--dim");
  std::vector<const char*> names;
  std::vector<long> sizes;
  for (size_t i = 0; i < dim_keys.size(); ++i) {
    names.push_back(dim_keys[i].c_str());
    sizes.push_back(std::stol(dim_values[i]));
  }

  insitu_run_params p{};
  p.nservers = o.servers;
  p.producers_per_server = o.producers;
  p.pool_size = o.pool_size;
  p.sim_seed = o.seed;
  p.transport_seed = o.transport_seed ? o.transport_seed : o.seed;
  p.end_time = o.end_time;
  p.checkpoint_at = o.checkpoint_at;
  p.restore_path = o.restore_from.empty() ? nullptr : o.restore_from.c_str();
  p.out_dir = o.out_dir.c_str();
  p.dim_names = names.data();
  p.dim_sizes = sizes.data();
  p.dim_count = names.size();

  insitu_run_result r{};
  insitu_status st = insitu_run(cfg, &p, &r);
  if (r.report) {
    std::cout << r.report;
    if (!o.metrics_out.empty()) {
      std::ofstream out(o.metrics_out);
      out << r.report;
    }
    insitu_string_free(r.report);
  }
  if (st != INSITU_OK) std::cerr << "run failed: " << insitu_last_error() << "\n";
  insitu_config_free(cfg);
  return st == INSITU_OK ? 0 : 1;
}

int cmd_dump(const std::string& path) {
  char* text = nullptr;
  if (insitu_sdc_dump(path.c_str(), &text) != INSITU_OK) {
    std::cerr << "error: " << insitu_last_error() << "\n";
    return 1;
  }
  std::cout << text;
  insitu_string_free(text);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-situ data-analytics IO server simulator"};
  app.require_subcommand(1);
  Options o;

  auto add_config_opts = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config_path, "configuration XML")->required();
    cmd->add_option("--option", o.model_options, "model option name=value for {placeholders}");
  };

  CLI::App* run = app.add_subcommand("run", "run the simulated world");
  add_config_opts(run);
  run->add_option("--servers", o.servers, "IO server count");
  run->add_option("--producers-per-server", o.producers, "producers per server");
  run->add_option("--pool-size", o.pool_size, "worker threads per server");
  run->add_option("--seed", o.seed, "simulation seed (timestep trace)");
  run->add_option("--transport-seed", o.transport_seed, "message delay seed (default: --seed)");
  run->add_option("--end-time", o.end_time, "model seconds to simulate");
  run->add_option("--checkpoint-at", o.checkpoint_at, "checkpoint after this timestep and stop");
  run->add_option("--restore-from", o.restore_from, "resume from a checkpoint file");
  run->add_option("--out-dir", o.out_dir, "directory for output files");
  run->add_option("--metrics-out", o.metrics_out, "write the metrics report to this file");
  run->add_option("--dim", o.dims, "dimension size name=value, repeatable");

  CLI::App* validate = app.add_subcommand("validate", "parse a config and print canonical form");
  add_config_opts(validate);

  std::string dump_path;
  CLI::App* dump = app.add_subcommand("dump", "describe an output container");
  dump->add_option("file", dump_path, "container file")->required();

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) return cmd_run(o);
  if (validate->parsed()) return cmd_validate(o);
  return cmd_dump(dump_path);
}
