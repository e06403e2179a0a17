#include "insitu/insitu.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "config.hpp"
#include "harness.hpp"
#include "sdc.hpp"

namespace {

thread_local std::string g_last_error = "no error";

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

insitu_status fail(insitu_status code, const std::string& message) {
  g_last_error = message;
  return code;
}

std::map<std::string, std::string> option_map(const char* const* keys, const char* const* values,
                                              size_t count) {
  std::map<std::string, std::string> out;
  for (size_t i = 0; i < count; ++i) out[keys[i]] = values[i];
  return out;
}

}  // namespace

struct insitu_config {
  insitu::cfg::Config config;
};

extern "C" {

const char* insitu_last_error(void) { return g_last_error.c_str(); }

void insitu_string_free(char* s) { std::free(s); }

insitu_status insitu_config_parse(const char* xml_text, const char* const* option_keys,
                                  const char* const* option_values, size_t option_count,
                                  insitu_config** out) {
  if (!xml_text || !out || (option_count > 0 && (!option_keys || !option_values)))
    return fail(INSITU_ERR_ARGUMENT, "null argument to insitu_config_parse");
  try {
    auto cfg = insitu::cfg::parse_config(xml_text,
                                         option_map(option_keys, option_values, option_count));
    *out = new insitu_config{std::move(cfg)};
    return INSITU_OK;
  } catch (const std::exception& e) {
    return fail(INSITU_ERR_CONFIG, e.what());
  }
}

insitu_status insitu_config_parse_file(const char* path, const char* const* option_keys,
                                       const char* const* option_values, size_t option_count,
                                       insitu_config** out) {
  if (!path) return fail(INSITU_ERR_ARGUMENT, "null path");
  std::ifstream in(path);
  if (!in) return fail(INSITU_ERR_IO, std::string("cannot read ") + path);
  std::ostringstream text;
  text << in.rdbuf();
  return insitu_config_parse(text.str().c_str(), option_keys, option_values, option_count, out);
}

insitu_status insitu_config_canonical(const insitu_config* config, char** out_xml) {
  if (!config || !out_xml) return fail(INSITU_ERR_ARGUMENT, "null argument");
  try {
    *out_xml = dup_string(insitu::cfg::canonical_xml(config->config));
    return INSITU_OK;
  } catch (const std::exception& e) {
    return fail(INSITU_ERR_CONFIG, e.what());
  }
}

void insitu_config_free(insitu_config* config) { delete config; }

insitu_status insitu_run(const insitu_config* config, const insitu_run_params* params,
                         insitu_run_result* out) {
  if (!config || !params || !out) return fail(INSITU_ERR_ARGUMENT, "null argument to insitu_run");
  if (params->dim_count > 0 && (!params->dim_names || !params->dim_sizes))
    return fail(INSITU_ERR_ARGUMENT, "dim_count without dimension arrays");
  *out = insitu_run_result{};
  try {
    insitu::harness::SimParams sp;
    sp.nservers = params->nservers > 0 ? params->nservers : 1;
    sp.producers_per_server = params->producers_per_server > 0 ? params->producers_per_server : 1;
    if (params->pool_size > 0) sp.pool_size = params->pool_size;
    sp.sim_seed = params->sim_seed;
    sp.end_time = params->end_time;
    sp.checkpoint_at = params->checkpoint_at;
    for (size_t i = 0; i < params->dim_count; ++i)
      sp.dim_sizes[params->dim_names[i]] = params->dim_sizes[i];

    insitu::harness::TransportConfig tc;
    tc.seed = params->transport_seed;

    std::optional<insitu::sdc::FileImage> restore;
    if (params->restore_path) restore = insitu::sdc::FileImage::load(params->restore_path);

    insitu::harness::World world(config->config, sp, tc, restore ? &*restore : nullptr);
    auto res = world.run();

    if (params->out_dir) {
      std::filesystem::create_directories(params->out_dir);
      for (const auto& [name, img] : res.files)
        img.save((std::filesystem::path(params->out_dir) / name).string());
      if (res.checkpoint)
        res.checkpoint->save(
            (std::filesystem::path(params->out_dir) / "checkpoint.sdc").string());
    }

    std::ostringstream rep;
    rep << "terminated: " << (res.terminated ? "yes" : "no") << "\n";
    rep << "files: " << res.files.size() << "\n";
    for (const auto& [name, img] : res.files)
      rep << "  " << name << " (" << img.serialize().size() << " bytes)\n";
    if (res.checkpoint) rep << "checkpoint: checkpoint.sdc\n";
    rep << "overhead records: " << res.overheads.size() << " mean=" << res.mean_overhead
        << " max=" << res.max_overhead << "\n";
    for (const auto& r : res.overheads)
      rep << "  server " << r.server << " file " << r.target << " boundary " << r.boundary
          << " trigger " << r.trigger_time << " completion " << r.completion_time << " overhead "
          << r.overhead << "\n";
    for (const auto& s : res.stuck) rep << "stuck: " << s << "\n";
    for (const auto& e : res.errors) rep << "error: " << e << "\n";

    out->terminated = res.terminated ? 1 : 0;
    out->files_written = res.files.size();
    out->mean_overhead = res.mean_overhead;
    out->max_overhead = res.max_overhead;
    out->report = dup_string(rep.str());

    if (!res.errors.empty())
      return fail(INSITU_ERR_RUNTIME, res.errors.front());
    if (!res.terminated)
      return fail(INSITU_ERR_RUNTIME,
                  res.stuck.empty() ? std::string("run did not terminate")
                                    : "unmatched collective: " + res.stuck.front());
    return INSITU_OK;
  } catch (const std::exception& e) {
    return fail(INSITU_ERR_RUNTIME, e.what());
  }
}

insitu_status insitu_sdc_dump(const char* path, char** out_text) {
  if (!path || !out_text) return fail(INSITU_ERR_ARGUMENT, "null argument");
  try {
    auto img = insitu::sdc::FileImage::load(path);
    std::ostringstream t;
    t << "file: " << path << "\n";
    if (!img.attrs().empty()) {
      t << "attributes:\n";
      for (auto it = img.attrs().begin(); it != img.attrs().end(); ++it)
        t << "  " << it.key() << " = " << it.value().dump() << "\n";
    }
    t << "variables:\n";
    for (const auto& name : img.var_names()) {
      const auto& v = img.var(name);
      t << "  " << name << " : " << insitu::data_type_name(v.type) << " [";
      for (size_t i = 0; i < v.dims.size(); ++i) {
        if (i) t << ", ";
        t << v.dims[i] << "=" << img.dim_size(v.dims[i]);
      }
      t << "] " << v.length << " bytes";
      if (!v.attrs.empty()) t << " attrs " << v.attrs.dump();
      if (v.type == insitu::DataType::Double) {
        auto d = img.doubles(name);
        t << " values";
        for (size_t i = 0; i < d.size() && i < 8; ++i) t << " " << d[i];
        if (d.size() > 8) t << " ...";
      }
      t << "\n";
    }
    *out_text = dup_string(t.str());
    return INSITU_OK;
  } catch (const std::exception& e) {
    return fail(INSITU_ERR_IO, e.what());
  }
}

}  // extern "C"
