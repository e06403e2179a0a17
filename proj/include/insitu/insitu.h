#ifndef INSITU_INSITU_H
#define INSITU_INSITU_H

/* C interface to the in-situ analytics framework: configuration parsing,
 * simulated runs, and output-container inspection. All functions return a
 * status code; on failure insitu_last_error() describes the problem for
 * the calling thread. Strings returned through out-parameters are owned
 * by the caller and released with insitu_string_free(). */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum {
  INSITU_OK = 0,
  INSITU_ERR_ARGUMENT = 1, /* null or malformed argument */
  INSITU_ERR_CONFIG = 2,   /* configuration rejected */
  INSITU_ERR_IO = 3,       /* file could not be read or written */
  INSITU_ERR_RUNTIME = 4,  /* simulation failed or did not terminate */
} insitu_status;

/* Message describing the most recent failure on this thread; valid until
 * the next failing call. Never NULL. */
const char* insitu_last_error(void);

void insitu_string_free(char* s);

/* Opaque parsed configuration. */
typedef struct insitu_config insitu_config;

/* Parses configuration XML. option_keys/option_values supply model
 * options substituted for {name} placeholders; both arrays have
 * option_count entries (0 with NULL arrays is valid). */
insitu_status insitu_config_parse(const char* xml_text, const char* const* option_keys,
                                  const char* const* option_values, size_t option_count,
                                  insitu_config** out);

insitu_status insitu_config_parse_file(const char* path, const char* const* option_keys,
                                       const char* const* option_values, size_t option_count,
                                       insitu_config** out);

/* Canonical XML form; parse(canonical(c)) is a fixpoint. */
insitu_status insitu_config_canonical(const insitu_config* config, char** out_xml);

void insitu_config_free(insitu_config* config);

typedef struct {
  int nservers;              /* >= 1 */
  int producers_per_server;  /* >= 1 */
  int pool_size;             /* worker threads per server; 0 -> default */
  uint64_t sim_seed;         /* drives the dynamic-timestep trace */
  uint64_t transport_seed;   /* drives message delays and ordering */
  double end_time;           /* model seconds to simulate */
  long checkpoint_at;        /* stop and checkpoint after this timestep; -1 runs to the end */
  const char* restore_path;  /* checkpoint file to resume from, or NULL */
  const char* out_dir;       /* directory for output files, or NULL to keep in memory */
  const char* const* dim_names; /* sizes for symbolic dimension names */
  const long* dim_sizes;
  size_t dim_count;
} insitu_run_params;

typedef struct {
  int terminated;       /* 1 if the run drained cleanly */
  size_t files_written; /* completed output files */
  double mean_overhead; /* write-overhead metric, model seconds */
  double max_overhead;
  char* report; /* human-readable metrics report; insitu_string_free() */
} insitu_run_result;

/* Runs the simulated world to completion (or to the checkpoint). Returns
 * INSITU_ERR_RUNTIME if the run reports errors or fails to terminate;
 * the report still describes what happened. */
insitu_status insitu_run(const insitu_config* config, const insitu_run_params* params,
                         insitu_run_result* out);

/* Textual description of an output container: dimensions, variables,
 * attributes and data summaries. */
insitu_status insitu_sdc_dump(const char* path, char** out_text);

#ifdef __cplusplus
}
#endif

#endif
