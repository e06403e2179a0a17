#ifndef INSITU_CONFIG_HPP
#define INSITU_CONFIG_HPP

#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "value.hpp"

namespace insitu::cfg {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class FieldKind { Scalar, Array };
enum class RuleKind { Operator, Communication };
enum class TimeManipulation { Averaged, Instantaneous, None };

const char* time_manipulation_name(TimeManipulation m);
TimeManipulation time_manipulation_from_name(const std::string& s);

struct FieldSpec {
  std::string name;
  FieldKind kind = FieldKind::Array;
  DataType data_type = DataType::Double;
  std::vector<std::string> dims;  // empty => size inferred at runtime
  bool collective = false;
  bool optional = false;
  std::string ns = "global";

  std::string qualified() const { return ns + "::" + name; }
  bool operator==(const FieldSpec&) const = default;
};

struct DataDefinition {
  std::string name;
  std::string ns = "global";
  long frequency = 1;  // timesteps between sends
  std::vector<FieldSpec> fields;

  bool operator==(const DataDefinition&) const = default;
};

struct RuleDef {
  RuleKind kind = RuleKind::Operator;
  std::string name;                         // localreduce, arithmetic, reduction, ...
  std::map<std::string, std::string> args;  // opaque here, decoded by the activity
  std::string result;
  std::vector<std::string> inputs;  // derived from args at load time

  bool operator==(const RuleDef&) const = default;
};

struct DiagnosticDef {
  std::string field;
  std::string ns = "global";
  FieldKind kind = FieldKind::Scalar;
  DataType data_type = DataType::Double;
  std::string units;
  std::map<std::string, std::string> extra_attrs;  // unrecognized decorators, kept as metadata
  std::vector<RuleDef> rules;

  std::string qualified() const { return ns + "::" + field; }
  bool operator==(const DiagnosticDef&) const = default;
};

struct FileInclude {
  std::string target;  // field or group name, possibly ns-qualified
  bool is_group = false;
  TimeManipulation manipulation = TimeManipulation::None;
  double output_frequency = 0.0;  // model seconds; 0 for manipulation none

  bool operator==(const FileInclude&) const = default;
};

struct FileDef {
  std::string name;  // filename template
  double write_time_frequency = 0.0;
  std::string title;
  std::vector<FileInclude> includes;

  bool operator==(const FileDef&) const = default;
};

struct GroupDef {
  std::string name;
  std::string ns = "global";
  std::vector<std::string> members;

  bool operator==(const GroupDef&) const = default;
};

struct Config {
  std::vector<DataDefinition> definitions;
  std::vector<DiagnosticDef> diagnostics;
  std::vector<GroupDef> groups;
  std::vector<FileDef> files;

  bool operator==(const Config&) const = default;

  // Resolves a possibly unqualified field/diagnostic name to its qualified
  // form. Unqualified names must be unambiguous across namespaces.
  std::string resolve_field(const std::string& name) const;

  const FieldSpec* find_field(const std::string& qualified) const;
  const DiagnosticDef* find_diagnostic(const std::string& qualified) const;
  const GroupDef* find_group(const std::string& name) const;
  const DataDefinition* definition_of_field(const std::string& qualified) const;

  // Fields a file include expands to (groups flattened), qualified.
  std::vector<std::string> expand_include(const FileInclude& inc) const;
};

using IncludeLoader = std::function<std::string(const std::string& path)>;

// Replaces each {key} with its model-option value, verbatim.
std::string substitute_placeholders(const std::string& text,
                                    const std::map<std::string, std::string>& model_options);

Config parse_config(const std::string& xml_text,
                    const std::map<std::string, std::string>& model_options,
                    const IncludeLoader& loader = {});

// Canonical text form: attributes quoted, namespaces explicit, entries
// sorted alphabetically within each section. parse(canonical_xml(c)) is a
// fixpoint.
std::string canonical_xml(const Config& c);

// The sorted form canonical_xml() emits.
Config normalized(const Config& c);

// ---- rule graph ----

struct RuleNode {
  std::string diagnostic;  // qualified owner
  RuleDef rule;
  std::vector<int> deps;   // indices into RuleGraph::nodes
  int layer = 0;           // topological layer within the diagnostic
  bool per_source = true;  // upstream of the first communication rule

  bool operator==(const RuleNode&) const = default;
};

struct RuleGraph {
  std::vector<RuleNode> nodes;

  // Node indices in dependency-respecting order.
  std::vector<int> topo_order() const;
  // Nodes with no path between them may run concurrently.
  bool independent(int a, int b) const;
};

RuleGraph build_rule_graph(const Config& config);

// Rule names the loader accepts, and how their inputs are derived.
bool is_known_rule(RuleKind kind, const std::string& name);
std::vector<std::string> rule_inputs(const RuleDef& rule);

}  // namespace insitu::cfg

#endif
