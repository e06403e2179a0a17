#include "config.hpp"

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include <algorithm>
#include <cstdio>
#include <deque>
#include <set>
#include <sstream>

#include "expr.hpp"

namespace insitu::cfg {

namespace pt = boost::property_tree;

const char* time_manipulation_name(TimeManipulation m) {
  switch (m) {
    case TimeManipulation::Averaged: return "averaged";
    case TimeManipulation::Instantaneous: return "instantaneous";
    case TimeManipulation::None: return "none";
  }
  return "unknown";
}

TimeManipulation time_manipulation_from_name(const std::string& s) {
  if (s == "averaged") return TimeManipulation::Averaged;
  if (s == "instantaneous") return TimeManipulation::Instantaneous;
  if (s == "none") return TimeManipulation::None;
  throw ConfigError("unknown time_manipulation: " + s);
}

std::string substitute_placeholders(const std::string& text,
                                    const std::map<std::string, std::string>& model_options) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '{') {
      std::size_t close = text.find('}', i + 1);
      if (close == std::string::npos)
        throw ConfigError("unterminated placeholder in \"" + text + "\"");
      std::string key = text.substr(i + 1, close - i - 1);
      auto it = model_options.find(key);
      if (it == model_options.end())
        throw ConfigError("no model option for placeholder {" + key + "}");
      out += it->second;
      i = close + 1;
    } else {
      out += text[i++];
    }
  }
  return out;
}

namespace {

using AttrMap = std::map<std::string, std::string>;

AttrMap attributes(const pt::ptree& node, const std::map<std::string, std::string>& options) {
  AttrMap out;
  auto attrs = node.get_child_optional("<xmlattr>");
  if (!attrs) return out;
  for (const auto& [key, sub] : *attrs)
    out[key] = substitute_placeholders(sub.get_value<std::string>(), options);
  return out;
}

std::string take_attr(AttrMap& attrs, const std::string& key, const std::string& context) {
  auto it = attrs.find(key);
  if (it == attrs.end()) throw ConfigError(context + ": missing attribute \"" + key + "\"");
  std::string v = it->second;
  attrs.erase(it);
  return v;
}

std::string take_attr_or(AttrMap& attrs, const std::string& key, const std::string& fallback) {
  auto it = attrs.find(key);
  if (it == attrs.end()) return fallback;
  std::string v = it->second;
  attrs.erase(it);
  return v;
}

void reject_extra_attrs(const AttrMap& attrs, const std::string& context) {
  if (!attrs.empty())
    throw ConfigError(context + ": unknown attribute \"" + attrs.begin()->first + "\"");
}

bool parse_bool(const std::string& v, const std::string& context) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(context + ": expected true/false, got \"" + v + "\"");
}

long parse_long(const std::string& v, const std::string& context) {
  try {
    std::size_t used = 0;
    long out = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(context + ": expected integer, got \"" + v + "\"");
  }
}

double parse_real(const std::string& v, const std::string& context) {
  try {
    std::size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(context + ": expected number, got \"" + v + "\"");
  }
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    while (!item.empty() && item.front() == ' ') item.erase(item.begin());
    while (!item.empty() && item.back() == ' ') item.pop_back();
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct RuleSpec {
  RuleKind kind;
  std::vector<std::string> required_args;
};

const std::map<std::string, RuleSpec>& rule_catalog() {
  static const std::map<std::string, RuleSpec> catalog = {
      {"localreduce", {RuleKind::Operator, {"field", "operator"}}},
      {"arithmetic", {RuleKind::Operator, {"equation"}}},
      {"slice", {RuleKind::Operator, {"field", "dimension", "index"}}},
      {"coarsen", {RuleKind::Operator, {"field", "stride"}}},
      {"reduction", {RuleKind::Communication, {"field", "operator", "root"}}},
      {"broadcast", {RuleKind::Communication, {"field", "root"}}},
  };
  return catalog;
}

class Builder {
 public:
  Builder(const std::map<std::string, std::string>& options, const IncludeLoader& loader)
      : options_(options), loader_(loader) {}

  Config build(const std::string& xml_text) {
    pt::ptree doc = parse_xml(xml_text, "<inline>");
    ingest_document(doc);
    validate();
    return std::move(config_);
  }

 private:
  pt::ptree parse_xml(const std::string& text, const std::string& origin) {
    std::stringstream ss(text);
    pt::ptree doc;
    try {
      pt::read_xml(ss, doc, pt::xml_parser::trim_whitespace | pt::xml_parser::no_comments);
    } catch (const pt::xml_parser_error& e) {
      throw ConfigError(origin + ": malformed XML: " + e.message());
    }
    if (doc.find("io-configuration") == doc.not_found())
      throw ConfigError(origin + ": expected <io-configuration> root element");
    return doc.get_child("io-configuration");
  }

  void ingest_document(const pt::ptree& root) {
    for (const auto& [name, node] : root) {
      if (name == "<xmlattr>" || name == "<xmlcomment>") continue;
      if (name == "include")
        ingest_include(node);
      else if (name == "data-definition")
        ingest_data_definition(node);
      else if (name == "data-handling")
        ingest_data_handling(node);
      else if (name == "group")
        ingest_group(node);
      else if (name == "data-writing")
        ingest_data_writing(node);
      else
        throw ConfigError("unknown element <" + name + ">");
    }
  }

  void ingest_include(const pt::ptree& node) {
    AttrMap attrs = attributes(node, options_);
    std::string file = take_attr(attrs, "file", "<include>");
    reject_extra_attrs(attrs, "<include>");
    if (!loader_) throw ConfigError("include of \"" + file + "\" but no include loader supplied");
    if (std::find(include_stack_.begin(), include_stack_.end(), file) != include_stack_.end())
      throw ConfigError("cyclic include of \"" + file + "\"");
    std::string text;
    try {
      text = loader_(file);
    } catch (const std::exception& e) {
      throw ConfigError("cannot load include \"" + file + "\": " + e.what());
    }
    include_stack_.push_back(file);
    pt::ptree doc = parse_xml(text, file);
    ingest_document(doc);
    include_stack_.pop_back();
  }

  void ingest_data_definition(const pt::ptree& node) {
    AttrMap attrs = attributes(node, options_);
    DataDefinition def;
    def.name = take_attr(attrs, "name", "<data-definition>");
    std::string ctx = "<data-definition name=\"" + def.name + "\">";
    def.ns = take_attr_or(attrs, "namespace", "global");
    def.frequency = parse_long(take_attr(attrs, "frequency", ctx), ctx);
    reject_extra_attrs(attrs, ctx);
    if (def.frequency < 1) throw ConfigError(ctx + ": frequency must be >= 1");

    for (const auto& [name, child] : node) {
      if (name == "<xmlattr>") continue;
      if (name != "field") throw ConfigError(ctx + ": unknown element <" + name + ">");
      AttrMap fa = attributes(child, options_);
      FieldSpec field;
      field.name = take_attr(fa, "name", ctx + "/<field>");
      std::string fctx = ctx + "/<field name=\"" + field.name + "\">";
      std::string kind = take_attr_or(fa, "type", "array");
      if (kind == "array")
        field.kind = FieldKind::Array;
      else if (kind == "scalar")
        field.kind = FieldKind::Scalar;
      else
        throw ConfigError(fctx + ": unknown type \"" + kind + "\"");
      field.data_type = data_type_from_name(take_attr_or(fa, "data_type", "double"));
      std::string size = take_attr_or(fa, "size", "");
      if (!size.empty()) {
        field.dims = split_csv(size);
        if (field.kind != FieldKind::Array)
          throw ConfigError(fctx + ": size given but type is not array");
      }
      field.collective = parse_bool(take_attr_or(fa, "collective", "false"), fctx);
      field.optional = parse_bool(take_attr_or(fa, "optional", "false"), fctx);
      field.ns = def.ns;
      reject_extra_attrs(fa, fctx);
      def.fields.push_back(std::move(field));
    }
    if (def.fields.empty()) throw ConfigError(ctx + ": at least one field required");
    config_.definitions.push_back(std::move(def));
  }

  void ingest_data_handling(const pt::ptree& node) {
    for (const auto& [name, child] : node) {
      if (name == "<xmlattr>") continue;
      if (name != "diagnostic")
        throw ConfigError("<data-handling>: unknown element <" + name + ">");
      ingest_diagnostic(child);
    }
  }

  void ingest_diagnostic(const pt::ptree& node) {
    AttrMap attrs = attributes(node, options_);
    DiagnosticDef diag;
    diag.field = take_attr(attrs, "field", "<diagnostic>");
    std::string ctx = "<diagnostic field=\"" + diag.field + "\">";
    diag.ns = take_attr_or(attrs, "namespace", "global");
    std::string kind = take_attr_or(attrs, "type", "scalar");
    if (kind == "scalar")
      diag.kind = FieldKind::Scalar;
    else if (kind == "array")
      diag.kind = FieldKind::Array;
    else
      throw ConfigError(ctx + ": unknown type \"" + kind + "\"");
    diag.data_type = data_type_from_name(take_attr_or(attrs, "data_type", "double"));
    diag.units = take_attr_or(attrs, "units", "");
    // Unrecognized decorators are carried through as file metadata.
    diag.extra_attrs = attrs;

    std::set<std::string> results;
    for (const auto& [name, child] : node) {
      if (name == "<xmlattr>") continue;
      RuleDef rule;
      if (name == "operator")
        rule.kind = RuleKind::Operator;
      else if (name == "communication")
        rule.kind = RuleKind::Communication;
      else
        throw ConfigError(ctx + ": unknown element <" + name + ">");
      AttrMap ra = attributes(child, options_);
      rule.name = take_attr(ra, "name", ctx);
      std::string rctx = ctx + "/<" + name + " name=\"" + rule.name + "\">";
      rule.result = take_attr(ra, "result", rctx);
      rule.args = ra;
      if (!is_known_rule(rule.kind, rule.name))
        throw ConfigError(rctx + ": unknown rule name");
      const RuleSpec& spec = rule_catalog().at(rule.name);
      for (const auto& req : spec.required_args)
        if (!rule.args.count(req))
          throw ConfigError(rctx + ": missing attribute \"" + req + "\"");
      if (!results.insert(rule.result).second)
        throw ConfigError(rctx + ": duplicate result \"" + rule.result + "\"");
      rule.inputs = rule_inputs(rule);
      diag.rules.push_back(std::move(rule));
    }
    int finals = 0;
    for (const auto& r : diag.rules)
      if (r.result == diag.field) ++finals;
    if (finals != 1)
      throw ConfigError(ctx + ": exactly one rule must produce \"" + diag.field + "\"");
    config_.diagnostics.push_back(std::move(diag));
  }

  void ingest_group(const pt::ptree& node) {
    AttrMap attrs = attributes(node, options_);
    GroupDef group;
    group.name = take_attr(attrs, "name", "<group>");
    std::string ctx = "<group name=\"" + group.name + "\">";
    group.ns = take_attr_or(attrs, "namespace", "global");
    reject_extra_attrs(attrs, ctx);
    for (const auto& [name, child] : node) {
      if (name == "<xmlattr>") continue;
      if (name != "member") throw ConfigError(ctx + ": unknown element <" + name + ">");
      AttrMap ma = attributes(child, options_);
      group.members.push_back(take_attr(ma, "name", ctx + "/<member>"));
      reject_extra_attrs(ma, ctx + "/<member>");
    }
    config_.groups.push_back(std::move(group));
  }

  void ingest_data_writing(const pt::ptree& node) {
    for (const auto& [name, child] : node) {
      if (name == "<xmlattr>") continue;
      if (name != "file") throw ConfigError("<data-writing>: unknown element <" + name + ">");
      AttrMap attrs = attributes(child, options_);
      FileDef file;
      file.name = take_attr(attrs, "name", "<file>");
      std::string ctx = "<file name=\"" + file.name + "\">";
      file.write_time_frequency = parse_real(take_attr(attrs, "write_time_frequency", ctx), ctx);
      file.title = take_attr_or(attrs, "title", "");
      reject_extra_attrs(attrs, ctx);
      if (file.write_time_frequency <= 0)
        throw ConfigError(ctx + ": write_time_frequency must be positive");
      for (const auto& [iname, inode] : child) {
        if (iname == "<xmlattr>") continue;
        if (iname != "include") throw ConfigError(ctx + ": unknown element <" + iname + ">");
        AttrMap ia = attributes(inode, options_);
        FileInclude inc;
        if (ia.count("field")) {
          inc.target = take_attr(ia, "field", ctx);
          inc.is_group = false;
        } else {
          inc.target = take_attr(ia, "group", ctx + "/<include>");
          inc.is_group = true;
        }
        std::string ictx = ctx + "/<include " + inc.target + ">";
        inc.manipulation =
            time_manipulation_from_name(take_attr_or(ia, "time_manipulation", "none"));
        if (inc.manipulation == TimeManipulation::None) {
          inc.output_frequency = parse_real(take_attr_or(ia, "output_frequency", "0"), ictx);
        } else {
          inc.output_frequency = parse_real(take_attr(ia, "output_frequency", ictx), ictx);
          if (inc.output_frequency <= 0)
            throw ConfigError(ictx + ": output_frequency must be positive");
          if (inc.output_frequency > file.write_time_frequency)
            throw ConfigError(ictx + ": output_frequency exceeds write_time_frequency");
        }
        reject_extra_attrs(ia, ictx);
        file.includes.push_back(std::move(inc));
      }
      config_.files.push_back(std::move(file));
    }
  }

  void validate() {
    std::set<std::string> qualified_names;
    for (const auto& def : config_.definitions) {
      for (const auto& f : def.fields)
        if (!qualified_names.insert(f.qualified()).second)
          throw ConfigError("field \"" + f.qualified() + "\" defined more than once");
    }
    std::set<std::string> def_names;
    for (const auto& def : config_.definitions)
      if (!def_names.insert(def.ns + "::" + def.name).second)
        throw ConfigError("data-definition \"" + def.name + "\" defined more than once");
    for (const auto& diag : config_.diagnostics)
      if (!qualified_names.insert(diag.qualified()).second)
        throw ConfigError("diagnostic \"" + diag.qualified() + "\" collides with another name");
    std::set<std::string> group_names;
    for (const auto& g : config_.groups) {
      if (!group_names.insert(g.ns + "::" + g.name).second)
        throw ConfigError("group \"" + g.name + "\" defined more than once");
      for (const auto& m : g.members) config_.resolve_field(m);
    }
    for (const auto& file : config_.files)
      for (const auto& inc : file.includes) config_.expand_include(inc);
    // Rule dependency validity (undefined symbols, cycles).
    build_rule_graph(config_);
  }

  const std::map<std::string, std::string>& options_;
  const IncludeLoader& loader_;
  std::vector<std::string> include_stack_;
  Config config_;
};

}  // namespace

bool is_known_rule(RuleKind kind, const std::string& name) {
  auto it = rule_catalog().find(name);
  return it != rule_catalog().end() && it->second.kind == kind;
}

std::vector<std::string> rule_inputs(const RuleDef& rule) {
  if (rule.name == "arithmetic") {
    try {
      return expr::extract_symbols(rule.args.at("equation"));
    } catch (const expr::ExprError& e) {
      throw ConfigError(std::string("arithmetic rule \"") + rule.result + "\": " + e.what());
    }
  }
  return {rule.args.at("field")};
}

std::string Config::resolve_field(const std::string& name) const {
  if (name.find("::") != std::string::npos) {
    if (find_field(name) || find_diagnostic(name)) return name;
    throw ConfigError("unknown field \"" + name + "\"");
  }
  std::set<std::string> hits;
  for (const auto& def : definitions)
    for (const auto& f : def.fields)
      if (f.name == name) hits.insert(f.qualified());
  for (const auto& d : diagnostics)
    if (d.field == name) hits.insert(d.qualified());
  if (hits.empty()) throw ConfigError("unknown field \"" + name + "\"");
  if (hits.size() > 1)
    throw ConfigError("field \"" + name +
                      "\" is defined in multiple namespaces; qualify it with ns::name");
  return *hits.begin();
}

const FieldSpec* Config::find_field(const std::string& qualified) const {
  for (const auto& def : definitions)
    for (const auto& f : def.fields)
      if (f.qualified() == qualified) return &f;
  return nullptr;
}

const DiagnosticDef* Config::find_diagnostic(const std::string& qualified) const {
  for (const auto& d : diagnostics)
    if (d.qualified() == qualified) return &d;
  return nullptr;
}

const GroupDef* Config::find_group(const std::string& name) const {
  std::string ns = "global", base = name;
  if (auto pos = name.find("::"); pos != std::string::npos) {
    ns = name.substr(0, pos);
    base = name.substr(pos + 2);
  }
  for (const auto& g : groups)
    if (g.name == base && (g.ns == ns || name.find("::") == std::string::npos)) return &g;
  return nullptr;
}

const DataDefinition* Config::definition_of_field(const std::string& qualified) const {
  for (const auto& def : definitions)
    for (const auto& f : def.fields)
      if (f.qualified() == qualified) return &def;
  return nullptr;
}

std::vector<std::string> Config::expand_include(const FileInclude& inc) const {
  std::vector<std::string> out;
  if (inc.is_group) {
    const GroupDef* g = find_group(inc.target);
    if (!g) throw ConfigError("unknown group \"" + inc.target + "\"");
    for (const auto& m : g->members) out.push_back(resolve_field(m));
  } else {
    out.push_back(resolve_field(inc.target));
  }
  return out;
}

Config parse_config(const std::string& xml_text,
                    const std::map<std::string, std::string>& model_options,
                    const IncludeLoader& loader) {
  return Builder(model_options, loader).build(xml_text);
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // Trim to the shortest representation that round-trips.
  for (int prec = 1; prec < 17; ++prec) {
    char probe[64];
    std::snprintf(probe, sizeof probe, "%.*g", prec, v);
    if (std::stod(probe) == v) return probe;
  }
  return buf;
}

void attr(std::string& out, const std::string& key, const std::string& value) {
  out += " " + key + "=\"" + xml_escape(value) + "\"";
}

}  // namespace

Config normalized(const Config& c) {
  Config out = c;
  auto by_ns_name = [](const auto& a, const auto& b) {
    return std::tie(a.ns, a.name) < std::tie(b.ns, b.name);
  };
  std::sort(out.definitions.begin(), out.definitions.end(), by_ns_name);
  for (auto& def : out.definitions)
    std::sort(def.fields.begin(), def.fields.end(),
              [](const auto& a, const auto& b) { return a.name < b.name; });
  std::sort(out.diagnostics.begin(), out.diagnostics.end(), [](const auto& a, const auto& b) {
    return std::tie(a.ns, a.field) < std::tie(b.ns, b.field);
  });
  std::sort(out.groups.begin(), out.groups.end(), by_ns_name);
  for (auto& g : out.groups) std::sort(g.members.begin(), g.members.end());
  std::sort(out.files.begin(), out.files.end(),
            [](const auto& a, const auto& b) { return a.name < b.name; });
  for (auto& f : out.files)
    std::sort(f.includes.begin(), f.includes.end(),
              [](const auto& a, const auto& b) { return a.target < b.target; });
  return out;
}

std::string canonical_xml(const Config& config) {
  Config c = normalized(config);
  std::string out = "<io-configuration>\n";
  for (const auto& def : c.definitions) {
    out += "<data-definition";
    attr(out, "name", def.name);
    attr(out, "namespace", def.ns);
    attr(out, "frequency", std::to_string(def.frequency));
    out += ">\n";
    for (const auto& f : def.fields) {
      out += "<field";
      attr(out, "name", f.name);
      attr(out, "type", f.kind == FieldKind::Array ? "array" : "scalar");
      attr(out, "data_type", data_type_name(f.data_type));
      if (!f.dims.empty()) {
        std::string dims;
        for (const auto& d : f.dims) dims += (dims.empty() ? "" : ",") + d;
        attr(out, "size", dims);
      }
      attr(out, "collective", f.collective ? "true" : "false");
      attr(out, "optional", f.optional ? "true" : "false");
      out += "/>\n";
    }
    out += "</data-definition>\n";
  }
  if (!c.diagnostics.empty()) {
    out += "<data-handling>\n";
    for (const auto& d : c.diagnostics) {
      out += "<diagnostic";
      attr(out, "field", d.field);
      attr(out, "namespace", d.ns);
      attr(out, "type", d.kind == FieldKind::Array ? "array" : "scalar");
      attr(out, "data_type", data_type_name(d.data_type));
      if (!d.units.empty()) attr(out, "units", d.units);
      for (const auto& [k, v] : d.extra_attrs) attr(out, k, v);
      out += ">\n";
      for (const auto& r : d.rules) {
        out += r.kind == RuleKind::Operator ? "<operator" : "<communication";
        attr(out, "name", r.name);
        for (const auto& [k, v] : r.args) attr(out, k, v);
        attr(out, "result", r.result);
        out += "/>\n";
      }
      out += "</diagnostic>\n";
    }
    out += "</data-handling>\n";
  }
  for (const auto& g : c.groups) {
    out += "<group";
    attr(out, "name", g.name);
    attr(out, "namespace", g.ns);
    out += ">\n";
    for (const auto& m : g.members) {
      out += "<member";
      attr(out, "name", m);
      out += "/>\n";
    }
    out += "</group>\n";
  }
  if (!c.files.empty()) {
    out += "<data-writing>\n";
    for (const auto& f : c.files) {
      out += "<file";
      attr(out, "name", f.name);
      attr(out, "write_time_frequency", fmt_real(f.write_time_frequency));
      if (!f.title.empty()) attr(out, "title", f.title);
      out += ">\n";
      for (const auto& inc : f.includes) {
        out += "<include";
        attr(out, inc.is_group ? "group" : "field", inc.target);
        attr(out, "time_manipulation", time_manipulation_name(inc.manipulation));
        if (inc.manipulation != TimeManipulation::None)
          attr(out, "output_frequency", fmt_real(inc.output_frequency));
        out += "/>\n";
      }
      out += "</file>\n";
    }
    out += "</data-writing>\n";
  }
  out += "</io-configuration>\n";
  return out;
}

// ---- rule graph ----

std::vector<int> RuleGraph::topo_order() const {
  std::vector<int> indeg(nodes.size(), 0);
  std::vector<std::vector<int>> out(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (int d : nodes[i].deps) {
      ++indeg[i];
      out[d].push_back(int(i));
    }
  std::deque<int> ready;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (indeg[i] == 0) ready.push_back(int(i));
  std::vector<int> order;
  while (!ready.empty()) {
    int n = ready.front();
    ready.pop_front();
    order.push_back(n);
    for (int m : out[n])
      if (--indeg[m] == 0) ready.push_back(m);
  }
  return order;
}

bool RuleGraph::independent(int a, int b) const {
  auto reaches = [&](int from, int to) {
    std::vector<int> stack{from};
    std::set<int> seen;
    while (!stack.empty()) {
      int n = stack.back();
      stack.pop_back();
      if (n == to) return true;
      for (std::size_t i = 0; i < nodes.size(); ++i)
        for (int d : nodes[i].deps)
          if (d == n && seen.insert(int(i)).second) stack.push_back(int(i));
    }
    return false;
  };
  return !reaches(a, b) && !reaches(b, a);
}

RuleGraph build_rule_graph(const Config& config) {
  RuleGraph graph;
  // result symbol -> node index, scoped per diagnostic; diagnostic finals
  // are also visible globally so diagnostics can chain.
  std::map<std::string, int> finals;  // qualified diagnostic name -> node
  std::map<std::string, std::map<std::string, int>> local;  // diag -> result -> node

  for (const auto& diag : config.diagnostics) {
    for (const auto& rule : diag.rules) {
      RuleNode node;
      node.diagnostic = diag.qualified();
      node.rule = rule;
      int idx = int(graph.nodes.size());
      graph.nodes.push_back(std::move(node));
      local[diag.qualified()][rule.result] = idx;
      if (rule.result == diag.field) finals[diag.qualified()] = idx;
    }
  }

  int idx = 0;
  for (const auto& diag : config.diagnostics) {
    const auto& results = local[diag.qualified()];
    for (const auto& rule : diag.rules) {
      RuleNode& node = graph.nodes[idx];
      for (const auto& input : rule.inputs) {
        if (auto it = results.find(input); it != results.end()) {
          if (it->second != idx) node.deps.push_back(it->second);
          continue;
        }
        // Raw field?
        bool raw = false;
        try {
          std::string q = config.resolve_field(input);
          if (config.find_field(q)) raw = true;
          else if (const DiagnosticDef* other = config.find_diagnostic(q); other) {
            node.deps.push_back(finals.at(q));
            continue;
          }
        } catch (const ConfigError&) {
        }
        if (!raw)
          throw ConfigError("rule \"" + rule.result + "\" in " + diag.qualified() +
                            " consumes undefined symbol \"" + input + "\"");
      }
      ++idx;
    }
  }

  std::vector<int> order = graph.topo_order();
  if (order.size() != graph.nodes.size())
    throw ConfigError("cyclic dependency among diagnostic rules");

  for (int n : order) {
    RuleNode& node = graph.nodes[n];
    node.layer = 0;
    node.per_source = node.rule.kind == RuleKind::Operator;
    for (int d : node.deps) {
      node.layer = std::max(node.layer, graph.nodes[d].layer + 1);
      if (!graph.nodes[d].per_source || graph.nodes[d].diagnostic != node.diagnostic)
        node.per_source = false;
    }
    if (node.rule.kind == RuleKind::Communication) node.per_source = false;
  }
  return graph;
}

}  // namespace insitu::cfg
