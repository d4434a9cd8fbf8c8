#pragma once

// Run configuration in TOML: one table per module ([data], [detector],
// [trainer], [transforms], [evaluation]) plus top-level seed and output_dir.
// Parsing collects every problem before failing; serialisation is canonical
// so parse -> serialise -> parse is the identity and the text can be hashed.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#define TOML_HEADER_ONLY 1
#include <toml.hpp>

#include "camopatch/io.hpp"
#include "camopatch/patch_optimizer.hpp"

namespace camo::config {

namespace fs = std::filesystem;

struct DataConfig {
  std::string source = "synthetic";  ///< "synthetic" or "files"
  int synthetic_count = 5;
  std::int64_t synthetic_seed = 777;
  std::vector<std::string> images;  ///< PNG paths, for source = "files"
  std::string truth;                ///< ground-truth JSON, for source = "files"
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct DetectorConfig {
  std::string kind = "toy";  ///< "toy" or "external"
  std::string command;       ///< shell command starting the worker
  std::string params;        ///< trained toy params; trained into the output dir when empty
  std::int64_t toy_seed = 1;
  int pool_size = 1;  ///< worker processes for an external detector
  friend bool operator==(const DetectorConfig&, const DetectorConfig&) = default;
};

struct EvaluationConfig {
  std::vector<double> thresholds{0.5, 0.1, 0.001};
  friend bool operator==(const EvaluationConfig&, const EvaluationConfig&) = default;
};

/// One ablation study: a single field swept over values.
struct Study {
  std::string name;
  std::string field;               ///< "n", "trainer.n" or "transforms.brightness_min"
  std::vector<std::string> values; ///< TOML literals, e.g. "1", "0.5", "\"hybrid\"", "[0, 90]"
  friend bool operator==(const Study&, const Study&) = default;
};

struct AblationConfig {
  std::vector<std::int64_t> seeds{0, 1, 2};
  bool carry_forward = false;
  std::vector<Study> studies;
  friend bool operator==(const AblationConfig&, const AblationConfig&) = default;
};

struct RunConfig {
  std::optional<std::int64_t> seed;
  std::string output_dir = "out";
  DataConfig data;
  DetectorConfig detector;
  patch::TrainerConfig trainer;  ///< trainer.seed is derived per image, see image_seed
  EvaluationConfig evaluation;
  AblationConfig ablation;
  fs::path base_dir;  ///< relative paths resolve against this; not serialised

  friend bool operator==(const RunConfig& a, const RunConfig& b) {
    return a.seed == b.seed && a.output_dir == b.output_dir && a.data == b.data && a.detector == b.detector &&
           a.trainer == b.trainer && a.evaluation == b.evaluation && a.ablation == b.ablation;
  }

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  }
};

struct ConfigError : InvalidArgument {
  ConfigError(const std::string& where, std::vector<std::string> errs)
      : InvalidArgument(format(where, errs)), errors(std::move(errs)) {}
  std::vector<std::string> errors;

 private:
  static std::string format(const std::string& where, const std::vector<std::string>& errs) {
    std::string s = where + ": invalid configuration";
    for (const auto& e : errs) s += "\n  - " + e;
    return s;
  }
};

/// Trainer seed for the k-th image of a run.
inline std::uint64_t image_seed(std::int64_t run_seed, std::size_t image_index) {
  return std::uint64_t(run_seed) * 1000u + image_index;
}

namespace detail {

class Reader {
 public:
  Reader(const toml::table* t, std::string section, std::vector<std::string>& errors)
      : t_(t), section_(std::move(section)), errors_(errors) {}

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!t_) return;
    const toml::node* n = t_->get(key);
    if (!n) return;
    if (!read(*n, out)) errors_.push_back(name(key) + " has the wrong type");
  }

  void known(const char* key) { seen_.insert(key); }

  void get_mode(const char* key, patch::InitMode& out) {
    std::string s;
    const auto before = errors_.size();
    get(key, s);
    if (errors_.size() != before || !t_ || !t_->get(key)) return;
    try {
      out = patch::parse_init_mode(s);
    } catch (const InvalidArgument& e) {
      errors_.push_back(name(key) + ": " + e.what());
    }
  }

  void finish() {
    if (!t_) return;
    for (const auto& [k, v] : *t_)
      if (!seen_.count(std::string(k.str()))) errors_.push_back("unknown key " + name(std::string(k.str()).c_str()));
  }

 private:
  std::string name(const char* key) const { return section_.empty() ? key : section_ + "." + key; }

  static bool read(const toml::node& n, std::string& out) {
    if (auto v = n.value_exact<std::string>()) return out = *v, true;
    return false;
  }
  static bool read(const toml::node& n, bool& out) {
    if (auto v = n.value_exact<bool>()) return out = *v, true;
    return false;
  }
  static bool read(const toml::node& n, std::int64_t& out) {
    if (auto v = n.value_exact<std::int64_t>()) return out = *v, true;
    return false;
  }
  static bool read(const toml::node& n, int& out) {
    if (auto v = n.value_exact<std::int64_t>(); v && *v >= INT32_MIN && *v <= INT32_MAX) return out = int(*v), true;
    return false;
  }
  static bool read(const toml::node& n, double& out) {
    if (!n.is_number()) return false;
    out = *n.value<double>();
    return true;
  }
  template <typename T>
  static bool read(const toml::node& n, std::vector<T>& out) {
    const auto* arr = n.as_array();
    if (!arr) return false;
    std::vector<T> tmp;
    for (const auto& e : *arr) {
      T v{};
      if (!read(e, v)) return false;
      tmp.push_back(v);
    }
    out = std::move(tmp);
    return true;
  }

  const toml::table* t_;
  std::string section_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

inline std::string quote(const std::string& s) {
  std::string q = "\"";
  for (unsigned char c : s) {
    if (c == '"' || c == '\\') {
      q += '\\';
      q += char(c);
    } else if (c < 0x20 || c == 0x7f) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "\\u%04x", c);
      q += buf;
    } else {
      q += char(c);
    }
  }
  return q + "\"";
}

inline std::string toml_float(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::string s = io::num(v);
  if (s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

template <typename T, typename F>
std::string toml_array(const std::vector<T>& v, F fmt) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v[i]);
  return s + "]";
}

/// Canonical literal for a scalar or array node, in this file's own style.
inline std::string literal(const toml::node& n) {
  if (auto v = n.value_exact<std::string>()) return quote(*v);
  if (auto v = n.value_exact<bool>()) return *v ? "true" : "false";
  if (auto v = n.value_exact<std::int64_t>()) return std::to_string(*v);
  if (auto v = n.value_exact<double>()) return toml_float(*v);
  if (const auto* arr = n.as_array()) {
    std::string s = "[";
    for (std::size_t i = 0; i < arr->size(); ++i) s += (i ? ", " : "") + literal(*arr->get(i));
    return s + "]";
  }
  throw InvalidArgument("study values must be scalars or arrays");
}

inline void read_trainer(const toml::table* t, patch::TrainerConfig& c, std::vector<std::string>& errors) {
  Reader r(t, "trainer", errors);
  r.get("steps", c.steps);
  r.get("iterations_per_step", c.iterations_per_step);
  r.get("rescale_iterations_with_n", c.rescale_iterations_with_n);
  r.get("n", c.n);
  r.get("dlr0", c.dlr0);
  r.get("dlr_decay", c.dlr_decay);
  r.get("dlr_decay_frequency", c.dlr_decay_frequency);
  r.get("deception_momentum", c.deception_momentum);
  r.get("plr_max0", c.plr_max0);
  r.get("plr_floor_fraction", c.plr_floor_fraction);
  r.get("plr_momentum", c.plr_momentum);
  r.get("plr_max_decay_enabled", c.plr_max_decay_enabled);
  r.get("plr_max_decay", c.plr_max_decay);
  r.get("plr_max_decay_frequency", c.plr_max_decay_frequency);
  r.get("patch_ratio", c.patch_ratio);
  r.get_mode("init_mode", c.init_mode);
  r.get("hybrid_noise", c.hybrid_noise);
  r.get("apply_transforms", c.apply_transforms);
  r.get("target_confidence", c.target_confidence);
  r.finish();
}

inline void read_transforms(const toml::table* t, imaging::TransformConfig& c, std::vector<std::string>& errors) {
  Reader r(t, "transforms", errors);
  r.get("rotations", c.rotations);
  r.get("brightness_min", c.brightness_min);
  r.get("brightness_max", c.brightness_max);
  r.get("occupancy_min", c.occupancy_min);
  r.get("occupancy_max", c.occupancy_max);
  r.finish();
}

inline std::string trainer_toml(const patch::TrainerConfig& c) {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  auto f = toml_float;
  std::string s = "[trainer]\n";
  s += "steps = " + std::to_string(c.steps) + "\n";
  s += "iterations_per_step = " + std::to_string(c.iterations_per_step) + "\n";
  s += "rescale_iterations_with_n = " + b(c.rescale_iterations_with_n) + "\n";
  s += "n = " + std::to_string(c.n) + "\n";
  s += "dlr0 = " + f(c.dlr0) + "\n";
  s += "dlr_decay = " + f(c.dlr_decay) + "\n";
  s += "dlr_decay_frequency = " + std::to_string(c.dlr_decay_frequency) + "\n";
  s += "deception_momentum = " + f(c.deception_momentum) + "\n";
  s += "plr_max0 = " + f(c.plr_max0) + "\n";
  s += "plr_floor_fraction = " + f(c.plr_floor_fraction) + "\n";
  s += "plr_momentum = " + f(c.plr_momentum) + "\n";
  s += "plr_max_decay_enabled = " + b(c.plr_max_decay_enabled) + "\n";
  s += "plr_max_decay = " + f(c.plr_max_decay) + "\n";
  s += "plr_max_decay_frequency = " + std::to_string(c.plr_max_decay_frequency) + "\n";
  s += "patch_ratio = " + f(c.patch_ratio) + "\n";
  s += "init_mode = " + quote(patch::to_string(c.init_mode)) + "\n";
  s += "hybrid_noise = " + f(c.hybrid_noise) + "\n";
  s += "apply_transforms = " + b(c.apply_transforms) + "\n";
  s += "target_confidence = " + f(c.target_confidence) + "\n";
  s += "\n[transforms]\n";
  s += "rotations = " + toml_array(c.transforms.rotations, [](int v) { return std::to_string(v); }) + "\n";
  s += "brightness_min = " + f(c.transforms.brightness_min) + "\n";
  s += "brightness_max = " + f(c.transforms.brightness_max) + "\n";
  s += "occupancy_min = " + f(c.transforms.occupancy_min) + "\n";
  s += "occupancy_max = " + f(c.transforms.occupancy_max) + "\n";
  return s;
}

/// Whether a study field ("key", "trainer.key" or "transforms.key") names a
/// key that a trainer config has.
inline bool is_trainer_field(const std::string& field) {
  static const toml::table doc = toml::parse(trainer_toml({}));
  const auto dot = field.find('.');
  const std::string section = dot == std::string::npos ? "trainer" : field.substr(0, dot);
  const std::string key = dot == std::string::npos ? field : field.substr(dot + 1);
  const auto* t = doc.get_as<toml::table>(section);
  return (section == "trainer" || section == "transforms") && t && t->contains(key);
}

}  // namespace detail

/// Every problem with a parsed config, including missing input files.
inline std::vector<std::string> validation_errors(const RunConfig& c) {
  std::vector<std::string> e;
  if (!c.seed) e.push_back("seed is required");
  else if (*c.seed < 0 || *c.seed > std::int64_t(1) << 52) e.push_back("seed must lie in [0, 2^52]");
  if (c.output_dir.empty()) e.push_back("output_dir must not be empty");
  if (c.data.source == "synthetic") {
    if (c.data.synthetic_count < 1) e.push_back("data.synthetic_count must be >= 1");
    if (c.data.synthetic_seed < 0) e.push_back("data.synthetic_seed must be >= 0");
  } else if (c.data.source == "files") {
    if (c.data.images.empty()) e.push_back("data.images must list at least one PNG");
    for (const auto& p : c.data.images)
      if (!fs::exists(c.resolve(p))) e.push_back("data.images: " + c.resolve(p).string() + " does not exist");
    if (c.data.truth.empty()) e.push_back("data.truth is required for source = \"files\"");
    else if (!fs::exists(c.resolve(c.data.truth)))
      e.push_back("data.truth: " + c.resolve(c.data.truth).string() + " does not exist");
  } else {
    e.push_back("data.source must be \"synthetic\" or \"files\"");
  }
  if (c.detector.kind == "toy") {
    if (!c.detector.params.empty() && !fs::exists(c.resolve(c.detector.params)))
      e.push_back("detector.params: " + c.resolve(c.detector.params).string() + " does not exist");
    if (c.detector.toy_seed < 0) e.push_back("detector.toy_seed must be >= 0");
  } else if (c.detector.kind == "external") {
    if (c.detector.command.empty()) e.push_back("detector.command is required for kind = \"external\"");
  } else {
    e.push_back("detector.kind must be \"toy\" or \"external\"");
  }
  if (c.detector.pool_size < 1) e.push_back("detector.pool_size must be >= 1");
  if (c.evaluation.thresholds.empty()) e.push_back("evaluation.thresholds must not be empty");
  for (double t : c.evaluation.thresholds)
    if (!(t >= 0.0 && t <= 1.0)) e.push_back("evaluation.thresholds: " + io::num(t) + " is outside [0, 1]");
  for (const auto& m : patch::validation_errors(c.trainer)) e.push_back("trainer: " + m);
  if (c.ablation.seeds.empty()) e.push_back("ablation.seeds must not be empty");
  for (const auto& s : c.ablation.studies) {
    if (s.name.empty()) e.push_back("study with field '" + s.field + "' has no name");
    if (s.values.empty()) e.push_back("study '" + s.name + "' has no values");
    if (!s.field.empty() && !detail::is_trainer_field(s.field))
      e.push_back("study '" + s.name + "': field '" + s.field + "' is not a trainer or transforms key");
  }
  return e;
}

/// Parses TOML text. Unknown keys, wrong types and constraint violations are
/// all reported together. `base_dir` anchors relative paths.
inline RunConfig parse(std::string_view text, const std::string& source = "config", fs::path base_dir = {}) {
  toml::table doc;
  try {
    doc = toml::parse(text, source);
  } catch (const toml::parse_error& err) {
    std::ostringstream os;
    os << err.description() << " at line " << err.source().begin.line;
    throw ConfigError(source, {os.str()});
  }
  RunConfig c;
  c.base_dir = std::move(base_dir);
  std::vector<std::string> errors;
  auto section = [&](const char* name) -> const toml::table* {
    const toml::node* n = doc.get(name);
    if (n && !n->is_table()) errors.push_back(std::string(name) + " must be a table");
    return n ? n->as_table() : nullptr;
  };

  detail::Reader top(&doc, "", errors);
  std::int64_t seed = 0;
  const auto before = errors.size();
  top.get("seed", seed);
  if (doc.get("seed") && errors.size() == before) c.seed = seed;
  top.get("output_dir", c.output_dir);
  for (const char* s : {"data", "detector", "trainer", "transforms", "evaluation", "ablation", "study"}) top.known(s);
  top.finish();

  {
    detail::Reader r(section("data"), "data", errors);
    r.get("source", c.data.source);
    r.get("synthetic_count", c.data.synthetic_count);
    r.get("synthetic_seed", c.data.synthetic_seed);
    r.get("images", c.data.images);
    r.get("truth", c.data.truth);
    r.finish();
  }
  {
    detail::Reader r(section("detector"), "detector", errors);
    r.get("kind", c.detector.kind);
    r.get("command", c.detector.command);
    r.get("params", c.detector.params);
    r.get("toy_seed", c.detector.toy_seed);
    r.get("pool_size", c.detector.pool_size);
    r.finish();
  }
  detail::read_trainer(section("trainer"), c.trainer, errors);
  detail::read_transforms(section("transforms"), c.trainer.transforms, errors);
  {
    detail::Reader r(section("evaluation"), "evaluation", errors);
    r.get("thresholds", c.evaluation.thresholds);
    r.finish();
  }
  {
    detail::Reader r(section("ablation"), "ablation", errors);
    r.get("seeds", c.ablation.seeds);
    r.get("carry_forward", c.ablation.carry_forward);
    r.finish();
  }
  if (const toml::node* studies = doc.get("study")) {
    const auto* arr = studies->as_array();
    if (!arr || !arr->is_array_of_tables()) {
      errors.push_back("study must be an array of tables ([[study]])");
    } else {
      for (const auto& node : *arr) {
        const auto& t = *node.as_table();
        Study s;
        detail::Reader r(&t, "study", errors);
        r.get("name", s.name);
        r.get("field", s.field);
        r.known("values");
        r.finish();
        std::vector<std::string> values;
        if (const auto* v = t.get("values"); v && v->is_array()) {
          try {
            for (const auto& item : *v->as_array()) values.push_back(detail::literal(item));
          } catch (const InvalidArgument& e) {
            errors.push_back("study '" + s.name + "': " + e.what());
          }
        } else {
          errors.push_back("study '" + s.name + "' needs a values array");
        }
        s.values = std::move(values);
        if (s.field.empty()) errors.push_back("study '" + s.name + "' needs a field");
        c.ablation.studies.push_back(std::move(s));
      }
    }
  }

  for (auto& e : validation_errors(c))
    if (std::find(errors.begin(), errors.end(), e) == errors.end()) errors.push_back(std::move(e));
  if (!errors.empty()) throw ConfigError(source, errors);
  return c;
}

inline RunConfig load(const fs::path& path) {
  return parse(io::read_file(path), path.string(), path.has_parent_path() ? path.parent_path() : fs::path("."));
}

/// Canonical TOML text; every field is written.
inline std::string serialize(const RunConfig& c) {
  using detail::quote;
  std::string s;
  if (c.seed) s += "seed = " + std::to_string(*c.seed) + "\n";
  s += "output_dir = " + quote(c.output_dir) + "\n";
  s += "\n[data]\nsource = " + quote(c.data.source) + "\n";
  s += "synthetic_count = " + std::to_string(c.data.synthetic_count) + "\n";
  s += "synthetic_seed = " + std::to_string(c.data.synthetic_seed) + "\n";
  s += "images = " + detail::toml_array(c.data.images, quote) + "\n";
  s += "truth = " + quote(c.data.truth) + "\n";
  s += "\n[detector]\nkind = " + quote(c.detector.kind) + "\n";
  s += "command = " + quote(c.detector.command) + "\n";
  s += "params = " + quote(c.detector.params) + "\n";
  s += "toy_seed = " + std::to_string(c.detector.toy_seed) + "\n";
  s += "pool_size = " + std::to_string(c.detector.pool_size) + "\n";
  s += "\n" + detail::trainer_toml(c.trainer);
  s += "\n[evaluation]\nthresholds = " + detail::toml_array(c.evaluation.thresholds, detail::toml_float) + "\n";
  s += "\n[ablation]\nseeds = " +
       detail::toml_array(c.ablation.seeds, [](std::int64_t v) { return std::to_string(v); }) + "\n";
  s += std::string("carry_forward = ") + (c.ablation.carry_forward ? "true" : "false") + "\n";
  for (const auto& st : c.ablation.studies) {
    s += "\n[[study]]\nname = " + quote(st.name) + "\nfield = " + quote(st.field) + "\nvalues = [";
    for (std::size_t i = 0; i < st.values.size(); ++i) s += (i ? ", " : "") + st.values[i];
    s += "]\n";
  }
  return s;
}

/// Hash of the canonical text; identifies the configuration in sidecars.
inline std::string config_hash(const RunConfig& c) { return io::sha256_hex(serialize(c)); }

/// Returns `base` with one field replaced by a TOML literal. The result is
/// re-validated the same way a config file is.
inline patch::TrainerConfig with_override(const patch::TrainerConfig& base, const std::string& field,
                                          const std::string& literal) {
  std::string section = "trainer", key = field;
  if (const auto dot = field.find('.'); dot != std::string::npos) {
    section = field.substr(0, dot);
    key = field.substr(dot + 1);
  }
  if (section != "trainer" && section != "transforms")
    throw InvalidArgument("override field '" + field + "' must name a trainer or transforms key");
  toml::table doc;
  try {
    doc = toml::parse(detail::trainer_toml(base));
    const toml::table value_doc = toml::parse("v = " + literal);
    doc[section].as_table()->insert_or_assign(key, *value_doc.get("v"));
  } catch (const toml::parse_error& err) {
    throw InvalidArgument("override " + field + " = " + literal + ": " + std::string(err.description()));
  }
  patch::TrainerConfig out;
  std::vector<std::string> errors;
  detail::read_trainer(doc["trainer"].as_table(), out, errors);
  detail::read_transforms(doc["transforms"].as_table(), out.transforms, errors);
  for (const auto& m : patch::validation_errors(out)) errors.push_back(m);
  if (!errors.empty()) throw ConfigError("override " + field + " = " + literal, errors);
  out.seed = base.seed;
  return out;
}

}  // namespace camo::config
