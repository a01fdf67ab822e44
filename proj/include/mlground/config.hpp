#pragma once

// Run configuration: flat `key = value` lines, '#' starts a comment. Every
// key is typed and unknown keys are rejected. `resolved()` writes the full
// effective configuration back in the same syntax.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "mlground/evaluation.hpp"
#include "mlground/synthetic.hpp"
#include "mlground/trainer.hpp"

namespace mlground {

class ConfigError : public ValueError {
 public:
  using ValueError::ValueError;
};

struct RunConfig {
  std::uint64_t seed = 0;
  SyntheticSpec synthetic;
  TrainConfig train;
  EvalMode eval_mode = EvalMode::Word;
  std::vector<std::string> ablate_axes = {"softmax"};
  std::size_t ablate_epochs = 10;

  // The global seed drives both generation and training.
  SyntheticSpec synthetic_spec() const {
    auto s = synthetic;
    s.seed = seed;
    return s;
  }
  TrainConfig train_config() const {
    auto t = train;
    t.seed = seed;
    return t;
  }

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  std::string resolved() const;

  void apply_file(const std::filesystem::path& path);
  // "key=value"
  void apply_override(const std::string& assignment);
  void write_resolved(const std::filesystem::path& path) const;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError(detail::concat("config key '", key, "': '", text, "' is not a valid number"));
  }
  return v;
}

inline std::size_t parse_size(const std::string& key, const std::string& text) {
  return parse_number<std::size_t>(key, text);
}

inline double parse_double(const std::string& key, const std::string& text) {
  return parse_number<double>(key, text);
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on") return true;
  if (text == "false" || text == "0" || text == "off") return false;
  throw ConfigError(detail::concat("config key '", key, "': '", text, "' is not a boolean"));
}

// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[512];
  const double mag = std::abs(v);
  const bool fixed = mag == 0 || (mag >= 1e-6 && mag < 1e15);
  auto [ptr, ec] = fixed ? std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed)
                         : std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::vector<std::string> s;
  for (auto x : v) s.push_back(std::to_string(x));
  return join(s);
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(text)) out.push_back(parse_size(key, item));
  return out;
}

struct Option {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename Get, typename Set>
Option make(std::string key, Get get, Set set) {
  return {std::move(key), get, set};
}

#define MLGROUND_SIZE(key, field)                                                        \
  make(key, [](const RunConfig& c) { return std::to_string(c.field); },                \
       [](RunConfig& c, const std::string& v) { c.field = parse_size(key, v); })
#define MLGROUND_DOUBLE(key, field)                                                      \
  make(key, [](const RunConfig& c) { return format_double(c.field); },                 \
       [](RunConfig& c, const std::string& v) { c.field = parse_double(key, v); })
#define MLGROUND_BOOL(key, field)                                                        \
  make(key, [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }, \
       [](RunConfig& c, const std::string& v) { c.field = parse_bool(key, v); })

inline const std::vector<Option>& options() {
  static const std::vector<Option> table = {
      make("seed", [](const RunConfig& c) { return std::to_string(c.seed); },
           [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); }),
      MLGROUND_SIZE("synthetic.concepts", synthetic.concepts),
      MLGROUND_SIZE("synthetic.grid", synthetic.grid),
      make("synthetic.level_dims", [](const RunConfig& c) { return join_sizes(c.synthetic.level_dims); },
           [](RunConfig& c, const std::string& v) {
             c.synthetic.level_dims = parse_sizes("synthetic.level_dims", v);
           }),
      MLGROUND_SIZE("synthetic.concept_dim", synthetic.concept_dim),
      MLGROUND_SIZE("synthetic.word_layers", synthetic.word_layers),
      MLGROUND_SIZE("synthetic.word_width", synthetic.word_width),
      MLGROUND_SIZE("synthetic.sentence_items", synthetic.sentence_items),
      MLGROUND_SIZE("synthetic.sentence_width", synthetic.sentence_width),
      MLGROUND_DOUBLE("synthetic.noise", synthetic.noise),
      make("synthetic.visibility", [](const RunConfig& c) { return std::string(visibility_name(c.synthetic.visibility)); },
           [](RunConfig& c, const std::string& v) { c.synthetic.visibility = parse_visibility(v); }),
      MLGROUND_BOOL("synthetic.identity_maps", synthetic.identity_maps),
      MLGROUND_SIZE("synthetic.samples", synthetic.samples),
      MLGROUND_SIZE("synthetic.cell_px", synthetic.cell_px),
      MLGROUND_SIZE("synthetic.min_concepts", synthetic.min_concepts),
      MLGROUND_SIZE("synthetic.max_concepts", synthetic.max_concepts),
      MLGROUND_SIZE("synthetic.max_patch", synthetic.max_patch),
      MLGROUND_SIZE("synthetic.scenes", synthetic.scenes),
      make("synthetic.sample_seed",
           [](const RunConfig& c) {
             return c.synthetic.sample_seed ? std::to_string(*c.synthetic.sample_seed) : std::string("none");
           },
           [](RunConfig& c, const std::string& v) {
             if (v == "none") c.synthetic.sample_seed.reset();
             else c.synthetic.sample_seed = parse_number<std::uint64_t>("synthetic.sample_seed", v);
           }),
      MLGROUND_SIZE("train.batch", train.batch),
      MLGROUND_SIZE("train.epochs", train.epochs),
      MLGROUND_DOUBLE("train.lr", train.lr),
      make("train.lr_halving_epochs", [](const RunConfig& c) { return join_sizes(c.train.lr_halving_epochs); },
           [](RunConfig& c, const std::string& v) {
             c.train.lr_halving_epochs = parse_sizes("train.lr_halving_epochs", v);
           }),
      MLGROUND_DOUBLE("train.gamma1", train.gamma1),
      MLGROUND_DOUBLE("train.gamma2", train.gamma2),
      MLGROUND_SIZE("train.common_dim", train.common_dim),
      MLGROUND_SIZE("train.grid", train.grid),
      MLGROUND_DOUBLE("train.leaky_alpha", train.leaky_alpha),
      MLGROUND_DOUBLE("train.reg_value", train.reg_value),
      MLGROUND_BOOL("model.softmax_heatmaps", train.softmax_heatmaps),
      MLGROUND_BOOL("model.linear_text", train.linear_text),
      MLGROUND_BOOL("model.linear_visual", train.linear_visual),
      make("model.levels", [](const RunConfig& c) { return std::string(level_mode_name(c.train.levels)); },
           [](RunConfig& c, const std::string& v) { c.train.levels = parse_level_mode(v); }),
      MLGROUND_BOOL("model.normalize_sentence_attended", train.normalize_sentence_attended),
      make("eval.mode", [](const RunConfig& c) { return std::string(eval_mode_name(c.eval_mode)); },
           [](RunConfig& c, const std::string& v) { c.eval_mode = parse_eval_mode(v); }),
      make("ablate.axes", [](const RunConfig& c) { return join(c.ablate_axes); },
           [](RunConfig& c, const std::string& v) {
             auto axes = split_list(v);
             ablation_grid(axes);  // rejects unknown axes
             c.ablate_axes = std::move(axes);
           }),
      MLGROUND_SIZE("ablate.epochs", ablate_epochs),
  };
  return table;
}

#undef MLGROUND_SIZE
#undef MLGROUND_DOUBLE
#undef MLGROUND_BOOL

inline const Option& find(const std::string& key) {
  for (const auto& o : options()) {
    if (o.key == key) return o;
  }
  throw ConfigError(detail::concat("unknown config key '", key, "'"));
}

}  // namespace config_detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& opt = config_detail::find(key);
  try {
    opt.set(*this, config_detail::trim(value));
  } catch (const ConfigError&) {
    throw;
  } catch (const ValueError& e) {
    throw ConfigError(detail::concat("config key '", key, "': ", e.what()));
  }
}

inline std::string RunConfig::get(const std::string& key) const { return config_detail::find(key).get(*this); }

inline std::string RunConfig::resolved() const {
  std::string out;
  for (const auto& o : config_detail::options()) out += o.key + " = " + o.get(*this) + "\n";
  return out;
}

inline void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError(detail::concat("override '", assignment, "' is not of the form key=value"));
  }
  set(config_detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void RunConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(detail::concat("cannot open config '", path.string(), "'"));
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (config_detail::trim(line).empty()) continue;
    try {
      apply_override(line);
    } catch (const ConfigError& e) {
      throw ConfigError(detail::concat(path.string(), ":", n, ": ", e.what()));
    }
  }
}

inline void RunConfig::write_resolved(const std::filesystem::path& path) const {
  const auto tmp = std::filesystem::path(path.string() + ".partial");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << resolved();
    if (!out) throw IoError(detail::concat("cannot write '", tmp.string(), "'"));
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace mlground
