#include "sib/cli/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "sib/errors.hpp"

namespace sib::cli {

Mode parse_mode(const std::string& s) {
  if (s == "baseline") return Mode::Baseline;
  if (s == "sib") return Mode::Sib;
  throw ConfigError("mode must be baseline or sib, got '" + s + "'");
}

std::string to_string(Mode m) { return m == Mode::Baseline ? "baseline" : "sib"; }

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_double(const std::string& v) {
  double d = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), d);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("not a number: '" + v + "'");
  return d;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t d = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), d);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("not a non-negative integer: '" + v + "'");
  return d;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("not a boolean: '" + v + "'");
}

std::string fmt(double d) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, d);
  return std::string(buf, p);
}

using Setter = std::function<void(RunConfig&, const std::string&)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Key {
  Setter set;
  Getter get;
};

// Key table in serialization order.
const std::vector<std::pair<std::string, Key>>& keys() {
  static const std::vector<std::pair<std::string, Key>> k = {
      {"data", {[](RunConfig& c, const std::string& v) { c.data = v; }, [](const RunConfig& c) { return c.data; }}},
      {"classes",
       {[](RunConfig& c, const std::string& v) { c.recipe.classes = to_u64(v); },
        [](const RunConfig& c) { return std::to_string(c.recipe.classes); }}},
      {"side",
       {[](RunConfig& c, const std::string& v) { c.recipe.side = to_u64(v); },
        [](const RunConfig& c) { return std::to_string(c.recipe.side); }}},
      {"n_train",
       {[](RunConfig& c, const std::string& v) { c.recipe.n_train = to_u64(v); },
        [](const RunConfig& c) { return std::to_string(c.recipe.n_train); }}},
      {"n_test",
       {[](RunConfig& c, const std::string& v) { c.recipe.n_test = to_u64(v); },
        [](const RunConfig& c) { return std::to_string(c.recipe.n_test); }}},
      {"spurious",
       {[](RunConfig& c, const std::string& v) { c.recipe.spurious = to_double(v); },
        [](const RunConfig& c) { return fmt(c.recipe.spurious); }}},
      {"channels",
       {[](RunConfig& c, const std::string& v) { c.channels = to_u64(v); },
        [](const RunConfig& c) { return std::to_string(c.channels); }}},
      {"tau",
       {[](RunConfig& c, const std::string& v) { c.train.objective.tau = to_double(v); },
        [](const RunConfig& c) { return fmt(c.train.objective.tau); }}},
      {"gamma",
       {[](RunConfig& c, const std::string& v) { c.train.objective.gamma = to_double(v); },
        [](const RunConfig& c) { return fmt(c.train.objective.gamma); }}},
      {"use_bg",
       {[](RunConfig& c, const std::string& v) { c.train.objective.use_bg = to_bool(v); },
        [](const RunConfig& c) { return std::string(c.train.objective.use_bg ? "true" : "false"); }}},
      {"mask_threshold",
       {[](RunConfig& c, const std::string& v) { c.train.objective.mask.threshold = to_double(v); },
        [](const RunConfig& c) { return fmt(c.train.objective.mask.threshold); }}},
      {"mask_sharpness",
       {[](RunConfig& c, const std::string& v) { c.train.objective.mask.sharpness = to_double(v); },
        [](const RunConfig& c) { return fmt(c.train.objective.mask.sharpness); }}},
      {"hsic",
       {[](RunConfig& c, const std::string& v) { c.train.objective.hsic = core::parse_hsic_scaling(v); },
        [](const RunConfig& c) { return core::to_string(c.train.objective.hsic); }}},
      {"bg_variance",
       {[](RunConfig& c, const std::string& v) { c.train.objective.bg_variance = core::parse_bg_variance(v); },
        [](const RunConfig& c) { return core::to_string(c.train.objective.bg_variance); }}},
      {"lr",
       {[](RunConfig& c, const std::string& v) { c.train.lr = to_double(v); },
        [](const RunConfig& c) { return fmt(c.train.lr); }}},
      {"momentum",
       {[](RunConfig& c, const std::string& v) { c.train.momentum = to_double(v); },
        [](const RunConfig& c) { return fmt(c.train.momentum); }}},
      {"epochs",
       {[](RunConfig& c, const std::string& v) { c.train.epochs = to_u64(v); },
        [](const RunConfig& c) { return std::to_string(c.train.epochs); }}},
      {"batch_size",
       {[](RunConfig& c, const std::string& v) { c.train.batch_size = to_u64(v); },
        [](const RunConfig& c) { return std::to_string(c.train.batch_size); }}},
      {"probe_size",
       {[](RunConfig& c, const std::string& v) { c.train.probe_size = to_u64(v); },
        [](const RunConfig& c) { return std::to_string(c.train.probe_size); }}},
      {"seed",
       {[](RunConfig& c, const std::string& v) { c.train.seed = c.recipe.seed = to_u64(v); },
        [](const RunConfig& c) { return std::to_string(c.train.seed); }}},
      {"mode",
       {[](RunConfig& c, const std::string& v) { c.mode = parse_mode(v); },
        [](const RunConfig& c) { return to_string(c.mode); }}},
      {"methods",
       {[](RunConfig& c, const std::string& v) {
          c.methods.clear();
          for (const auto& id : split_list(v)) c.methods.push_back(explain::parse_method(id));
        },
        [](const RunConfig& c) {
          std::string s;
          for (auto m : c.methods) s += (s.empty() ? "" : ",") + explain::method_id(m);
          return s;
        }}},
      {"steps",
       {[](RunConfig& c, const std::string& v) { c.steps = to_u64(v); },
        [](const RunConfig& c) { return std::to_string(c.steps); }}},
      {"threshold",
       {[](RunConfig& c, const std::string& v) { c.threshold = to_double(v); },
        [](const RunConfig& c) { return fmt(c.threshold); }}},
      {"ig_steps",
       {[](RunConfig& c, const std::string& v) { c.ig_steps = to_u64(v); },
        [](const RunConfig& c) { return std::to_string(c.ig_steps); }}},
      {"eval_limit",
       {[](RunConfig& c, const std::string& v) { c.eval_limit = to_u64(v); },
        [](const RunConfig& c) { return std::to_string(c.eval_limit); }}},
      {"samples",
       {[](RunConfig& c, const std::string& v) { c.samples = split_list(v); },
        [](const RunConfig& c) {
          std::string s;
          for (const auto& id : c.samples) s += (s.empty() ? "" : ",") + id;
          return s;
        }}},
      {"out", {[](RunConfig& c, const std::string& v) { c.out = v; }, [](const RunConfig& c) { return c.out; }}},
  };
  return k;
}

const Key* find_key(const std::string& name) {
  for (const auto& [k, v] : keys()) {
    if (k == name) return &v;
  }
  return nullptr;
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& e : v) s += (s.empty() ? "" : "; ") + e;
  return s;
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::vector<std::string> errors;
  std::istringstream in(text);
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      errors.push_back("line " + std::to_string(no) + ": expected key = value");
      continue;
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const Key* k = find_key(key);
    if (!k) {
      errors.push_back("line " + std::to_string(no) + ": unknown key '" + key + "'");
      continue;
    }
    try {
      k->set(c, value);
    } catch (const ConfigError& e) {
      errors.push_back("line " + std::to_string(no) + ": " + key + ": " + e.what());
    }
  }
  for (auto& v : violations(c)) errors.push_back(std::move(v));
  if (!errors.empty()) throw ConfigError(join(errors));
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::vector<std::string> violations(const RunConfig& c) {
  std::vector<std::string> v;
  if (c.data.empty()) {
    try {
      data::validate(c.recipe);
    } catch (const ConfigError& e) {
      v.emplace_back(e.what());
    }
  }
  if (c.channels < 1) v.emplace_back("channels must be >= 1");
  const auto& o = c.train.objective;
  if (!(o.tau > 0.0)) v.emplace_back("tau must be > 0");
  if (!(o.gamma >= 0.0) || !std::isfinite(o.gamma)) v.emplace_back("gamma must be finite and >= 0");
  if (!(o.mask.threshold > 0.0 && o.mask.threshold < 1.0)) v.emplace_back("mask_threshold must lie in (0, 1)");
  if (!(o.mask.sharpness > 0.0)) v.emplace_back("mask_sharpness must be > 0");
  if (!(c.train.lr > 0.0)) v.emplace_back("lr must be > 0");
  if (!(c.train.momentum >= 0.0 && c.train.momentum < 1.0)) v.emplace_back("momentum must lie in [0, 1)");
  if (c.train.batch_size < 2) v.emplace_back("batch_size must be >= 2");
  if (c.train.probe_size < 2) v.emplace_back("probe_size must be >= 2");
  if (c.methods.empty()) v.emplace_back("methods must list at least one method");
  if (c.steps < 10) v.emplace_back("steps must be >= 10");
  if (!(c.threshold > 0.0 && c.threshold < 1.0)) v.emplace_back("threshold must lie in (0, 1)");
  if (c.ig_steps < 8) v.emplace_back("ig_steps must be >= 8");
  if (c.out.empty()) v.emplace_back("out must not be empty");
  return v;
}

void validate(const RunConfig& c) {
  const auto v = violations(c);
  if (!v.empty()) throw ConfigError(join(v));
}

std::string serialize(const RunConfig& c) {
  std::string s;
  for (const auto& [k, key] : keys()) s += k + " = " + key.get(c) + "\n";
  return s;
}

core::TrainConfig effective_train_config(const RunConfig& c) {
  return c.mode == Mode::Baseline ? core::baseline_of(c.train) : c.train;
}

}  // namespace sib::cli
