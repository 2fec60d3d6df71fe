#include "sib/cli/commands.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "sib/autodiff/kernels.hpp"
#include "sib/autodiff/ops.hpp"
#include "sib/errors.hpp"

namespace sib::cli {

namespace fs = std::filesystem;
using ad::Tensor;

RunConfig resolve(const std::optional<fs::path>& config_path, const Overrides& overrides) {
  RunConfig c = config_path ? load_config(*config_path) : RunConfig{};
  if (overrides.seed) c.train.seed = c.recipe.seed = *overrides.seed;
  if (overrides.out) c.out = *overrides.out;
  if (overrides.mode) c.mode = *overrides.mode;
  validate(c);
  return c;
}

data::SplitDatasets load_data(const RunConfig& c) {
  if (c.data.empty()) return data::generate_synthetic(c.recipe);
  const fs::path root(c.data);
  for (const char* split : {"train", "test"}) {
    if (!fs::is_directory(root / split)) throw IoError("dataset folder " + (root / split).string() + " not found");
  }
  data::SplitDatasets d{data::load_folder(root / "train"), data::load_folder(root / "test")};
  d.train.split = "train";
  d.test.split = "test";
  if (d.train.size() < 2) throw IoError("dataset " + (root / "train").string() + " has fewer than 2 samples");
  return d;
}

std::string dataset_name(const RunConfig& c) {
  return c.data.empty() ? "synthetic" : fs::path(c.data).lexically_normal().filename().string();
}

fs::path mode_dir(const RunConfig& c, Mode m) { return fs::path(c.out) / to_string(m); }
fs::path model_path(const RunConfig& c, Mode m) { return mode_dir(c, m) / "model.sibp"; }

models::Classifier fresh_model(const RunConfig& c, const data::Dataset& ds) {
  if (ds.empty()) throw ContractError("cannot size a model from an empty dataset");
  const Tensor& img = ds.samples.front().image;
  if (img.dim(1) != img.dim(2)) throw ConfigError("images must be square, got " + ad::to_string(img.shape()));
  return models::build_small_cnn(c.channels, std::max<std::size_t>(ds.classes, 2), img.dim(1), c.seed());
}

models::Classifier load_model(const RunConfig& c, const data::Dataset& ds, Mode m) {
  models::Classifier model = fresh_model(c, ds);
  model.set_params(models::load_params(read_bytes(model_path(c, m))));
  return model;
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string read_text(const fs::path& path) {
  const auto b = read_bytes(path);
  return {b.begin(), b.end()};
}

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

double test_accuracy(const models::Classifier& model, const data::Dataset& ds, double tau) {
  if (ds.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t start = 0; start < ds.size(); start += 128) {
    std::vector<std::size_t> idx(std::min<std::size_t>(128, ds.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const data::Batch b = data::make_batch(ds, idx);
    const auto pred = models::predict(models::forward(model, ad::constant(b.x), tau).logits.value());
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == b.labels[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(ds.size());
}

namespace {

explain::Options options_of(const RunConfig& c) {
  return {.tau = c.train.objective.tau, .ig_steps = c.ig_steps, .ig_baseline = nullptr, .mask = c.train.objective.mask};
}

Tensor as_image(const data::LabeledSample& s) {
  const Tensor& im = s.image;
  return im.reshaped({1, im.dim(0), im.dim(1), im.dim(2)});
}

std::size_t limit_of(const RunConfig& c, const data::Dataset& ds) {
  return c.eval_limit == 0 ? ds.size() : std::min(c.eval_limit, ds.size());
}

}  // namespace

MethodEvaluation evaluate_method(const models::Classifier& model, const data::Dataset& test, explain::Method method,
                                 const RunConfig& c, std::size_t limit, bool curves) {
  const auto opts = options_of(c);
  const double tau = c.train.objective.tau;
  limit = std::min(limit, test.size());
  std::vector<eval::LocalizationSample> per;
  double ins = 0, del = 0;
  for (std::size_t i = 0; i < limit; ++i) {
    const auto& s = test.samples[i];
    const Tensor x = as_image(s);
    const auto map = explain::explain(method, model, x, explain::predicted_class(model, x, tau), opts);
    per.push_back(eval::localize(s.id, map.scores, s.gt_mask, c.threshold));
    if (curves) {
      ins += eval::insertion_curve(model, x, map.scores, c.steps, s.id, tau).auc;
      del += eval::deletion_curve(model, x, map.scores, c.steps, s.id, tau).auc;
    }
  }
  MethodEvaluation out;
  out.localization = eval::aggregate(std::move(per));
  const double n = static_cast<double>(std::max<std::size_t>(limit, 1));
  out.row = {.method = explain::method_id(method), .dataset = dataset_name(c), .mode = to_string(c.mode),
             .seed = c.seed(), .pixel_acc = out.localization.pixel_acc, .miou = out.localization.miou,
             .map = out.localization.map, .insertion = ins / n, .deletion = del / n};
  return out;
}

void cmd_gen(const RunConfig& c) {
  if (!c.data.empty()) throw ConfigError("gen writes the synthetic recipe; leave data empty");
  const auto d = data::generate_synthetic(c.recipe);
  const fs::path root = fs::path(c.out) / "data";
  data::save_dataset(d.train, root / "train");
  data::save_dataset(d.test, root / "test");
  write_text(root / "config.txt", serialize(c));
}

void cmd_train(const RunConfig& c) {
  const auto d = load_data(c);
  models::Classifier model = fresh_model(c, d.train);
  const auto log = core::train(model, d.train, effective_train_config(c));
  const fs::path dir = mode_dir(c, c.mode);
  write_bytes(model_path(c, c.mode), models::save_params(model.params()));
  std::ostringstream csv;
  core::write_log_csv(csv, log);
  write_text(dir / "train_log.csv", csv.str());
  write_text(dir / "config.txt", serialize(c));
}

void cmd_explain(const RunConfig& c) {
  const auto d = load_data(c);
  const auto model = load_model(c, d.test, c.mode);
  std::vector<const data::LabeledSample*> targets;
  if (c.samples.empty()) {
    for (std::size_t i = 0; i < std::min<std::size_t>(4, d.test.size()); ++i) targets.push_back(&d.test.samples[i]);
  } else {
    for (const auto& id : c.samples) {
      const auto it = std::find_if(d.test.samples.begin(), d.test.samples.end(),
                                   [&](const data::LabeledSample& s) { return s.id == id; });
      if (it == d.test.samples.end()) throw ConfigError("sample id '" + id + "' not in the test split");
      targets.push_back(&*it);
    }
  }
  const fs::path dir = mode_dir(c, c.mode) / "explain";
  fs::create_directories(dir);
  const auto opts = options_of(c);
  for (const auto* s : targets) {
    const Tensor x = as_image(*s);
    const std::size_t cls = explain::predicted_class(model, x, c.train.objective.tau);
    for (auto m : c.methods) {
      const auto map = explain::explain(m, model, x, cls, opts);
      const std::string stem = s->id + "." + explain::method_id(m);
      explain::write_heatmap_pgm(dir / (stem + ".pgm"), map);
      explain::write_overlay_ppm(dir / (stem + ".ppm"), s->image, map);
    }
  }
  write_text(dir / "config.txt", serialize(c));
}

void cmd_eval(const RunConfig& c) {
  const auto d = load_data(c);
  const auto model = load_model(c, d.test, c.mode);
  const std::size_t limit = limit_of(c, d.test);
  std::vector<eval::ReportRow> rows;
  const fs::path dir = mode_dir(c, c.mode);
  for (auto m : c.methods) {
    auto e = evaluate_method(model, d.test, m, c, limit);
    std::ostringstream per;
    eval::write_localization_csv(per, e.localization);
    write_text(dir / ("localization_" + explain::method_id(m) + ".csv"), per.str());
    rows.push_back(e.row);
  }
  std::ostringstream t3, t4;
  eval::write_localization_table_csv(t3, rows);
  eval::write_faithfulness_table_csv(t4, rows);
  write_text(dir / "localization_summary.csv", t3.str());
  write_text(dir / "faithfulness_summary.csv", t4.str());
  write_text(dir / "eval_config.txt", serialize(c));
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Sample covariance of the flattened rows of x (N x d).
Tensor covariance(const Tensor& x) {
  const std::size_t n = x.dim(0), d = x.size() / n;
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x[i * d + j] / static_cast<double>(n);
  Tensor s({d, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double da = x[i * d + a] - mean[a];
      if (da == 0.0) continue;
      for (std::size_t b = 0; b < d; ++b) s[a * d + b] += da * (x[i * d + b] - mean[b]);
    }
  for (double& v : s.data()) v /= static_cast<double>(n - 1);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < a; ++b) s[a * d + b] = s[b * d + a];
  return s;
}

// Background part of R for every test sample, regions from ground truth.
Tensor background_r(const models::Classifier& model, const data::Dataset& ds, double tau) {
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const data::Batch b = data::make_batch(ds, idx);
  ad::Graph g;
  Tensor R = core::compute_vjp_decoding(model, b.x, tau, models::bind_constant(model), g, false).R.value();
  for (std::size_t i = 0; i < R.size(); ++i) R[i] *= 1.0 - b.masks[i];
  return R;
}

}  // namespace

void cmd_report(const RunConfig& c) {
  const auto d = load_data(c);
  const double tau = c.train.objective.tau;
  const fs::path dir = fs::path(c.out) / "report";
  std::map<Mode, models::Classifier> models_by_mode;
  for (Mode m : {Mode::Baseline, Mode::Sib}) models_by_mode.emplace(m, load_model(c, d.test, m));

  std::string quad = "mode,fg_fg,bg_bg,fg_bg,bg_fg\n";
  std::string bound = "";
  std::vector<double> pooled;
  std::map<Mode, std::vector<double>> gaps;
  for (const auto& [m, model] : models_by_mode) {
    const auto q = eval::mi_quadrants(model, d.test, tau, c.train.objective.hsic);
    quad += to_string(m) + "," + fmt(q.fg_fg) + "," + fmt(q.bg_bg) + "," + fmt(q.fg_bg) + "," + fmt(q.bg_fg) + "\n";
    gaps[m] = eval::per_sample_region_gap(model, d.test, tau);
    pooled.insert(pooled.end(), gaps[m].begin(), gaps[m].end());
    const Tensor sigma = covariance(background_r(model, d.test, tau));
    for (double s : {0.1, 1.0}) {
      const auto r = eval::variance_bound_check(sigma, s);
      bound += to_string(m) + (s < 1 ? ".sigma_0.1" : ".sigma_1") + " = lhs " + fmt(r.lhs) + " rhs " + fmt(r.rhs) + " holds " +
               (r.holds ? "true" : "false") + "\n";
    }
  }
  // z-scores pooled over both models on the same test split.
  const auto info = eval::info_differential(pooled);
  std::string info_csv = "mode,id,gap,info_differential\n";
  std::map<Mode, double> info_mean;
  std::size_t k = 0;
  for (Mode m : {Mode::Baseline, Mode::Sib}) {
    for (std::size_t i = 0; i < gaps[m].size(); ++i, ++k) {
      info_csv += to_string(m) + "," + d.test.samples[i].id + "," + fmt(gaps[m][i]) + "," + fmt(info[k]) + "\n";
      info_mean[m] += info[k] / static_cast<double>(gaps[m].size());
    }
  }

  std::string cmp = "metric,baseline,sib,delta\n";
  auto add = [&](const std::string& name, double b, double s) {
    cmp += name + "," + fmt(b) + "," + fmt(s) + "," + fmt(s - b) + "\n";
  };
  add("test_acc", test_accuracy(models_by_mode.at(Mode::Baseline), d.test, tau),
      test_accuracy(models_by_mode.at(Mode::Sib), d.test, tau));
  add("info_differential", info_mean[Mode::Baseline], info_mean[Mode::Sib]);
  // Metric columns from earlier `eval` runs, when present.
  std::map<Mode, std::vector<eval::ReportRow>> tables;
  for (Mode m : {Mode::Baseline, Mode::Sib}) {
    const fs::path t3 = mode_dir(c, m) / "localization_summary.csv", t4 = mode_dir(c, m) / "faithfulness_summary.csv";
    if (fs::exists(t3) && fs::exists(t4)) tables[m] = eval::read_report_tables(read_text(t3), read_text(t4));
  }
  if (tables.size() == 2) {
    for (const auto& b : tables[Mode::Baseline]) {
      for (const auto& s : tables[Mode::Sib]) {
        if (s.method != b.method) continue;
        add(b.method + ".pixel_acc", b.pixel_acc, s.pixel_acc);
        add(b.method + ".miou", b.miou, s.miou);
        add(b.method + ".map", b.map, s.map);
        add(b.method + ".insertion", b.insertion, s.insertion);
        add(b.method + ".deletion", b.deletion, s.deletion);
      }
    }
  }
  write_text(dir / "mi_quadrants.csv", quad);
  write_text(dir / "info_differential.csv", info_csv);
  write_text(dir / "bound_check.txt", bound);
  write_text(dir / "comparison.csv", cmp);
  write_text(dir / "config.txt", serialize(c));
}

namespace {

const char* kind_of(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const ParseError*>(&e)) return "parse";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const ContractError*>(&e)) return "contract";
  if (dynamic_cast<const DomainError*>(&e)) return "domain";
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return "io";
  return "internal";
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Input-gradient regularized training and saliency evaluation"};
  app.require_subcommand(1);
  std::optional<std::string> config;
  Overrides ov;
  std::string mode;
  app.add_option("--config", config, "key = value config file");
  app.add_option("--seed", ov.seed, "seed for data, initialization and shuffling");
  app.add_option("--out", ov.out, "output directory");
  app.add_option("--mode", mode, "baseline or sib")->check(CLI::IsMember({"baseline", "sib"}));
  const std::vector<std::pair<std::string, void (*)(const RunConfig&)>> commands = {
      {"gen", cmd_gen}, {"train", cmd_train}, {"explain", cmd_explain}, {"eval", cmd_eval}, {"report", cmd_report}};
  const std::map<std::string, std::string> help = {{"gen", "write the synthetic dataset"},
                                                   {"train", "train a model and write its log"},
                                                   {"explain", "write saliency heatmaps"},
                                                   {"eval", "localization and faithfulness tables"},
                                                   {"report", "information diagnostics and comparison"}};
  for (const auto& [name, fn] : commands) app.add_subcommand(name, help.at(name))->fallthrough();
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }
  try {
    if (!mode.empty()) ov.mode = parse_mode(mode);
    const RunConfig c = resolve(config ? std::optional<fs::path>(*config) : std::nullopt, ov);
    for (const auto& [name, fn] : commands) {
      if (app.got_subcommand(name)) fn(c);
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << kind_of(e) << ": " << one_line(e.what()) << "\n";
    return 1;
  }
}

}  // namespace sib::cli
