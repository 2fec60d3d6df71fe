#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "sib/core/train.hpp"
#include "sib/data/dataset.hpp"
#include "sib/explain/attribution.hpp"

namespace sib::cli {

enum class Mode { Baseline, Sib };

Mode parse_mode(const std::string& s);
std::string to_string(Mode m);

struct RunConfig {
  // Dataset: a folder with train/ and test/ subfolders, or the synthetic recipe when empty.
  std::string data;
  data::SyntheticRecipe recipe;
  // Model.
  std::size_t channels = 8;
  // Objective and optimizer.
  core::TrainConfig train;
  Mode mode = Mode::Sib;
  // Evaluation.
  std::vector<explain::Method> methods = explain::all_methods();
  std::size_t steps = 100;
  double threshold = 0.5;
  std::size_t ig_steps = 32;
  std::size_t eval_limit = 0;         // test samples evaluated; 0 means all
  std::vector<std::string> samples;   // explain targets by id; empty means the first four test samples
  std::string out = "run";

  std::uint64_t seed() const { return train.seed; }
};

// Parses `key = value` lines with `#` comments over the defaults. Every unknown
// key, malformed value and range violation is collected into one ConfigError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// Lists every range violation; empty when valid.
std::vector<std::string> violations(const RunConfig& c);
void validate(const RunConfig& c);

// All keys with resolved values, re-parseable by parse_config.
std::string serialize(const RunConfig& c);

// Training settings for the configured mode.
core::TrainConfig effective_train_config(const RunConfig& c);

}  // namespace sib::cli
