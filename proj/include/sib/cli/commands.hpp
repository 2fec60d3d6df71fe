#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sib/cli/config.hpp"
#include "sib/eval/metrics.hpp"
#include "sib/models/classifier.hpp"

namespace sib::cli {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<Mode> mode;
};

// Defaults, then the config file (if any), then the overrides; validated.
RunConfig resolve(const std::optional<std::filesystem::path>& config_path, const Overrides& overrides);

data::SplitDatasets load_data(const RunConfig& c);
std::string dataset_name(const RunConfig& c);

// Output locations under c.out.
std::filesystem::path mode_dir(const RunConfig& c, Mode m);
std::filesystem::path model_path(const RunConfig& c, Mode m);

models::Classifier fresh_model(const RunConfig& c, const data::Dataset& ds);
models::Classifier load_model(const RunConfig& c, const data::Dataset& ds, Mode m);

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

double test_accuracy(const models::Classifier& model, const data::Dataset& ds, double tau);

struct MethodEvaluation {
  eval::ReportRow row;
  eval::LocalizationReport localization;
};

// Localization for every sample in [0, limit) and, when `curves` is set,
// insertion and deletion AUC. Targets are predicted classes.
MethodEvaluation evaluate_method(const models::Classifier& model, const data::Dataset& test, explain::Method method,
                                 const RunConfig& c, std::size_t limit, bool curves = true);

void cmd_gen(const RunConfig& c);
void cmd_train(const RunConfig& c);
void cmd_explain(const RunConfig& c);
void cmd_eval(const RunConfig& c);
void cmd_report(const RunConfig& c);

// Parses argv and dispatches; returns the process exit code. Errors are
// reported as one line: `error: <kind>: <message>`.
int run(int argc, char** argv);

}  // namespace sib::cli
