#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <vector>

#include "sib/core/objective.hpp"
#include "sib/data/dataset.hpp"
#include "sib/models/classifier.hpp"

namespace sib::core {

struct TrainConfig {
  SibConfig objective;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::size_t probe_size = 256;  // leading train samples evaluated after each epoch
};

// Baseline: cross-entropy only (gamma = 0, L_bg not added). Same code path.
TrainConfig baseline_of(TrainConfig cfg);

struct LogRow {
  std::size_t epoch = 0;
  double acc = 0, l_ce = 0, l_fg = 0, l_bg = 0, hsic_fg = 0, hsic_bg = 0;
};

struct ProbeTerms {
  double acc = 0, l_ce = 0, l_fg = 0, l_bg = 0, hsic_fg = 0, hsic_bg = 0;
};

// Evaluates every logged quantity on the given samples with the model's own mask
// head. Loss terms average over chunks of `batch_size`; the HSIC columns use all
// samples as one batch.
ProbeTerms probe(const models::Classifier& model, const data::Dataset& ds, std::span<const std::size_t> indices,
                 const TrainConfig& config);

using EpochCallback = std::function<void(const LogRow&)>;

// One row per epoch, evaluated after the epoch; epochs = 0 yields the initial
// state as epoch 0. Non-finite loss terms abort with NumericError naming the
// epoch, batch and term values.
std::vector<LogRow> train(models::Classifier& model, const data::Dataset& ds, const TrainConfig& config,
                          const EpochCallback& on_epoch = {});

// Header: epoch,acc,l_ce,l_fg,l_bg,hsic_fg,hsic_bg
void write_log_csv(std::ostream& out, const std::vector<LogRow>& rows);

}  // namespace sib::core
