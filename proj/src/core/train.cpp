#include "sib/core/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "sib/autodiff/ops.hpp"
#include "sib/errors.hpp"

namespace sib::core {

using ad::DiffValue;
using ad::Tensor;

TrainConfig baseline_of(TrainConfig cfg) {
  cfg.objective.gamma = 0.0;
  cfg.objective.use_bg = false;
  return cfg;
}

ProbeTerms probe(const models::Classifier& model, const data::Dataset& ds, std::span<const std::size_t> indices,
                 const TrainConfig& config) {
  if (indices.size() < 2) throw ContractError("probe needs at least 2 samples");
  ProbeTerms out;
  // Inactive objective: R comes from a non-retained VJP and all terms are plain values.
  SibConfig objective = config.objective;
  objective.gamma = 0.0;
  objective.use_bg = false;
  const models::BoundParams params = models::bind_constant(model);
  const std::size_t bs = std::max<std::size_t>(config.batch_size, 2);

  // Chunk boundaries; a 1-sample tail joins the previous chunk.
  std::vector<std::size_t> bounds;
  for (std::size_t start = 0; start < indices.size(); start += bs) bounds.push_back(start);
  if (indices.size() - bounds.back() == 1 && bounds.size() > 1) bounds.pop_back();
  bounds.push_back(indices.size());

  std::vector<Tensor> r_parts, m_parts;
  double chunks = 0, hits = 0;
  for (std::size_t c = 0; c + 1 < bounds.size(); ++c) {
    const data::Batch b = data::make_batch(ds, indices.subspan(bounds[c], bounds[c + 1] - bounds[c]));
    ad::Graph g;
    const SibLossTerms t = sib_loss(model, b.x, b.labels, objective, params, g);
    out.l_ce += t.l_ce.value().item();
    out.l_fg += t.l_fg.value().item();
    out.l_bg += t.l_bg.value().item();
    chunks += 1;
    const auto pred = models::predict(t.decoding.forward.logits.value());
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == b.labels[i] ? 1 : 0;
    r_parts.push_back(t.decomposition.R.value());
    m_parts.push_back(t.decomposition.M.value());
  }
  out.l_ce /= chunks;
  out.l_fg /= chunks;
  out.l_bg /= chunks;
  out.acc = hits / static_cast<double>(indices.size());

  auto cat = [](const std::vector<Tensor>& parts) {
    std::vector<DiffValue> v;
    for (const auto& p : parts) v.push_back(ad::constant(p));
    return ad::concat(v, 0);
  };
  const data::Batch all = data::make_batch(ds, indices);
  const MaskedDecomposition d = split(cat(r_parts), ad::constant(all.x), cat(m_parts));
  out.hsic_fg = hsic_scaled(flatten_rows(d.R_fg), flatten_rows(d.X_fg), config.objective.hsic).value().item();
  out.hsic_bg = hsic_scaled(flatten_rows(d.R_bg), flatten_rows(d.X_bg), config.objective.hsic).value().item();
  return out;
}

namespace {

LogRow row_of(std::size_t epoch, const ProbeTerms& p) {
  return {.epoch = epoch, .acc = p.acc, .l_ce = p.l_ce, .l_fg = p.l_fg, .l_bg = p.l_bg,
          .hsic_fg = p.hsic_fg, .hsic_bg = p.hsic_bg};
}

std::string snapshot(std::size_t epoch, std::size_t batch, const SibLossTerms& t) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "non-finite loss at epoch %zu batch %zu: l_ce=%g l_fg=%g l_bg=%g total=%g", epoch,
                batch, t.l_ce.value().item(), t.l_fg.value().item(), t.l_bg.value().item(), t.total.value().item());
  return buf;
}

}  // namespace

std::vector<LogRow> train(models::Classifier& model, const data::Dataset& ds, const TrainConfig& config,
                          const EpochCallback& on_epoch) {
  if (ds.size() < 2) throw ContractError("training needs at least 2 samples");
  if (config.batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (!(config.lr >= 0.0) || !(config.momentum >= 0.0 && config.momentum < 1.0)) {
    throw ConfigError("lr must be >= 0 and momentum in [0, 1)");
  }
  std::vector<std::size_t> probe_idx(std::min(std::max<std::size_t>(config.probe_size, 2), ds.size()));
  std::iota(probe_idx.begin(), probe_idx.end(), std::size_t{0});

  std::vector<LogRow> log;
  auto emit = [&](std::size_t epoch) {
    log.push_back(row_of(epoch, probe(model, ds, probe_idx, config)));
    if (on_epoch) on_epoch(log.back());
  };
  if (config.epochs == 0) {
    emit(0);
    return log;
  }

  models::OptimState state{.lr = config.lr, .momentum = config.momentum, .velocity = {}};
  const auto names = model.param_names();
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto bs = data::batches(ds, config.batch_size, config.seed, epoch);
    for (std::size_t bi = 0; bi < bs.size(); ++bi) {
      ad::Graph g;
      const models::BoundParams params = models::bind(model, g);
      const SibLossTerms t = sib_loss(model, bs[bi].x, bs[bi].labels, config.objective, params, g);
      for (const DiffValue* v : {&t.l_ce, &t.l_fg, &t.l_bg, &t.total}) {
        if (!std::isfinite(v->value().item())) throw NumericError(snapshot(epoch, bi, t));
      }
      std::vector<DiffValue> wrt;
      wrt.reserve(names.size());
      for (const auto& k : names) wrt.push_back(params.at(k));
      const ad::Gradients grads = ad::backward(t.total, wrt);
      models::ParamMap gm;
      for (std::size_t i = 0; i < names.size(); ++i) {
        const Tensor& gv = grads[i].value();
        if (!gv.all_finite()) throw NumericError(snapshot(epoch, bi, t) + " (gradient of " + names[i] + ")");
        gm.emplace(names[i], gv);
      }
      models::sgd_step(model, gm, state);
    }
    emit(epoch);
  }
  return log;
}

void write_log_csv(std::ostream& out, const std::vector<LogRow>& rows) {
  out << "epoch,acc,l_ce,l_fg,l_bg,hsic_fg,hsic_bg\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.acc, r.l_ce, r.l_fg, r.l_bg,
                  r.hsic_fg, r.hsic_bg);
    out << buf;
  }
}

}  // namespace sib::core
