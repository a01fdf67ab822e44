#pragma once

// Weakly supervised training: shuffled batches of matched pairs, summed
// matching loss, Adam with a piecewise-constant learning rate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlground/adam.hpp"
#include "mlground/container.hpp"
#include "mlground/dataset.hpp"
#include "mlground/evaluation.hpp"
#include "mlground/model.hpp"

namespace mlground {

struct TrainConfig {
  std::size_t batch = 32;
  std::size_t epochs = 20;
  double lr = 0.001;
  std::vector<std::size_t> lr_halving_epochs = {10, 15};  // 0-based epoch indices
  double gamma1 = 5.0;
  double gamma2 = 10.0;
  std::size_t common_dim = 1024;
  std::size_t grid = 18;
  double leaky_alpha = 0.25;
  double reg_value = 0.0005;
  std::uint64_t seed = 0;
  bool softmax_heatmaps = false;
  bool linear_text = false;
  bool linear_visual = false;
  LevelMode levels = LevelMode::Multi;
  bool normalize_sentence_attended = false;

  void validate() const {
    auto fail = [](auto&&... a) { throw ValueError(detail::concat("train config: ", a...)); };
    if (batch == 0 || common_dim == 0 || grid == 0) fail("batch, common_dim and grid must be positive");
    if (!(lr > 0) || !std::isfinite(lr)) fail("lr must be positive");
    if (!(gamma1 > 0) || !(gamma2 > 0)) fail("gamma1 and gamma2 must be positive");
    if (!(leaky_alpha >= 0 && leaky_alpha < 1)) fail("leaky_alpha must be in [0, 1)");
    if (!(reg_value >= 0)) fail("reg_value must be >= 0");
    for (auto e : lr_halving_epochs) {
      if (e >= epochs) fail("halving epoch ", e, " is not below epochs = ", epochs);
    }
  }

  ModelOptions model_options(std::size_t level_count) const {
    ModelOptions o;
    o.mapping.grid = grid;
    o.mapping.leaky_alpha = leaky_alpha;
    o.mapping.linear_text = linear_text;
    o.mapping.linear_visual = linear_visual;
    o.attention.gamma1 = gamma1;
    o.attention.softmax_heatmaps = softmax_heatmaps;
    o.attention.normalize_sentence_attended = normalize_sentence_attended;
    apply_level_mode(levels, level_count, o.attention);
    o.gamma2 = gamma2;
    o.reg_value = reg_value;
    return o;
  }
};

// Halves the base rate once for every halving epoch already reached.
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  double lr = cfg.lr;
  for (auto e : cfg.lr_halving_epochs) {
    if (epoch >= e) lr *= 0.5;
  }
  return lr;
}

struct StepRecord {
  std::size_t step = 0, epoch = 0;
  double lr = 0;
  LossBreakdown<double> loss;
  std::size_t batch = 0;

  nlohmann::json to_json() const {
    return {{"step", step},         {"epoch", epoch},         {"lr", lr},
            {"Lw", loss.word},      {"Ls", loss.sentence},    {"reg", loss.reg},
            {"L", loss.total},      {"L_per_pair", loss.total / double(batch)}};
  }
};

template <typename Scalar>
struct TrainState {
  ParamSet<Scalar> params;
  Adam<Scalar> optimizer;
  std::size_t epoch = 0, step = 0;
  std::vector<double> epoch_loss;  // mean batch loss per epoch
};

template <typename Scalar>
TrainState<Scalar> init_state(const Dataset& ds, const TrainConfig& cfg) {
  TrainState<Scalar> s;
  s.params = init_params<Scalar>(cfg.seed, ds.dims().mapping(cfg.common_dim));
  return s;
}

using StepSink = std::function<void(const StepRecord&)>;

// Continues training `state` until cfg.epochs epochs are complete.
template <typename Scalar>
void train(const Dataset& ds, const TrainConfig& cfg, TrainState<Scalar>& state,
           const StepSink& sink = {}) {
  cfg.validate();
  if (ds.image_count() < cfg.batch) {
    throw DatasetError(detail::concat("dataset has ", ds.image_count(),
                                      " distinct images, fewer than batch size ", cfg.batch));
  }
  const auto opts = cfg.model_options(ds.dims().visual_channels.size());
  std::vector<std::optional<Sample<Scalar>>> cache(ds.size());
  std::seed_seq ss{std::uint32_t(cfg.seed), std::uint32_t(cfg.seed >> 32), 0x5eedu};
  std::mt19937_64 rng(ss);
  // Replay the batch stream of epochs already done so resumed runs match.
  for (std::size_t e = 0; e < state.epoch; ++e) epoch_batches(ds, cfg.batch, rng);

  for (; state.epoch < cfg.epochs; ++state.epoch) {
    const double lr = lr_at(state.epoch, cfg);
    double sum = 0;
    const auto batches = epoch_batches(ds, cfg.batch, rng);
    for (const auto& batch : batches) {
      std::vector<PairInput<Scalar>> pairs;
      for (auto i : batch) {
        if (!cache[i]) cache[i] = ds.sample<Scalar>(i);
        pairs.push_back({&cache[i]->visual, &cache[i]->text});
      }
      state.params.zero_grad();
      Graph<Scalar> g;
      Binding<Scalar> bind(g, state.params);
      auto fwd = batch_forward<Scalar>(bind, pairs, opts);
      g.backward(fwd.loss.total);
      state.optimizer.step(state.params, lr);
      ++state.step;
      sum += fwd.loss.parts.total;
      if (sink) {
        const auto& p = fwd.loss.parts;
        sink({state.step, state.epoch, lr, {double(p.word), double(p.sentence), double(p.reg), double(p.total)},
              batch.size()});
      }
    }
    state.epoch_loss.push_back(sum / double(batches.size()));
  }
}

template <typename Scalar>
TrainState<Scalar> train(const Dataset& ds, const TrainConfig& cfg, const StepSink& sink = {}) {
  auto state = init_state<Scalar>(ds, cfg);
  train(ds, cfg, state, sink);
  return state;
}

template <typename Scalar>
void save_checkpoint(const ParamSet<Scalar>& params, const std::filesystem::path& path) {
  TensorContainer c;
  for (const auto& name : params.names()) c.add(name, params.at(name).value);
  c.write(path);
}

// Loads mapping parameters in the requested precision. Weight matrices are
// the only regularized entries.
template <typename Scalar>
ParamSet<Scalar> load_checkpoint(const std::filesystem::path& path) {
  ContainerReader r(path);
  ParamSet<Scalar> params;
  for (const auto& e : r.entries()) {
    const bool weight = e.name.size() > 2 && e.name.ends_with(".w");
    params.add(e.name, r.read_as<Scalar>(e.name), weight);
  }
  const auto expected = init_params<Scalar>(0, infer_dims(params));
  for (const auto& name : expected.names()) {
    if (!params.contains(name)) {
      throw ValueError(detail::concat("checkpoint '", path.string(), "' lacks '", name, "'"));
    }
    if (params.at(name).value.shape() != expected.at(name).value.shape()) {
      throw ShapeError(detail::concat("checkpoint '", path.string(), "': '", name, "' has shape ",
                                      detail::shape_str(params.at(name).value.shape()), ", expected ",
                                      detail::shape_str(expected.at(name).value.shape())));
    }
  }
  if (params.size() != expected.size()) {
    throw ValueError(detail::concat("checkpoint '", path.string(), "' has unexpected entries"));
  }
  return params;
}

struct AblationFlags {
  bool softmax_heatmaps = false;
  bool linear_text = false;
  bool linear_visual = false;
  LevelMode levels = LevelMode::Multi;

  std::string name() const {
    return detail::concat("softmax=", softmax_heatmaps ? "on" : "off",
                          " linear_text=", linear_text ? "on" : "off",
                          " linear_visual=", linear_visual ? "on" : "off",
                          " levels=", level_mode_name(levels));
  }

  void apply(TrainConfig& cfg) const {
    cfg.softmax_heatmaps = softmax_heatmaps;
    cfg.linear_text = linear_text;
    cfg.linear_visual = linear_visual;
    cfg.levels = levels;
  }
};

// Full factorial grid over the named axes: softmax, linear_text,
// linear_visual, levels. Everything else keeps the base flags.
inline std::vector<AblationFlags> ablation_grid(const std::vector<std::string>& axes,
                                                const AblationFlags& base = {}) {
  std::vector<AblationFlags> grid{base};
  for (const auto& axis : axes) {
    std::vector<AblationFlags> next;
    for (const auto& f : grid) {
      if (axis == "levels") {
        for (auto m : {LevelMode::Multi, LevelMode::Middle, LevelMode::Last}) {
          next.push_back(f);
          next.back().levels = m;
        }
        continue;
      }
      for (bool on : {false, true}) {
        next.push_back(f);
        if (axis == "softmax") next.back().softmax_heatmaps = on;
        else if (axis == "linear_text") next.back().linear_text = on;
        else if (axis == "linear_visual") next.back().linear_visual = on;
        else throw ValueError(detail::concat("unknown ablation axis '", axis, "'"));
      }
    }
    grid = std::move(next);
  }
  return grid;
}

struct AblationRow {
  AblationFlags flags;
  double pointing_accuracy = 0;
  double attention_correctness = 0;
  double final_loss = 0;

  nlohmann::json to_json() const {
    return {{"config", flags.name()},
            {"softmax", flags.softmax_heatmaps},
            {"linear_text", flags.linear_text},
            {"linear_visual", flags.linear_visual},
            {"levels", level_mode_name(flags.levels)},
            {"pointing_accuracy", pointing_accuracy},
            {"attention_correctness", attention_correctness},
            {"final_loss", final_loss}};
  }
};

// Trains every configuration for `epochs` epochs at a constant learning
// rate and evaluates it. Rows are sorted by accuracy, best first.
template <typename Scalar>
std::vector<AblationRow> run_ablation(const Dataset& train_ds, const Dataset& eval_ds,
                                      const TrainConfig& base, const std::vector<AblationFlags>& grid,
                                      std::size_t epochs = 10, EvalMode mode = EvalMode::Word) {
  std::vector<AblationRow> rows;
  for (const auto& flags : grid) {
    TrainConfig cfg = base;
    flags.apply(cfg);
    cfg.epochs = epochs;
    cfg.lr_halving_epochs.clear();
    auto state = train<Scalar>(train_ds, cfg);
    auto report = evaluate(eval_ds, state.params, cfg.model_options(eval_ds.dims().visual_channels.size()), mode);
    rows.push_back({flags, report.pointing_accuracy, report.attention_correctness,
                    state.epoch_loss.empty() ? 0.0 : state.epoch_loss.back()});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const AblationRow& a, const AblationRow& b) {
    return a.pointing_accuracy > b.pointing_accuracy;
  });
  return rows;
}

}  // namespace mlground
