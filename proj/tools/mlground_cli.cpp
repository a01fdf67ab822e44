// Command-line driver: generate planted data, train, evaluate, ground single
// queries, run ablation grids and inspect containers.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlground/config.hpp"
#include "mlground/container.hpp"
#include "mlground/dataset.hpp"
#include "mlground/evaluation.hpp"
#include "mlground/synthetic.hpp"
#include "mlground/trainer.hpp"

namespace fs = std::filesystem;
using namespace mlground;

namespace {

struct CommonArgs {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  bool softmax = false;
  std::string levels;
  bool linear_text = false;
  bool linear_visual = false;
  bool normalize_sentence = false;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "key = value configuration file");
  cmd->add_option("--out", a.out, "output directory")->capture_default_str();
  cmd->add_option("--seed", a.seed, "global seed");
  cmd->add_option("--set", a.sets, "override, key=value (repeatable)");
  cmd->add_flag("--softmax-ablation", a.softmax, "softmax heatmaps instead of ReLU");
  cmd->add_option("--levels", a.levels, "level mode")->check(CLI::IsMember({"multi", "middle", "last"}));
  cmd->add_flag("--linear-text", a.linear_text, "linear text mappings");
  cmd->add_flag("--linear-visual", a.linear_visual, "linear visual mappings");
  cmd->add_flag("--normalize-sentence-attended", a.normalize_sentence,
                "unit-normalize the sentence-path attended feature");
}

// Defaults, then the base file, the config file, --set overrides and finally
// the dedicated flags.
RunConfig resolve(const CommonArgs& a, const std::optional<fs::path>& base = std::nullopt) {
  RunConfig c;
  if (!a.config.empty()) {
    c.apply_file(a.config);
  } else if (base && fs::exists(*base)) {
    c.apply_file(*base);
  }
  for (const auto& s : a.sets) c.apply_override(s);
  if (a.seed) c.seed = *a.seed;
  if (a.softmax) c.train.softmax_heatmaps = true;
  if (!a.levels.empty()) c.train.levels = parse_level_mode(a.levels);
  if (a.linear_text) c.train.linear_text = true;
  if (a.linear_visual) c.train.linear_visual = true;
  if (a.normalize_sentence) c.train.normalize_sentence_attended = true;
  return c;
}

fs::path prepare_out(const CommonArgs& a, const RunConfig& c) {
  const fs::path out(a.out);
  fs::create_directories(out);
  c.write_resolved(out / "config.resolved");
  return out;
}

// A training run's snapshot next to its checkpoint.
fs::path run_config_of(const std::string& checkpoint) {
  return fs::path(checkpoint).parent_path() / "config.resolved";
}

void write_lines(const fs::path& path, const std::vector<nlohmann::json>& lines) {
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(detail::concat("cannot write '", tmp.string(), "'"));
    for (const auto& l : lines) out << l.dump() << '\n';
    if (!out) throw IoError(detail::concat("cannot write '", tmp.string(), "'"));
  }
  fs::rename(tmp, path);
}

std::vector<std::size_t> parse_tokens(const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& item : config_detail::split_list(text)) {
    out.push_back(config_detail::parse_size("--tokens", item));
  }
  if (out.empty()) throw ValueError("--tokens needs at least one token index");
  return out;
}

int gen_synthetic(const CommonArgs& a) {
  auto c = resolve(a);
  const auto out = prepare_out(a, c);
  auto res = generate_synthetic(c.synthetic_spec(), out);
  std::printf("wrote %zu samples to %s\n", res.records.size(), res.index.string().c_str());
  return 0;
}

int train_cmd(const CommonArgs& a, const std::string& data) {
  auto c = resolve(a);
  const auto cfg = c.train_config();
  cfg.validate();
  auto ds = Dataset::load(data);
  const auto out = prepare_out(a, c);
  auto metrics = out / "metrics.jsonl";
  auto tmp = metrics;
  tmp += ".partial";
  std::ofstream log(tmp, std::ios::binary | std::ios::trunc);
  if (!log) throw IoError(detail::concat("cannot write '", tmp.string(), "'"));
  auto state = train<float>(ds, cfg, [&](const StepRecord& r) { log << r.to_json().dump() << '\n'; });
  for (std::size_t e = 0; e < state.epoch_loss.size(); ++e) {
    log << nlohmann::json{{"type", "epoch"}, {"epoch", e}, {"mean_loss", state.epoch_loss[e]}}.dump() << '\n';
  }
  log.close();
  if (!log) throw IoError(detail::concat("cannot write '", tmp.string(), "'"));
  fs::rename(tmp, metrics);
  save_checkpoint(state.params, out / "checkpoint.gtf");
  std::printf("trained %zu epochs, %zu steps; final epoch loss %.6g\n", state.epoch_loss.size(), state.step,
              state.epoch_loss.empty() ? 0.0 : state.epoch_loss.back());
  return 0;
}

int eval_cmd(const CommonArgs& a, const std::string& data, const std::string& checkpoint) {
  auto c = resolve(a, run_config_of(checkpoint));
  auto ds = Dataset::load(data);
  auto params = load_checkpoint<float>(checkpoint);
  const auto out = prepare_out(a, c);
  const auto opts = c.train_config().model_options(ds.dims().visual_channels.size());
  auto report = evaluate(ds, params, opts, c.eval_mode);
  write_report(report, out / "report.jsonl");
  std::printf("pointing accuracy %.4f (%zu/%zu), attention correctness %.4f\n", report.pointing_accuracy,
              report.hits, report.hits + report.misses, report.attention_correctness);
  return 0;
}

int ground_cmd(const CommonArgs& a, const std::string& data, const std::string& checkpoint,
               const std::string& sample, std::optional<std::size_t> query, const std::string& tokens) {
  auto c = resolve(a, run_config_of(checkpoint));
  auto ds = Dataset::load(data);
  auto params = load_checkpoint<float>(checkpoint);
  const std::size_t index = ds.find(sample);
  const auto& rec = ds.record(index);
  Query q;
  if (query) {
    if (*query >= rec.queries.size()) {
      throw ValueError(detail::concat("sample '", sample, "' has ", rec.queries.size(), " queries, no query ", *query));
    }
    q = rec.queries[*query];
  } else if (!tokens.empty()) {
    q.tokens = parse_tokens(tokens);
    for (auto t : q.tokens) {
      if (t >= rec.tokens.size()) {
        throw ValueError(detail::concat("sample '", sample, "' has ", rec.tokens.size(), " tokens, no token ", t));
      }
    }
  } else {
    throw ValueError("ground needs --query or --tokens");
  }
  const auto opts = c.train_config().model_options(ds.dims().visual_channels.size());
  auto s = ds.sample<float>(index);
  auto g = ground(params, s.visual, s.text, opts);
  auto [heat, level] = query_heatmap(g, q, c.eval_mode);
  auto map = upsample_heatmap<double>(heat, g.grid, rec.image_width, rec.image_height);
  nlohmann::json words = nlohmann::json::array();
  for (auto t : q.tokens) words.push_back(rec.tokens[t]);
  const nlohmann::json meta = {{"sample", rec.id},   {"tokens", q.tokens}, {"words", words},
                               {"mode", eval_mode_name(c.eval_mode)}, {"level", level},
                               {"grid", g.grid}};
  const auto out = prepare_out(a, c);
  export_heatmap(map, out / "heatmap.pgm", HeatmapFormat::Pgm);
  export_heatmap(map, out / "heatmap.json", HeatmapFormat::Json, meta);
  const auto p = pointing_hit(map, std::span<const Box>(q.boxes));
  std::printf("point (%zu, %zu) at level %zu\n", p.x, p.y, level);
  return 0;
}

int ablate_cmd(const CommonArgs& a, const std::string& data, const std::string& eval_data) {
  auto c = resolve(a);
  auto train_ds = Dataset::load(data);
  auto eval_ds = Dataset::load(eval_data.empty() ? data : eval_data);
  const auto out = prepare_out(a, c);
  const auto base = c.train_config();
  AblationFlags flags{base.softmax_heatmaps, base.linear_text, base.linear_visual, base.levels};
  auto rows = run_ablation<float>(train_ds, eval_ds, base, ablation_grid(c.ablate_axes, flags), c.ablate_epochs,
                                  c.eval_mode);
  std::vector<nlohmann::json> lines;
  for (const auto& r : rows) {
    lines.push_back(r.to_json());
    std::printf("%-60s accuracy %.4f correctness %.4f\n", r.flags.name().c_str(), r.pointing_accuracy,
                r.attention_correctness);
  }
  write_lines(out / "ablation.jsonl", lines);
  return 0;
}

void inspect_container(const fs::path& path) {
  ContainerReader r(path);
  std::printf("%s: GTF1 container, %zu entries\n", path.string().c_str(), r.entries().size());
  for (const auto& e : r.entries()) {
    std::printf("  %-28s %s %-16s %llu bytes\n", e.name.c_str(), dtype_name(e.dtype),
                detail::shape_str(e.shape).c_str(), static_cast<unsigned long long>(e.nbytes));
  }
  if (r.contains("word.comb")) {
    auto params = load_checkpoint<double>(path);
    const auto dims = infer_dims(params);
    std::printf("checkpoint: %zu levels, common dim %zu, word %zux%zu, sentence %zux%zu\n", dims.levels(),
                dims.common_dim, dims.word_layers, dims.word_width, dims.sentence_items, dims.sentence_width);
  }
}

void inspect_dataset(const fs::path& path) {
  auto ds = Dataset::load(path);
  std::size_t queries = 0, tokens = 0;
  for (const auto& r : ds.records()) {
    queries += r.queries.size();
    tokens += r.tokens.size();
  }
  const auto& d = ds.dims();
  std::printf("%s: %zu samples, %zu images, %zu queries, %.2f tokens per caption\n", path.string().c_str(),
              ds.size(), ds.image_count(), queries, ds.size() ? double(tokens) / double(ds.size()) : 0.0);
  std::printf("visual levels:");
  for (auto ch : d.visual_channels) std::printf(" %zu", ch);
  std::printf(" channels; words %zux%zu; sentence %zux%zu\n", d.word_layers, d.word_width, d.sentence_items,
              d.sentence_width);
}

int inspect_cmd(const std::string& path) {
  if (fs::path(path).extension() == ".jsonl") {
    inspect_dataset(path);
  } else {
    inspect_container(path);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised phrase grounding in a multi-level common space"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string data, eval_data, checkpoint, sample, tokens, path;
  std::optional<std::size_t> query;

  auto* gen = app.add_subcommand("gen-synthetic", "write a planted-correspondence dataset");
  add_common(gen, common);

  auto* tr = app.add_subcommand("train", "train the mappings");
  add_common(tr, common);
  tr->add_option("--data", data, "dataset index (index.jsonl)")->required();

  auto* ev = app.add_subcommand("eval", "pointing game and attention correctness");
  add_common(ev, common);
  ev->add_option("--data", data, "dataset index")->required();
  ev->add_option("--checkpoint", checkpoint, "trained parameters")->required();

  auto* gr = app.add_subcommand("ground", "export the heatmap of one query");
  add_common(gr, common);
  gr->add_option("--data", data, "dataset index")->required();
  gr->add_option("--checkpoint", checkpoint, "trained parameters")->required();
  gr->add_option("--sample", sample, "sample id")->required();
  auto* q_opt = gr->add_option("--query", query, "query index within the sample");
  gr->add_option("--tokens", tokens, "comma-separated caption token indices")->excludes(q_opt);

  auto* ab = app.add_subcommand("ablate", "train and evaluate an ablation grid");
  add_common(ab, common);
  ab->add_option("--data", data, "training dataset index")->required();
  ab->add_option("--eval-data", eval_data, "evaluation dataset index (defaults to --data)");

  auto* in = app.add_subcommand("inspect", "summarize a container, checkpoint or dataset index");
  in->add_option("path", path, "container (.gtf) or index (.jsonl)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return gen_synthetic(common);
    if (*tr) return train_cmd(common, data);
    if (*ev) return eval_cmd(common, data, checkpoint);
    if (*gr) return ground_cmd(common, data, checkpoint, sample, query, tokens);
    if (*ab) return ablate_cmd(common, data, eval_data);
    if (*in) return inspect_cmd(path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "mlground: error: %s\n", e.what());
    return 1;
  }
  return 1;
}
