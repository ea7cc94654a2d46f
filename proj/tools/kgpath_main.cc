// kgpath: command-line front end for generating data, training and
// evaluating the path-generating link predictor.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kgpath/checkpoint.h"
#include "kgpath/config.h"
#include "kgpath/errors.h"
#include "kgpath/eval.h"
#include "kgpath/logging.h"
#include "kgpath/pipeline.h"
#include "kgpath/synthetic.h"

namespace {

using namespace kgpath;

struct CommonOptions {
  std::string config_file;
  std::string preset;
  std::optional<std::size_t> seed;
  std::string mode;
  std::vector<std::string> overrides;
  std::string out;
  std::string data = ".";
  bool verbose = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_file, "key = value configuration file");
  cmd->add_option("--preset", o.preset, "paper-best or overfit");
  cmd->add_option("--seed", o.seed, "random seed");
  cmd->add_option("--mode", o.mode, "ablation mode")
      ->check(CLI::IsMember({"no-img", "mkg", "rl", "mkg+rl"}));
  cmd->add_option("--set", o.overrides, "override a config key (key=value)");
  cmd->add_flag("-v,--verbose", o.verbose, "log progress to stderr");
}

void apply_overrides(RunConfig& cfg, const CommonOptions& o) {
  for (const std::string& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) cfg.seed = *o.seed;
  if (!o.mode.empty()) cfg.mode = o.mode;
}

RunConfig resolve_config(const CommonOptions& o) {
  RunConfig cfg;
  if (!o.preset.empty()) cfg.apply_preset(o.preset);
  if (!o.config_file.empty()) {
    RunConfig file = RunConfig::load(o.config_file);
    if (!o.preset.empty()) {
      // Preset values survive unless the file sets the key explicitly.
      const RunConfig defaults;
      for (const auto& key : RunConfig::keys())
        if (file.get(key) != defaults.get(key)) cfg.set(key, file.get(key));
    } else {
      cfg = file;
    }
  }
  apply_overrides(cfg, o);
  cfg.validate();
  return cfg;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

int cmd_gen(const CommonOptions& o) {
  const RunConfig cfg = resolve_config(o);
  const std::string dir = o.out.empty() ? "data" : o.out;
  const SyntheticKg kg = generate_synthetic(cfg.synthetic());
  write_synthetic(kg, dir);
  std::printf("wrote %zu train, %zu valid, %zu test triples and %zu feature sets to %s\n",
              kg.train.size(), kg.valid.size(), kg.test.size(), kg.features.size(), dir.c_str());
  return 0;
}

Dataset load(const CommonOptions& o, const RunConfig& cfg) {
  return load_dataset(o.data, cfg.feature_width);
}

int cmd_pretrain(const CommonOptions& o) {
  const RunConfig cfg = resolve_config(o);
  const Dataset data = load(o, cfg);
  const auto forward = forward_training(data, cfg);
  const TripleSet augmented = augment_inverse({forward, false}, data.vocab);
  const FusionStage stage = run_fusion(data, augmented.triples, cfg);
  const std::string path = o.out.empty() ? "fused_states.tsv" : o.out;
  std::ofstream out = open_out(path);
  const Tensor& table = stage.states.table();
  for (std::size_t e = 0; e < table.rows(); ++e) {
    out << data.vocab.entity_name(static_cast<EntityId>(e)) << '\t';
    for (std::size_t c = 0; c < table.cols(); ++c) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", table.at(e, c));
      out << (c ? "," : "") << buf;
    }
    out << '\n';
  }
  std::printf("reconstruction loss %.6f -> %.6f over %zu epochs; states written to %s\n",
              stage.report.initial_loss, stage.report.final_loss, stage.report.loss_curve.size(),
              path.c_str());
  return 0;
}

int cmd_mine(const CommonOptions& o) {
  const RunConfig cfg = resolve_config(o);
  const Dataset data = load(o, cfg);
  const TripleSet augmented = augment_inverse({forward_training(data, cfg), false}, data.vocab);
  const KgGraph graph = training_graph(data);
  const auto mined = mine_supervision(graph, data.vocab, augmented.triples, cfg.max_hops);
  const std::string path = o.out.empty() ? "paths.txt" : o.out;
  write_path_cache(path, data.vocab, mined);
  std::size_t corrective = 0;
  for (const auto& m : mined) corrective += m.path.corrective;
  std::printf("mined %zu queries (%zu corrective) into %s\n", mined.size(), corrective, path.c_str());
  return 0;
}

int cmd_build_traj(const CommonOptions& o) {
  const RunConfig cfg = resolve_config(o);
  const Dataset data = load(o, cfg);
  const TripleSet augmented = augment_inverse({forward_training(data, cfg), false}, data.vocab);
  FusedStateTable states;
  if (mode_flags(cfg.ablation()).modal) states = run_fusion(data, augmented.triples, cfg).states;
  const KgGraph graph = training_graph(data);
  const auto mined = mine_supervision(graph, data.vocab, augmented.triples, cfg.max_hops);
  const auto trajectories = build_trajectories(mined, cfg, data.vocab, states, data.features);
  const std::string path = o.out.empty() ? "trajectories.bin" : o.out;
  write_trajectory_cache(path, trajectories, states);
  std::printf("built %zu trajectories into %s\n", trajectories.size(), path.c_str());
  return 0;
}

int cmd_train(const CommonOptions& o) {
  const RunConfig cfg = resolve_config(o);
  const Dataset data = load(o, cfg);
  TrainSummary summary;
  const TrainedModel model = train_model(data, cfg, &summary, [](const EpochLog& log, const TrainedModel&) {
    std::printf("%s\n", format_epoch_log(log).c_str());
    std::fflush(stdout);
    return true;
  });
  const std::string path = o.out.empty() ? "model.ckpt" : o.out;
  save_checkpoint(path, model);
  std::printf("trained on %zu queries (%zu corrective); checkpoint %s\n", summary.queries,
              summary.corrective, path.c_str());
  return 0;
}

TrainedModel load_model(const std::string& checkpoint, const CommonOptions& o) {
  TrainedModel model = load_checkpoint(checkpoint);
  if (!o.config_file.empty()) throw ConfigError("--config is not used with a checkpoint; use --set");
  apply_overrides(model.config, o);
  model.config.validate();
  return model;
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint, const std::string& split) {
  const TrainedModel model = load_model(checkpoint, o);
  const Dataset data = load(o, model.config);
  require_same_vocabulary(model, data.vocab);
  const std::vector<Triple>* queries = nullptr;
  if (split == "test") queries = &data.test.triples;
  else if (split == "valid") queries = &data.valid.triples;
  else queries = &data.train.triples;
  std::vector<Triple> known = data.train.triples;
  known.insert(known.end(), data.valid.triples.begin(), data.valid.triples.end());
  known.insert(known.end(), data.test.triples.begin(), data.test.triples.end());
  const KgGraph graph = training_graph(data);
  const MetricsReport report = evaluate_model(model, *queries, known, &graph);
  std::cout << format_report_table(report, model.vocab);
  if (!o.out.empty()) {
    std::ofstream out = open_out(o.out);
    write_report_jsonl(out, report, model.vocab);
  }
  return 0;
}

std::string suggestion_list(const std::vector<std::string>& names) {
  std::string s;
  for (const auto& n : names) s += (s.empty() ? "" : ", ") + n;
  return s;
}

int cmd_explain(const CommonOptions& o, const std::string& checkpoint, const std::string& head,
                const std::string& relation, const std::string& graph_dir) {
  const TrainedModel model = load_model(checkpoint, o);
  const auto h = model.vocab.find_entity(head);
  if (!h) {
    throw LookupError("unknown entity '" + head + "'; did you mean: " +
                      suggestion_list(model.vocab.suggest_entities(head)));
  }
  const auto r = model.vocab.find_relation(relation);
  if (!r) {
    throw LookupError("unknown relation '" + relation + "'; did you mean: " +
                      suggestion_list(model.vocab.suggest_relations(relation)));
  }
  std::optional<KgGraph> graph;
  if (!graph_dir.empty()) {
    const Dataset data = load_dataset(graph_dir, model.config.feature_width);
    require_same_vocabulary(model, data.vocab);
    graph = training_graph(data);
  }
  ModelScorer scorer(model);
  const Explanation ex =
      explain(scorer, model.vocab, *h, *r, model.config.eval_options(graph ? &*graph : nullptr).decode);
  std::cout << ex.text << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kgpath: multimodal knowledge-graph link prediction by path generation"};
  app.require_subcommand(1);
  CommonOptions o;
  std::string checkpoint, split = "test", head, relation, graph_dir;

  auto* gen = app.add_subcommand("gen", "write a seeded synthetic multimodal KG");
  add_common(gen, o);
  gen->add_option("--out", o.out, "output directory");

  auto* pretrain = app.add_subcommand("pretrain", "pretrain modal fusion, write fused states");
  add_common(pretrain, o);
  pretrain->add_option("--data", o.data, "dataset directory");
  pretrain->add_option("--out", o.out, "fused state file");

  auto* mine = app.add_subcommand("mine", "mine supervision paths");
  add_common(mine, o);
  mine->add_option("--data", o.data, "dataset directory");
  mine->add_option("--out", o.out, "path cache file");

  auto* traj = app.add_subcommand("build-traj", "build return-to-go trajectories");
  add_common(traj, o);
  traj->add_option("--data", o.data, "dataset directory");
  traj->add_option("--out", o.out, "trajectory cache file");

  auto* train = app.add_subcommand("train", "train and write a checkpoint");
  add_common(train, o);
  train->add_option("--data", o.data, "dataset directory");
  train->add_option("--out", o.out, "checkpoint file");

  auto* eval = app.add_subcommand("eval", "rank tails and report MRR / Hits@n");
  add_common(eval, o);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--data", o.data, "dataset directory");
  eval->add_option("--split", split, "test, valid or train")
      ->check(CLI::IsMember({"test", "valid", "train"}));
  eval->add_option("--out", o.out, "JSONL report file");

  auto* expl = app.add_subcommand("explain", "print the decoded reasoning path of a query");
  add_common(expl, o);
  expl->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  expl->add_option("--head", head, "head entity")->required();
  expl->add_option("--relation", relation, "relation")->required();
  expl->add_option("--data", graph_dir, "dataset directory; decoded hops then follow its training graph");

  CLI11_PARSE(app, argc, argv);
  if (o.verbose) log::threshold() = log::Level::kInfo;

  try {
    if (gen->parsed()) return cmd_gen(o);
    if (pretrain->parsed()) return cmd_pretrain(o);
    if (mine->parsed()) return cmd_mine(o);
    if (traj->parsed()) return cmd_build_traj(o);
    if (train->parsed()) return cmd_train(o);
    if (eval->parsed()) return cmd_eval(o, checkpoint, split);
    if (expl->parsed()) return cmd_explain(o, checkpoint, head, relation, graph_dir);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
