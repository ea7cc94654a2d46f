#ifndef KGPATH_CONFIG_H_
#define KGPATH_CONFIG_H_

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "kgpath/encoder.h"
#include "kgpath/eval.h"
#include "kgpath/modal_fusion.h"
#include "kgpath/objective.h"
#include "kgpath/synthetic.h"
#include "kgpath/trajectory.h"

namespace kgpath {

// Every hyperparameter of a run. Text form is one `key = value` per line;
// '#' starts a comment.
struct RunConfig {
  // encoder
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ffn_mult = 4;
  double init_scale = 0.08;
  bool separate_trunks = false;
  // training
  std::string mode = "mkg+rl";
  std::size_t batch_size = 16;
  std::size_t epochs = 100;
  double lr = 1e-3;
  double epsilon = 0.7;
  double alpha = 0.6;
  double beta = 1.2;
  double bias_b = 0.0;
  bool noise = true;
  bool literal_smoothing_sum = false;
  double p_k = 0.5;
  double p_m = 0.15;
  double eta = 0.1;
  // Share of training samples whose entity rewards use the unknown-similarity
  // value, the only value decoding can compute.
  double blind_reward_rate = 0.5;
  double r_good = 1.0;
  double r_bad = -0.5;
  double r_step = -0.1;
  bool strict_paper_signs = true;
  std::size_t max_hops = 3;
  std::size_t train_limit = 0;  // 0 keeps every training triple
  std::size_t seed = 42;
  // decoding and evaluation
  std::size_t k_beam = 64;
  bool typed_decoding = true;
  bool direct_channel = true;
  bool graph_decoding = true;  // hops follow the training graph when one is given
  bool filtered = false;
  // multimodal fusion pretraining
  std::size_t feature_width = 32;
  std::size_t fusion_epochs = 200;
  double fusion_lr = 0.5;
  std::size_t fusion_hidden = 16;
  double fusion_init_scale = 0.3;
  double null_value = 0.5;
  // synthetic generator
  std::size_t gen_entities = 50;
  std::size_t gen_relations = 5;
  std::size_t gen_clusters = 5;
  double gen_signal = 1.0;
  double gen_noise = 1.0;
  double gen_feature_fraction = 0.9;
  double gen_valid_fraction = 0.1;
  double gen_test_fraction = 0.1;

  // Throws ConfigError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  void apply_preset(const std::string& name);
  void validate() const;

  std::string to_text() const;
  static RunConfig parse(const std::string& text, const std::string& source = "<config>");
  static RunConfig load(const std::filesystem::path& file);

  AblationMode ablation() const { return parse_mode(mode); }
  EncoderConfig encoder(std::size_t vocab_size, const FusionConfig& fusion) const;
  LossConfig loss() const;
  RewardConfig reward() const;
  FusionConfig fusion() const;
  SyntheticConfig synthetic() const;
  // `graph` constrains decoding when graph_decoding is on.
  EvalOptions eval_options(const KgGraph* graph = nullptr) const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// "paper-best" and "overfit".
const std::vector<std::string>& preset_names();

}  // namespace kgpath

#endif  // KGPATH_CONFIG_H_
