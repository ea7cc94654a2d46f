#ifndef KGPATH_ENCODER_H_
#define KGPATH_ENCODER_H_

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kgpath/autograd.h"
#include "kgpath/optim.h"
#include "kgpath/path_miner.h"
#include "kgpath/trajectory.h"

namespace kgpath {

// Ablation axes: multimodal features with loss modulation (mkg) and
// return-to-go conditioning with the reward-related masks (rl).
enum class AblationMode { kNoImg, kMkg, kRl, kMkgRl };

struct ModeFlags {
  bool modal = false;         // fused state, image / OCR streams, fig and ocr heads
  bool rtg = false;           // return-to-go stream
  bool dropout_mask = false;  // mechanism II
  bool history_mask = false;  // mechanism III
  bool modulation = false;
};

ModeFlags mode_flags(AblationMode mode);
AblationMode parse_mode(const std::string& name);
std::string mode_name(AblationMode mode);

enum class Stream { kRtg = 0, kQuery = 1, kImage = 2, kOcr = 3, kAction = 4 };
inline constexpr std::size_t kNumStreams = 5;
const char* stream_tag(Stream s);

struct EncoderConfig {
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ffn_mult = 4;
  std::size_t vocab_size = 0;
  std::size_t structure_dim = 3;
  std::size_t image_dim = 8;
  std::size_t ocr_dim = 3;
  double init_scale = 0.08;
  double bias_b = 0.0;
  bool separate_trunks = false;
  AblationMode mode = AblationMode::kMkgRl;
  std::uint64_t seed = 42;

  void validate() const;
};

// Inputs for a batch of trajectories; rows are trajectory-major.
struct EncoderBatch {
  std::size_t size = 0;
  std::vector<double> rtg;             // size * horizon
  std::vector<std::int64_t> query;     // size * 3: BOS, head token, relation token
  std::vector<double> structure;       // size * structure_dim
  std::vector<double> image;           // size * image_dim
  std::vector<double> ocr;             // size * ocr_dim
  std::vector<std::int64_t> actions;   // size * horizon: BOS, a1, ..., a6 after masking
};

// Teacher-forced inputs: position 0 is BOS, position n holds a_n.
std::array<TokenId, kHorizon> shifted_actions(const ActionSlots& actions);

// `inputs` may be null (taken from each trajectory's actions, unmasked).
EncoderBatch make_batch(const std::vector<const Trajectory*>& trajectories,
                        const std::vector<std::array<TokenId, kHorizon>>* inputs = nullptr);

// Final hidden states of one trunk. Each present stream is a
// (size * horizon) x width matrix with rows b * horizon + t.
struct StreamStates {
  std::array<ad::Var, kNumStreams> streams;
  std::size_t size = 0;
};

struct HeadLogits {
  ad::Var concat;  // (size * horizon) x vocab
  ad::Var fig;     // null unless the mode is multimodal
  ad::Var ocr;
};

// Return-conditioned fusion encoder. Context streams (return-to-go, query,
// image, OCR) attend to each other under a timestep-causal mask; the action
// stream attends only to itself. Three heads read the final states.
class SequenceModel {
 public:
  explicit SequenceModel(EncoderConfig config);

  const EncoderConfig& config() const { return config_; }
  const ModeFlags& flags() const { return flags_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  std::size_t trunk_count() const { return trunks_.size(); }
  // Context streams present in trunk `i` (action stream excluded).
  const std::vector<Stream>& context_streams(std::size_t trunk) const;

  // sigmoid(LN(x W + b)) for a stream of trunk `trunk`; rows are tokens.
  ad::Var project(std::size_t trunk, Stream s, const ad::Var& raw) const;
  // Raw (pre-projection) input rows of a stream.
  ad::Var raw_stream(Stream s, const EncoderBatch& batch) const;
  // Projection plus positional embedding for every stream of a trunk.
  std::array<ad::Var, kNumStreams> embed(std::size_t trunk, const EncoderBatch& batch) const;

  // One pre-norm block over a group laid out stream-major, rows
  // (s * size + b) * horizon + t.
  ad::Var block(std::size_t trunk, std::size_t layer, const std::vector<Stream>& group,
                const ad::Var& x, std::size_t size, Tensor* weights_out = nullptr) const;

  StreamStates encode_context(std::size_t trunk, const EncoderBatch& batch) const;
  ad::Var encode_actions(std::size_t trunk, const EncoderBatch& batch) const;

  // Heads over aligned rows: `context[t]` and `actions[t]` hold states for
  // the same rows.
  HeadLogits heads(const std::vector<StreamStates>& context,
                   const std::vector<ad::Var>& actions) const;

  HeadLogits forward(const EncoderBatch& batch) const;

  // Names of the parameters of the image (fig) and OCR branches, the sets
  // scaled by gradient modulation.
  std::vector<std::string> branch_parameters(Stream modal) const;

  // Attention mask for a group of `streams` context streams, or the action
  // stream when streams == 1 and the group is {kAction}.
  static std::shared_ptr<const std::vector<std::uint8_t>> timestep_mask(std::size_t streams);

 private:
  struct Trunk {
    std::string prefix;
    std::vector<Stream> context;
  };

  std::string pname(std::size_t trunk, const std::string& rest) const;
  const ad::Var& p(const std::string& name) const { return params_.get(name); }
  std::size_t raw_width(Stream s) const;
  ad::Var tiled_positions(const ad::Var& table, std::size_t size) const;
  ad::Var affine_norm(const ad::Var& x, const std::string& prefix) const;

  EncoderConfig config_;
  ModeFlags flags_;
  ParamStore params_;
  std::vector<Trunk> trunks_;
  // Trunk feeding each head: concat, fig, ocr.
  std::array<std::size_t, 3> head_trunk_{};
};

}  // namespace kgpath

#endif  // KGPATH_ENCODER_H_
