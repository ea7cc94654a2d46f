#ifndef KGPATH_MODAL_FUSION_H_
#define KGPATH_MODAL_FUSION_H_

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "kgpath/autograd.h"
#include "kgpath/kg_store.h"
#include "kgpath/optim.h"

namespace kgpath {

enum class FusionModality { kStructure = 0, kImage = 1, kOcr = 2 };
inline constexpr std::array<FusionModality, 3> kFusionModalities = {
    FusionModality::kStructure, FusionModality::kImage, FusionModality::kOcr};
const char* fusion_modality_name(FusionModality m);

struct FusionConfig {
  std::size_t token_width = 8;  // raw vectors are split into tokens of this width
  std::size_t hidden = 16;
  std::size_t structure_dim = 3;
  std::size_t image_dim = 8;
  std::size_t ocr_dim = 3;
  std::size_t epochs = 200;
  double lr = 0.5;
  double init_scale = 0.3;
  double null_value = 0.5;
  std::uint64_t seed = 42;

  std::size_t state_width() const { return structure_dim + image_dim + ocr_dim; }
};

// Learnable arrays of one modality: the token feed-forward map and score
// vector (self-attention summary), the guided filter, and the autoencoder.
struct BranchParams {
  ad::Var ff1_w, ff1_b, ff2_w, ff2_b, score;
  ad::Var guide_summary, guide_token, guide_out;
  ad::Var enc_w, enc_b, dec_w, dec_b;
};

struct AttentionSummary {
  ad::Var features;  // L x token_width, the transformed tokens
  ad::Var weights;   // 1 x L, softmax over tokens
  ad::Var summary;   // 1 x token_width
};

struct GuidedFilter {
  ad::Var weights;   // 1 x N
  ad::Var filtered;  // 1 x token_width
};

// Splits a raw vector into rows of `token_width`, zero-padding the tail.
Tensor tokenize(std::span<const double> raw, std::size_t token_width);

AttentionSummary modal_attention(const BranchParams& p, const ad::Var& tokens);
GuidedFilter guided_filter(const BranchParams& p, const ad::Var& summary, const ad::Var& tokens);
ad::Var reduce_features(const BranchParams& p, const ad::Var& filtered);
ad::Var reconstruct(const BranchParams& p, const ad::Var& reduced);

// Raw per-entity inputs to pretraining, indexed by EntityId.
struct FusionInputs {
  std::vector<std::optional<std::vector<double>>> structure;
  std::vector<std::optional<std::vector<double>>> image;
  std::vector<std::optional<std::vector<double>>> ocr;

  const std::vector<std::optional<std::vector<double>>>& of(FusionModality m) const;
  std::size_t entity_count() const { return structure.size(); }
};

// Structure vector of an entity: log(1 + out-degree) per relation of the
// (augmented) training graph.
FusionInputs make_fusion_inputs(const Vocabulary& vocab, const std::vector<Triple>& train,
                                const FeatureRegistry& features);

struct PretrainReport {
  std::vector<double> loss_curve;  // one entry per epoch, after the update
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

struct FusedState {
  std::vector<double> structure;
  std::vector<double> image;
  std::vector<double> ocr;

  std::vector<double> concatenated() const;
};

struct FusedQuery {
  FusedState state;
  std::array<TokenId, 3> query_tokens{};  // (BOS, head, relation)
};

class ModalFusion {
 public:
  ModalFusion(FusionConfig config, std::size_t structure_width, std::size_t feature_width);

  const FusionConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const BranchParams& branch(FusionModality m) const { return branches_[static_cast<int>(m)]; }
  std::size_t raw_width(FusionModality m) const;
  std::size_t output_width(FusionModality m) const;

  bool trained() const { return trained_; }
  // Marks parameters as trained (used when restoring from a checkpoint).
  void mark_trained() { trained_ = true; }

  // Full-batch gradient descent with backtracking, so the recorded loss is
  // nonincreasing. Deterministic given config().seed.
  PretrainReport pretrain(const FusionInputs& inputs);

  // Mean reconstruction MSE over all present (entity, modality) pairs.
  double reconstruction_loss(const FusionInputs& inputs) const;

  // attention -> guided filter -> sigmoid reduction. Throws StateError
  // before pretraining.
  std::vector<double> encode(FusionModality m, std::span<const double> raw) const;

  // Absent modalities map to the configured NULL embedding.
  FusedState fuse_entity(const FusionInputs& inputs, EntityId e) const;

 private:
  ad::Var modality_loss(FusionModality m, std::span<const double> raw) const;
  ad::Var total_loss(const FusionInputs& inputs, std::size_t* count) const;

  FusionConfig config_;
  std::array<std::size_t, 3> raw_widths_;
  ParamStore params_;
  std::array<BranchParams, 3> branches_;
  bool trained_ = false;
};

// Frozen per-entity fused states (entities x state_width).
class FusedStateTable {
 public:
  FusedStateTable() = default;
  FusedStateTable(Tensor table, std::size_t structure_dim, std::size_t image_dim,
                  std::size_t ocr_dim);
  static FusedStateTable build(const ModalFusion& fusion, const FusionInputs& inputs);

  bool empty() const { return table_.empty(); }
  const Tensor& table() const { return table_; }
  std::size_t structure_dim() const { return dims_[0]; }
  std::size_t image_dim() const { return dims_[1]; }
  std::size_t ocr_dim() const { return dims_[2]; }
  std::size_t width() const { return dims_[0] + dims_[1] + dims_[2]; }

  FusedState state(EntityId e) const;

 private:
  Tensor table_;
  std::array<std::size_t, 3> dims_{};
};

// Query grouping: the head's fused state together with the (BOS, h, r)
// tokens whose embeddings the encoder concatenates with it.
FusedQuery fuse_query(const FusedStateTable& table, const Vocabulary& vocab, EntityId head,
                      RelationId relation);

}  // namespace kgpath

#endif  // KGPATH_MODAL_FUSION_H_
