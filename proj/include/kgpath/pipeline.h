#ifndef KGPATH_PIPELINE_H_
#define KGPATH_PIPELINE_H_

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kgpath/checkpoint.h"
#include "kgpath/config.h"
#include "kgpath/eval.h"
#include "kgpath/kg_store.h"
#include "kgpath/modal_fusion.h"
#include "kgpath/objective.h"
#include "kgpath/optim.h"
#include "kgpath/path_miner.h"
#include "kgpath/trajectory.h"

namespace kgpath {

// Forward training triples, truncated to config.train_limit when set.
std::vector<Triple> forward_training(const Dataset& data, const RunConfig& config);

struct FusionStage {
  std::unique_ptr<ModalFusion> fusion;
  FusedStateTable states;
  PretrainReport report;
};

// Pretrains the fusion autoencoders on the (augmented) training graph and
// freezes the per-entity states.
FusionStage run_fusion(const Dataset& data, const std::vector<Triple>& augmented_train,
                       const RunConfig& config);

std::vector<MinedTriple> mine_supervision(const KgGraph& graph, const Vocabulary& vocab,
                                          const std::vector<Triple>& queries,
                                          std::size_t max_hops);

std::vector<Trajectory> build_trajectories(const std::vector<MinedTriple>& mined,
                                           const RunConfig& config, const Vocabulary& vocab,
                                           const FusedStateTable& states,
                                           const FeatureRegistry& features);

// Action inputs and loss supervision of one trajectory after masking.
struct MaskedSample {
  std::array<TokenId, kHorizon> inputs{};
  std::array<bool, kHorizon> supervised{};
  bool history_fired = false;
  bool blind_rewards = false;  // feed the unknown-similarity returns-to-go
};

// Supervised slots: every non-PAD slot of a mined path, slot 2 alone for a
// corrective one. Masks, then the blind-reward draw, come from
// mask_rng(seed, epoch, index).
MaskedSample mask_sample(const Trajectory& trajectory, const ModeFlags& flags,
                         const RunConfig& config, std::uint64_t epoch, std::uint64_t index);

struct StepStats {
  BranchLosses losses;
  Coefficients coeffs;
  UpdateReport update;
  std::size_t trajectories = 0;  // contributing to the loss
};

struct EpochLog {
  std::size_t epoch = 0;
  double l_fig = 0.0;
  double l_ocr = 0.0;
  double l_concat = 0.0;
  double rho_fig = 0.0;
  double rho_ocr = 0.0;
  double coeff_fig = 1.0;
  double coeff_ocr = 1.0;
  std::size_t steps = 0;
};

std::string format_epoch_log(const EpochLog& log);

class Trainer {
 public:
  Trainer(TrainedModel& model, std::vector<Trajectory> trajectories);

  const std::vector<Trajectory>& trajectories() const { return trajectories_; }
  // One modulated update on the given trajectory indices.
  StepStats step(const std::vector<std::size_t>& batch, std::size_t epoch);
  EpochLog run_epoch(std::size_t epoch);

  // Total loss of a batch without updating; the callable form used by
  // gradient checks.
  ad::Var batch_loss(const std::vector<std::size_t>& batch, std::size_t epoch,
                     BranchLosses* losses = nullptr, std::size_t* contributing = nullptr) const;

 private:
  TrainedModel& model_;
  std::vector<Trajectory> trajectories_;
  std::vector<Trajectory> blind_;  // same trajectories, unknown-similarity rewards
  LossConfig loss_;
  Adam adam_;
  Rng noise_rng_;
  std::vector<std::string> fig_params_;
  std::vector<std::string> ocr_params_;
};

// Scores decoding prefixes with a trained model, conditioning on
// R1 = r_good. Context encodings are cached per query and return-to-go.
class ModelScorer : public ActionScorer {
 public:
  explicit ModelScorer(const TrainedModel& model);
  std::size_t vocab_size() const override;
  std::vector<std::vector<double>> logits(EntityId head, RelationId relation,
                                          const std::vector<ActionSlots>& prefixes,
                                          bool corrective, std::size_t slot) override;

 private:
  std::vector<std::vector<double>> forward_slot(EntityId head, RelationId relation,
                                                const std::vector<ActionSlots>& cleaned,
                                                const std::vector<std::array<double, kHorizon>>& rtgs,
                                                std::size_t slot);

  const TrainedModel& model_;
  std::pair<EntityId, RelationId> cached_query_{-1, -1};
  std::map<std::array<double, kHorizon>, std::vector<StreamStates>> cache_;
};

struct TrainSummary {
  std::size_t queries = 0;
  std::size_t corrective = 0;
  std::optional<PretrainReport> fusion;
  std::vector<EpochLog> epochs;
};

// Called after each epoch; returning false stops training early.
using EpochCallback = std::function<bool(const EpochLog&, const TrainedModel&)>;

// fusion pretraining -> mining -> trajectories -> masked, modulated epochs.
TrainedModel train_model(const Dataset& data, const RunConfig& config, TrainSummary* summary = nullptr,
                         const EpochCallback& on_epoch = {});

// The inverse-augmented training graph that decoding walks.
KgGraph training_graph(const Dataset& data);

MetricsReport evaluate_model(const TrainedModel& model, const std::vector<Triple>& queries,
                             const std::vector<Triple>& known = {}, const KgGraph* graph = nullptr);

}  // namespace kgpath

#endif  // KGPATH_PIPELINE_H_
