#ifndef KGPATH_CHECKPOINT_H_
#define KGPATH_CHECKPOINT_H_

#include <filesystem>
#include <memory>

#include "kgpath/config.h"
#include "kgpath/encoder.h"
#include "kgpath/kg_store.h"
#include "kgpath/modal_fusion.h"

namespace kgpath {

// Everything inference needs: configuration, vocabulary, frozen fused
// entity states and the sequence model.
struct TrainedModel {
  RunConfig config;
  Vocabulary vocab;
  FusedStateTable states;
  std::unique_ptr<SequenceModel> net;
};

// Fresh, seeded model for a vocabulary and state table.
TrainedModel make_model(const RunConfig& config, const Vocabulary& vocab, FusedStateTable states);

inline constexpr int kCheckpointVersion = 1;

// Text header (version, config, vocabulary, shapes) then a little-endian
// float64 payload.
void save_checkpoint(const std::filesystem::path& file, const TrainedModel& model);
TrainedModel load_checkpoint(const std::filesystem::path& file);

// Throws VersionError when the data vocabulary differs from the model's.
void require_same_vocabulary(const TrainedModel& model, const Vocabulary& data_vocab);

}  // namespace kgpath

#endif  // KGPATH_CHECKPOINT_H_
