#ifndef KGPATH_TRAJECTORY_H_
#define KGPATH_TRAJECTORY_H_

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "kgpath/kg_store.h"
#include "kgpath/modal_fusion.h"
#include "kgpath/path_miner.h"

namespace kgpath {

struct RewardConfig {
  double good = 1.0;   // r'_good > 0
  double bad = -0.5;   // r'_bad < 0
  double step = -0.1;  // r'_step < 0
  // true: the attribute-violation term is subtracted as written (R - r' - r_bad,
  // which raises R because r_bad < 0). false: subtract |r_bad|.
  bool strict_paper_signs = true;

  void validate() const;
};

struct InitialRtg {
  double r0 = 0.0;
  double r1 = 0.0;
};

// R0 = r_good; R1 = r_good when the path ends at the target, else r_bad.
InitialRtg initial_rtg(bool path_correct, const RewardConfig& cfg);

// Cosine similarity of two entities' image vectors; nullopt when either
// image is absent (or has zero norm).
using SimilarityFn = std::function<std::optional<double>(EntityId, EntityId)>;

std::optional<double> cosine_similarity(std::span<const double> u, std::span<const double> v);
SimilarityFn image_similarity(const FeatureRegistry& features);
// Similarity source for decoding, where the target is unknown.
SimilarityFn unknown_similarity();

// r'_n = r_step + r_add. r_add: R1 * sim for entity actions, R1 / 2 when
// either image is missing, 0 for relations and EOS. PAD / NULL carry no
// reward at all.
double step_reward(TokenId action, const Vocabulary& vocab, std::optional<EntityId> target,
                   const SimilarityFn& sim, double r1, const RewardConfig& cfg);

bool matches_slot_kind(TokenId action, const Vocabulary& vocab, SlotKind kind);

struct RtgSequence {
  double r0 = 0.0;
  std::array<double, kHorizon> rtg{};      // R1..R7
  std::array<double, kHorizon> reward{};   // r'_n of action n (0 for carried slots)
  std::array<bool, kHorizon> violation{};  // action n broke the alternating layout
};

// R_n = R_{n-1} - r'_{n-1} (- r_bad when a_{n-1} has the wrong attribute);
// PAD and NULL slots carry the previous value forward.
RtgSequence rollout_rtg(const ActionSlots& actions, bool corrective, double r1,
                        std::optional<EntityId> target, const Vocabulary& vocab,
                        const SimilarityFn& sim, const RewardConfig& cfg);

// Returns-to-go for a partially decoded prefix, conditioned on R1 = r_good.
std::array<double, kHorizon> inference_rtg(const ActionSlots& actions, bool corrective,
                                           const Vocabulary& vocab, const RewardConfig& cfg);

struct Trajectory {
  Triple query;
  double rtg0 = 0.0;
  std::array<double, kHorizon> rtg{};
  FusedQuery state;
  ActionSlots actions{};
  bool corrective = false;

  friend bool operator==(const Trajectory& a, const Trajectory& b) {
    return a.query == b.query && a.rtg0 == b.rtg0 && a.rtg == b.rtg && a.actions == b.actions &&
           a.corrective == b.corrective && a.state.query_tokens == b.state.query_tokens &&
           a.state.state.concatenated() == b.state.state.concatenated();
  }
};

// Assembles (R, s, a); verifies the telescoping identity before returning.
Trajectory build_trajectory(const Triple& query, const PaddedPath& path, const RewardConfig& cfg,
                            const Vocabulary& vocab, const FusedStateTable& states,
                            const SimilarityFn& sim);

// True when R_{n-1} - R_n == r'_{n-1} (to `tol`) at every valid-attribute
// step and R is constant across carried slots.
bool telescopes(const RtgSequence& seq, double tol = 1e-12);

// Self-describing cache: text header then fixed-width little-endian records.
void write_trajectory_cache(const std::filesystem::path& file,
                            const std::vector<Trajectory>& trajectories,
                            const FusedStateTable& states);
std::vector<Trajectory> read_trajectory_cache(const std::filesystem::path& file);

}  // namespace kgpath

#endif  // KGPATH_TRAJECTORY_H_
