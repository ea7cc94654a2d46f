#ifndef KGPATH_PATH_MINER_H_
#define KGPATH_PATH_MINER_H_

#include <array>
#include <filesystem>
#include <map>
#include <utility>
#include <vector>

#include "kgpath/kg_store.h"

namespace kgpath {

inline constexpr std::size_t kHorizon = 7;
inline constexpr std::size_t kMaxHops = 3;

using ActionSlots = std::array<TokenId, kHorizon>;

// Adjacency view of a triple set; neighbours are kept sorted by
// (relation, tail) so traversal order is deterministic.
class KgGraph {
 public:
  KgGraph(std::size_t num_entities, const std::vector<Triple>& triples);

  std::size_t num_entities() const { return adjacency_.size(); }
  const std::vector<std::pair<RelationId, EntityId>>& out_edges(EntityId e) const;
  bool has_edge(EntityId h, RelationId r, EntityId t) const;
  bool has_edge(const Triple& t) const { return has_edge(t.head, t.relation, t.tail); }

 private:
  std::vector<std::vector<std::pair<RelationId, EntityId>>> adjacency_;
};

// Multi-hop decomposition r(h,t) -> r1(h,t1) ^ r2(t1,t2) ^ ... ^ rn(tn-1,t).
struct Path {
  std::vector<TokenId> steps;  // r1, t1, ..., rn, t (no EOS)
  bool corrective = false;

  std::size_t hops() const { return steps.size() / 2; }
  friend auto operator<=>(const Path&, const Path&) = default;
};

struct PaddedPath {
  ActionSlots slots{};
  bool corrective = false;

  friend bool operator==(const PaddedPath&, const PaddedPath&) = default;
};

// Expected attribute of an action slot under the alternating layout.
enum class SlotKind { kRelationOrEos, kRelation, kEntity, kEos };
SlotKind expected_slot_kind(std::size_t slot);

// All simple paths h -> t with at most `max_hops` edges, excluding the query
// edge (h, r, t) and its inverse. Shortest first, then lexicographic by
// token ids.
std::vector<Path> mine_paths(const KgGraph& graph, const Vocabulary& vocab, const Triple& query,
                             std::size_t max_hops = kMaxHops);

// (PAD, NULL, t, PAD, PAD, PAD, PAD); only slot 3 is supervised.
PaddedPath corrective_path(const Vocabulary& vocab, EntityId target);

// tokens, EOS, then PAD to the horizon.
PaddedPath pad_path(const Path& path);

// Shortest mined path, or the corrective set when none exists.
PaddedPath select_supervision(const KgGraph& graph, const Vocabulary& vocab, const Triple& query,
                              std::size_t max_hops = kMaxHops);

// True when every (e_{i-1}, r_i, e_i) of the padded path from `head` is a
// graph edge.
bool replays_validly(const KgGraph& graph, const Vocabulary& vocab, EntityId head,
                     const ActionSlots& slots);

struct MinedTriple {
  Triple triple;
  PaddedPath path;
};

// Path cache: one line per triple, `h r t : token,token,...`.
void write_path_cache(const std::filesystem::path& file, const Vocabulary& vocab,
                      const std::vector<MinedTriple>& mined);
std::vector<MinedTriple> read_path_cache(const std::filesystem::path& file,
                                         const Vocabulary& vocab);

}  // namespace kgpath

#endif  // KGPATH_PATH_MINER_H_
