#ifndef KGPATH_EVAL_H_
#define KGPATH_EVAL_H_

#include <cstdint>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "kgpath/kg_store.h"
#include "kgpath/path_miner.h"

namespace kgpath {

// Mean reciprocal rank; ranks start at 1.
double mrr(const std::vector<std::size_t>& ranks);
// Fraction of ranks <= n.
double hits_at_n(const std::vector<std::size_t>& ranks, std::size_t n);

// Source of next-action logits for partially decoded paths.
class ActionScorer {
 public:
  virtual ~ActionScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  // Logits at `slot` for each prefix; slots >= `slot` of a prefix are
  // ignored. `corrective` marks prefixes of the direct (PAD, NULL) form.
  virtual std::vector<std::vector<double>> logits(EntityId head, RelationId relation,
                                                  const std::vector<ActionSlots>& prefixes,
                                                  bool corrective, std::size_t slot) = 0;
};

// Tokens admissible at a slot: typed by the alternating layout when
// `typed`, otherwise any entity, relation or EOS.
std::vector<std::uint8_t> allowed_tokens(const Vocabulary& vocab, std::size_t slot, bool typed);

// Log-softmax renormalized over the allowed tokens; -inf elsewhere.
std::vector<double> filtered_log_probs(const std::vector<double>& logits,
                                       const std::vector<std::uint8_t>& allowed);

struct DecodeOptions {
  std::size_t k_beam = 64;
  bool typed = true;           // alternation filter
  bool direct_channel = true;  // also score (PAD, NULL, t)
  // When set, every decoded hop must be an edge of this graph, so each
  // path walks the graph. Needs typed slots.
  const KgGraph* graph = nullptr;
};

struct DecodedPath {
  ActionSlots slots{};
  std::size_t length = 0;        // decoded tokens, EOS included
  std::vector<double> step_log_probs;
  double score = 0.0;            // sum of log-probs / length
  EntityId answer = -1;
  bool direct = false;
  bool collapsed = false;        // no EOS within the horizon
};

struct RankedTails {
  // Every scored tail, best first; ties by ascending id.
  std::vector<std::pair<EntityId, double>> ranked;
  std::map<EntityId, DecodedPath> best_path;
  bool any_collapsed = false;
};

RankedTails rank_tails(ActionScorer& scorer, const Vocabulary& vocab, EntityId head,
                       RelationId relation, const DecodeOptions& options = {});

// 1-based rank of `truth`; |entities| + 1 when it was never scored.
// Entities in `skip` (other known answers) are not counted ahead of it.
std::size_t rank_of(const RankedTails& ranked, EntityId truth, std::size_t num_entities,
                    const std::set<EntityId>* skip = nullptr);

struct QueryResult {
  Triple query;
  std::size_t rank = 0;
  std::vector<std::pair<EntityId, double>> top;  // at most 10
  DecodedPath path;                               // best path of the top tail
  bool scored = false;                            // truth appeared among scored tails
};

struct MetricsReport {
  std::size_t queries = 0;
  double mrr = 0.0;
  double hits1 = 0.0;
  double hits3 = 0.0;
  double hits10 = 0.0;
  std::size_t unscored = 0;  // queries ranked pessimistically
  bool filtered = false;
  std::vector<QueryResult> per_query;
};

struct EvalOptions {
  DecodeOptions decode;
  bool filtered = false;
};

// `known` holds every true triple, used when ranking is filtered.
MetricsReport evaluate(ActionScorer& scorer, const Vocabulary& vocab,
                       const std::vector<Triple>& queries, const EvalOptions& options,
                       const std::vector<Triple>& known = {});

std::string format_report_table(const MetricsReport& report, const Vocabulary& vocab);
void write_report_jsonl(std::ostream& out, const MetricsReport& report, const Vocabulary& vocab);

// "h —r1→ t1 —r2→ t2" with the probability of each decoded token.
std::string format_path(const DecodedPath& path, const Vocabulary& vocab, EntityId head,
                        RelationId relation);

struct Explanation {
  DecodedPath path;
  std::string text;
};

Explanation explain(ActionScorer& scorer, const Vocabulary& vocab, EntityId head,
                    RelationId relation, const DecodeOptions& options = {});

}  // namespace kgpath

#endif  // KGPATH_EVAL_H_
