#include "kgpath/eval.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "kgpath/errors.h"

namespace kgpath {

double mrr(const std::vector<std::size_t>& ranks) {
  if (ranks.empty()) throw ContractError("mrr: empty rank list");
  double total = 0.0;
  for (std::size_t r : ranks) {
    if (r < 1) throw ContractError("mrr: ranks start at 1");
    total += 1.0 / static_cast<double>(r);
  }
  return total / static_cast<double>(ranks.size());
}

double hits_at_n(const std::vector<std::size_t>& ranks, std::size_t n) {
  if (n < 1) throw ContractError("hits_at_n: n must be at least 1");
  if (ranks.empty()) throw ContractError("hits_at_n: empty rank list");
  std::size_t hits = 0;
  for (std::size_t r : ranks) hits += r <= n;
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

std::vector<std::uint8_t> allowed_tokens(const Vocabulary& vocab, std::size_t slot, bool typed) {
  std::vector<std::uint8_t> ok(vocab.num_tokens(), 0);
  const SlotKind want = expected_slot_kind(slot);
  for (TokenId t = 0; t < static_cast<TokenId>(ok.size()); ++t) {
    const TokenKind k = vocab.kind(t);
    if (!typed) {
      ok[t] = k != TokenKind::kSpecial || t == Vocabulary::kEos;
    } else if (t == Vocabulary::kEos) {
      ok[t] = want == SlotKind::kEos || want == SlotKind::kRelationOrEos;
    } else if (k == TokenKind::kRelation) {
      ok[t] = want == SlotKind::kRelation || want == SlotKind::kRelationOrEos;
    } else if (k == TokenKind::kEntity) {
      ok[t] = want == SlotKind::kEntity;
    }
  }
  return ok;
}

std::vector<double> filtered_log_probs(const std::vector<double>& logits,
                                       const std::vector<std::uint8_t>& allowed) {
  if (logits.size() != allowed.size()) {
    throw DimensionError("filtered_log_probs: " + std::to_string(logits.size()) + " logits, " +
                         std::to_string(allowed.size()) + " mask entries");
  }
  const double ninf = -std::numeric_limits<double>::infinity();
  double mx = ninf;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (allowed[i]) mx = std::max(mx, logits[i]);
  if (mx == ninf) throw ContractError("filtered_log_probs: nothing allowed");
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (allowed[i]) z += std::exp(logits[i] - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(logits.size(), ninf);
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (allowed[i]) out[i] = logits[i] - lse;
  return out;
}

namespace {

struct Hyp {
  ActionSlots slots{};
  std::size_t length = 0;
  double log_prob = 0.0;
  std::vector<double> steps;
};

ActionSlots empty_slots() {
  ActionSlots s;
  s.fill(Vocabulary::kPad);
  return s;
}

EntityId last_entity(const Vocabulary& vocab, const ActionSlots& slots, std::size_t length) {
  EntityId e = -1;
  for (std::size_t i = 0; i < length; ++i)
    if (vocab.kind(slots[i]) == TokenKind::kEntity) e = vocab.token_entity(slots[i]);
  return e;
}

// Narrows the typed mask of one hypothesis to edges leaving its current
// entity: relations it has, then the neighbours along the chosen relation.
std::vector<std::uint8_t> graph_allowed(std::vector<std::uint8_t> ok, const Vocabulary& vocab,
                                        const KgGraph& graph, EntityId head,
                                        const ActionSlots& slots, std::size_t slot) {
  const EntityId last = last_entity(vocab, slots, slot);
  const EntityId from = last < 0 ? head : last;
  std::vector<std::uint8_t> edge(ok.size(), 0);
  const bool entity_slot = expected_slot_kind(slot) == SlotKind::kEntity;
  for (const auto& [r, t] : graph.out_edges(from)) {
    if (!entity_slot) edge[vocab.relation_token(r)] = 1;
    else if (vocab.relation_token(r) == slots[slot - 1]) edge[vocab.entity_token(t)] = 1;
  }
  for (TokenId t = 0; t < static_cast<TokenId>(ok.size()); ++t)
    if (t != Vocabulary::kEos) ok[t] = ok[t] && edge[t];
  return ok;
}

// Strict weak order: higher score first, then lower tail id.
bool better(const std::pair<EntityId, double>& a, const std::pair<EntityId, double>& b) {
  if (a.second != b.second) return a.second > b.second;
  return a.first < b.first;
}

void offer(RankedTails& out, std::map<EntityId, double>& best, DecodedPath path) {
  if (path.answer < 0) return;
  auto it = best.find(path.answer);
  // Equal scores keep the first path found, which is deterministic.
  if (it == best.end() || path.score > it->second) {
    best[path.answer] = path.score;
    out.best_path[path.answer] = std::move(path);
  }
}

DecodedPath finish(const Vocabulary& vocab, const Hyp& h, bool collapsed) {
  DecodedPath p;
  p.slots = h.slots;
  p.length = h.length;
  p.step_log_probs = h.steps;
  p.score = h.log_prob / static_cast<double>(h.length);
  p.answer = last_entity(vocab, h.slots, h.length);
  p.collapsed = collapsed;
  return p;
}

}  // namespace

RankedTails rank_tails(ActionScorer& scorer, const Vocabulary& vocab, EntityId head,
                       RelationId relation, const DecodeOptions& options) {
  if (options.k_beam == 0) throw ContractError("rank_tails: k_beam must be positive");
  if (scorer.vocab_size() != vocab.num_tokens()) {
    throw DimensionError("rank_tails: scorer has " + std::to_string(scorer.vocab_size()) +
                         " tokens, vocabulary " + std::to_string(vocab.num_tokens()));
  }
  if (options.graph && !options.typed) throw ContractError("rank_tails: graph decoding needs typed slots");
  RankedTails out;
  std::map<EntityId, double> best;

  std::vector<Hyp> live(1);
  live[0].slots = empty_slots();
  for (std::size_t slot = 0; slot < kHorizon && !live.empty(); ++slot) {
    std::vector<ActionSlots> prefixes;
    prefixes.reserve(live.size());
    for (const Hyp& h : live) prefixes.push_back(h.slots);
    const auto logits = scorer.logits(head, relation, prefixes, false, slot);
    const auto typed = allowed_tokens(vocab, slot, options.typed);
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < live.size(); ++i) {
      const auto allowed = options.graph
                               ? graph_allowed(typed, vocab, *options.graph, head, live[i].slots, slot)
                               : typed;
      if (std::none_of(allowed.begin(), allowed.end(), [](std::uint8_t a) { return a != 0; })) continue;
      const auto lp = filtered_log_probs(logits[i], allowed);
      for (TokenId t = 0; t < static_cast<TokenId>(lp.size()); ++t) {
        if (!allowed[t]) continue;
        Hyp h = live[i];
        h.slots[slot] = t;
        h.length = slot + 1;
        h.log_prob += lp[t];
        h.steps.push_back(lp[t]);
        if (t == Vocabulary::kEos) {
          offer(out, best, finish(vocab, h, false));
        } else {
          next.push_back(std::move(h));
        }
      }
    }
    std::stable_sort(next.begin(), next.end(), [](const Hyp& a, const Hyp& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      return a.slots < b.slots;
    });
    if (next.size() > options.k_beam) next.resize(options.k_beam);
    live = std::move(next);
  }
  for (const Hyp& h : live) {
    out.any_collapsed = true;
    offer(out, best, finish(vocab, h, true));
  }

  if (options.direct_channel) {
    ActionSlots prefix = empty_slots();
    prefix[1] = Vocabulary::kNull;
    const auto logits = scorer.logits(head, relation, {prefix}, true, 2);
    std::vector<std::uint8_t> entities(vocab.num_tokens(), 0);
    for (std::size_t e = 0; e < vocab.num_entities(); ++e)
      entities[vocab.entity_token(static_cast<EntityId>(e))] = 1;
    const auto lp = filtered_log_probs(logits[0], entities);
    for (std::size_t e = 0; e < vocab.num_entities(); ++e) {
      const TokenId t = vocab.entity_token(static_cast<EntityId>(e));
      DecodedPath p;
      p.slots = prefix;
      p.slots[2] = t;
      p.length = 1;
      p.step_log_probs = {lp[t]};
      p.score = lp[t];
      p.answer = static_cast<EntityId>(e);
      p.direct = true;
      offer(out, best, std::move(p));
    }
  }

  out.ranked.assign(best.begin(), best.end());
  std::sort(out.ranked.begin(), out.ranked.end(), better);
  return out;
}

std::size_t rank_of(const RankedTails& ranked, EntityId truth, std::size_t num_entities,
                    const std::set<EntityId>* skip) {
  std::size_t rank = 1;
  for (const auto& entry : ranked.ranked) {
    if (entry.first == truth) return rank;
    if (skip && skip->count(entry.first)) continue;
    ++rank;
  }
  return num_entities + 1;
}

MetricsReport evaluate(ActionScorer& scorer, const Vocabulary& vocab,
                       const std::vector<Triple>& queries, const EvalOptions& options,
                       const std::vector<Triple>& known) {
  if (queries.empty()) throw ContractError("evaluate: no queries");
  std::map<std::pair<EntityId, RelationId>, std::set<EntityId>> answers;
  if (options.filtered) {
    for (const Triple& t : known) answers[{t.head, t.relation}].insert(t.tail);
  }
  MetricsReport report;
  report.filtered = options.filtered;
  std::vector<std::size_t> ranks;
  for (const Triple& q : queries) {
    const RankedTails ranked = rank_tails(scorer, vocab, q.head, q.relation, options.decode);
    std::set<EntityId> skip;
    if (options.filtered) {
      skip = answers[{q.head, q.relation}];
      skip.erase(q.tail);
    }
    QueryResult r;
    r.query = q;
    r.rank = rank_of(ranked, q.tail, vocab.num_entities(), options.filtered ? &skip : nullptr);
    r.scored = r.rank <= vocab.num_entities();
    for (std::size_t i = 0; i < ranked.ranked.size() && r.top.size() < 10; ++i) {
      if (options.filtered && skip.count(ranked.ranked[i].first)) continue;
      r.top.push_back(ranked.ranked[i]);
    }
    if (!r.top.empty()) r.path = ranked.best_path.at(r.top.front().first);
    report.unscored += !r.scored;
    ranks.push_back(r.rank);
    report.per_query.push_back(std::move(r));
  }
  report.queries = queries.size();
  report.mrr = mrr(ranks);
  report.hits1 = hits_at_n(ranks, 1);
  report.hits3 = hits_at_n(ranks, 3);
  report.hits10 = hits_at_n(ranks, 10);
  return report;
}

namespace {
std::string fixed5(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.5f", v);
  return buf;
}

std::string prob(double log_p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", std::exp(log_p));
  return buf;
}
}  // namespace

std::string format_path(const DecodedPath& path, const Vocabulary& vocab, EntityId head,
                        RelationId relation) {
  std::ostringstream os;
  if (path.direct) {
    os << vocab.entity_name(head) << " (" << vocab.relation_name(relation) << ") => "
       << vocab.entity_name(path.answer) << " [direct] p=" << prob(path.step_log_probs.at(0));
    return os.str();
  }
  os << vocab.entity_name(head);
  for (std::size_t i = 0; i < path.length; ++i) {
    const TokenId t = path.slots[i];
    const std::string p = prob(path.step_log_probs.at(i));
    if (t == Vocabulary::kEos) {
      os << " <eos " << p << ">";
    } else if (vocab.kind(t) == TokenKind::kRelation) {
      os << " —" << vocab.token_name(t) << " " << p << "→";
    } else {
      os << " " << vocab.token_name(t) << " (" << p << ")";
    }
  }
  if (path.collapsed) os << " [no eos]";
  os << "  score=" << fixed5(path.score);
  return os.str();
}

std::string format_report_table(const MetricsReport& report, const Vocabulary& vocab) {
  std::ostringstream os;
  os << "queries  " << report.queries << (report.filtered ? " (filtered)" : " (raw)") << '\n'
     << "MRR      " << fixed5(report.mrr) << '\n'
     << "Hits@1   " << fixed5(report.hits1) << '\n'
     << "Hits@3   " << fixed5(report.hits3) << '\n'
     << "Hits@10  " << fixed5(report.hits10) << '\n';
  if (report.unscored) {
    os << "unscored " << report.unscored << " (ranked " << vocab.num_entities() + 1 << ")\n";
  }
  os << '\n' << std::left << std::setw(10) << "head" << std::setw(12) << "relation"
     << std::setw(10) << "tail" << std::setw(6) << "rank" << "top-3\n";
  for (const QueryResult& q : report.per_query) {
    os << std::setw(10) << vocab.entity_name(q.query.head) << std::setw(12)
       << vocab.relation_name(q.query.relation) << std::setw(10) << vocab.entity_name(q.query.tail)
       << std::setw(6) << q.rank;
    for (std::size_t i = 0; i < q.top.size() && i < 3; ++i) {
      os << (i ? ", " : "") << vocab.entity_name(q.top[i].first);
    }
    os << '\n';
  }
  return os.str();
}

void write_report_jsonl(std::ostream& out, const MetricsReport& report, const Vocabulary& vocab) {
  for (const QueryResult& q : report.per_query) {
    nlohmann::json rec;
    rec["query"] = {vocab.entity_name(q.query.head), vocab.relation_name(q.query.relation),
                    vocab.entity_name(q.query.tail)};
    rec["rank"] = q.rank;
    nlohmann::json top = nlohmann::json::array();
    for (const auto& [e, s] : q.top) top.push_back({{"entity", vocab.entity_name(e)}, {"score", s}});
    rec["top10"] = top;
    nlohmann::json path = nlohmann::json::array();
    for (std::size_t i = 0; i < kHorizon; ++i) {
      if (q.path.direct ? i == 2 : i < q.path.length) path.push_back(vocab.token_name(q.path.slots[i]));
    }
    rec["path"] = path;
    rec["direct"] = q.path.direct;
    out << rec.dump() << '\n';
  }
  nlohmann::json summary = {{"queries", report.queries},
                            {"mrr", report.mrr},
                            {"hits1", report.hits1},
                            {"hits3", report.hits3},
                            {"hits10", report.hits10},
                            {"filtered", report.filtered},
                            {"unscored", report.unscored}};
  out << nlohmann::json{{"summary", summary}}.dump() << '\n';
}

Explanation explain(ActionScorer& scorer, const Vocabulary& vocab, EntityId head,
                    RelationId relation, const DecodeOptions& options) {
  const RankedTails ranked = rank_tails(scorer, vocab, head, relation, options);
  if (ranked.ranked.empty()) throw StateError("explain: decoding produced no answer");
  Explanation out;
  out.path = ranked.best_path.at(ranked.ranked.front().first);
  out.text = format_path(out.path, vocab, head, relation);
  return out;
}

}  // namespace kgpath
