#include "kgpath/path_miner.h"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "kgpath/errors.h"

namespace kgpath {

KgGraph::KgGraph(std::size_t num_entities, const std::vector<Triple>& triples)
    : adjacency_(num_entities) {
  for (const Triple& t : triples) {
    if (t.head < 0 || static_cast<std::size_t>(t.head) >= num_entities || t.tail < 0 ||
        static_cast<std::size_t>(t.tail) >= num_entities) {
      throw LookupError("graph: triple references unknown entity");
    }
    adjacency_[t.head].emplace_back(t.relation, t.tail);
  }
  for (auto& edges : adjacency_) {
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  }
}

const std::vector<std::pair<RelationId, EntityId>>& KgGraph::out_edges(EntityId e) const {
  if (e < 0 || static_cast<std::size_t>(e) >= adjacency_.size()) {
    throw LookupError("graph: entity id out of range: " + std::to_string(e));
  }
  return adjacency_[e];
}

bool KgGraph::has_edge(EntityId h, RelationId r, EntityId t) const {
  const auto& edges = out_edges(h);
  return std::binary_search(edges.begin(), edges.end(), std::make_pair(r, t));
}

SlotKind expected_slot_kind(std::size_t slot) {
  if (slot >= kHorizon) throw ContractError("slot index beyond horizon");
  if (slot == kHorizon - 1) return SlotKind::kEos;
  if (slot % 2 == 1) return SlotKind::kEntity;
  return slot == 0 ? SlotKind::kRelation : SlotKind::kRelationOrEos;
}

std::vector<Path> mine_paths(const KgGraph& graph, const Vocabulary& vocab, const Triple& query,
                             std::size_t max_hops) {
  if (max_hops > kMaxHops) throw ContractError("mine_paths: at most 3 hops are supported");
  const Triple excluded_fwd = query;
  const Triple excluded_inv{query.tail, vocab.inverse(query.relation), query.head};

  std::vector<Path> found;
  std::vector<EntityId> visited{query.head};
  std::vector<TokenId> steps;
  // Depth-first enumeration of simple paths.
  auto dfs = [&](auto&& self, EntityId at, std::size_t depth) -> void {
    if (depth == max_hops) return;
    for (const auto& [rel, next] : graph.out_edges(at)) {
      const Triple edge{at, rel, next};
      if (edge == excluded_fwd || edge == excluded_inv) continue;
      if (std::find(visited.begin(), visited.end(), next) != visited.end()) continue;
      steps.push_back(vocab.relation_token(rel));
      steps.push_back(vocab.entity_token(next));
      if (next == query.tail) {
        found.push_back({steps, false});
      } else {
        visited.push_back(next);
        self(self, next, depth + 1);
        visited.pop_back();
      }
      steps.resize(steps.size() - 2);
    }
  };
  if (query.head != query.tail) dfs(dfs, query.head, 0);
  std::sort(found.begin(), found.end(), [](const Path& a, const Path& b) {
    if (a.steps.size() != b.steps.size()) return a.steps.size() < b.steps.size();
    return a.steps < b.steps;
  });
  return found;
}

PaddedPath corrective_path(const Vocabulary& vocab, EntityId target) {
  PaddedPath p;
  p.slots.fill(Vocabulary::kPad);
  p.slots[1] = Vocabulary::kNull;
  p.slots[2] = vocab.entity_token(target);
  p.corrective = true;
  return p;
}

PaddedPath pad_path(const Path& path) {
  if (path.corrective) throw ContractError("pad_path: corrective paths are built pre-padded");
  if (path.steps.size() + 1 > kHorizon || path.steps.size() % 2 != 0 || path.steps.empty()) {
    throw ContractError("pad_path: path of " + std::to_string(path.steps.size()) +
                        " tokens does not fit the horizon");
  }
  PaddedPath p;
  p.slots.fill(Vocabulary::kPad);
  std::copy(path.steps.begin(), path.steps.end(), p.slots.begin());
  p.slots[path.steps.size()] = Vocabulary::kEos;
  return p;
}

PaddedPath select_supervision(const KgGraph& graph, const Vocabulary& vocab, const Triple& query,
                              std::size_t max_hops) {
  auto paths = mine_paths(graph, vocab, query, max_hops);
  if (paths.empty()) return corrective_path(vocab, query.tail);
  return pad_path(paths.front());
}

bool replays_validly(const KgGraph& graph, const Vocabulary& vocab, EntityId head,
                     const ActionSlots& slots) {
  EntityId at = head;
  std::size_t i = 0;
  while (i + 1 < slots.size() && slots[i] != Vocabulary::kEos) {
    if (vocab.kind(slots[i]) != TokenKind::kRelation ||
        vocab.kind(slots[i + 1]) != TokenKind::kEntity) {
      return false;
    }
    const EntityId next = vocab.token_entity(slots[i + 1]);
    if (!graph.has_edge(at, vocab.token_relation(slots[i]), next)) return false;
    at = next;
    i += 2;
  }
  return i > 0;
}

void write_path_cache(const std::filesystem::path& file, const Vocabulary& vocab,
                      const std::vector<MinedTriple>& mined) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot write path cache: " + file.string());
  for (const auto& m : mined) {
    out << vocab.entity_name(m.triple.head) << ' ' << vocab.relation_name(m.triple.relation) << ' '
        << vocab.entity_name(m.triple.tail) << " :";
    for (std::size_t i = 0; i < kHorizon; ++i) {
      out << (i ? "," : " ") << vocab.token_name(m.path.slots[i]);
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + file.string());
}

std::vector<MinedTriple> read_path_cache(const std::filesystem::path& file,
                                         const Vocabulary& vocab) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open path cache: " + file.string());
  std::vector<MinedTriple> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string h, r, t, colon, tokens;
    if (!(ss >> h >> r >> t >> colon >> tokens) || colon != ":") {
      throw ParseError(file.string(), line_no, "expected 'h r t : token,...'");
    }
    MinedTriple m;
    m.triple = {vocab.entity_id(h), vocab.relation_id(r), vocab.entity_id(t)};
    std::size_t i = 0;
    std::istringstream toks(tokens);
    std::string tok;
    while (std::getline(toks, tok, ',')) {
      if (i >= kHorizon) throw ParseError(file.string(), line_no, "more than 7 action slots");
      m.path.slots[i++] = vocab.token_from_name(tok);
    }
    if (i != kHorizon) throw ParseError(file.string(), line_no, "fewer than 7 action slots");
    m.path.corrective = m.path.slots[0] == Vocabulary::kPad;
    out.push_back(m);
  }
  return out;
}

}  // namespace kgpath
