#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <deque>
#include <filesystem>
#include <set>

#include "kgpath/errors.h"
#include "kgpath/path_miner.h"
#include "kgpath/rng.h"

using namespace kgpath;

namespace {

constexpr TokenId P = Vocabulary::kPad;
constexpr TokenId N = Vocabulary::kNull;
constexpr TokenId E = Vocabulary::kEos;

struct Fixture {
  Vocabulary vocab = Vocabulary::build({"A", "B", "C", "D", "T"}, {"r", "r1", "r2", "r3"});
  EntityId id(const char* n) const { return vocab.entity_id(n); }
  RelationId rel(const char* n) const { return vocab.relation_id(n); }
  TokenId et(const char* n) const { return vocab.entity_token(id(n)); }
  TokenId rt(const char* n) const { return vocab.relation_token(rel(n)); }
  Triple t(const char* h, const char* r, const char* tail) const { return {id(h), rel(r), id(tail)}; }
};

// Shortest h -> t hop count by BFS, ignoring the query edge and its inverse.
std::size_t bfs_hops(const KgGraph& g, const Vocabulary& v, const Triple& q) {
  std::vector<int> dist(g.num_entities(), -1);
  std::deque<EntityId> frontier{q.head};
  dist[q.head] = 0;
  while (!frontier.empty()) {
    const EntityId e = frontier.front();
    frontier.pop_front();
    for (const auto& [r, n] : g.out_edges(e)) {
      if (e == q.head && r == q.relation && n == q.tail) continue;
      if (e == q.tail && r == v.inverse(q.relation) && n == q.head) continue;
      if (dist[n] < 0) {
        dist[n] = dist[e] + 1;
        frontier.push_back(n);
      }
    }
  }
  return dist[q.tail] < 0 ? 0 : static_cast<std::size_t>(dist[q.tail]);
}

}  // namespace

TEST_CASE("two-hop decomposition") {
  Fixture f;
  const KgGraph g(5, {f.t("A", "r1", "B"), f.t("B", "r2", "T"), f.t("A", "r", "T")});
  const auto paths = mine_paths(g, f.vocab, f.t("A", "r", "T"));
  REQUIRE(paths.size() == 1);
  CHECK(paths[0].steps == std::vector<TokenId>{f.rt("r1"), f.et("B"), f.rt("r2"), f.et("T")});
  CHECK(paths[0].hops() == 2);
}

TEST_CASE("parallel edge gives a one-hop path") {
  Fixture f;
  const KgGraph g(5, {f.t("A", "r", "T"), f.t("A", "r3", "T"), f.t("A", "r1", "B"), f.t("B", "r2", "T")});
  const auto paths = mine_paths(g, f.vocab, f.t("A", "r", "T"));
  REQUIRE(paths.size() == 2);
  CHECK(paths[0].steps == std::vector<TokenId>{f.rt("r3"), f.et("T")});
  CHECK(pad_path(paths[0]).slots == ActionSlots{f.rt("r3"), f.et("T"), E, P, P, P, P});
}

TEST_CASE("disconnected query") {
  Fixture f;
  const KgGraph g(5, {f.t("A", "r", "T"), f.t("B", "r1", "C")});
  CHECK(mine_paths(g, f.vocab, f.t("A", "r", "T")).empty());
  const PaddedPath sup = select_supervision(g, f.vocab, f.t("A", "r", "T"));
  CHECK(sup.corrective);
  CHECK(sup.slots == ActionSlots{P, N, f.et("T"), P, P, P, P});
}

TEST_CASE("inverse of the query edge is excluded") {
  Fixture f;
  const Triple q = f.t("A", "r", "T");
  const Triple inv{q.tail, f.vocab.inverse(q.relation), q.head};
  // A -r-> T, T -r_inv-> A, and T -r_inv-> A -r-> T would be a leak.
  const KgGraph g(5, {q, inv});
  CHECK(mine_paths(g, f.vocab, q).empty());
}

TEST_CASE("corrective path") {
  Fixture f;
  const PaddedPath c = corrective_path(f.vocab, f.id("T"));
  CHECK(c.slots == ActionSlots{P, N, f.et("T"), P, P, P, P});
  CHECK(c.corrective);
}

TEST_CASE("padding") {
  Fixture f;
  Path three{{f.rt("r1"), f.et("B"), f.rt("r2"), f.et("C"), f.rt("r3"), f.et("T")}, false};
  CHECK(pad_path(three).slots == ActionSlots{f.rt("r1"), f.et("B"), f.rt("r2"), f.et("C"), f.rt("r3"), f.et("T"), E});
  Path four = three;
  four.steps.push_back(f.rt("r"));
  four.steps.push_back(f.et("A"));
  CHECK_THROWS_AS(pad_path(four), ContractError);
}

TEST_CASE("slot kinds") {
  CHECK(expected_slot_kind(0) == SlotKind::kRelation);
  CHECK(expected_slot_kind(1) == SlotKind::kEntity);
  CHECK(expected_slot_kind(2) == SlotKind::kRelationOrEos);
  CHECK(expected_slot_kind(5) == SlotKind::kEntity);
  CHECK(expected_slot_kind(6) == SlotKind::kEos);
}

TEST_CASE("random graphs: paths replay, are shortest first, and match BFS") {
  std::vector<std::string> names;
  for (int i = 0; i < 12; ++i) names.push_back("n" + std::to_string(i));
  const Vocabulary v = Vocabulary::build(names, {"a", "b", "c"});
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed(5, seed));
    TripleSet base;
    for (int k = 0; k < 18; ++k) {
      const auto h = static_cast<EntityId>(rng.below(12));
      const auto t = static_cast<EntityId>(rng.below(12));
      if (h != t) base.triples.push_back({h, static_cast<RelationId>(rng.below(3)), t});
    }
    const auto all = augment_inverse(base, v).triples;
    const KgGraph g(12, all);
    std::size_t corrective = 0, disconnected = 0;
    for (const Triple& q : base.triples) {
      const auto paths = mine_paths(g, v, q);
      CHECK(paths == mine_paths(g, v, q));
      for (std::size_t i = 0; i < paths.size(); ++i) {
        const PaddedPath p = pad_path(paths[i]);
        CHECK(p.slots.size() == kHorizon);
        CHECK(replays_validly(g, v, q.head, p.slots));
        CHECK(paths[i].steps.back() == v.entity_token(q.tail));
        CHECK(paths[i].hops() <= kMaxHops);
        if (i > 0) {
          CHECK(paths[i - 1].hops() <= paths[i].hops());
          if (paths[i - 1].hops() == paths[i].hops()) CHECK(paths[i - 1].steps < paths[i].steps);
        }
      }
      const std::size_t hops = bfs_hops(g, v, q);
      const bool reachable = hops > 0 && hops <= kMaxHops;
      CHECK(reachable == !paths.empty());
      if (reachable) CHECK(paths.front().hops() == hops);
      corrective += select_supervision(g, v, q).corrective;
      disconnected += !reachable;
    }
    CHECK(corrective == disconnected);
  }
}

TEST_CASE("replay rejects broken paths") {
  Fixture f;
  const KgGraph g(5, {f.t("A", "r1", "B"), f.t("B", "r2", "T")});
  CHECK(replays_validly(g, f.vocab, f.id("A"), {f.rt("r1"), f.et("B"), f.rt("r2"), f.et("T"), E, P, P}));
  CHECK_FALSE(replays_validly(g, f.vocab, f.id("A"), {f.rt("r2"), f.et("B"), E, P, P, P, P}));
}

TEST_CASE("path cache round trip") {
  Fixture f;
  const std::vector<MinedTriple> mined{
      {f.t("A", "r", "T"), pad_path({{f.rt("r1"), f.et("B"), f.rt("r2"), f.et("T")}, false})},
      {f.t("C", "r3", "D"), corrective_path(f.vocab, f.id("D"))}};
  const auto file = std::filesystem::temp_directory_path() / "kgpath_paths.txt";
  write_path_cache(file, f.vocab, mined);
  const auto back = read_path_cache(file, f.vocab);
  REQUIRE(back.size() == 2);
  CHECK(back[0].triple == mined[0].triple);
  CHECK(back[0].path == mined[0].path);
  CHECK(back[1].path == mined[1].path);
}
