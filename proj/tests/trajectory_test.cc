#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "kgpath/errors.h"
#include "kgpath/rng.h"
#include "kgpath/trajectory.h"

using namespace kgpath;

namespace {

constexpr TokenId P = Vocabulary::kPad;
constexpr TokenId N = Vocabulary::kNull;
constexpr TokenId E = Vocabulary::kEos;

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::build({"A", "B", "C", "T"}, {"r", "r1", "r2"});
  return v;
}
TokenId et(const char* n) { return vocab().entity_token(vocab().entity_id(n)); }
TokenId rt(const char* n) { return vocab().relation_token(vocab().relation_id(n)); }
EntityId id(const char* n) { return vocab().entity_id(n); }

// Fixed similarity table keyed by (action entity, target).
SimilarityFn table_sim(std::map<std::pair<EntityId, EntityId>, double> table) {
  return [table](EntityId a, EntityId b) -> std::optional<double> {
    const auto it = table.find({a, b});
    if (it == table.end()) return std::nullopt;
    return it->second;
  };
}

const RewardConfig kCfg{1.0, -0.5, -0.1, true};

}  // namespace

TEST_CASE("reward config signs") {
  CHECK_NOTHROW(kCfg.validate());
  CHECK_THROWS_AS((RewardConfig{-1.0, -0.5, -0.1, true}.validate()), ConfigError);
  CHECK_THROWS_AS((RewardConfig{1.0, 0.5, -0.1, true}.validate()), ConfigError);
  CHECK_THROWS_AS((RewardConfig{1.0, -0.5, 0.1, true}.validate()), ConfigError);
}

TEST_CASE("initial return-to-go") {
  const InitialRtg good = initial_rtg(true, kCfg);
  CHECK(good.r0 == 1.0);
  CHECK(good.r1 == 1.0);
  const InitialRtg bad = initial_rtg(false, kCfg);
  CHECK(bad.r0 == 1.0);
  CHECK(bad.r1 == -0.5);
}

TEST_CASE("cosine similarity") {
  const std::vector<double> u{1, 0, 2}, v{0, 3, 0}, z{0, 0, 0};
  CHECK(*cosine_similarity(u, u) == doctest::Approx(1.0));
  CHECK(*cosine_similarity(u, v) == doctest::Approx(0.0));
  CHECK_FALSE(cosine_similarity(u, z).has_value());
  FeatureRegistry reg(3);
  reg.set(0, Modality::kImage, u);
  reg.set(1, Modality::kImage, v);
  reg.set(2, Modality::kOcr, u);
  const SimilarityFn sim = image_similarity(reg);
  CHECK(*sim(0, 0) == doctest::Approx(1.0));
  CHECK_FALSE(sim(0, 2).has_value());
  CHECK_FALSE(unknown_similarity()(0, 0).has_value());
}

TEST_CASE("step rewards") {
  const SimilarityFn sim = table_sim({{{id("T"), id("T")}, 1.0}, {{id("B"), id("T")}, 0.0}});
  CHECK(step_reward(rt("r1"), vocab(), id("T"), sim, 1.0, kCfg) == doctest::Approx(-0.1));
  CHECK(step_reward(et("T"), vocab(), id("T"), sim, 1.0, kCfg) == doctest::Approx(0.9));
  CHECK(step_reward(et("C"), vocab(), id("T"), sim, 1.0, kCfg) == doctest::Approx(0.4));
  CHECK(step_reward(et("B"), vocab(), id("T"), sim, 1.0, kCfg) == doctest::Approx(-0.1));
  CHECK(step_reward(E, vocab(), id("T"), sim, 1.0, kCfg) == doctest::Approx(-0.1));
  CHECK(step_reward(P, vocab(), id("T"), sim, 1.0, kCfg) == 0.0);
  CHECK(step_reward(et("T"), vocab(), std::nullopt, sim, 1.0, kCfg) == doctest::Approx(0.4));
}

TEST_CASE("reward grows with similarity") {
  for (int i = 0; i < 10; ++i) {
    const double lo = 0.1 * i - 0.5, hi = lo + 0.05;
    const double a = step_reward(et("B"), vocab(), id("T"), table_sim({{{id("B"), id("T")}, lo}}), 1.0, kCfg);
    const double b = step_reward(et("B"), vocab(), id("T"), table_sim({{{id("B"), id("T")}, hi}}), 1.0, kCfg);
    CHECK(b > a);
  }
}

TEST_CASE("hand-traced two-hop rollout") {
  const SimilarityFn sim = table_sim({{{id("B"), id("T")}, 0.8}, {{id("T"), id("T")}, 1.0}});
  const ActionSlots path{rt("r1"), et("B"), rt("r2"), et("T"), E, P, P};
  const RtgSequence s = rollout_rtg(path, false, 1.0, id("T"), vocab(), sim, kCfg);
  // r' = -0.1, 0.7, -0.1, 0.9, -0.1, 0, 0
  const double expected[kHorizon] = {1.0, 1.1, 0.4, 0.5, -0.4, -0.3, -0.3};
  for (std::size_t n = 0; n < kHorizon; ++n) {
    INFO("slot " << n);
    CHECK(s.rtg[n] == doctest::Approx(expected[n]).epsilon(1e-12));
    CHECK_FALSE(s.violation[n]);
  }
  CHECK(s.r0 == 1.0);
  CHECK(telescopes(s));
}

TEST_CASE("corrective rollout is constant after the target") {
  const SimilarityFn sim = table_sim({{{id("T"), id("T")}, 1.0}});
  const RtgSequence s =
      rollout_rtg({P, N, et("T"), P, P, P, P}, true, 1.0, id("T"), vocab(), sim, kCfg);
  CHECK(s.rtg[0] == 1.0);
  CHECK(s.rtg[1] == 1.0);
  CHECK(s.rtg[2] == 1.0);
  for (std::size_t n = 3; n < kHorizon; ++n) CHECK(s.rtg[n] == doctest::Approx(0.1));
  CHECK(telescopes(s));
}

TEST_CASE("attribute violations") {
  const SimilarityFn sim = table_sim({});
  const ActionSlots wrong{et("B"), et("T"), E, P, P, P, P};
  const RtgSequence lit = rollout_rtg(wrong, false, 1.0, id("T"), vocab(), sim, kCfg);
  CHECK(lit.violation[0]);
  CHECK_FALSE(lit.violation[1]);
  // 1 - 0.4 - (-0.5)
  CHECK(lit.rtg[1] == doctest::Approx(1.1));
  RewardConfig abs_cfg = kCfg;
  abs_cfg.strict_paper_signs = false;
  const RtgSequence flipped = rollout_rtg(wrong, false, 1.0, id("T"), vocab(), sim, abs_cfg);
  CHECK(flipped.rtg[1] == doctest::Approx(0.1));
  CHECK(telescopes(lit));

  CHECK(matches_slot_kind(rt("r"), vocab(), SlotKind::kRelation));
  CHECK_FALSE(matches_slot_kind(E, vocab(), SlotKind::kRelation));
  CHECK(matches_slot_kind(E, vocab(), SlotKind::kRelationOrEos));
  CHECK(matches_slot_kind(et("A"), vocab(), SlotKind::kEntity));
  CHECK_FALSE(matches_slot_kind(rt("r"), vocab(), SlotKind::kEos));
}

TEST_CASE("telescoping holds on random paths") {
  Rng rng(3);
  const auto tokens = static_cast<TokenId>(vocab().num_tokens());
  for (int trial = 0; trial < 200; ++trial) {
    ActionSlots a{};
    for (TokenId& t : a) t = static_cast<TokenId>(rng.below(tokens));
    const SimilarityFn sim = [&](EntityId x, EntityId y) -> std::optional<double> {
      if ((x + y) % 3 == 0) return std::nullopt;
      return std::cos(1.0 + x * 0.7 - y);
    };
    const RtgSequence s = rollout_rtg(a, trial % 5 == 0, 1.0, id("T"), vocab(), sim, kCfg);
    CHECK(telescopes(s));
  }
}

TEST_CASE("inference rtg conditions on r_good") {
  const ActionSlots prefix{rt("r1"), et("B"), P, P, P, P, P};
  const auto rtg = inference_rtg(prefix, false, vocab(), kCfg);
  CHECK(rtg[0] == 1.0);
  CHECK(rtg[1] == doctest::Approx(1.1));
  CHECK(rtg[2] == doctest::Approx(0.7));
}

TEST_CASE("trajectory assembly and cache") {
  Tensor table({4, 14});
  for (std::size_t i = 0; i < table.size(); ++i) table[i] = 0.01 * static_cast<double>(i);
  const FusedStateTable states(table, 3, 8, 3);
  const SimilarityFn sim = table_sim({{{id("T"), id("T")}, 1.0}});
  const Triple q{id("A"), vocab().relation_id("r"), id("T")};
  const PaddedPath path{{rt("r1"), et("B"), rt("r2"), et("T"), E, P, P}, false};
  const Trajectory t = build_trajectory(q, path, kCfg, vocab(), states, sim);
  CHECK(t.rtg.size() == kHorizon);
  CHECK(t.actions.size() == kHorizon);
  CHECK(t.rtg[0] == kCfg.good);
  CHECK(t.rtg0 == kCfg.good);
  CHECK(t.state.state.concatenated().size() == 14);
  CHECK(t.state.state.concatenated()[0] == table.at(id("A"), 0));
  CHECK(t.state.query_tokens[1] == et("A"));

  const Trajectory c = build_trajectory(q, corrective_path(vocab(), id("T")), kCfg, vocab(), states, sim);
  CHECK(c.corrective);

  const auto file = std::filesystem::temp_directory_path() / "kgpath_traj.bin";
  write_trajectory_cache(file, {t, c}, states);
  const auto back = read_trajectory_cache(file);
  REQUIRE(back.size() == 2);
  CHECK(back[0] == t);
  CHECK(back[1] == c);

  std::filesystem::resize_file(file, std::filesystem::file_size(file) - 5);
  CHECK_THROWS_AS(read_trajectory_cache(file), IoError);
}
