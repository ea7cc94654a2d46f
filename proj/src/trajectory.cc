#include "kgpath/trajectory.h"

#include <cmath>
#include <fstream>
#include <sstream>

#include "kgpath/binary_io.h"
#include "kgpath/errors.h"
#include "kgpath/logging.h"

namespace kgpath {

void RewardConfig::validate() const {
  if (!(good > 0.0)) throw ConfigError("r_good must be positive");
  if (!(bad < 0.0)) throw ConfigError("r_bad must be negative");
  if (!(step < 0.0)) throw ConfigError("r_step must be negative");
}

InitialRtg initial_rtg(bool path_correct, const RewardConfig& cfg) {
  return {cfg.good, path_correct ? cfg.good : cfg.bad};
}

std::optional<double> cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw DimensionError("cosine_similarity: widths " + std::to_string(u.size()) + " and " +
                         std::to_string(v.size()));
  }
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) {
    log::warn("cosine similarity of a zero-norm vector; treating the image as absent");
    return std::nullopt;
  }
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

SimilarityFn image_similarity(const FeatureRegistry& features) {
  return [&features](EntityId a, EntityId b) -> std::optional<double> {
    const auto& fa = features.lookup(a).image;
    const auto& fb = features.lookup(b).image;
    if (!fa || !fb) return std::nullopt;
    return cosine_similarity(*fa, *fb);
  };
}

SimilarityFn unknown_similarity() {
  return [](EntityId, EntityId) -> std::optional<double> { return std::nullopt; };
}

double step_reward(TokenId action, const Vocabulary& vocab, std::optional<EntityId> target,
                   const SimilarityFn& sim, double r1, const RewardConfig& cfg) {
  if (action == Vocabulary::kPad || action == Vocabulary::kNull) return 0.0;
  if (vocab.kind(action) != TokenKind::kEntity) return cfg.step;
  std::optional<double> s;
  if (target) s = sim(vocab.token_entity(action), *target);
  return cfg.step + (s ? r1 * *s : 0.5 * r1);
}

bool matches_slot_kind(TokenId action, const Vocabulary& vocab, SlotKind kind) {
  const TokenKind k = vocab.kind(action);
  switch (kind) {
    case SlotKind::kRelation:
      return k == TokenKind::kRelation;
    case SlotKind::kRelationOrEos:
      return k == TokenKind::kRelation || action == Vocabulary::kEos;
    case SlotKind::kEntity:
      return k == TokenKind::kEntity;
    case SlotKind::kEos:
      return action == Vocabulary::kEos;
  }
  return false;
}

RtgSequence rollout_rtg(const ActionSlots& actions, bool corrective, double r1,
                        std::optional<EntityId> target, const Vocabulary& vocab,
                        const SimilarityFn& sim, const RewardConfig& cfg) {
  RtgSequence seq;
  seq.r0 = cfg.good;
  seq.rtg[0] = r1;
  const double penalty = cfg.strict_paper_signs ? cfg.bad : std::abs(cfg.bad);
  for (std::size_t n = 0; n < kHorizon; ++n) {
    const TokenId a = actions[n];
    seq.reward[n] = step_reward(a, vocab, target, sim, r1, cfg);
    const bool carried = a == Vocabulary::kPad || a == Vocabulary::kNull;
    seq.violation[n] = !corrective && !carried && !matches_slot_kind(a, vocab, expected_slot_kind(n));
    if (n + 1 < kHorizon) {
      seq.rtg[n + 1] = seq.rtg[n] - seq.reward[n] - (seq.violation[n] ? penalty : 0.0);
    }
  }
  return seq;
}

std::array<double, kHorizon> inference_rtg(const ActionSlots& actions, bool corrective,
                                           const Vocabulary& vocab, const RewardConfig& cfg) {
  return rollout_rtg(actions, corrective, cfg.good, std::nullopt, vocab, unknown_similarity(), cfg)
      .rtg;
}

bool telescopes(const RtgSequence& seq, double tol) {
  for (std::size_t n = 0; n + 1 < kHorizon; ++n) {
    if (seq.violation[n]) continue;
    if (std::abs((seq.rtg[n] - seq.rtg[n + 1]) - seq.reward[n]) > tol) return false;
  }
  return true;
}

Trajectory build_trajectory(const Triple& query, const PaddedPath& path, const RewardConfig& cfg,
                            const Vocabulary& vocab, const FusedStateTable& states,
                            const SimilarityFn& sim) {
  EntityId last = -1;
  for (TokenId a : path.slots) {
    if (vocab.kind(a) == TokenKind::kEntity) last = vocab.token_entity(a);
  }
  const InitialRtg init = initial_rtg(last == query.tail, cfg);
  const RtgSequence seq = rollout_rtg(path.slots, path.corrective, init.r1, query.tail, vocab, sim, cfg);
  if (!telescopes(seq)) throw ContractError("trajectory violates the return-to-go recurrence");

  Trajectory t;
  t.query = query;
  t.rtg0 = init.r0;
  t.rtg = seq.rtg;
  t.state = fuse_query(states, vocab, query.head, query.relation);
  t.actions = path.slots;
  t.corrective = path.corrective;
  return t;
}

namespace {
constexpr const char* kCacheMagic = "kgpath-trajectories";
constexpr int kCacheVersion = 1;
}  // namespace

void write_trajectory_cache(const std::filesystem::path& file,
                            const std::vector<Trajectory>& trajectories,
                            const FusedStateTable& states) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write trajectory cache: " + file.string());
  out << kCacheMagic << ' ' << kCacheVersion << '\n'
      << "horizon " << kHorizon << '\n'
      << "widths " << states.structure_dim() << ' ' << states.image_dim() << ' '
      << states.ocr_dim() << '\n'
      << "records " << trajectories.size() << '\n'
      << "end\n";
  const std::size_t width = states.width();
  for (const Trajectory& t : trajectories) {
    binary::write_i32(out, t.query.head);
    binary::write_i32(out, t.query.relation);
    binary::write_i32(out, t.query.tail);
    binary::write_i32(out, t.corrective ? 1 : 0);
    for (TokenId q : t.state.query_tokens) binary::write_i32(out, q);
    for (TokenId a : t.actions) binary::write_i32(out, a);
    binary::write_f64(out, t.rtg0);
    for (double r : t.rtg) binary::write_f64(out, r);
    const auto s = t.state.state.concatenated();
    if (s.size() != width) throw DimensionError("trajectory state width differs from cache header");
    for (double v : s) binary::write_f64(out, v);
  }
  if (!out) throw IoError("write failed: " + file.string());
}

std::vector<Trajectory> read_trajectory_cache(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open trajectory cache: " + file.string());
  std::string magic, key;
  int version = 0;
  std::size_t horizon = 0, ds = 0, di = 0, dOcr = 0, records = 0;
  in >> magic >> version;
  if (magic != kCacheMagic) throw VersionError("not a trajectory cache: " + file.string());
  if (version != kCacheVersion) {
    throw VersionError("trajectory cache version " + std::to_string(version) + " unsupported");
  }
  in >> key >> horizon;
  if (key != "horizon" || horizon != kHorizon) throw VersionError("trajectory cache horizon mismatch");
  in >> key >> ds >> di >> dOcr;
  if (key != "widths") throw VersionError("trajectory cache: missing widths");
  in >> key >> records;
  if (key != "records") throw VersionError("trajectory cache: missing record count");
  in >> key;
  if (key != "end") throw VersionError("trajectory cache: malformed header");
  in.get();  // newline

  std::vector<Trajectory> out(records);
  for (Trajectory& t : out) {
    t.query.head = binary::read_i32(in);
    t.query.relation = binary::read_i32(in);
    t.query.tail = binary::read_i32(in);
    t.corrective = binary::read_i32(in) != 0;
    for (TokenId& q : t.state.query_tokens) q = binary::read_i32(in);
    for (TokenId& a : t.actions) a = binary::read_i32(in);
    t.rtg0 = binary::read_f64(in);
    for (double& r : t.rtg) r = binary::read_f64(in);
    t.state.state.structure.resize(ds);
    t.state.state.image.resize(di);
    t.state.state.ocr.resize(dOcr);
    for (double& v : t.state.state.structure) v = binary::read_f64(in);
    for (double& v : t.state.state.image) v = binary::read_f64(in);
    for (double& v : t.state.state.ocr) v = binary::read_f64(in);
  }
  return out;
}

}  // namespace kgpath
