// Oracles and fixtures shared by the unit tests and the acceptance binary.
#ifndef KGPATH_TESTS_SUPPORT_H_
#define KGPATH_TESTS_SUPPORT_H_

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "kgpath/autograd.h"
#include "kgpath/encoder.h"
#include "kgpath/eval.h"
#include "kgpath/rng.h"

namespace support {

using namespace kgpath;

inline Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t({r, c});
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Reduces a matrix-valued op to a scalar with fixed random weights so
// every output coordinate contributes to the check.
inline std::function<ad::Var(const ad::Var&)> scalarize(std::function<ad::Var(const ad::Var&)> op,
                                                       std::uint64_t seed) {
  return [op, seed](const ad::Var& x) {
    ad::Var y = op(x);
    Rng rng(seed);
    Tensor w(y->value.shape());
    for (double& v : w.data()) v = rng.uniform(-1, 1);
    return ad::weighted_sum(y, w);
  };
}

// Block-local timestep-causal pattern for grouped attention.
inline std::shared_ptr<const std::vector<std::uint8_t>> causal_blocks(std::size_t streams, std::size_t steps) {
  const std::size_t n = streams * steps;
  auto m = std::make_shared<std::vector<std::uint8_t>>(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) (*m)[i * n + j] = j % steps <= i % steps;
  return m;
}

// A named single-input op with the input shape and sampling range it is
// checked on.
struct OpCase {
  std::string name;
  std::function<ad::Var(const ad::Var&)> op;
  std::size_t rows, cols;
  double lo = -1.0, hi = 1.0;
};

// Every differentiable operation of the engine, exercised through one input.
inline std::vector<OpCase> all_op_cases() {
  Rng rng(21);
  const Tensor other = random_tensor(3, 4, rng);
  const Tensor right = random_tensor(4, 2, rng);
  const Tensor row = random_tensor(1, 4, rng);
  const Tensor qa = random_tensor(12, 4, rng), qb = random_tensor(12, 4, rng);
  auto mask = std::make_shared<std::vector<std::uint8_t>>(12, 1);
  (*mask)[1] = (*mask)[6] = (*mask)[11] = 0;
  const ad::AttentionLayout layout{2, 2, 3, 2};
  const auto blocks = causal_blocks(2, 3);
  using ad::Var;
  return {
      {"matmul-left", [=](const Var& x) { return ad::matmul(x, ad::constant(right)); }, 3, 4},
      {"matmul-right", [=](const Var& x) { return ad::matmul(ad::constant(other), x); }, 4, 2},
      {"add", [=](const Var& x) { return ad::add(x, ad::constant(other)); }, 3, 4},
      {"sub", [=](const Var& x) { return ad::sub(ad::constant(other), x); }, 3, 4},
      {"mul", [=](const Var& x) { return ad::mul(x, ad::constant(other)); }, 3, 4},
      {"scale", [](const Var& x) { return ad::scale(x, -2.5); }, 3, 4},
      {"add_scalar", [](const Var& x) { return ad::add_scalar(x, 0.3); }, 3, 4},
      {"add_row", [=](const Var& x) { return ad::add_row(ad::constant(other), x); }, 1, 4},
      {"mul_row", [=](const Var& x) { return ad::mul_row(ad::constant(other), x); }, 1, 4},
      {"mul_row-matrix", [=](const Var& x) { return ad::mul_row(x, ad::constant(row)); }, 3, 4},
      {"relu", [](const Var& x) { return ad::relu(x); }, 3, 4, 0.1, 1.0},
      {"relu-negative", [](const Var& x) { return ad::relu(x); }, 3, 4, -1.0, -0.1},
      {"sigmoid", [](const Var& x) { return ad::sigmoid(x); }, 3, 4},
      {"tanh", [](const Var& x) { return ad::tanh(x); }, 3, 4},
      {"square", [](const Var& x) { return ad::square(x); }, 3, 4},
      {"softmax_rows", [](const Var& x) { return ad::softmax_rows(x); }, 3, 4},
      {"masked_softmax_rows", [=](const Var& x) { return ad::masked_softmax_rows(x, mask); }, 3, 4},
      {"log_softmax_rows", [](const Var& x) { return ad::log_softmax_rows(x); }, 3, 4},
      {"layer_norm_rows", [](const Var& x) { return ad::layer_norm_rows(x); }, 3, 4},
      {"sum", [](const Var& x) { return ad::scale(ad::sum(x), 1.0); }, 3, 4},
      {"mean", [](const Var& x) { return ad::mean(x); }, 3, 4},
      {"transpose", [](const Var& x) { return ad::transpose(x); }, 3, 4},
      {"concat_cols", [=](const Var& x) {
         std::vector<Var> parts{x, ad::constant(other), x};
         return ad::concat_cols(parts);
       }, 3, 2},
      {"concat_rows", [=](const Var& x) {
         std::vector<Var> parts{ad::constant(other), x};
         return ad::concat_rows(parts);
       }, 2, 4},
      {"slice_rows", [](const Var& x) { return ad::slice_rows(x, 1, 2); }, 3, 4},
      {"slice_cols", [](const Var& x) { return ad::slice_cols(x, 1, 2); }, 3, 4},
      {"repeat_row", [](const Var& x) { return ad::repeat_row(x, 2, 3); }, 3, 4},
      {"gather_rows", [](const Var& x) {
         const std::vector<std::int64_t> ids{2, 0, 2, 1};
         return ad::gather_rows(x, ids);
       }, 3, 4},
      {"attention-q", [=](const Var& x) {
         return ad::grouped_attention(x, ad::constant(qa), ad::constant(qb), layout, blocks);
       }, 12, 4},
      {"attention-k", [=](const Var& x) {
         return ad::grouped_attention(ad::constant(qa), x, ad::constant(qb), layout, blocks);
       }, 12, 4},
      {"attention-v", [=](const Var& x) {
         return ad::grouped_attention(ad::constant(qa), ad::constant(qb), x, layout, blocks);
       }, 12, 4},
      {"attention-shared", [=](const Var& x) { return ad::grouped_attention(x, x, x, layout, blocks); }, 12, 4},
  };
}

// Worst fd error of one op over ten seeded inputs.
inline double op_fd_error(const OpCase& c) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(derive_seed(99, seed));
    const Tensor x = random_tensor(c.rows, c.cols, rng, c.lo, c.hi);
    worst = std::max(worst, ad::fd_check(scalarize(c.op, seed + 1000), x, 1e-5));
  }
  return worst;
}

// ---- encoder fixtures

constexpr std::size_t kSmallVocab = 20;

inline EncoderConfig small_encoder(AblationMode mode = AblationMode::kMkgRl, std::size_t d = 8,
                                   std::size_t heads = 2, std::size_t layers = 1) {
  EncoderConfig c;
  c.width = d;
  c.heads = heads;
  c.layers = layers;
  c.vocab_size = kSmallVocab;
  c.mode = mode;
  c.init_scale = 0.3;
  return c;
}

inline Trajectory random_trajectory(Rng& rng) {
  Trajectory t;
  for (double& r : t.rtg) r = rng.uniform(-1, 1.5);
  t.state.query_tokens = {Vocabulary::kBos, static_cast<TokenId>(5 + rng.below(8)),
                          static_cast<TokenId>(13 + rng.below(7))};
  for (int i = 0; i < 3; ++i) t.state.state.structure.push_back(rng.uniform());
  for (int i = 0; i < 8; ++i) t.state.state.image.push_back(rng.uniform());
  for (int i = 0; i < 3; ++i) t.state.state.ocr.push_back(rng.uniform());
  for (TokenId& a : t.actions) a = static_cast<TokenId>(rng.below(kSmallVocab));
  return t;
}

inline EncoderBatch random_batch(std::size_t n, std::uint64_t seed, std::vector<Trajectory>* keep = nullptr) {
  Rng rng(seed);
  std::vector<Trajectory> trajs;
  for (std::size_t i = 0; i < n; ++i) trajs.push_back(random_trajectory(rng));
  std::vector<const Trajectory*> ptrs;
  for (const auto& t : trajs) ptrs.push_back(&t);
  EncoderBatch b = make_batch(ptrs);
  if (keep) *keep = trajs;
  return b;
}

// Max relative error between backprop and central differences over every
// coordinate of one parameter. A coordinate whose probe disagrees is probed
// again with smaller steps: a ReLU pre-activation within h of zero bends the
// difference quotient, while a wrong gradient stays wrong at every step.
inline double param_fd_error(SequenceModel& m, const std::string& name, const std::function<ad::Var()>& loss) {
  m.params().zero_grad();
  ad::backward(loss());
  const ad::Var& p = m.params().get(name);
  const Tensor analytic = ad::gradient(p);
  auto probe = [&](std::size_t i, double h) {
    ad::NoGradGuard g;
    const double keep = p->value[i];
    p->value[i] = keep + h;
    const double up = loss()->value.item();
    p->value[i] = keep - h;
    const double down = loss()->value.item();
    p->value[i] = keep;
    const double numeric = (up - down) / (2 * h);
    return std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < p->value.size(); ++i) {
    double err = probe(i, 1e-7);
    for (double h : {1e-8, 1e-9})
      if (err > 1e-6) err = std::min(err, probe(i, h));
    worst = std::max(worst, err);
  }
  m.params().zero_grad();
  return worst;
}

// Worst parameter fd error of the whole model under a random linear
// read-out of all three heads.
inline double model_fd_error(SequenceModel& m, const EncoderBatch& batch, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w({batch.size * kHorizon, m.config().vocab_size});
  for (double& v : w.data()) v = rng.uniform(-1, 1);
  auto loss = [&] {
    const HeadLogits h = m.forward(batch);
    ad::Var total = ad::weighted_sum(h.concat, w);
    if (h.fig) total = ad::add(total, ad::add(ad::weighted_sum(h.fig, w), ad::weighted_sum(h.ocr, w)));
    return total;
  };
  double worst = 0.0;
  for (const std::string& name : m.params().names()) worst = std::max(worst, param_fd_error(m, name, loss));
  return worst;
}

// ---- decoding oracles

// Logits are a fixed pseudo-random function of the query, the visible
// prefix and the token, so any decoder can be checked against enumeration.
class HashScorer : public ActionScorer {
 public:
  HashScorer(std::size_t vocab, std::uint64_t seed) : vocab_(vocab), seed_(seed) {}
  std::size_t vocab_size() const override { return vocab_; }
  double logit(EntityId h, RelationId r, const ActionSlots& prefix, bool corrective,
               std::size_t slot, TokenId t) const {
    std::uint64_t key = derive_seed(seed_, static_cast<std::uint64_t>(h) * 131 + r, slot * 2 + corrective);
    for (std::size_t i = 0; i < slot; ++i) key = mix64(key ^ static_cast<std::uint64_t>(prefix[i] + 1));
    key = mix64(key ^ (static_cast<std::uint64_t>(t) << 20));
    return static_cast<double>(key >> 11) * 0x1.0p-53 * 6.0 - 3.0;
  }
  std::vector<std::vector<double>> logits(EntityId h, RelationId r,
                                          const std::vector<ActionSlots>& prefixes,
                                          bool corrective, std::size_t slot) override {
    ++calls;
    std::vector<std::vector<double>> out;
    for (const auto& p : prefixes) {
      std::vector<double> row(vocab_);
      for (std::size_t t = 0; t < vocab_; ++t)
        row[t] = logit(h, r, p, corrective, slot, static_cast<TokenId>(t));
      out.push_back(row);
    }
    return out;
  }
  std::size_t calls = 0;

 private:
  std::size_t vocab_;
  std::uint64_t seed_;
};

inline double log_softmax_at(const std::vector<double>& logits, const std::vector<std::uint8_t>& allowed,
                             TokenId t) {
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (allowed[i]) z += std::exp(logits[i]);
  return logits[t] - std::log(z);
}

// Every typed path of 1..3 hops, scored by mean log-probability; the best
// score per tail, plus the direct channel. With `edges`, only paths that
// walk those triples, renormalized over the steps each prefix allows.
inline std::map<EntityId, double> enumerate(const HashScorer& s, const Vocabulary& v, EntityId h,
                                            RelationId r, const std::vector<Triple>* edges = nullptr) {
  constexpr TokenId P = Vocabulary::kPad, N = Vocabulary::kNull, E = Vocabulary::kEos;
  std::map<EntityId, double> best;
  auto offer = [&](EntityId e, double score) {
    auto it = best.find(e);
    if (it == best.end() || score > it->second) best[e] = score;
  };
  std::function<void(ActionSlots, std::size_t, double)> walk = [&](ActionSlots prefix, std::size_t slot, double lp) {
    auto allowed = allowed_tokens(v, slot, true);
    if (edges) {
      EntityId at = h;
      for (std::size_t i = 0; i < slot; ++i)
        if (v.kind(prefix[i]) == TokenKind::kEntity) at = v.token_entity(prefix[i]);
      for (TokenId t = 0; t < static_cast<TokenId>(allowed.size()); ++t) {
        if (!allowed[t] || t == E) continue;
        bool ok = false;
        for (const Triple& e : *edges) {
          if (e.head != at) continue;
          if (v.kind(t) == TokenKind::kRelation) ok = ok || v.relation_token(e.relation) == t;
          else ok = ok || (v.relation_token(e.relation) == prefix[slot - 1] && v.entity_token(e.tail) == t);
        }
        allowed[t] = ok;
      }
      if (std::none_of(allowed.begin(), allowed.end(), [](std::uint8_t a) { return a != 0; })) return;
    }
    std::vector<double> logits(v.num_tokens());
    for (std::size_t t = 0; t < logits.size(); ++t) logits[t] = s.logit(h, r, prefix, false, slot, static_cast<TokenId>(t));
    for (TokenId t = 0; t < static_cast<TokenId>(logits.size()); ++t) {
      if (!allowed[t]) continue;
      const double next = lp + log_softmax_at(logits, allowed, t);
      ActionSlots p = prefix;
      p[slot] = t;
      if (t == E) {
        offer(v.token_entity(p[slot - 1]), next / static_cast<double>(slot + 1));
      } else {
        walk(p, slot + 1, next);
      }
    }
  };
  ActionSlots start;
  start.fill(P);
  walk(start, 0, 0.0);
  ActionSlots direct = start;
  direct[1] = N;
  std::vector<std::uint8_t> entities(v.num_tokens(), 0);
  for (std::size_t e = 0; e < v.num_entities(); ++e) entities[v.entity_token(static_cast<EntityId>(e))] = 1;
  std::vector<double> logits(v.num_tokens());
  for (std::size_t t = 0; t < logits.size(); ++t) logits[t] = s.logit(h, r, direct, true, 2, static_cast<TokenId>(t));
  for (std::size_t e = 0; e < v.num_entities(); ++e)
    offer(static_cast<EntityId>(e), log_softmax_at(logits, entities, v.entity_token(static_cast<EntityId>(e))));
  return best;
}

// Oracle ranking sorted like rank_tails: best first, ties by id.
inline std::vector<std::pair<EntityId, double>> sorted_oracle(const std::map<EntityId, double>& best) {
  std::vector<std::pair<EntityId, double>> out(best.begin(), best.end());
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  return out;
}

inline double brute_mrr(const std::vector<std::size_t>& ranks) {
  long double s = 0;
  for (std::size_t r : ranks) s += 1.0L / r;
  return static_cast<double>(s / ranks.size());
}

inline double brute_hits(const std::vector<std::size_t>& ranks, std::size_t n) {
  std::size_t c = 0;
  for (std::size_t r : ranks) c += r <= n;
  return static_cast<double>(c) / static_cast<double>(ranks.size());
}

}  // namespace support

#endif  // KGPATH_TESTS_SUPPORT_H_
