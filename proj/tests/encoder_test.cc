#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "kgpath/encoder.h"
#include "kgpath/errors.h"
#include "kgpath/rng.h"
#include "support.h"

using namespace kgpath;

namespace {

constexpr std::size_t kVocab = support::kSmallVocab;

EncoderConfig small_config(AblationMode mode = AblationMode::kMkgRl, std::size_t d = 8,
                           std::size_t heads = 2, std::size_t layers = 1) {
  return support::small_encoder(mode, d, heads, layers);
}

using support::random_batch;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// sigmoid(g * standardize(x W + b) + s) for one row, written out.
std::vector<double> reference_projection(const SequenceModel& m, const std::string& base,
                                         std::span<const double> x) {
  const Tensor& w = m.params().get(base + ".w")->value;
  const std::size_t d = w.cols();
  std::vector<double> lin(d);
  for (std::size_t j = 0; j < d; ++j) {
    lin[j] = m.params().get(base + ".b")->value[j];
    for (std::size_t i = 0; i < x.size(); ++i) lin[j] += x[i] * w.at(i, j);
  }
  double mean = 0.0, var = 0.0;
  for (double v : lin) mean += v / d;
  for (double v : lin) var += (v - mean) * (v - mean) / d;
  std::vector<double> out(d);
  for (std::size_t j = 0; j < d; ++j) {
    const double z = (lin[j] - mean) / std::sqrt(var + 1e-5);
    out[j] = sigmoid(z * m.params().get(base + ".g")->value[j] + m.params().get(base + ".s")->value[j]);
  }
  return out;
}

using support::param_fd_error;

}  // namespace

TEST_CASE("config validation") {
  EncoderConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.vocab_size = 3;
  CHECK_THROWS_AS(SequenceModel{c}, ConfigError);
}

TEST_CASE("ablation modes") {
  CHECK(parse_mode("no-img") == AblationMode::kNoImg);
  CHECK(mode_name(parse_mode("mkg+rl")) == "mkg+rl");
  CHECK_THROWS_AS(parse_mode("full"), ConfigError);
  const ModeFlags none = mode_flags(AblationMode::kNoImg);
  CHECK_FALSE((none.modal || none.rtg || none.dropout_mask || none.history_mask || none.modulation));
  const ModeFlags mkg = mode_flags(AblationMode::kMkg);
  CHECK((mkg.modal && mkg.modulation && !mkg.rtg));
  const ModeFlags rl = mode_flags(AblationMode::kRl);
  CHECK((rl.rtg && rl.history_mask && !rl.modal && !rl.dropout_mask));
  const ModeFlags all = mode_flags(AblationMode::kMkgRl);
  CHECK((all.modal && all.rtg && all.dropout_mask && all.history_mask && all.modulation));
}

TEST_CASE("teacher forcing shift") {
  const ActionSlots a{10, 11, 12, 13, 14, 15, 16};
  const auto in = shifted_actions(a);
  CHECK(in[0] == Vocabulary::kBos);
  CHECK(in[1] == 10);
  CHECK(in[6] == 15);
}

TEST_CASE("streams per mode") {
  CHECK(SequenceModel(small_config(AblationMode::kNoImg)).context_streams(0) == std::vector<Stream>{Stream::kQuery});
  CHECK(SequenceModel(small_config(AblationMode::kRl)).context_streams(0) ==
        std::vector<Stream>{Stream::kRtg, Stream::kQuery});
  const SequenceModel full(small_config());
  CHECK(full.context_streams(0).size() == 4);
  CHECK(full.params().get("trunk.pos_cs")->value.rows() == kHorizon);
  CHECK(full.params().get("trunk.pos_a")->value.rows() == kHorizon);

  EncoderConfig sep = small_config();
  sep.separate_trunks = true;
  const SequenceModel three(sep);
  CHECK(three.trunk_count() == 3);
  CHECK(three.context_streams(1) == std::vector<Stream>{Stream::kRtg, Stream::kQuery, Stream::kImage});
  sep.mode = AblationMode::kRl;
  CHECK(SequenceModel(sep).trunk_count() == 1);
}

TEST_CASE("projection") {
  SequenceModel m(small_config());
  Rng rng(2);
  for (const char* name : {"trunk.proj.img.b", "trunk.proj.img.g", "trunk.proj.img.s"})
    for (double& v : m.params().get(name)->value.data()) v = rng.uniform(-1, 1);
  Tensor x({3, 8});
  for (double& v : x.data()) v = rng.normal();
  const ad::Var out = m.project(0, Stream::kImage, ad::constant(x));
  for (std::size_t r = 0; r < 3; ++r) {
    const auto ref = reference_projection(m, "trunk.proj.img", x.data().subspan(r * 8, 8));
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(std::abs(out->value.at(r, j) - ref[j]) < 1e-10);
      CHECK(out->value.at(r, j) > 0.0);
      CHECK(out->value.at(r, j) < 1.0);
    }
  }

  // Zero input with zero bias standardizes to zero, leaving sigmoid(shift).
  m.params().get("trunk.proj.img.b")->value.fill(0.0);
  const ad::Var zero = m.project(0, Stream::kImage, ad::constant(Tensor({1, 8})));
  for (std::size_t j = 0; j < 8; ++j)
    CHECK(zero->value[j] == doctest::Approx(sigmoid(m.params().get("trunk.proj.img.s")->value[j])).epsilon(1e-12));
}

TEST_CASE("projection is row-wise, so swapping timesteps swaps outputs") {
  const SequenceModel m(small_config());
  Rng rng(4);
  Tensor x({7, 8});
  for (double& v : x.data()) v = rng.normal();
  Tensor swapped = x;
  for (std::size_t j = 0; j < 8; ++j) std::swap(swapped.at(1, j), swapped.at(5, j));
  const Tensor a = m.project(0, Stream::kImage, ad::constant(x))->value;
  const Tensor b = m.project(0, Stream::kImage, ad::constant(swapped))->value;
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(a.at(1, j) == b.at(5, j));
    CHECK(a.at(5, j) == b.at(1, j));
    CHECK(a.at(3, j) == b.at(3, j));
  }
}

TEST_CASE("embedding is projection plus position") {
  const SequenceModel m(small_config());
  std::vector<Trajectory> trajs;
  const EncoderBatch batch = random_batch(2, 11, &trajs);
  const auto streams = m.embed(0, batch);
  const Tensor& emb = m.params().get("emb")->value;
  const Tensor& pos_a = m.params().get("trunk.pos_a")->value;
  const Tensor& pos_cs = m.params().get("trunk.pos_cs")->value;
  const Tensor& actions = streams[static_cast<int>(Stream::kAction)]->value;
  const Tensor& image = streams[static_cast<int>(Stream::kImage)]->value;
  for (std::size_t b = 0; b < 2; ++b) {
    const auto in = shifted_actions(trajs[b].actions);
    const auto img_proj = reference_projection(m, "trunk.proj.img", trajs[b].state.state.image);
    for (std::size_t t = 0; t < kHorizon; ++t) {
      const auto proj = reference_projection(m, "trunk.proj.a", emb.data().subspan(in[t] * 8, 8));
      for (std::size_t j = 0; j < 8; ++j) {
        CHECK(std::abs(actions.at(b * kHorizon + t, j) - (proj[j] + pos_a.at(t, j))) < 1e-12);
        CHECK(std::abs(image.at(b * kHorizon + t, j) - (img_proj[j] + pos_cs.at(t, j))) < 1e-12);
      }
    }
  }
}

TEST_CASE("attention rows sum to one under the timestep mask") {
  const SequenceModel m(small_config());
  const EncoderBatch batch = random_batch(2, 3);
  const auto streams = m.embed(0, batch);
  const auto& group = m.context_streams(0);
  std::vector<ad::Var> parts;
  for (Stream s : group) parts.push_back(streams[static_cast<int>(s)]);
  Tensor weights;
  m.block(0, 0, group, ad::concat_rows(parts), 2, &weights);
  const std::size_t n = group.size() * kHorizon;
  CHECK(weights.cols() == n);
  for (std::size_t r = 0; r < weights.rows(); ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (c % kHorizon > (r % n) % kHorizon) CHECK(weights.at(r, c) == 0.0);
      total += weights.at(r, c);
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("block with zeroed sublayers is the identity") {
  SequenceModel m(small_config());
  for (const char* name : {"trunk.l0.wo", "trunk.l0.ffn2.w", "trunk.l0.ffn2.b"})
    m.params().get(name)->value.fill(0.0);
  Rng rng(6);
  Tensor x({kHorizon, 8});
  for (double& v : x.data()) v = rng.normal();
  static const std::vector<Stream> group{Stream::kAction};
  CHECK(m.block(0, 0, group, ad::constant(x), 1)->value == x);
}

TEST_CASE("block gradient check at d=8") {
  const SequenceModel m(small_config());
  Rng rng(7);
  Tensor x({2 * 2 * kHorizon, 8});
  for (double& v : x.data()) v = rng.normal();
  Tensor w(x.shape());
  for (double& v : w.data()) v = rng.uniform(-1, 1);
  const std::vector<Stream> group{Stream::kRtg, Stream::kQuery};
  const double err = ad::fd_check(
      [&](const ad::Var& in) { return ad::weighted_sum(m.block(0, 0, group, in, 2), w); }, x);
  CHECK(err < 1e-4);
}

TEST_CASE("two layers compose the block twice") {
  const SequenceModel m(small_config(AblationMode::kMkgRl, 8, 2, 2));
  const EncoderBatch batch = random_batch(2, 5);
  const ad::Var direct = m.encode_actions(0, batch);
  const auto streams = m.embed(0, batch);
  static const std::vector<Stream> group{Stream::kAction};
  ad::Var x = streams[static_cast<int>(Stream::kAction)];
  x = m.block(0, 1, group, m.block(0, 0, group, x, 2), 2);
  const Tensor& g = m.params().get("trunk.lnf.g")->value;
  const Tensor& s = m.params().get("trunk.lnf.s")->value;
  const Tensor normed = ad::layer_norm_rows(x)->value;
  for (std::size_t r = 0; r < normed.rows(); ++r)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(direct->value.at(r, j) == doctest::Approx(normed.at(r, j) * g[j] + s[j]).epsilon(1e-12));
}

TEST_CASE("action states ignore the image stream") {
  const SequenceModel m(small_config());
  EncoderBatch a = random_batch(3, 8);
  EncoderBatch b = a;
  for (double& v : b.image) v += 0.75;
  CHECK(m.encode_actions(0, a)->value == m.encode_actions(0, b)->value);
  CHECK_FALSE(m.forward(a).fig->value == m.forward(b).fig->value);
}

TEST_CASE("causality: later inputs never change earlier logits") {
  for (AblationMode mode : {AblationMode::kNoImg, AblationMode::kMkgRl}) {
    const SequenceModel m(small_config(mode, 8, 2, 2));
    const EncoderBatch base = random_batch(2, 21);
    const HeadLogits ref = m.forward(base);
    for (std::size_t k = 0; k + 1 < kHorizon; ++k) {
      EncoderBatch changed = base;
      for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t t = k + 1; t < kHorizon; ++t) {
          changed.actions[b * kHorizon + t] = (changed.actions[b * kHorizon + t] + 3) % kVocab;
          changed.rtg[b * kHorizon + t] += 0.9;
        }
      }
      const HeadLogits out = m.forward(changed);
      for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t t = 0; t < kHorizon; ++t) {
          for (std::size_t c = 0; c < kVocab; ++c) {
            const double x = ref.concat->value.at(b * kHorizon + t, c);
            const double y = out.concat->value.at(b * kHorizon + t, c);
            if (t <= k) CHECK(x == y);
          }
        }
        bool later_moved = false;
        for (std::size_t c = 0; c < kVocab; ++c)
          later_moved = later_moved || ref.concat->value.at(b * kHorizon + k + 1, c) !=
                                           out.concat->value.at(b * kHorizon + k + 1, c);
        CHECK(later_moved);
      }
    }
  }
}

TEST_CASE("deterministic for a fixed seed") {
  const EncoderBatch batch = random_batch(2, 9);
  const SequenceModel a(small_config()), b(small_config());
  CHECK(a.forward(batch).concat->value == b.forward(batch).concat->value);
  EncoderConfig other = small_config();
  other.seed = 43;
  CHECK_FALSE(SequenceModel(other).forward(batch).concat->value == a.forward(batch).concat->value);
}

TEST_CASE("full model gradient check at d=8, H=2, L=1") {
  SequenceModel m(small_config());
  const EncoderBatch batch = random_batch(2, 13);
  Rng rng(1);
  Tensor w({2 * kHorizon, kVocab});
  for (double& v : w.data()) v = rng.uniform(-1, 1);
  auto loss = [&] {
    const HeadLogits h = m.forward(batch);
    return ad::add(ad::weighted_sum(h.concat, w),
                   ad::add(ad::weighted_sum(h.fig, w), ad::weighted_sum(h.ocr, w)));
  };
  for (const std::string& name : m.params().names()) {
    INFO(name);
    CHECK(param_fd_error(m, name, loss) < 1e-4);
  }
}

TEST_CASE("head bias compensation") {
  EncoderConfig c = small_config();
  const EncoderBatch batch = random_batch(1, 3);
  const HeadLogits plain = SequenceModel(c).forward(batch);
  c.bias_b = 0.4;
  const HeadLogits biased = SequenceModel(c).forward(batch);
  CHECK(plain.concat->value == biased.concat->value);
  CHECK_FALSE(plain.fig->value == biased.fig->value);
}

TEST_CASE("branch parameter sets") {
  const SequenceModel m(small_config());
  const auto fig = m.branch_parameters(Stream::kImage);
  const auto ocr = m.branch_parameters(Stream::kOcr);
  CHECK(std::find(fig.begin(), fig.end(), "trunk.proj.img.w") != fig.end());
  CHECK(std::find(fig.begin(), fig.end(), "trunk.l0.wq.img") != fig.end());
  CHECK(std::find(fig.begin(), fig.end(), "head.fig.w2") != fig.end());
  CHECK(std::find(fig.begin(), fig.end(), "trunk.proj.ocr.w") == fig.end());
  CHECK(std::find(ocr.begin(), ocr.end(), "head.ocr.b1") != ocr.end());
  for (const auto& n : fig) CHECK(std::find(ocr.begin(), ocr.end(), n) == ocr.end());
  CHECK(SequenceModel(small_config(AblationMode::kRl)).branch_parameters(Stream::kImage).empty());
  CHECK_THROWS_AS(m.branch_parameters(Stream::kQuery), ContractError);
}
