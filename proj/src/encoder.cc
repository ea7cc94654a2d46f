#include "kgpath/encoder.h"

#include <map>
#include <mutex>

#include "kgpath/errors.h"

namespace kgpath {

ModeFlags mode_flags(AblationMode mode) {
  switch (mode) {
    case AblationMode::kNoImg:
      return {};
    case AblationMode::kMkg:
      return {.modal = true, .modulation = true};
    case AblationMode::kRl:
      return {.rtg = true, .history_mask = true};
    case AblationMode::kMkgRl:
      return {.modal = true, .rtg = true, .dropout_mask = true, .history_mask = true,
              .modulation = true};
  }
  return {};
}

AblationMode parse_mode(const std::string& name) {
  if (name == "no-img") return AblationMode::kNoImg;
  if (name == "mkg") return AblationMode::kMkg;
  if (name == "rl") return AblationMode::kRl;
  if (name == "mkg+rl") return AblationMode::kMkgRl;
  throw ConfigError("unknown mode '" + name + "' (expected no-img, mkg, rl or mkg+rl)");
}

std::string mode_name(AblationMode mode) {
  switch (mode) {
    case AblationMode::kNoImg:
      return "no-img";
    case AblationMode::kMkg:
      return "mkg";
    case AblationMode::kRl:
      return "rl";
    case AblationMode::kMkgRl:
      return "mkg+rl";
  }
  return "?";
}

const char* stream_tag(Stream s) {
  static constexpr const char* kTags[] = {"r", "q", "img", "ocr", "a"};
  return kTags[static_cast<int>(s)];
}

void EncoderConfig::validate() const {
  if (width == 0 || heads == 0 || layers == 0) throw ConfigError("width, heads and layers must be positive");
  if (width % heads != 0) {
    throw ConfigError("width " + std::to_string(width) + " is not divisible by heads " +
                      std::to_string(heads));
  }
  if (ffn_mult == 0) throw ConfigError("ffn_mult must be positive");
  if (vocab_size <= static_cast<std::size_t>(Vocabulary::kNumSpecial)) {
    throw ConfigError("vocabulary too small");
  }
}

std::array<TokenId, kHorizon> shifted_actions(const ActionSlots& actions) {
  std::array<TokenId, kHorizon> in{};
  in[0] = Vocabulary::kBos;
  for (std::size_t n = 1; n < kHorizon; ++n) in[n] = actions[n - 1];
  return in;
}

EncoderBatch make_batch(const std::vector<const Trajectory*>& trajectories,
                        const std::vector<std::array<TokenId, kHorizon>>* inputs) {
  if (inputs && inputs->size() != trajectories.size()) {
    throw DimensionError("make_batch: " + std::to_string(inputs->size()) + " action rows for " +
                         std::to_string(trajectories.size()) + " trajectories");
  }
  EncoderBatch b;
  b.size = trajectories.size();
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const Trajectory& t = *trajectories[i];
    b.rtg.insert(b.rtg.end(), t.rtg.begin(), t.rtg.end());
    for (TokenId q : t.state.query_tokens) b.query.push_back(q);
    const FusedState& s = t.state.state;
    b.structure.insert(b.structure.end(), s.structure.begin(), s.structure.end());
    b.image.insert(b.image.end(), s.image.begin(), s.image.end());
    b.ocr.insert(b.ocr.end(), s.ocr.begin(), s.ocr.end());
    const auto in = inputs ? (*inputs)[i] : shifted_actions(t.actions);
    for (TokenId a : in) b.actions.push_back(a);
  }
  return b;
}

namespace {

Tensor tiled(const std::vector<double>& per_item, std::size_t size, std::size_t width) {
  if (per_item.size() != size * width) {
    throw DimensionError("encoder input holds " + std::to_string(per_item.size()) +
                         " values, expected " + std::to_string(size) + " x " +
                         std::to_string(width));
  }
  Tensor out({size * kHorizon, width});
  for (std::size_t b = 0; b < size; ++b)
    for (std::size_t t = 0; t < kHorizon; ++t)
      for (std::size_t c = 0; c < width; ++c) out.at(b * kHorizon + t, c) = per_item[b * width + c];
  return out;
}

std::vector<std::int64_t> tiled_ids(const std::vector<std::int64_t>& query, std::size_t size,
                                    std::size_t column) {
  std::vector<std::int64_t> ids(size * kHorizon);
  for (std::size_t b = 0; b < size; ++b)
    for (std::size_t t = 0; t < kHorizon; ++t) ids[b * kHorizon + t] = query[b * 3 + column];
  return ids;
}

}  // namespace

SequenceModel::SequenceModel(EncoderConfig config) : config_(config), flags_(mode_flags(config.mode)) {
  config_.validate();
  const std::size_t d = config_.width;

  std::vector<Stream> all;
  if (flags_.rtg) all.push_back(Stream::kRtg);
  all.push_back(Stream::kQuery);
  if (flags_.modal) {
    all.push_back(Stream::kImage);
    all.push_back(Stream::kOcr);
  }
  if (config_.separate_trunks && flags_.modal) {
    std::vector<Stream> fig, ocr;
    for (Stream s : all) {
      if (s != Stream::kOcr) fig.push_back(s);
      if (s != Stream::kImage) ocr.push_back(s);
    }
    trunks_ = {{"concat", all}, {"fig", fig}, {"ocr", ocr}};
    head_trunk_ = {0, 1, 2};
  } else {
    trunks_ = {{"trunk", all}};
    head_trunk_ = {0, 0, 0};
  }

  Rng rng(config_.seed);
  const double s = config_.init_scale;
  params_.add_uniform("emb", config_.vocab_size, d, s, rng);
  for (std::size_t ti = 0; ti < trunks_.size(); ++ti) {
    std::vector<Stream> streams = trunks_[ti].context;
    streams.push_back(Stream::kAction);
    for (Stream st : streams) {
      const std::string base = std::string("proj.") + stream_tag(st);
      params_.add_uniform(pname(ti, base + ".w"), raw_width(st), d, s, rng);
      // A nonzero bias keeps the magnitude of a width-1 input (the
      // return-to-go) alive through the normalization.
      params_.add_uniform(pname(ti, base + ".b"), 1, d, 1.0, rng);
      params_.add_constant(pname(ti, base + ".g"), 1, d, 1.0);
      params_.add_constant(pname(ti, base + ".s"), 1, d, 0.0);
    }
    params_.add_uniform(pname(ti, "pos_cs"), kHorizon, d, s, rng);
    params_.add_uniform(pname(ti, "pos_a"), kHorizon, d, s, rng);
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string L = "l" + std::to_string(l) + ".";
      params_.add_constant(pname(ti, L + "ln1.g"), 1, d, 1.0);
      params_.add_constant(pname(ti, L + "ln1.s"), 1, d, 0.0);
      for (Stream st : streams) {
        for (const char* m : {"wq.", "wk.", "wv."}) {
          params_.add_uniform(pname(ti, L + m + stream_tag(st)), d, d, s, rng);
        }
      }
      params_.add_uniform(pname(ti, L + "wo"), d, d, s, rng);
      params_.add_constant(pname(ti, L + "ln2.g"), 1, d, 1.0);
      params_.add_constant(pname(ti, L + "ln2.s"), 1, d, 0.0);
      params_.add_uniform(pname(ti, L + "ffn1.w"), d, config_.ffn_mult * d, s, rng);
      params_.add_constant(pname(ti, L + "ffn1.b"), 1, config_.ffn_mult * d, 0.0);
      params_.add_uniform(pname(ti, L + "ffn2.w"), config_.ffn_mult * d, d, s, rng);
      params_.add_constant(pname(ti, L + "ffn2.b"), 1, d, 0.0);
    }
    params_.add_constant(pname(ti, "lnf.g"), 1, d, 1.0);
    params_.add_constant(pname(ti, "lnf.s"), 1, d, 0.0);
  }

  auto add_head = [&](const std::string& name, std::size_t inputs) {
    params_.add_uniform("head." + name + ".w1", inputs * d, d, s, rng);
    params_.add_constant("head." + name + ".b1", 1, d, 0.0);
    params_.add_uniform("head." + name + ".w2", d, config_.vocab_size, s, rng);
    params_.add_constant("head." + name + ".b2", 1, config_.vocab_size, 0.0);
  };
  add_head("concat", 1 + trunks_[head_trunk_[0]].context.size());
  if (flags_.modal) {
    add_head("fig", 2);
    add_head("ocr", 2);
  }
}

const std::vector<Stream>& SequenceModel::context_streams(std::size_t trunk) const {
  return trunks_.at(trunk).context;
}

std::string SequenceModel::pname(std::size_t trunk, const std::string& rest) const {
  return trunks_[trunk].prefix + "." + rest;
}

std::size_t SequenceModel::raw_width(Stream s) const {
  switch (s) {
    case Stream::kRtg:
      return 1;
    case Stream::kQuery:
      return 3 * config_.width + (flags_.modal ? config_.structure_dim : 0);
    case Stream::kImage:
      return config_.image_dim;
    case Stream::kOcr:
      return config_.ocr_dim;
    case Stream::kAction:
      return config_.width;
  }
  return 0;
}

ad::Var SequenceModel::affine_norm(const ad::Var& x, const std::string& prefix) const {
  return ad::add_row(ad::mul_row(ad::layer_norm_rows(x), p(prefix + ".g")), p(prefix + ".s"));
}

ad::Var SequenceModel::project(std::size_t trunk, Stream s, const ad::Var& raw) const {
  const std::string base = pname(trunk, std::string("proj.") + stream_tag(s));
  ad::Var lin = ad::add_row(ad::matmul(raw, p(base + ".w")), p(base + ".b"));
  return ad::sigmoid(affine_norm(lin, base));
}

ad::Var SequenceModel::raw_stream(Stream s, const EncoderBatch& batch) const {
  const std::size_t n = batch.size;
  switch (s) {
    case Stream::kRtg:
      if (batch.rtg.size() != n * kHorizon) throw DimensionError("return-to-go must fill the horizon");
      return ad::constant(Tensor({n * kHorizon, 1}, batch.rtg));
    case Stream::kQuery: {
      if (batch.query.size() != n * 3) throw DimensionError("query tokens must be 3 per item");
      std::vector<ad::Var> parts;
      for (std::size_t c = 0; c < 3; ++c) {
        const auto ids = tiled_ids(batch.query, n, c);
        parts.push_back(ad::gather_rows(p("emb"), ids));
      }
      if (flags_.modal) parts.push_back(ad::constant(tiled(batch.structure, n, config_.structure_dim)));
      return ad::concat_cols(parts);
    }
    case Stream::kImage:
      return ad::constant(tiled(batch.image, n, config_.image_dim));
    case Stream::kOcr:
      return ad::constant(tiled(batch.ocr, n, config_.ocr_dim));
    case Stream::kAction:
      if (batch.actions.size() != n * kHorizon) throw DimensionError("action inputs must fill the horizon");
      return ad::gather_rows(p("emb"), batch.actions);
  }
  throw ContractError("unknown stream");
}

ad::Var SequenceModel::tiled_positions(const ad::Var& table, std::size_t size) const {
  std::vector<std::int64_t> ids(size * kHorizon);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i % kHorizon);
  return ad::gather_rows(table, ids);
}

std::array<ad::Var, kNumStreams> SequenceModel::embed(std::size_t trunk, const EncoderBatch& batch) const {
  std::array<ad::Var, kNumStreams> out;
  const ad::Var pos_cs = tiled_positions(p(pname(trunk, "pos_cs")), batch.size);
  for (Stream s : trunks_[trunk].context) {
    out[static_cast<int>(s)] = ad::add(project(trunk, s, raw_stream(s, batch)), pos_cs);
  }
  out[static_cast<int>(Stream::kAction)] =
      ad::add(project(trunk, Stream::kAction, raw_stream(Stream::kAction, batch)),
              tiled_positions(p(pname(trunk, "pos_a")), batch.size));
  return out;
}

std::shared_ptr<const std::vector<std::uint8_t>> SequenceModel::timestep_mask(std::size_t streams) {
  static std::mutex mu;
  static std::map<std::size_t, std::shared_ptr<const std::vector<std::uint8_t>>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[streams];
  if (!slot) {
    const std::size_t n = streams * kHorizon;
    auto m = std::make_shared<std::vector<std::uint8_t>>(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) (*m)[i * n + j] = (j % kHorizon) <= (i % kHorizon);
    slot = m;
  }
  return slot;
}

ad::Var SequenceModel::block(std::size_t trunk, std::size_t layer, const std::vector<Stream>& group,
                             const ad::Var& x, std::size_t size, Tensor* weights_out) const {
  const std::string L = pname(trunk, "l" + std::to_string(layer) + ".");
  const std::size_t rows = size * kHorizon;
  const ad::Var h = affine_norm(x, L + "ln1");
  std::vector<ad::Var> q, k, v;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const ad::Var part = group.size() == 1 ? h : ad::slice_rows(h, i * rows, rows);
    const std::string tag = stream_tag(group[i]);
    q.push_back(ad::matmul(part, p(L + "wq." + tag)));
    k.push_back(ad::matmul(part, p(L + "wk." + tag)));
    v.push_back(ad::matmul(part, p(L + "wv." + tag)));
  }
  const ad::AttentionLayout layout{group.size(), size, kHorizon, config_.heads};
  const ad::Var att = ad::grouped_attention(
      group.size() == 1 ? q[0] : ad::concat_rows(q), group.size() == 1 ? k[0] : ad::concat_rows(k),
      group.size() == 1 ? v[0] : ad::concat_rows(v), layout, timestep_mask(group.size()),
      weights_out);
  const ad::Var mid = ad::add(x, ad::matmul(att, p(L + "wo")));
  const ad::Var h2 = affine_norm(mid, L + "ln2");
  const ad::Var ff = ad::add_row(
      ad::matmul(ad::relu(ad::add_row(ad::matmul(h2, p(L + "ffn1.w")), p(L + "ffn1.b"))),
                 p(L + "ffn2.w")),
      p(L + "ffn2.b"));
  return ad::add(mid, ff);
}

StreamStates SequenceModel::encode_context(std::size_t trunk, const EncoderBatch& batch) const {
  const auto& group = trunks_.at(trunk).context;
  const ad::Var pos_cs = tiled_positions(p(pname(trunk, "pos_cs")), batch.size);
  std::vector<ad::Var> parts;
  for (Stream s : group) parts.push_back(ad::add(project(trunk, s, raw_stream(s, batch)), pos_cs));
  ad::Var x = parts.size() == 1 ? parts[0] : ad::concat_rows(parts);
  for (std::size_t l = 0; l < config_.layers; ++l) x = block(trunk, l, group, x, batch.size);
  x = affine_norm(x, pname(trunk, "lnf"));
  StreamStates out;
  out.size = batch.size;
  const std::size_t rows = batch.size * kHorizon;
  for (std::size_t i = 0; i < group.size(); ++i) {
    out.streams[static_cast<int>(group[i])] = group.size() == 1 ? x : ad::slice_rows(x, i * rows, rows);
  }
  return out;
}

ad::Var SequenceModel::encode_actions(std::size_t trunk, const EncoderBatch& batch) const {
  ad::Var x = ad::add(project(trunk, Stream::kAction, raw_stream(Stream::kAction, batch)),
                      tiled_positions(p(pname(trunk, "pos_a")), batch.size));
  static const std::vector<Stream> kGroup = {Stream::kAction};
  for (std::size_t l = 0; l < config_.layers; ++l) x = block(trunk, l, kGroup, x, batch.size);
  return affine_norm(x, pname(trunk, "lnf"));
}

HeadLogits SequenceModel::heads(const std::vector<StreamStates>& context,
                                const std::vector<ad::Var>& actions) const {
  if (context.size() != trunks_.size() || actions.size() != trunks_.size()) {
    throw DimensionError("heads: expected states from " + std::to_string(trunks_.size()) + " trunks");
  }
  auto mlp = [&](const std::string& name, const ad::Var& in) {
    const ad::Var hidden =
        ad::relu(ad::add_row(ad::matmul(in, p("head." + name + ".w1")), p("head." + name + ".b1")));
    return ad::add_row(ad::matmul(hidden, p("head." + name + ".w2")), p("head." + name + ".b2"));
  };
  HeadLogits out;
  {
    const std::size_t t = head_trunk_[0];
    std::vector<ad::Var> parts{actions[t]};
    for (Stream s : trunks_[t].context) parts.push_back(context[t].streams[static_cast<int>(s)]);
    out.concat = mlp("concat", ad::concat_cols(parts));
  }
  if (flags_.modal) {
    const double half_b = 0.5 * config_.bias_b;
    auto single = [&](std::size_t t, Stream s) {
      std::vector<ad::Var> parts{actions[t], context[t].streams[static_cast<int>(s)]};
      ad::Var in = ad::concat_cols(parts);
      return half_b == 0.0 ? in : ad::add_scalar(in, half_b);
    };
    out.fig = mlp("fig", single(head_trunk_[1], Stream::kImage));
    out.ocr = mlp("ocr", single(head_trunk_[2], Stream::kOcr));
  }
  return out;
}

HeadLogits SequenceModel::forward(const EncoderBatch& batch) const {
  std::vector<StreamStates> ctx;
  std::vector<ad::Var> act;
  for (std::size_t t = 0; t < trunks_.size(); ++t) {
    ctx.push_back(encode_context(t, batch));
    act.push_back(encode_actions(t, batch));
  }
  return heads(ctx, act);
}

std::vector<std::string> SequenceModel::branch_parameters(Stream modal) const {
  if (modal != Stream::kImage && modal != Stream::kOcr) {
    throw ContractError("branch_parameters: only the image and OCR branches are modulated");
  }
  std::vector<std::string> out;
  if (!flags_.modal) return out;
  const std::string tag = stream_tag(modal);
  const std::string head = modal == Stream::kImage ? "head.fig." : "head.ocr.";
  for (const std::string& name : params_.names()) {
    const bool stream_param = name.find(".proj." + tag + ".") != std::string::npos ||
                              name.ends_with(".wq." + tag) || name.ends_with(".wk." + tag) ||
                              name.ends_with(".wv." + tag);
    if (stream_param || name.starts_with(head)) out.push_back(name);
  }
  return out;
}

}  // namespace kgpath
