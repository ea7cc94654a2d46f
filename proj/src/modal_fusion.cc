#include "kgpath/modal_fusion.h"

#include <cmath>
#include <string>

#include "kgpath/errors.h"
#include "kgpath/rng.h"

namespace kgpath {

const char* fusion_modality_name(FusionModality m) {
  switch (m) {
    case FusionModality::kStructure:
      return "structure";
    case FusionModality::kImage:
      return "image";
    case FusionModality::kOcr:
      return "ocr";
  }
  return "?";
}

Tensor tokenize(std::span<const double> raw, std::size_t token_width) {
  if (raw.empty() || token_width == 0) throw DimensionError("tokenize: empty input or token width");
  const std::size_t rows = (raw.size() + token_width - 1) / token_width;
  Tensor t({rows, token_width});
  std::copy(raw.begin(), raw.end(), t.data().begin());
  return t;
}

AttentionSummary modal_attention(const BranchParams& p, const ad::Var& tokens) {
  if (tokens->value.cols() != p.ff1_w->value.rows()) {
    throw DimensionError("modal_attention: token width " + tokens->value.shape_string() +
                         " vs map " + p.ff1_w->value.shape_string());
  }
  using namespace ad;
  AttentionSummary out;
  Var hidden = relu(add_row(matmul(tokens, p.ff1_w), p.ff1_b));
  out.features = add_row(matmul(hidden, p.ff2_w), p.ff2_b);
  out.weights = softmax_rows(transpose(matmul(out.features, p.score)));
  out.summary = matmul(out.weights, out.features);
  return out;
}

GuidedFilter guided_filter(const BranchParams& p, const ad::Var& summary, const ad::Var& tokens) {
  if (tokens->value.cols() != p.guide_token->value.rows() ||
      summary->value.cols() != p.guide_summary->value.rows()) {
    throw DimensionError("guided_filter: tokens " + tokens->value.shape_string() + ", summary " +
                         summary->value.shape_string());
  }
  using namespace ad;
  GuidedFilter out;
  Var guide = relu(matmul(summary, p.guide_summary));
  Var per_token = relu(matmul(tokens, p.guide_token));
  Var logits = matmul(mul_row(per_token, guide), p.guide_out);
  out.weights = softmax_rows(transpose(logits));
  out.filtered = matmul(out.weights, tokens);
  return out;
}

ad::Var reduce_features(const BranchParams& p, const ad::Var& filtered) {
  return ad::sigmoid(ad::add_row(ad::matmul(filtered, p.enc_w), p.enc_b));
}

ad::Var reconstruct(const BranchParams& p, const ad::Var& reduced) {
  return ad::add_row(ad::matmul(reduced, p.dec_w), p.dec_b);
}

const std::vector<std::optional<std::vector<double>>>& FusionInputs::of(FusionModality m) const {
  switch (m) {
    case FusionModality::kStructure:
      return structure;
    case FusionModality::kImage:
      return image;
    case FusionModality::kOcr:
      return ocr;
  }
  return structure;
}

FusionInputs make_fusion_inputs(const Vocabulary& vocab, const std::vector<Triple>& train,
                                const FeatureRegistry& features) {
  const std::size_t n = vocab.num_entities();
  const std::size_t width = vocab.num_relations();
  FusionInputs in;
  std::vector<std::vector<double>> counts(n, std::vector<double>(width, 0.0));
  for (const Triple& t : train) counts[t.head][t.relation] += 1.0;
  in.structure.resize(n);
  in.image.resize(n);
  in.ocr.resize(n);
  for (std::size_t e = 0; e < n; ++e) {
    for (double& c : counts[e]) c = std::log1p(c);
    in.structure[e] = std::move(counts[e]);
    const auto& f = features.lookup(static_cast<EntityId>(e));
    in.image[e] = f.image;
    in.ocr[e] = f.ocr;
  }
  return in;
}

std::vector<double> FusedState::concatenated() const {
  std::vector<double> out(structure);
  out.insert(out.end(), image.begin(), image.end());
  out.insert(out.end(), ocr.begin(), ocr.end());
  return out;
}

ModalFusion::ModalFusion(FusionConfig config, std::size_t structure_width,
                         std::size_t feature_width)
    : config_(config), raw_widths_{structure_width, feature_width, feature_width} {
  if (structure_width == 0 || feature_width == 0) {
    throw ConfigError("fusion: raw widths must be positive");
  }
  Rng rng(derive_seed(config_.seed, 0xf05e));
  const std::size_t tw = config_.token_width;
  const std::size_t hid = config_.hidden;
  const double s = config_.init_scale;
  for (FusionModality m : kFusionModalities) {
    const std::string pre = std::string(fusion_modality_name(m)) + ".";
    const std::size_t out = output_width(m);
    const std::size_t padded = tokenize(std::vector<double>(raw_width(m), 0.0), tw).size();
    BranchParams& b = branches_[static_cast<int>(m)];
    b.ff1_w = params_.add_uniform(pre + "ff1_w", tw, hid, s, rng);
    b.ff1_b = params_.add_constant(pre + "ff1_b", 1, hid, 0.0);
    b.ff2_w = params_.add_uniform(pre + "ff2_w", hid, tw, s, rng);
    b.ff2_b = params_.add_constant(pre + "ff2_b", 1, tw, 0.0);
    b.score = params_.add_uniform(pre + "score", tw, 1, s, rng);
    b.guide_summary = params_.add_uniform(pre + "guide_summary", tw, hid, s, rng);
    b.guide_token = params_.add_uniform(pre + "guide_token", tw, hid, s, rng);
    b.guide_out = params_.add_uniform(pre + "guide_out", hid, 1, s, rng);
    b.enc_w = params_.add_uniform(pre + "enc_w", tw, out, s, rng);
    b.enc_b = params_.add_constant(pre + "enc_b", 1, out, 0.0);
    b.dec_w = params_.add_uniform(pre + "dec_w", out, padded, s, rng);
    b.dec_b = params_.add_constant(pre + "dec_b", 1, padded, 0.0);
  }
}

std::size_t ModalFusion::raw_width(FusionModality m) const {
  return raw_widths_[static_cast<int>(m)];
}

std::size_t ModalFusion::output_width(FusionModality m) const {
  switch (m) {
    case FusionModality::kStructure:
      return config_.structure_dim;
    case FusionModality::kImage:
      return config_.image_dim;
    case FusionModality::kOcr:
      return config_.ocr_dim;
  }
  return 0;
}

ad::Var ModalFusion::modality_loss(FusionModality m, std::span<const double> raw) const {
  if (raw.size() != raw_width(m)) {
    throw DimensionError(std::string(fusion_modality_name(m)) + " raw width " +
                         std::to_string(raw.size()) + " != " + std::to_string(raw_width(m)));
  }
  const BranchParams& b = branch(m);
  const Tensor tokens_t = tokenize(raw, config_.token_width);
  ad::Var tokens = ad::constant(tokens_t);
  auto att = modal_attention(b, tokens);
  auto filt = guided_filter(b, att.summary, tokens);
  ad::Var recon = reconstruct(b, reduce_features(b, filt.filtered));
  Tensor target({1, tokens_t.size()}, tokens_t.storage());
  return ad::mean(ad::square(ad::sub(recon, ad::constant(std::move(target)))));
}

ad::Var ModalFusion::total_loss(const FusionInputs& inputs, std::size_t* count) const {
  std::vector<ad::Var> terms;
  for (FusionModality m : kFusionModalities) {
    for (const auto& raw : inputs.of(m)) {
      if (raw) terms.push_back(modality_loss(m, *raw));
    }
  }
  *count = terms.size();
  if (terms.empty()) return ad::constant(Tensor::scalar(0.0));
  return ad::mean(ad::concat_rows(terms));
}

double ModalFusion::reconstruction_loss(const FusionInputs& inputs) const {
  ad::NoGradGuard no_grad;
  std::size_t count = 0;
  return total_loss(inputs, &count)->value.item();
}

PretrainReport ModalFusion::pretrain(const FusionInputs& inputs) {
  if (inputs.entity_count() == 0) throw ConfigError("fusion pretrain: no entities");
  bool any_featured = false;
  for (std::size_t e = 0; e < inputs.entity_count(); ++e) {
    any_featured = any_featured || inputs.image[e].has_value() || inputs.ocr[e].has_value();
  }
  if (!any_featured) throw ConfigError("fusion pretrain: no entity has image or OCR features");

  PretrainReport report;
  double lr = config_.lr;
  double current = reconstruction_loss(inputs);
  report.initial_loss = current;
  const auto& vars = params_.vars();
  for (std::size_t epoch = 0; epoch < config_.epochs; ++epoch) {
    params_.zero_grad();
    std::size_t count = 0;
    ad::Var loss = total_loss(inputs, &count);
    ad::backward(loss);
    std::vector<Tensor> saved, grads;
    for (const auto& v : vars) {
      saved.push_back(v->value);
      grads.push_back(ad::gradient(v));
    }
    bool accepted = false;
    for (int attempt = 0; attempt < 40 && !accepted; ++attempt) {
      for (std::size_t k = 0; k < vars.size(); ++k) {
        for (std::size_t i = 0; i < vars[k]->value.size(); ++i) {
          vars[k]->value[i] = saved[k][i] - lr * grads[k][i];
        }
      }
      const double candidate = reconstruction_loss(inputs);
      if (std::isfinite(candidate) && candidate <= current) {
        current = candidate;
        accepted = true;
        lr *= 1.1;
      } else {
        lr *= 0.5;
      }
    }
    if (!accepted) {
      for (std::size_t k = 0; k < vars.size(); ++k) vars[k]->value = saved[k];
    }
    report.loss_curve.push_back(current);
  }
  params_.zero_grad();
  report.final_loss = current;
  trained_ = true;
  return report;
}

std::vector<double> ModalFusion::encode(FusionModality m, std::span<const double> raw) const {
  if (!trained_) throw StateError("fusion encoder used before pretraining");
  if (raw.size() != raw_width(m)) {
    throw DimensionError(std::string(fusion_modality_name(m)) + " raw width " +
                         std::to_string(raw.size()) + " != " + std::to_string(raw_width(m)));
  }
  ad::NoGradGuard no_grad;
  const BranchParams& b = branch(m);
  ad::Var tokens = ad::constant(tokenize(raw, config_.token_width));
  auto att = modal_attention(b, tokens);
  auto filt = guided_filter(b, att.summary, tokens);
  const ad::Var h = reduce_features(b, filt.filtered);
  return h->value.storage();
}

FusedState ModalFusion::fuse_entity(const FusionInputs& inputs, EntityId e) const {
  if (e < 0 || static_cast<std::size_t>(e) >= inputs.entity_count()) {
    throw LookupError("fuse_entity: entity id out of range: " + std::to_string(e));
  }
  auto part = [&](FusionModality m) {
    const auto& raw = inputs.of(m)[e];
    if (!raw) return std::vector<double>(output_width(m), config_.null_value);
    return encode(m, *raw);
  };
  return {part(FusionModality::kStructure), part(FusionModality::kImage),
          part(FusionModality::kOcr)};
}

FusedStateTable::FusedStateTable(Tensor table, std::size_t structure_dim, std::size_t image_dim,
                                 std::size_t ocr_dim)
    : table_(std::move(table)), dims_{structure_dim, image_dim, ocr_dim} {
  if (table_.cols() != width()) {
    throw DimensionError("fused state table " + table_.shape_string() + " vs widths " +
                         std::to_string(width()));
  }
}

FusedStateTable FusedStateTable::build(const ModalFusion& fusion, const FusionInputs& inputs) {
  const auto& cfg = fusion.config();
  Tensor table({inputs.entity_count(), cfg.state_width()});
  for (std::size_t e = 0; e < inputs.entity_count(); ++e) {
    const auto row = fusion.fuse_entity(inputs, static_cast<EntityId>(e)).concatenated();
    std::copy(row.begin(), row.end(), table.data().begin() + e * cfg.state_width());
  }
  return FusedStateTable(std::move(table), cfg.structure_dim, cfg.image_dim, cfg.ocr_dim);
}

FusedState FusedStateTable::state(EntityId e) const {
  if (table_.empty()) return {};
  if (e < 0 || static_cast<std::size_t>(e) >= table_.rows()) {
    throw LookupError("fused state: entity id out of range: " + std::to_string(e));
  }
  auto row = table_.data().subspan(e * width(), width());
  FusedState s;
  s.structure.assign(row.begin(), row.begin() + dims_[0]);
  s.image.assign(row.begin() + dims_[0], row.begin() + dims_[0] + dims_[1]);
  s.ocr.assign(row.begin() + dims_[0] + dims_[1], row.end());
  return s;
}

FusedQuery fuse_query(const FusedStateTable& table, const Vocabulary& vocab, EntityId head,
                      RelationId relation) {
  FusedQuery q;
  q.query_tokens = {Vocabulary::kBos, vocab.entity_token(head), vocab.relation_token(relation)};
  q.state = table.state(head);
  return q;
}

}  // namespace kgpath
