#include "kgpath/pipeline.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "kgpath/errors.h"
#include "kgpath/logging.h"
#include "kgpath/masks.h"

namespace kgpath {

std::vector<Triple> forward_training(const Dataset& data, const RunConfig& config) {
  std::vector<Triple> out = data.train.triples;
  if (config.train_limit > 0 && out.size() > config.train_limit) out.resize(config.train_limit);
  return out;
}

FusionStage run_fusion(const Dataset& data, const std::vector<Triple>& augmented_train,
                       const RunConfig& config) {
  FusionStage stage;
  const FusionInputs inputs = make_fusion_inputs(data.vocab, augmented_train, data.features);
  stage.fusion = std::make_unique<ModalFusion>(config.fusion(), data.vocab.num_relations(),
                                               data.features.width());
  stage.report = stage.fusion->pretrain(inputs);
  stage.states = FusedStateTable::build(*stage.fusion, inputs);
  return stage;
}

std::vector<MinedTriple> mine_supervision(const KgGraph& graph, const Vocabulary& vocab,
                                          const std::vector<Triple>& queries,
                                          std::size_t max_hops) {
  std::vector<MinedTriple> out;
  out.reserve(queries.size());
  for (const Triple& q : queries) out.push_back({q, select_supervision(graph, vocab, q, max_hops)});
  return out;
}

std::vector<Trajectory> build_trajectories(const std::vector<MinedTriple>& mined,
                                           const RunConfig& config, const Vocabulary& vocab,
                                           const FusedStateTable& states,
                                           const FeatureRegistry& features) {
  const RewardConfig reward = config.reward();
  reward.validate();
  const SimilarityFn sim = image_similarity(features);
  std::vector<Trajectory> out;
  out.reserve(mined.size());
  for (const MinedTriple& m : mined) {
    out.push_back(build_trajectory(m.triple, m.path, reward, vocab, states, sim));
  }
  return out;
}

MaskedSample mask_sample(const Trajectory& trajectory, const ModeFlags& flags,
                         const RunConfig& config, std::uint64_t epoch, std::uint64_t index) {
  MaskedSample s;
  s.inputs = shifted_actions(trajectory.actions);
  for (std::size_t n = 0; n < kHorizon; ++n) {
    s.supervised[n] = trajectory.corrective ? n == 2 : trajectory.actions[n] != Vocabulary::kPad;
  }
  if (!flags.dropout_mask && !flags.history_mask && !flags.rtg) return s;
  Rng rng = mask_rng(config.seed, epoch, index);
  // Positions 1..6 carry a_1..a_6; BOS and the context streams are never masked.
  if (flags.dropout_mask) {
    const DropoutMask dm = dropout_mask(kHorizon - 1, config.p_k, config.p_m, rng);
    for (std::size_t i = 0; i + 1 < kHorizon; ++i) {
      if (!dm.masked[i]) continue;
      s.inputs[i + 1] = Vocabulary::kMask;
      s.supervised[i] = false;
    }
  }
  if (flags.history_mask) {
    const HistoryMask hm = history_mask(kHorizon - 1, config.eta, rng);
    for (std::size_t i = 0; i + 1 < kHorizon; ++i)
      if (hm.masked[i]) s.inputs[i + 1] = Vocabulary::kMask;
    s.history_fired = hm.activated;
  }
  if (flags.rtg && config.blind_reward_rate > 0.0) s.blind_rewards = rng.bernoulli(config.blind_reward_rate);
  return s;
}

std::string format_epoch_log(const EpochLog& log) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "epoch %zu  L_fig %.6f  L_ocr %.6f  L_concat %.6f  rho_fig %.4f  rho_ocr %.4f  "
                "coeff_fig %.4f  coeff_ocr %.4f",
                log.epoch, log.l_fig, log.l_ocr, log.l_concat, log.rho_fig, log.rho_ocr,
                log.coeff_fig, log.coeff_ocr);
  return buf;
}

Trainer::Trainer(TrainedModel& model, std::vector<Trajectory> trajectories)
    : model_(model),
      trajectories_(std::move(trajectories)),
      loss_(model.config.loss()),
      adam_(AdamConfig{.lr = model.config.lr}),
      noise_rng_(derive_seed(model.config.seed, 4)) {
  loss_.validate();
  if (trajectories_.empty()) throw ContractError("Trainer: no trajectories");
  if (model_.net->flags().rtg) {
    const RewardConfig reward = model_.config.reward();
    blind_ = trajectories_;
    for (Trajectory& t : blind_) t.rtg = inference_rtg(t.actions, t.corrective, model_.vocab, reward);
  }
  fig_params_ = model_.net->branch_parameters(Stream::kImage);
  ocr_params_ = model_.net->branch_parameters(Stream::kOcr);
}

ad::Var Trainer::batch_loss(const std::vector<std::size_t>& batch, std::size_t epoch,
                            BranchLosses* losses, std::size_t* contributing) const {
  const SequenceModel& net = *model_.net;
  std::vector<const Trajectory*> items;
  std::vector<std::array<TokenId, kHorizon>> inputs;
  std::vector<MaskedSample> samples;
  for (std::size_t idx : batch) {
    MaskedSample s = mask_sample(trajectories_.at(idx), net.flags(), model_.config, epoch, idx);
    if (std::none_of(s.supervised.begin(), s.supervised.end(), [](bool b) { return b; })) continue;
    items.push_back(s.blind_rewards ? &blind_[idx] : &trajectories_[idx]);
    inputs.push_back(s.inputs);
    samples.push_back(s);
  }
  if (contributing) *contributing = items.size();
  if (items.empty()) return nullptr;

  const HeadLogits logits = net.forward(make_batch(items, &inputs));
  const std::size_t rows = items.size() * kHorizon;
  std::vector<std::int32_t> targets(rows);
  std::vector<double> weight(rows, 0.0), concat_weight(rows, 0.0);
  for (std::size_t b = 0; b < items.size(); ++b) {
    const auto& s = samples[b];
    const double count = static_cast<double>(std::count(s.supervised.begin(), s.supervised.end(), true));
    const double base = 1.0 / (count * static_cast<double>(items.size()));
    const double beta = s.history_fired ? loss_.beta : 1.0;
    for (std::size_t n = 0; n < kHorizon; ++n) {
      targets[b * kHorizon + n] = items[b]->actions[n];
      if (!s.supervised[n]) continue;
      weight[b * kHorizon + n] = base;
      concat_weight[b * kHorizon + n] = base * beta;
    }
  }
  const bool literal = loss_.literal_smoothing_sum;
  ad::Var total = smoothed_ce_loss(logits.concat, targets, concat_weight, loss_.epsilon, literal);
  BranchLosses values;
  values.concat = total->value.item();
  if (logits.fig) {
    const ad::Var fig = smoothed_ce_loss(logits.fig, targets, weight, loss_.epsilon, literal);
    const ad::Var ocr = smoothed_ce_loss(logits.ocr, targets, weight, loss_.epsilon, literal);
    values.fig = fig->value.item();
    values.ocr = ocr->value.item();
    total = ad::add(ad::add(fig, ocr), total);
  }
  if (losses) *losses = values;
  return total;
}

StepStats Trainer::step(const std::vector<std::size_t>& batch, std::size_t epoch) {
  StepStats stats;
  model_.net->params().zero_grad();
  const ad::Var loss = batch_loss(batch, epoch, &stats.losses, &stats.trajectories);
  if (!loss) return stats;
  if (!std::isfinite(loss->value.item())) {
    throw NumericError("epoch " + std::to_string(epoch) + ": non-finite loss (L_concat " +
                       std::to_string(stats.losses.concat) + ")");
  }
  ad::backward(loss);
  const ModeFlags& flags = model_.net->flags();
  if (flags.modulation) stats.coeffs = modulation_coeffs(stats.losses, loss_.alpha);
  try {
    stats.update = apply_modulated_update(model_.net->params(), fig_params_, ocr_params_,
                                          stats.coeffs, loss_.noise && flags.modulation,
                                          noise_rng_, adam_);
  } catch (const NumericError& e) {
    throw NumericError("epoch " + std::to_string(epoch) + ": " + e.what());
  }
  return stats;
}

EpochLog Trainer::run_epoch(std::size_t epoch) {
  std::vector<std::size_t> order(trajectories_.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(derive_seed(model_.config.seed, 3, epoch));
  shuffle_rng.shuffle(order);

  EpochLog log;
  log.epoch = epoch;
  double coeff_fig = 0.0, coeff_ocr = 0.0;
  const std::size_t n = model_.config.batch_size;
  for (std::size_t start = 0; start < order.size(); start += n) {
    std::vector<std::size_t> batch(order.begin() + start,
                                   order.begin() + std::min(order.size(), start + n));
    const StepStats s = step(batch, epoch);
    if (s.trajectories == 0) continue;
    ++log.steps;
    log.l_fig += s.losses.fig;
    log.l_ocr += s.losses.ocr;
    log.l_concat += s.losses.concat;
    coeff_fig += s.coeffs.fig;
    coeff_ocr += s.coeffs.ocr;
  }
  if (log.steps > 0) {
    const double k = static_cast<double>(log.steps);
    log.l_fig /= k;
    log.l_ocr /= k;
    log.l_concat /= k;
    log.coeff_fig = coeff_fig / k;
    log.coeff_ocr = coeff_ocr / k;
  }
  const BranchLosses mean{log.l_fig, log.l_ocr, log.l_concat};
  if (model_.net->flags().modal) {
    log.rho_fig = mean.rho_fig();
    log.rho_ocr = mean.rho_ocr();
  }
  return log;
}

ModelScorer::ModelScorer(const TrainedModel& model) : model_(model) {}

std::size_t ModelScorer::vocab_size() const { return model_.vocab.num_tokens(); }

namespace {
std::vector<ActionSlots> cut_at(const std::vector<ActionSlots>& prefixes, std::size_t slot) {
  std::vector<ActionSlots> cleaned = prefixes;
  for (ActionSlots& p : cleaned)
    for (std::size_t n = slot; n < kHorizon; ++n) p[n] = Vocabulary::kPad;
  return cleaned;
}
}  // namespace

std::vector<std::vector<double>> ModelScorer::logits(EntityId head, RelationId relation,
                                                     const std::vector<ActionSlots>& prefixes,
                                                     bool corrective, std::size_t slot) {
  if (slot >= kHorizon) throw ContractError("ModelScorer: slot beyond the horizon");
  const RewardConfig reward = model_.config.reward();
  const std::vector<ActionSlots> cleaned = cut_at(prefixes, slot);
  std::vector<std::array<double, kHorizon>> rtgs;
  for (const ActionSlots& p : cleaned) rtgs.push_back(inference_rtg(p, corrective, model_.vocab, reward));
  return forward_slot(head, relation, cleaned, rtgs, slot);
}

std::vector<std::vector<double>> ModelScorer::forward_slot(
    EntityId head, RelationId relation, const std::vector<ActionSlots>& cleaned,
    const std::vector<std::array<double, kHorizon>>& rtgs, std::size_t slot) {
  if (cleaned.empty()) return {};
  ad::NoGradGuard no_grad;
  const SequenceModel& net = *model_.net;
  if (cached_query_ != std::pair{head, relation}) {
    cache_.clear();
    cached_query_ = {head, relation};
  }
  const FusedQuery query = fuse_query(model_.states, model_.vocab, head, relation);
  const std::size_t count = cleaned.size();

  // Distinct return-to-go sequences among the prefixes.
  std::vector<const std::vector<StreamStates>*> context_of(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& rtg = rtgs[i];
    auto it = cache_.find(rtg);
    if (it == cache_.end()) {
      EncoderBatch b;
      b.size = 1;
      b.rtg.assign(rtg.begin(), rtg.end());
      b.query.assign(query.query_tokens.begin(), query.query_tokens.end());
      b.structure = query.state.structure;
      b.image = query.state.image;
      b.ocr = query.state.ocr;
      b.actions.assign(kHorizon, Vocabulary::kPad);
      std::vector<StreamStates> ctx;
      for (std::size_t t = 0; t < net.trunk_count(); ++t) ctx.push_back(net.encode_context(t, b));
      it = cache_.emplace(rtg, std::move(ctx)).first;
    }
    context_of[i] = &it->second;
  }

  EncoderBatch actions;
  actions.size = count;
  for (const ActionSlots& p : cleaned) {
    const auto in = shifted_actions(p);
    actions.actions.insert(actions.actions.end(), in.begin(), in.end());
  }
  std::vector<std::int64_t> action_rows(count);
  for (std::size_t i = 0; i < count; ++i) action_rows[i] = static_cast<std::int64_t>(i * kHorizon + slot);
  const std::vector<std::int64_t> context_row{static_cast<std::int64_t>(slot)};

  std::vector<StreamStates> ctx_rows(net.trunk_count());
  std::vector<ad::Var> act_rows(net.trunk_count());
  for (std::size_t t = 0; t < net.trunk_count(); ++t) {
    act_rows[t] = ad::gather_rows(net.encode_actions(t, actions), action_rows);
    ctx_rows[t].size = count;
    for (Stream s : net.context_streams(t)) {
      std::vector<ad::Var> rows;
      rows.reserve(count);
      for (std::size_t i = 0; i < count; ++i) {
        rows.push_back(ad::gather_rows((*context_of[i])[t].streams[static_cast<int>(s)], context_row));
      }
      ctx_rows[t].streams[static_cast<int>(s)] = ad::concat_rows(rows);
    }
  }
  const ad::Var out = net.heads(ctx_rows, act_rows).concat;
  const std::size_t v = out->value.cols();
  std::vector<std::vector<double>> result(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto row = out->value.data().subspan(i * v, v);
    result[i].assign(row.begin(), row.end());
  }
  return result;
}

TrainedModel train_model(const Dataset& data, const RunConfig& config, TrainSummary* summary,
                         const EpochCallback& on_epoch) {
  config.validate();
  const ModeFlags flags = mode_flags(config.ablation());
  const std::vector<Triple> forward = forward_training(data, config);
  if (forward.empty()) throw ContractError("train: no training triples");
  const TripleSet augmented = augment_inverse({forward, false}, data.vocab);

  TrainSummary local;
  TrainSummary& sum = summary ? *summary : local;
  FusedStateTable states;
  if (flags.modal) {
    FusionStage stage = run_fusion(data, augmented.triples, config);
    states = std::move(stage.states);
    sum.fusion = stage.report;
    log::info("fusion pretraining: loss " + std::to_string(stage.report.initial_loss) + " -> " +
              std::to_string(stage.report.final_loss));
  }

  // Paths are mined over the whole training graph even when training on a
  // subset of its triples.
  const KgGraph graph = training_graph(data);
  const auto mined = mine_supervision(graph, data.vocab, augmented.triples, config.max_hops);
  sum.queries = mined.size();
  sum.corrective = static_cast<std::size_t>(
      std::count_if(mined.begin(), mined.end(), [](const MinedTriple& m) { return m.path.corrective; }));

  TrainedModel model = make_model(config, data.vocab, std::move(states));
  Trainer trainer(model, build_trajectories(mined, config, data.vocab, model.states, data.features));
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const EpochLog log = trainer.run_epoch(epoch);
    sum.epochs.push_back(log);
    log::info(format_epoch_log(log));
    if (on_epoch && !on_epoch(log, model)) break;
  }
  return model;
}

KgGraph training_graph(const Dataset& data) {
  return KgGraph(data.vocab.num_entities(), augment_inverse(data.train, data.vocab).triples);
}

MetricsReport evaluate_model(const TrainedModel& model, const std::vector<Triple>& queries,
                             const std::vector<Triple>& known, const KgGraph* graph) {
  ModelScorer scorer(model);
  return evaluate(scorer, model.vocab, queries, model.config.eval_options(graph), known);
}

}  // namespace kgpath
