#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "embae/loss.hpp"
#include "embae/model.hpp"
#include "embae/rng.hpp"
#include "embae/sampling.hpp"

namespace embae {

// ---------------------------------------------------------------------------
// Learning-rate schedule: flat for flat_epochs, then exponential decay from
// base_lr to final_lr over decay_epochs, then flat at final_lr.

struct ScheduleConfig {
  double base_lr = 1e-4;
  double final_lr = 1e-7;
  double flat_epochs = 100;
  double decay_epochs = 300;
  long steps_per_epoch = 1;
};

inline void validate(const ScheduleConfig& c) {
  if (!(c.base_lr > 0) || !(c.final_lr > 0)) throw ConfigError("schedule: learning rates must be positive");
  if (!(c.final_lr < c.base_lr)) throw ConfigError("schedule: final_lr must be below base_lr");
  if (!(c.flat_epochs > 0) || !(c.decay_epochs > 0)) throw ConfigError("schedule: epoch counts must be positive");
  if (c.steps_per_epoch <= 0) throw ConfigError("schedule: steps_per_epoch must be positive");
}

inline double lr_schedule(double epoch, const ScheduleConfig& cfg) {
  if (epoch < 0) throw ContractError("lr_schedule: negative epoch");
  if (epoch <= cfg.flat_epochs) return cfg.base_lr;
  const double end = cfg.flat_epochs + cfg.decay_epochs;
  if (epoch >= end) return cfg.final_lr;
  const double t = (epoch - cfg.flat_epochs) / cfg.decay_epochs;
  return cfg.base_lr * std::pow(cfg.final_lr / cfg.base_lr, t);
}

// Steps per epoch: floor(N_total / N_batch) with N_total the summed size of
// the training datasets.
inline long compute_steps_per_epoch(const std::vector<Dataset>& datasets, const PKConfig& pk) {
  std::size_t total = 0;
  for (const Dataset& d : datasets) total += d.records.size();
  const long batch = static_cast<long>(pk.P) * pk.K;
  return std::max<long>(1, static_cast<long>(total) / batch);
}

inline long full_schedule_steps(const ScheduleConfig& cfg) {
  return static_cast<long>(std::llround((cfg.flat_epochs + cfg.decay_epochs) * cfg.steps_per_epoch));
}

// ---------------------------------------------------------------------------
// ADAM with default parameters and one global step counter. Moments live per
// tensor (keyed "group/name") and are created lazily on first update.

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  std::map<std::string, Matrix<T>> m;
  std::map<std::string, Matrix<T>> v;
};

// One bias-corrected ADAM update over the tensors named in `grads`. Frozen
// groups must not appear; tensors absent from `grads` (including BN
// statistics) are untouched bit-exactly.
template <typename T>
void adam_step(ParamSet<T>& params, const GradMap& grads, AdamState<T>& state, double lr) {
  if (!(lr > 0)) throw ContractError("adam_step: learning rate must be positive");
  for (const auto& [group, tensors] : grads) {
    if (!params.has_group(group)) throw ContractError("adam_step: unknown group '" + group + "'");
    if (params.is_frozen(group))
      throw ContractError("adam_step: gradient supplied for frozen group '" + group + "'");
    (void)tensors;
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

  auto entries = tensor_entries(params);
  for (auto& e : entries) {
    auto git = grads.find(e.group);
    if (git == grads.end()) continue;
    auto tit = git->second.find(e.name);
    if (tit == git->second.end()) continue;
    if (e.kind != TensorKind::Param)
      throw ContractError("adam_step: gradient supplied for statistic '" + e.group + "/" + e.name + "'");
    const MatrixD& g = tit->second;
    if (g.rows != e.tensor->rows || g.cols != e.tensor->cols)
      throw ContractError("adam_step: gradient shape mismatch for '" + e.group + "/" + e.name + "'");
    const std::string key = e.group + "/" + e.name;
    auto& m = state.m.try_emplace(key, e.tensor->rows, e.tensor->cols).first->second;
    auto& v = state.v.try_emplace(key, e.tensor->rows, e.tensor->cols).first->second;
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      const double gi = g.data[i];
      const double mi = state.beta1 * static_cast<double>(m.data[i]) + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * static_cast<double>(v.data[i]) + (1.0 - state.beta2) * gi * gi;
      m.data[i] = static_cast<T>(mi);
      v.data[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      e.tensor->data[i] =
          static_cast<T>(static_cast<double>(e.tensor->data[i]) - lr * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

// ---------------------------------------------------------------------------
// Loss traces.

struct TraceRow {
  long step = 0;
  double epoch = 0.0;
  double lr = 0.0;
  double loss = 0.0;
  std::string phase;
  std::string variant;
};

namespace detail {

inline MatrixD batch_features(const Batch& b) {
  if (b.records.empty()) throw ContractError("empty batch");
  const int f = static_cast<int>(b.records.front().features.size());
  MatrixD x(static_cast<int>(b.records.size()), f);
  for (std::size_t r = 0; r < b.records.size(); ++r) {
    if (static_cast<int>(b.records[r].features.size()) != f)
      throw ContractError("batch features have inconsistent dims");
    for (int c = 0; c < f; ++c) x(static_cast<int>(r), c) = static_cast<double>(b.records[r].features[c]);
  }
  return x;
}

inline std::vector<std::string> batch_nui_keys(const Batch& b, NuiMode mode) {
  std::vector<std::string> keys;
  keys.reserve(b.records.size());
  for (const auto& r : b.records) keys.push_back(nui_key(mode, r.dataset, r.camera));
  return keys;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Step 1: embedding training with the triplet loss. Each step samples a pure
// PK batch from the scheduled dataset, applies flip augmentation, and updates
// only the "emb" group under the flat+decay schedule.

struct EmbeddingTrainOptions {
  long steps = -1;  // -1: full flat+decay schedule
  double flip_prob = 0.5;
  SchedulerPolicy policy = SchedulerPolicy::RoundRobin;
};

template <typename T>
std::vector<TraceRow> train_embedding(const std::vector<Dataset>& datasets, ParamSet<T>& params,
                                      AdamState<T>& opt, const PKConfig& pk, const ScheduleConfig& sched,
                                      const MarginMode& margin, RngSeed seed,
                                      const EmbeddingTrainOptions& options = {}) {
  validate(pk);
  validate(sched);
  if (datasets.empty()) throw ConfigError("train_embedding: no datasets");

  std::set<std::string> trainable{kGroupEmb};
  params.set_trainable(trainable);

  const long steps = options.steps >= 0 ? options.steps : full_schedule_steps(sched);
  const std::vector<int> schedule = dataset_scheduler(datasets, steps, pk, options.policy);
  std::vector<std::map<int, std::vector<int>>> indices;
  indices.reserve(datasets.size());
  for (const Dataset& d : datasets) indices.push_back(detail::identity_index(d));

  std::mt19937_64 rng = make_rng(derive_seed(seed, "train_embedding"));
  std::vector<TraceRow> trace;
  trace.reserve(static_cast<std::size_t>(steps));
  for (long s = 0; s < steps; ++s) {
    const int di = schedule[static_cast<std::size_t>(s)];
    Batch batch = pk_sample(datasets[di], indices[di], pk, rng);
    batch = augment_flip(std::move(batch), rng, options.flip_prob);
    const double epoch = static_cast<double>(s) / static_cast<double>(sched.steps_per_epoch);
    const double lr = lr_schedule(epoch, sched);
    MatrixD x = detail::batch_features(batch);
    auto lg = triplet_loss_gradients(params, x, batch.labels(), margin, /*update_stats=*/true);
    adam_step(params, lg.grads, opt, lr);
    trace.push_back({s, epoch, lr, lg.loss, "embedding", ""});
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Step 2: EmbAE pre-training. The identity encoder is frozen (weights and BN
// statistics); the nuisance heads and decoder minimize the reconstruction
// loss on the same labeled sources. In per-camera / per-dataset mode each
// batch updates only the groups of cameras actually present in it.

struct PretrainOptions {
  long steps = 1000;
  double lr = 1e-4;
  double flip_prob = 0.5;
  SchedulerPolicy policy = SchedulerPolicy::RoundRobin;
};

template <typename T>
std::vector<TraceRow> pretrain_embae(const std::vector<Dataset>& datasets, ParamSet<T>& params,
                                     AdamState<T>& opt, const PKConfig& pk, const PretrainOptions& options,
                                     RngSeed seed) {
  validate(pk);
  if (datasets.empty()) throw ConfigError("pretrain_embae: no datasets");
  std::set<std::string> trainable{kGroupDec};
  for (const auto& [key, head] : params.nui) trainable.insert(key);
  params.set_trainable(trainable);

  const std::vector<int> schedule = dataset_scheduler(datasets, options.steps, pk, options.policy);
  std::vector<std::map<int, std::vector<int>>> indices;
  indices.reserve(datasets.size());
  for (const Dataset& d : datasets) indices.push_back(detail::identity_index(d));

  std::mt19937_64 rng = make_rng(derive_seed(seed, "pretrain_embae"));
  std::vector<TraceRow> trace;
  trace.reserve(static_cast<std::size_t>(options.steps));
  for (long s = 0; s < options.steps; ++s) {
    const int di = schedule[static_cast<std::size_t>(s)];
    Batch batch = pk_sample(datasets[di], indices[di], pk, rng);
    batch = augment_flip(std::move(batch), rng, options.flip_prob);
    MatrixD x = detail::batch_features(batch);
    auto lg = reconstruction_gradients(params, x, detail::batch_nui_keys(batch, params.nui_mode),
                                       /*update_stats=*/true);
    adam_step(params, lg.grads, opt, options.lr);
    trace.push_back({s, 0.0, options.lr, lg.loss, "pretrain", ""});
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Step 3: unsupervised fine-tuning on an unlabeled target. Only features and
// camera tags of the target are read; identity labels are never touched.

enum class FinetuneVariant { Full, FixNui, NewNui, CamNui };

inline std::string to_string(FinetuneVariant v) {
  switch (v) {
    case FinetuneVariant::Full: return "full";
    case FinetuneVariant::FixNui: return "fix_nui";
    case FinetuneVariant::NewNui: return "new_nui";
    case FinetuneVariant::CamNui: return "cam_nui";
  }
  return "full";
}

inline FinetuneVariant finetune_variant_from_string(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  if (s == "full") return FinetuneVariant::Full;
  if (s == "fix_nui") return FinetuneVariant::FixNui;
  if (s == "new_nui") return FinetuneVariant::NewNui;
  if (s == "cam_nui") return FinetuneVariant::CamNui;
  throw ConfigError("unknown fine-tune variant '" + s + "' (expected full|fix-nui|new-nui|cam-nui)");
}

struct FinetuneOptions {
  long phase1_steps = 1000;
  long phase2_steps = 1000;
  double lr = 1e-4;
  double flip_prob = 0.5;
  int batch_size = 72;
};

namespace detail {

// The slice of a record that unsupervised fine-tuning is allowed to see.
struct UnlabeledRecord {
  const std::vector<float>* features;
  const std::vector<float>* flip_features;  // nullptr when absent
  int camera;
};

// Deterministic reshuffling pass over a fixed index set: every record is
// visited once per pass, in a seeded order.
struct ShuffledStream {
  std::vector<int> order;
  std::size_t pos = 0;
  std::mt19937_64 rng;

  ShuffledStream(std::vector<int> indices, RngSeed seed) : order(std::move(indices)), rng(make_rng(seed)) {
    std::shuffle(order.begin(), order.end(), rng);
  }
  int next() {
    if (pos == order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      pos = 0;
    }
    return order[pos++];
  }
};

inline MatrixD unlabeled_batch(const std::vector<UnlabeledRecord>& recs, const std::vector<int>& idx,
                               std::mt19937_64& flip_rng, double flip_prob) {
  const int f = static_cast<int>(recs.front().features->size());
  MatrixD x(static_cast<int>(idx.size()), f);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const UnlabeledRecord& rec = recs[static_cast<std::size_t>(idx[r])];
    const std::vector<float>* src = rec.features;
    if (rec.flip_features && unit(flip_rng) < flip_prob) src = rec.flip_features;
    for (int c = 0; c < f; ++c) x(static_cast<int>(r), c) = static_cast<double>((*src)[c]);
  }
  return x;
}

template <typename T>
std::vector<TraceRow> finetune_phase(const std::vector<UnlabeledRecord>& recs,
                                     const std::string& target_name, ParamSet<T>& params,
                                     const std::set<std::string>& trainable, long steps,
                                     const FinetuneOptions& opt, RngSeed seed, const std::string& phase,
                                     const std::string& variant, bool camera_stratified) {
  params.set_trainable(trainable);
  AdamState<T> adam;  // fresh optimizer per phase
  std::mt19937_64 flip_rng = make_rng(derive_seed(seed, phase + "/flip"));

  std::vector<TraceRow> trace;
  trace.reserve(static_cast<std::size_t>(steps));
  if (camera_stratified) {
    std::map<int, std::vector<int>> by_camera;
    for (std::size_t i = 0; i < recs.size(); ++i) by_camera[recs[i].camera].push_back(static_cast<int>(i));
    std::vector<int> cameras;
    std::vector<ShuffledStream> streams;
    for (auto& [cam, idx] : by_camera) {
      cameras.push_back(cam);
      streams.emplace_back(idx, derive_seed(seed, phase + "/camera", static_cast<std::uint64_t>(cam)));
    }
    for (long s = 0; s < steps; ++s) {
      const std::size_t ci = static_cast<std::size_t>(s) % cameras.size();
      std::vector<int> idx(static_cast<std::size_t>(opt.batch_size));
      for (int& v : idx) v = streams[ci].next();
      MatrixD x = unlabeled_batch(recs, idx, flip_rng, opt.flip_prob);
      std::vector<std::string> keys(idx.size(), nui_key(params.nui_mode, target_name, cameras[ci]));
      auto lg = reconstruction_gradients(params, x, keys, /*update_stats=*/true);
      adam_step(params, lg.grads, adam, opt.lr);
      trace.push_back({s, 0.0, opt.lr, lg.loss, phase, variant});
    }
  } else {
    std::vector<int> all(recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) all[i] = static_cast<int>(i);
    ShuffledStream stream(all, derive_seed(seed, phase + "/stream"));
    for (long s = 0; s < steps; ++s) {
      std::vector<int> idx(static_cast<std::size_t>(opt.batch_size));
      for (int& v : idx) v = stream.next();
      MatrixD x = unlabeled_batch(recs, idx, flip_rng, opt.flip_prob);
      std::vector<std::string> keys;
      keys.reserve(idx.size());
      for (int i : idx)
        keys.push_back(nui_key(params.nui_mode, target_name, recs[static_cast<std::size_t>(i)].camera));
      auto lg = reconstruction_gradients(params, x, keys, /*update_stats=*/true);
      adam_step(params, lg.grads, adam, opt.lr);
      trace.push_back({s, 0.0, opt.lr, lg.loss, phase, variant});
    }
  }
  return trace;
}

}  // namespace detail

// Unsupervised fine-tuning of a pre-trained EmbAE on an unlabeled target.
//   full:     one phase, emb + nui + dec train jointly.
//   fix_nui:  one phase, nui frozen, emb + dec train.
//   new_nui:  fresh shared nui; phase 1 trains it alone (emb, dec frozen),
//             phase 2 trains emb + dec with the new nui frozen.
//   cam_nui:  as new_nui with one fresh nui group per target camera; phase 1
//             batches are camera-stratified and train only that camera's
//             group.
// Single-phase variants run phase1_steps + phase2_steps steps so every
// variant consumes the same update budget.
template <typename T>
std::vector<TraceRow> finetune(const Dataset& target, ParamSet<T>& params, FinetuneVariant variant,
                               const FinetuneOptions& options, RngSeed seed) {
  if (target.records.empty()) throw ConfigError("finetune: target dataset is empty");
  if (options.batch_size < 1) throw ConfigError("finetune: batch_size must be positive");
  if (options.phase1_steps < 0 || options.phase2_steps < 0)
    throw ConfigError("finetune: negative step count");

  // Only features, flip features and camera tags are visible from here on.
  std::vector<detail::UnlabeledRecord> recs;
  recs.reserve(target.records.size());
  for (const ImageRecord& r : target.records)
    recs.push_back({&r.features, r.flip_features ? &*r.flip_features : nullptr, r.camera});

  const std::string variant_name = to_string(variant);
  const long total_steps = options.phase1_steps + options.phase2_steps;
  std::vector<TraceRow> trace;

  switch (variant) {
    case FinetuneVariant::Full:
    case FinetuneVariant::FixNui: {
      if (params.nui_mode != NuiMode::Shared || params.nui.count("nui") == 0)
        throw ConfigError("finetune: variant '" + variant_name +
                          "' needs a shared nuisance head from pre-training");
      std::set<std::string> trainable{kGroupEmb, kGroupDec};
      if (variant == FinetuneVariant::Full) trainable.insert("nui");
      trace = detail::finetune_phase(recs, target.name, params, trainable, total_steps, options, seed,
                                     "finetune", variant_name, /*camera_stratified=*/false);
      break;
    }
    case FinetuneVariant::NewNui: {
      // Discard the pre-trained nuisance heads; optimize a fresh one against
      // the frozen embedding and decoder, then adapt emb + dec to it.
      params.nui.clear();
      params.nui_mode = NuiMode::Shared;
      params.nui["nui"] = detail::init_head<T>(params.arch.input_dim, params.arch.hidden_dim,
                                               params.arch.output_dim, derive_seed(seed, "finetune/new_nui"));
      trace = detail::finetune_phase(recs, target.name, params, {"nui"}, options.phase1_steps, options,
                                     seed, "finetune_p1", variant_name, /*camera_stratified=*/false);
      auto p2 = detail::finetune_phase(recs, target.name, params, {kGroupEmb, kGroupDec},
                                       options.phase2_steps, options, seed, "finetune_p2", variant_name,
                                       /*camera_stratified=*/false);
      trace.insert(trace.end(), p2.begin(), p2.end());
      break;
    }
    case FinetuneVariant::CamNui: {
      if (target.cameras.empty()) throw ConfigError("finetune: target has no cameras");
      std::map<int, long> per_camera;
      for (const auto& r : recs) ++per_camera[r.camera];
      for (int cam : target.cameras)
        if (per_camera.count(cam) == 0)
          throw ConfigError("finetune: target camera " + std::to_string(cam) + " has zero records");
      params.nui.clear();
      params.nui_mode = NuiMode::PerCamera;
      const RngSeed fresh = derive_seed(seed, "finetune/cam_nui");
      std::set<std::string> phase1_groups;
      for (int cam : target.cameras) {
        const std::string key = nui_key(NuiMode::PerCamera, target.name, cam);
        params.nui[key] = detail::init_head<T>(params.arch.input_dim, params.arch.hidden_dim,
                                               params.arch.output_dim, fresh);
        phase1_groups.insert(key);
      }
      trace = detail::finetune_phase(recs, target.name, params, phase1_groups, options.phase1_steps,
                                     options, seed, "finetune_p1", variant_name,
                                     /*camera_stratified=*/true);
      auto p2 = detail::finetune_phase(recs, target.name, params, {kGroupEmb, kGroupDec},
                                       options.phase2_steps, options, seed, "finetune_p2", variant_name,
                                       /*camera_stratified=*/false);
      trace.insert(trace.end(), p2.begin(), p2.end());
      break;
    }
  }
  return trace;
}

}  // namespace embae
