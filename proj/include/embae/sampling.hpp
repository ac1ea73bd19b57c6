#pragma once

#include <algorithm>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "embae/core.hpp"
#include "embae/errors.hpp"

namespace embae {

// P identities x K images per batch. Both must be at least 2: every anchor
// needs a positive and a negative.
struct PKConfig {
  int P = 18;
  int K = 4;
};

inline void validate(const PKConfig& c) {
  if (c.P < 2) throw ConfigError("PKConfig: P must be >= 2, got " + std::to_string(c.P));
  if (c.K < 2) throw ConfigError("PKConfig: K must be >= 2, got " + std::to_string(c.K));
}

// A P*K sample block drawn from exactly one dataset. Records are owned
// copies, so augmentation can rewrite features in place.
struct Batch {
  std::string dataset;
  std::vector<ImageRecord> records;

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.identity);
    return out;
  }
};

namespace detail {

// identity -> record indices, distractors excluded.
inline std::map<int, std::vector<int>> identity_index(const Dataset& d) {
  std::map<int, std::vector<int>> idx;
  for (std::size_t i = 0; i < d.records.size(); ++i)
    if (d.records[i].identity >= 0) idx[d.records[i].identity].push_back(static_cast<int>(i));
  return idx;
}

// First n elements of a seeded partial Fisher-Yates shuffle of v.
template <typename V>
void partial_shuffle(V& v, std::size_t n, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < n && i + 1 < v.size(); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, v.size() - 1);
    std::swap(v[i], v[pick(rng)]);
  }
}

}  // namespace detail

// Draws P distinct identities and K images each. Identities with fewer than
// K images are sampled with replacement so the batch shape stays exact.
inline Batch pk_sample(const Dataset& dataset, const std::map<int, std::vector<int>>& index,
                       const PKConfig& cfg, std::mt19937_64& rng) {
  validate(cfg);
  if (static_cast<int>(index.size()) < cfg.P)
    throw ContractError("pk_sample: dataset '" + dataset.name + "' has " +
                        std::to_string(index.size()) + " identities, need P=" + std::to_string(cfg.P));

  std::vector<int> ids;
  ids.reserve(index.size());
  for (const auto& [id, recs] : index) ids.push_back(id);
  detail::partial_shuffle(ids, static_cast<std::size_t>(cfg.P), rng);

  Batch batch;
  batch.dataset = dataset.name;
  batch.records.reserve(static_cast<std::size_t>(cfg.P) * cfg.K);
  for (int p = 0; p < cfg.P; ++p) {
    const std::vector<int>& recs = index.at(ids[p]);
    if (static_cast<int>(recs.size()) >= cfg.K) {
      std::vector<int> pool = recs;
      detail::partial_shuffle(pool, static_cast<std::size_t>(cfg.K), rng);
      for (int k = 0; k < cfg.K; ++k) batch.records.push_back(dataset.records[pool[k]]);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, recs.size() - 1);
      for (int k = 0; k < cfg.K; ++k) batch.records.push_back(dataset.records[recs[pick(rng)]]);
    }
  }
  return batch;
}

inline Batch pk_sample(const Dataset& dataset, const PKConfig& cfg, std::mt19937_64& rng) {
  return pk_sample(dataset, detail::identity_index(dataset), cfg, rng);
}

enum class SchedulerPolicy { RoundRobin, Proportional };

inline std::string to_string(SchedulerPolicy p) {
  return p == SchedulerPolicy::RoundRobin ? "round_robin" : "proportional";
}

inline SchedulerPolicy scheduler_policy_from_string(const std::string& s) {
  if (s == "round_robin") return SchedulerPolicy::RoundRobin;
  if (s == "proportional") return SchedulerPolicy::Proportional;
  throw ConfigError("unknown scheduler policy '" + s + "' (expected round_robin|proportional)");
}

// Schedule of dataset indices, one per step. Every batch is later drawn from
// the scheduled dataset only, so the model never sees two datasets in one
// batch. Round-robin walks the declared order; proportional assigns steps by
// largest deficit against size shares (deterministic, ties to lowest index).
inline std::vector<int> dataset_scheduler(const std::vector<Dataset>& datasets, long steps,
                                          const PKConfig& pk,
                                          SchedulerPolicy policy = SchedulerPolicy::RoundRobin) {
  validate(pk);
  if (datasets.empty()) throw ConfigError("dataset_scheduler: no datasets");
  if (steps < 0) throw ConfigError("dataset_scheduler: negative step count");
  for (const Dataset& d : datasets) {
    const auto idx = detail::identity_index(d);
    if (static_cast<int>(idx.size()) < pk.P)
      throw ConfigError("dataset_scheduler: dataset '" + d.name + "' has " +
                        std::to_string(idx.size()) + " identities, need P=" + std::to_string(pk.P));
  }
  std::vector<int> schedule(static_cast<std::size_t>(steps));
  if (policy == SchedulerPolicy::RoundRobin) {
    for (long s = 0; s < steps; ++s) schedule[static_cast<std::size_t>(s)] = static_cast<int>(s % datasets.size());
    return schedule;
  }
  double total = 0.0;
  for (const Dataset& d : datasets) total += static_cast<double>(d.records.size());
  std::vector<double> share(datasets.size());
  for (std::size_t i = 0; i < datasets.size(); ++i)
    share[i] = total > 0 ? static_cast<double>(datasets[i].records.size()) / total
                         : 1.0 / static_cast<double>(datasets.size());
  std::vector<long> count(datasets.size(), 0);
  for (long s = 0; s < steps; ++s) {
    int best = 0;
    double best_deficit = share[0] * static_cast<double>(s + 1) - static_cast<double>(count[0]);
    for (std::size_t i = 1; i < datasets.size(); ++i) {
      const double deficit = share[i] * static_cast<double>(s + 1) - static_cast<double>(count[i]);
      if (deficit > best_deficit) {
        best = static_cast<int>(i);
        best_deficit = deficit;
      }
    }
    schedule[static_cast<std::size_t>(s)] = best;
    ++count[best];
  }
  return schedule;
}

// Train-time flip augmentation: each record that carries flip_features is
// independently replaced by them with probability flip_prob. Labels and
// cameras are untouched; records without flip features draw nothing.
inline Batch augment_flip(Batch batch, std::mt19937_64& rng, double flip_prob = 0.5) {
  if (flip_prob < 0.0 || flip_prob > 1.0)
    throw ConfigError("augment_flip: flip_prob must be in [0,1]");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (ImageRecord& r : batch.records) {
    if (!r.flip_features) continue;
    if (unit(rng) < flip_prob) r.features = *r.flip_features;
  }
  return batch;
}

}  // namespace embae
