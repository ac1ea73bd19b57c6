#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "embae/core.hpp"
#include "embae/errors.hpp"
#include "embae/model.hpp"

namespace embae {

// Final retrieval scores, each in [0,1]. The -nd variants are computed after
// removing every gallery image taken by the query's camera; that removal can
// only drop distractors, so rank1_nd >= rank1 and map_nd >= map.
struct Scores {
  double rank1 = 0.0;
  double rank1_nd = 0.0;
  double map = 0.0;
  double map_nd = 0.0;
  int n_query = 0;     // queries scored for the standard metrics
  int n_query_nd = 0;  // queries scored for the -nd metrics
  int n_skipped = 0;   // queries with no valid positives (or empty gallery)
};

using EmbeddingMap = std::map<std::string, std::vector<double>>;

// Embeddings for scoring: eval-mode encode_id, optional test-time flip
// averaging, optional length normalization (applied after the averaging).
template <typename T>
EmbeddingMap embed_for_eval(const std::vector<ImageRecord>& records, const ParamSet<T>& params, bool tta,
                            bool normalize) {
  EmbeddingMap out;
  if (records.empty()) return out;
  const int f = params.arch.input_dim;
  const int m = params.arch.output_dim;

  MatrixD x(static_cast<int>(records.size()), f);
  for (std::size_t r = 0; r < records.size(); ++r) {
    if (static_cast<int>(records[r].features.size()) != f)
      throw ContractError("embed_for_eval: record '" + records[r].sample_id + "' has feature dim " +
                          std::to_string(records[r].features.size()) + ", expected " + std::to_string(f));
    for (int c = 0; c < f; ++c) x(static_cast<int>(r), c) = static_cast<double>(records[r].features[c]);
  }
  MatrixD z = encode_id(params, x, BnMode::Eval);

  MatrixD zf;
  std::vector<int> has_flip(records.size(), 0);
  if (tta) {
    MatrixD xf(static_cast<int>(records.size()), f);
    bool any = false;
    for (std::size_t r = 0; r < records.size(); ++r) {
      const auto& src = records[r].flip_features ? *records[r].flip_features : records[r].features;
      has_flip[r] = records[r].flip_features ? 1 : 0;
      any = any || has_flip[r];
      for (int c = 0; c < f; ++c) xf(static_cast<int>(r), c) = static_cast<double>(src[c]);
    }
    if (any) zf = encode_id(params, xf, BnMode::Eval);
  }

  for (std::size_t r = 0; r < records.size(); ++r) {
    std::vector<double> e(static_cast<std::size_t>(m));
    for (int c = 0; c < m; ++c) {
      double v = z(static_cast<int>(r), c);
      if (tta && has_flip[r]) v = 0.5 * (v + zf(static_cast<int>(r), c));
      e[static_cast<std::size_t>(c)] = v;
    }
    if (normalize) {
      double norm = 0.0;
      for (double v : e) norm += v * v;
      norm = std::sqrt(norm);
      if (norm > 0.0)
        for (double& v : e) v /= norm;
    }
    out[records[r].sample_id] = std::move(e);
  }
  return out;
}

// Average precision by direct enumeration of precision at every relevant
// rank. `relevance` is the 0/1 list down the ranking; it must contain exactly
// n_positives ones.
inline double brute_force_ap(const std::vector<int>& relevance, int n_positives) {
  if (n_positives < 1) throw ContractError("brute_force_ap: n_positives must be >= 1");
  int seen = 0;
  double sum = 0.0;
  for (std::size_t k = 0; k < relevance.size(); ++k) {
    if (relevance[k]) {
      ++seen;
      sum += static_cast<double>(seen) / static_cast<double>(k + 1);
    }
  }
  if (seen != n_positives)
    throw ContractError("brute_force_ap: relevance list has " + std::to_string(seen) +
                        " positives, expected " + std::to_string(n_positives));
  return sum / static_cast<double>(n_positives);
}

// Per-query outcome, exposed for oracle tests and reports.
struct QueryResult {
  std::string sample_id;
  bool scored = false;       // had at least one cross-camera positive
  double ap = 0.0;           // standard protocol
  double ap_nd = 0.0;        // same-camera gallery removed
  int hit1 = 0;
  int hit1_nd = 0;
  int n_positives = 0;
  std::vector<int> relevance;     // junk-filtered ranking, 0/1
  std::vector<int> relevance_nd;  // camera-filtered ranking, 0/1
};

struct ScoreDetails {
  Scores scores;
  std::vector<QueryResult> queries;
};

namespace detail {

struct RankedItem {
  double dist;
  const ImageRecord* rec;
};

inline void sort_ranked(std::vector<RankedItem>& items) {
  std::sort(items.begin(), items.end(), [](const RankedItem& a, const RankedItem& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    return a.rec->sample_id < b.rec->sample_id;  // deterministic tie rule
  });
}

}  // namespace detail

// Full retrieval protocol. For every query the gallery is ranked by ascending
// Euclidean distance (ties by sample_id). Standard metrics remove junk
// (same identity AND same camera); positives are same identity on another
// camera; distractors stay as negatives. -nd metrics additionally drop every
// gallery image from the query's camera before ranking. Queries with zero
// positives are skipped; the means run over scored queries.
inline ScoreDetails score_with_details(const std::vector<ImageRecord>& query, const EmbeddingMap& query_emb,
                                       const std::vector<ImageRecord>& gallery,
                                       const EmbeddingMap& gallery_emb) {
  auto emb_of = [](const EmbeddingMap& m, const ImageRecord& r) -> const std::vector<double>& {
    auto it = m.find(r.sample_id);
    if (it == m.end()) throw ContractError("score: missing embedding for '" + r.sample_id + "'");
    return it->second;
  };

  ScoreDetails out;
  double sum_r1 = 0, sum_r1_nd = 0, sum_ap = 0, sum_ap_nd = 0;

  for (const ImageRecord& q : query) {
    const std::vector<double>& qe = emb_of(query_emb, q);
    QueryResult res;
    res.sample_id = q.sample_id;

    std::vector<detail::RankedItem> standard, nd;
    standard.reserve(gallery.size());
    nd.reserve(gallery.size());
    int n_pos = 0;
    for (const ImageRecord& g : gallery) {
      const bool same_id = g.identity == q.identity;
      const bool same_cam = g.camera == q.camera;
      if (same_id && same_cam) continue;  // junk
      const double d = euclidean_distance(qe, emb_of(gallery_emb, g));
      standard.push_back({d, &g});
      if (!same_cam) nd.push_back({d, &g});
      if (same_id && !same_cam) ++n_pos;
    }
    res.n_positives = n_pos;
    if (n_pos == 0 || standard.empty()) {
      ++out.scores.n_skipped;
      out.queries.push_back(std::move(res));
      continue;
    }
    detail::sort_ranked(standard);
    detail::sort_ranked(nd);

    res.relevance.reserve(standard.size());
    for (const auto& item : standard) res.relevance.push_back(item.rec->identity == q.identity ? 1 : 0);
    res.relevance_nd.reserve(nd.size());
    for (const auto& item : nd) res.relevance_nd.push_back(item.rec->identity == q.identity ? 1 : 0);

    res.scored = true;
    res.hit1 = res.relevance.front();
    res.hit1_nd = res.relevance_nd.front();
    res.ap = brute_force_ap(res.relevance, n_pos);
    res.ap_nd = brute_force_ap(res.relevance_nd, n_pos);

    sum_r1 += res.hit1;
    sum_ap += res.ap;
    ++out.scores.n_query;
    sum_r1_nd += res.hit1_nd;
    sum_ap_nd += res.ap_nd;
    ++out.scores.n_query_nd;
    out.queries.push_back(std::move(res));
  }

  if (out.scores.n_query > 0) {
    out.scores.rank1 = sum_r1 / out.scores.n_query;
    out.scores.map = sum_ap / out.scores.n_query;
  }
  if (out.scores.n_query_nd > 0) {
    out.scores.rank1_nd = sum_r1_nd / out.scores.n_query_nd;
    out.scores.map_nd = sum_ap_nd / out.scores.n_query_nd;
  }
  return out;
}

inline Scores score(const std::vector<ImageRecord>& query, const EmbeddingMap& query_emb,
                    const std::vector<ImageRecord>& gallery, const EmbeddingMap& gallery_emb) {
  return score_with_details(query, query_emb, gallery, gallery_emb).scores;
}

// Deterministic desk-scale evaluation split: the first record of every
// (identity, camera) group becomes a query; everything else, including
// distractors, goes to the gallery.
struct QueryGallerySplit {
  std::vector<ImageRecord> query;
  std::vector<ImageRecord> gallery;
};

inline QueryGallerySplit split_query_gallery(const Dataset& d) {
  QueryGallerySplit out;
  std::set<std::pair<int, int>> seen;
  for (const ImageRecord& r : d.records) {
    if (r.identity >= 0 && seen.insert({r.identity, r.camera}).second)
      out.query.push_back(r);
    else
      out.gallery.push_back(r);
  }
  return out;
}

}  // namespace embae
