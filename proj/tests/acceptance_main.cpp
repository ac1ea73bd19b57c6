// Acceptance suite: runs every criterion end to end and prints one PASS/FAIL
// line per criterion. Exits nonzero if any criterion fails.
//
// Run from the repository root (the transfer criterion reads
// configs/synthetic_transfer*.json; pass a different root as argv[1]).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "embae/embae.hpp"

using namespace embae;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
  if (!pass) ++g_failures;
}

double now_seconds() {
  using clock = std::chrono::steady_clock;
  static const clock::time_point start = clock::now();
  return std::chrono::duration<double>(clock::now() - start).count();
}

// --- criterion 1: batch-hard loss vs exhaustive enumeration ---------------

double enumeration_oracle(const MatrixD& z, const std::vector<int>& labels, const MarginMode& mode) {
  const int n = z.rows;
  double total = 0.0;
  for (int a = 0; a < n; ++a) {
    double hp = -1.0, hn = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
      if (j == a) continue;
      double d2 = 0.0;
      for (int c = 0; c < z.cols; ++c) d2 += (z(a, c) - z(j, c)) * (z(a, c) - z(j, c));
      const double d = std::sqrt(d2);
      if (labels[j] == labels[a])
        hp = std::max(hp, d);
      else
        hn = std::min(hn, d);
    }
    if (mode.kind == MarginMode::Kind::Hinge)
      total += std::max(0.0, mode.margin + hp - hn);
    else
      total += std::log1p(std::exp(hp - hn));
  }
  return total / n;
}

void criterion_1() {
  const double t0 = now_seconds();
  std::mt19937_64 rng(20260811);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<int> classes(2, 8), extra(0, 2), dims(1, 16);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n_classes = classes(rng);
    std::vector<int> labels;
    for (int c = 0; c < n_classes; ++c) {
      const int k = 2 + extra(rng);  // 2..4 per class
      for (int i = 0; i < k && static_cast<int>(labels.size()) < n_classes * 4; ++i)
        labels.push_back(c);
    }
    std::shuffle(labels.begin(), labels.end(), rng);
    const int cols = dims(rng);
    MatrixD z(static_cast<int>(labels.size()), cols);
    for (auto& v : z.data) v = gauss(rng);
    for (const MarginMode& mode :
         {MarginMode::hinge(0.2), MarginMode::hinge(1.0), MarginMode::softplus()}) {
      const double got = batch_hard_triplet_loss(z, labels, mode);
      worst = std::max(worst, std::abs(got - enumeration_oracle(z, labels, mode)));
    }
  }
  const double dt = now_seconds() - t0;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "loss oracle equivalence on 200 batches x 3 modes: max |diff| = %.3g (<= 1e-9), %.2fs",
                worst, dt);
  report(1, worst <= 1e-9 && dt < 10.0, buf);
}

// --- criterion 2: analytic gradients vs central finite differences --------

void criterion_2() {
  const double t0 = now_seconds();
  HeadArchitecture arch;
  arch.input_dim = 16;
  arch.hidden_dim = 8;
  arch.output_dim = 4;

  std::mt19937_64 rng(511);
  std::normal_distribution<double> gauss(0.0, 1.0);
  MatrixD x(12, arch.input_dim);
  for (auto& v : x.data) v = gauss(rng);
  const std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3, 0, 1, 2, 3};

  const double h = 1e-4;
  double worst = 0.0;
  auto fd_check = [&](ParamSet<double>& p, const GradMap& grads, auto&& loss_fn) {
    for (auto& e : tensor_entries(p)) {
      auto git = grads.find(e.group);
      if (git == grads.end()) continue;
      auto tit = git->second.find(e.name);
      if (tit == git->second.end()) continue;
      for (std::size_t i = 0; i < e.tensor->data.size(); ++i) {
        const double orig = e.tensor->data[i];
        e.tensor->data[i] = orig + h;
        const double up = loss_fn();
        e.tensor->data[i] = orig - h;
        const double dn = loss_fn();
        e.tensor->data[i] = orig;
        const double fd = (up - dn) / (2 * h);
        const double an = tit->second.data[i];
        worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1.0}));
      }
    }
  };

  {
    auto p = init_params<double>(arch, NuiMode::Shared, {}, RngSeed{21});
    p.set_trainable({kGroupEmb});
    for (const MarginMode& mode : {MarginMode::hinge(0.5), MarginMode::softplus()}) {
      auto lg = triplet_loss_gradients(p, x, labels, mode);
      fd_check(p, lg.grads, [&] { return triplet_loss_value(p, x, labels, mode); });
    }
  }
  {
    auto p = init_params<double>(arch, NuiMode::Shared, {}, RngSeed{22});
    p.set_trainable({kGroupEmb, "nui", kGroupDec});
    const std::vector<std::string> keys(static_cast<std::size_t>(x.rows), "nui");
    auto lg = reconstruction_gradients(p, x, keys);
    fd_check(p, lg.grads, [&] { return reconstruction_loss_value(p, x, keys); });
  }
  {
    // Frozen embedding with per-camera nuisance groups (pre-training shape).
    auto p = init_params<double>(arch, NuiMode::PerCamera, {"nui/t/0", "nui/t/1"}, RngSeed{23});
    p.set_trainable({"nui/t/0", "nui/t/1", kGroupDec});
    std::vector<std::string> keys;
    for (int i = 0; i < x.rows; ++i) keys.push_back(i % 2 ? "nui/t/1" : "nui/t/0");
    auto lg = reconstruction_gradients(p, x, keys);
    fd_check(p, lg.grads, [&] { return reconstruction_loss_value(p, x, keys); });
  }
  const double dt = now_seconds() - t0;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "gradient check (triplet + reconstruction, train-mode BN): max rel err = %.3g (<= 1e-4), "
                "%.2fs",
                worst, dt);
  report(2, worst <= 1e-4 && dt < 60.0, buf);
}

// --- criteria 3 & 4: mAP oracle, protocol inequalities, scale invariance --

struct EndToEndOracle {
  double rank1 = 0, rank1_nd = 0, map = 0, map_nd = 0;
  int n_query = 0;
};

// Independent protocol implementation, structured differently (stable_sort on
// index lists, explicit precision loops).
EndToEndOracle protocol_oracle(const std::vector<ImageRecord>& query, const EmbeddingMap& qe,
                               const std::vector<ImageRecord>& gallery, const EmbeddingMap& ge) {
  EndToEndOracle out;
  for (const auto& q : query) {
    struct Item {
      double d;
      std::string id;
      bool pos;
      bool same_cam;
    };
    std::vector<Item> items;
    int n_pos = 0;
    for (const auto& g : gallery) {
      if (g.identity == q.identity && g.camera == q.camera) continue;
      const auto& a = qe.at(q.sample_id);
      const auto& b = ge.at(g.sample_id);
      double d2 = 0;
      for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
      const bool pos = g.identity == q.identity;
      items.push_back({std::sqrt(d2), g.sample_id, pos, g.camera == q.camera});
      if (pos) ++n_pos;
    }
    if (n_pos == 0 || items.empty()) continue;
    std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
      return a.d < b.d || (a.d == b.d && a.id < b.id);
    });
    auto ap_of = [&](bool drop_same_cam) {
      double ap = 0;
      int seen = 0, rank = 0;
      int r1 = -1;
      for (const auto& it : items) {
        if (drop_same_cam && it.same_cam) continue;
        ++rank;
        if (r1 < 0) r1 = it.pos ? 1 : 0;
        if (it.pos) {
          ++seen;
          ap += static_cast<double>(seen) / rank;
        }
      }
      return std::make_pair(ap / n_pos, r1 == 1 ? 1.0 : 0.0);
    };
    const auto [ap, r1] = ap_of(false);
    const auto [ap_nd, r1_nd] = ap_of(true);
    out.map += ap;
    out.rank1 += r1;
    out.map_nd += ap_nd;
    out.rank1_nd += r1_nd;
    ++out.n_query;
  }
  if (out.n_query > 0) {
    out.map /= out.n_query;
    out.rank1 /= out.n_query;
    out.map_nd /= out.n_query;
    out.rank1_nd /= out.n_query;
  }
  return out;
}

void criteria_3_and_4() {
  std::mt19937_64 rng(33003);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<int> n_items(2, 30), ids(0, 5), cams(0, 3), dim_pick(2, 8);
  double worst_ap = 0.0, worst_scores = 0.0;
  bool inequalities = true, scale_invariant = true;
  int instances = 0;

  for (int trial = 0; trial < 500; ++trial) {
    const int dim = dim_pick(rng);
    const int nq = 1 + n_items(rng) / 6;
    const int ng = n_items(rng);
    std::vector<ImageRecord> query, gallery;
    EmbeddingMap qe, ge, qe7, ge7;
    for (int i = 0; i < nq; ++i) {
      ImageRecord r;
      r.sample_id = "q" + std::to_string(i);
      r.identity = ids(rng);
      r.camera = cams(rng);
      query.push_back(r);
      std::vector<double> e(static_cast<std::size_t>(dim));
      for (auto& v : e) v = gauss(rng);
      std::vector<double> e7 = e;
      for (auto& v : e7) v *= 7.3;
      qe[r.sample_id] = std::move(e);
      qe7[r.sample_id] = std::move(e7);
    }
    for (int i = 0; i < ng; ++i) {
      ImageRecord r;
      r.sample_id = "g" + std::to_string(i);
      r.identity = ids(rng);
      r.camera = cams(rng);
      gallery.push_back(r);
      std::vector<double> e(static_cast<std::size_t>(dim));
      for (auto& v : e) v = gauss(rng);
      std::vector<double> e7 = e;
      for (auto& v : e7) v *= 7.3;
      ge[r.sample_id] = std::move(e);
      ge7[r.sample_id] = std::move(e7);
    }

    const ScoreDetails det = score_with_details(query, qe, gallery, ge);
    for (const QueryResult& r : det.queries) {
      if (!r.scored) continue;
      worst_ap = std::max(worst_ap, std::abs(r.ap - brute_force_ap(r.relevance, r.n_positives)));
      worst_ap = std::max(worst_ap, std::abs(r.ap_nd - brute_force_ap(r.relevance_nd, r.n_positives)));
    }
    const EndToEndOracle oracle = protocol_oracle(query, qe, gallery, ge);
    if (det.scores.n_query != oracle.n_query) worst_scores = 1.0;
    worst_scores = std::max({worst_scores, std::abs(det.scores.rank1 - oracle.rank1),
                             std::abs(det.scores.map - oracle.map),
                             std::abs(det.scores.rank1_nd - oracle.rank1_nd),
                             std::abs(det.scores.map_nd - oracle.map_nd)});

    inequalities = inequalities && det.scores.rank1_nd >= det.scores.rank1 &&
                   det.scores.map_nd >= det.scores.map;
    const Scores scaled = score(query, qe7, gallery, ge7);
    scale_invariant = scale_invariant && scaled.rank1 == det.scores.rank1 &&
                      scaled.rank1_nd == det.scores.rank1_nd && scaled.map == det.scores.map &&
                      scaled.map_nd == det.scores.map_nd;
    ++instances;
  }
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "mAP oracle on %d instances: per-query |AP diff| = %.3g (<= 1e-12), end-to-end "
                "|score diff| = %.3g (<= 1e-12)",
                instances, worst_ap, worst_scores);
  report(3, worst_ap <= 1e-12 && worst_scores <= 1e-12, buf);
  std::snprintf(buf, sizeof(buf),
                "protocol inequalities (rank1_nd >= rank1, map_nd >= map) and 7.3x scale invariance on "
                "every instance: %s / %s",
                inequalities ? "hold" : "VIOLATED", scale_invariant ? "bit-identical" : "CHANGED");
  report(4, inequalities && scale_invariant, buf);
}

// --- criterion 5: freezing contracts ---------------------------------------

SyntheticWorldConfig accept_world(std::uint64_t seed, int ids, int cams, double shift) {
  SyntheticWorldConfig c;
  c.n_identities = ids;
  c.n_cameras = cams;
  c.feature_dim = 24;
  c.id_subspace_dim = 4;
  c.camera_shift_scale = shift;
  c.nuisance_noise_scale = 0.4;
  c.images_per_identity_per_camera = 3;
  c.seed = RngSeed{seed};
  c.world_seed = RngSeed{5150};
  return c;
}

void criterion_5() {
  const Dataset source = synth_generate(accept_world(61, 10, 2, 0.6), "src");
  const Dataset target = synth_generate(accept_world(62, 8, 2, 1.0), "tgt");
  HeadArchitecture arch;
  arch.input_dim = 24;
  arch.hidden_dim = 20;
  arch.output_dim = 8;
  const PKConfig pk{4, 3};
  ScheduleConfig sched;
  sched.base_lr = 1e-3;
  sched.final_lr = 1e-6;
  sched.steps_per_epoch = compute_steps_per_epoch({source}, pk);

  auto params = init_params<float>(arch, NuiMode::Shared, {}, RngSeed{600});
  AdamState<float> opt;
  EmbeddingTrainOptions eo;
  eo.steps = 60;
  train_embedding({source}, params, opt, pk, sched, MarginMode::softplus(), RngSeed{601}, eo);

  MatrixD probe(10, arch.input_dim);
  for (int r = 0; r < probe.rows; ++r)
    for (int c = 0; c < probe.cols; ++c)
      probe(r, c) = static_cast<double>(target.records[static_cast<std::size_t>(r)].features[c]);
  const MatrixD z_before = encode_id(params, probe, BnMode::Eval);
  const auto emb_before = params.emb;

  AdamState<float> opt2;
  PretrainOptions po;
  po.steps = 80;
  po.lr = 1e-3;
  pretrain_embae({source}, params, opt2, pk, po, RngSeed{602});

  const bool emb_frozen = params.emb.w1 == emb_before.w1 && params.emb.b1 == emb_before.b1 &&
                          params.emb.gamma == emb_before.gamma && params.emb.beta == emb_before.beta &&
                          params.emb.running_mean == emb_before.running_mean &&
                          params.emb.running_var == emb_before.running_var &&
                          params.emb.w2 == emb_before.w2 && params.emb.b2 == emb_before.b2;
  const bool probe_same = encode_id(params, probe, BnMode::Eval) == z_before;

  FinetuneOptions fo;
  fo.phase1_steps = 20;
  fo.phase2_steps = 20;
  fo.batch_size = 12;

  auto fix_params = params;
  const auto nui_before = fix_params.nui.at("nui");
  finetune(target, fix_params, FinetuneVariant::FixNui, fo, RngSeed{603});
  const bool nui_frozen = fix_params.nui.at("nui").w1 == nui_before.w1 &&
                          fix_params.nui.at("nui").w2 == nui_before.w2 &&
                          fix_params.nui.at("nui").gamma == nui_before.gamma &&
                          fix_params.nui.at("nui").running_mean == nui_before.running_mean &&
                          fix_params.nui.at("nui").running_var == nui_before.running_var;

  auto new_params = params;
  FinetuneOptions p1only = fo;
  p1only.phase2_steps = 0;
  const auto emb_pre_ft = new_params.emb;
  const auto dec_pre_ft = new_params.dec;
  finetune(target, new_params, FinetuneVariant::NewNui, p1only, RngSeed{604});
  const bool p1_frozen = new_params.emb.w1 == emb_pre_ft.w1 &&
                         new_params.emb.running_mean == emb_pre_ft.running_mean &&
                         new_params.dec.w1 == dec_pre_ft.w1 && new_params.dec.w2 == dec_pre_ft.w2 &&
                         new_params.dec.b1 == dec_pre_ft.b1 && new_params.dec.b2 == dec_pre_ft.b2;

  report(5, emb_frozen && probe_same && nui_frozen && p1_frozen,
         std::string("freezing contracts: emb after pretrain ") + (emb_frozen ? "bit-identical" : "CHANGED") +
             ", probe embeddings " + (probe_same ? "unchanged" : "CHANGED") + ", fix_nui nui " +
             (nui_frozen ? "bit-identical" : "CHANGED") + ", new_nui phase-1 emb+dec " +
             (p1_frozen ? "bit-identical" : "CHANGED"));
}

// --- criterion 6: no-label contract ----------------------------------------

void criterion_6() {
  const Dataset source = synth_generate(accept_world(71, 10, 2, 0.6), "src");
  Dataset target = synth_generate(accept_world(72, 8, 2, 1.0), "tgt");
  HeadArchitecture arch;
  arch.input_dim = 24;
  arch.hidden_dim = 20;
  arch.output_dim = 8;
  const PKConfig pk{4, 3};
  ScheduleConfig sched;
  sched.base_lr = 1e-3;
  sched.final_lr = 1e-6;
  sched.steps_per_epoch = compute_steps_per_epoch({source}, pk);

  auto params = init_params<float>(arch, NuiMode::Shared, {}, RngSeed{700});
  AdamState<float> opt;
  EmbeddingTrainOptions eo;
  eo.steps = 40;
  train_embedding({source}, params, opt, pk, sched, MarginMode::softplus(), RngSeed{701}, eo);
  AdamState<float> opt2;
  PretrainOptions po;
  po.steps = 40;
  po.lr = 1e-3;
  pretrain_embae({source}, params, opt2, pk, po, RngSeed{702});

  FinetuneOptions fo;
  fo.phase1_steps = 25;
  fo.phase2_steps = 25;
  fo.batch_size = 12;

  auto a = params;
  finetune(target, a, FinetuneVariant::NewNui, fo, RngSeed{703});

  Dataset permuted = target;
  std::mt19937_64 perm_rng(95);
  std::vector<int> ids(permuted.identities.begin(), permuted.identities.end());
  std::vector<int> shuffled = ids;
  std::shuffle(shuffled.begin(), shuffled.end(), perm_rng);
  std::map<int, int> relabel;
  for (std::size_t i = 0; i < ids.size(); ++i) relabel[ids[i]] = shuffled[i];
  for (auto& r : permuted.records) r.identity = relabel.at(r.identity);
  permuted = Dataset::from_records("tgt", permuted.records);

  auto b = params;
  finetune(permuted, b, FinetuneVariant::NewNui, fo, RngSeed{703});

  bool identical = true;
  auto ea = tensor_entries(a), eb = tensor_entries(b);
  for (std::size_t i = 0; i < ea.size(); ++i)
    identical = identical && *ea[i].tensor == *eb[i].tensor;
  report(6, identical, std::string("no-label contract: fine-tuning with permuted identities is ") +
                           (identical ? "bit-identical" : "DIFFERENT"));
}

// --- criterion 7: learning-rate schedule ------------------------------------

void criterion_7() {
  ScheduleConfig cfg;  // paper defaults
  bool flat_ok = true;
  for (double e : {0.0, 1.0, 42.5, 99.999, 100.0}) flat_ok = flat_ok && lr_schedule(e, cfg) == 1e-4;
  bool floor_ok = true;
  for (double e : {400.0, 400.001, 1000.0})
    floor_ok = floor_ok && std::abs(lr_schedule(e, cfg) - 1e-7) <= 1e-22;
  // Frozen from the closed form 1e-4 * 10^(-3*(250-100)/300):
  const double midpoint = 3.1622776601683796e-06;
  const double got = lr_schedule(250, cfg);
  const bool mid_ok = std::abs(got - midpoint) <= 1e-10;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "schedule: lr<=100 epochs = 1e-4 (%s), lr>=400 = 1e-7 (%s), lr(250) = %.10g (|diff| "
                "= %.2g <= 1e-10)",
                flat_ok ? "ok" : "BAD", floor_ok ? "ok" : "BAD", got, std::abs(got - midpoint));
  report(7, flat_ok && floor_ok && mid_ok, buf);
}

// --- criterion 8: batch discipline -----------------------------------------

void criterion_8() {
  std::vector<Dataset> datasets;
  for (int i = 0; i < 4; ++i)
    datasets.push_back(synth_generate(accept_world(810 + static_cast<std::uint64_t>(i), 20, 2, 0.5),
                                      "ds" + std::to_string(i)));
  const PKConfig pk{18, 4};  // paper defaults
  const auto schedule = dataset_scheduler(datasets, 400, pk);

  std::map<int, int> counts;
  for (int s : schedule) ++counts[s];
  bool fair = counts.size() == 4;
  for (const auto& [idx, c] : counts) fair = fair && c == 100;

  std::mt19937_64 rng(808);
  bool pure = true, shape = true;
  for (long s = 0; s < 400; ++s) {
    const Batch b = pk_sample(datasets[static_cast<std::size_t>(schedule[static_cast<std::size_t>(s)])],
                              pk, rng);
    std::set<std::string> tags;
    std::map<int, int> per_id;
    for (const auto& r : b.records) {
      tags.insert(r.dataset);
      ++per_id[r.identity];
    }
    pure = pure && tags.size() == 1 &&
           *tags.begin() == datasets[static_cast<std::size_t>(schedule[static_cast<std::size_t>(s)])].name;
    shape = shape && b.records.size() == 72 && per_id.size() == 18;
    for (const auto& [id, c] : per_id) shape = shape && c == 4;
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "batch discipline over 400 steps x 4 datasets: purity %s, fairness (100 each) %s, "
                "P=18 x K=4 shape %s",
                pure ? "ok" : "BAD", fair ? "ok" : "BAD", shape ? "ok" : "BAD");
  report(8, pure && fair && shape, buf);
}

// --- criterion 9: end-to-end synthetic transfer -----------------------------

void criterion_9(const fs::path& repo_root) {
  const double t0 = now_seconds();
  const fs::path cam_cfg_path = repo_root / "configs" / "synthetic_transfer.json";
  const fs::path fix_cfg_path = repo_root / "configs" / "synthetic_transfer_fix_nui.json";

  ExperimentConfig cam_cfg = load_experiment_config(cam_cfg_path);
  cam_cfg.output_dir = fs::temp_directory_path() / "embae_accept_cam";
  fs::remove_all(cam_cfg.output_dir);
  const auto cam_rows = run_experiment(cam_cfg);

  ExperimentConfig fix_cfg = load_experiment_config(fix_cfg_path);
  fix_cfg.output_dir = fs::temp_directory_path() / "embae_accept_fix";
  fs::remove_all(fix_cfg.output_dir);
  const auto fix_rows = run_experiment(fix_cfg);

  const double base = cam_rows[0].scores.rank1;
  const double cam = cam_rows[1].scores.rank1;
  const double fix = fix_rows[1].scores.rank1;
  const double dt = now_seconds() - t0;
  const bool improvement = cam - base >= 0.05;
  const bool ordering = cam >= fix;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "synthetic transfer: baseline rank1 %.3f, cam_nui %.3f (%+.3f >= +0.05: %s), fix_nui "
                "%.3f (cam >= fix: %s), %.1fs (< 600s)",
                base, cam, cam - base, improvement ? "yes" : "NO", fix, ordering ? "yes" : "NO", dt);
  report(9, improvement && ordering && dt < 600.0, buf);
}

// --- criterion 10: checkpoint round-trips -----------------------------------

void criterion_10() {
  const fs::path dir = fs::temp_directory_path() / "embae_accept_ckpt";
  fs::remove_all(dir);
  const Dataset d = synth_generate(accept_world(101, 8, 2, 0.5), "s");
  HeadArchitecture arch;
  arch.input_dim = 24;
  arch.hidden_dim = 12;
  arch.output_dim = 6;
  auto params = init_params<float>(
      arch, NuiMode::PerCamera,
      {nui_key(NuiMode::PerCamera, "s", 0), nui_key(NuiMode::PerCamera, "s", 1)}, RngSeed{1000});

  // Fresh init round-trip.
  save_checkpoint(params, static_cast<const AdamState<float>*>(nullptr), dir);
  auto fresh = load_checkpoint<float>(dir);
  bool fresh_ok = true;
  {
    auto ea = tensor_entries(params), eb = tensor_entries(fresh.params);
    for (std::size_t i = 0; i < ea.size(); ++i) fresh_ok = fresh_ok && *ea[i].tensor == *eb[i].tensor;
  }

  // Mid-training state with optimizer moments and BN statistics.
  params.set_trainable({kGroupEmb});
  AdamState<float> opt;
  const PKConfig pk{4, 3};
  ScheduleConfig sched;
  sched.steps_per_epoch = compute_steps_per_epoch({d}, pk);
  EmbeddingTrainOptions eo;
  eo.steps = 12;
  train_embedding({d}, params, opt, pk, sched, MarginMode::softplus(), RngSeed{1001}, eo);
  save_checkpoint(params, &opt, dir);
  auto mid = load_checkpoint<float>(dir);
  bool mid_ok = mid.optimizer.has_value();
  {
    auto ea = tensor_entries(params), eb = tensor_entries(mid.params);
    for (std::size_t i = 0; i < ea.size(); ++i) mid_ok = mid_ok && *ea[i].tensor == *eb[i].tensor;
    mid_ok = mid_ok && mid.optimizer->m == opt.m && mid.optimizer->v == opt.v &&
             mid.optimizer->step == opt.step && mid.params.frozen == params.frozen;
  }

  // Corruption: bad magic and truncation must be rejected.
  bool corrupt_ok = false;
  {
    std::fstream f(dir / "params.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("BOGUS", 5);
    f.close();
    try {
      load_checkpoint<float>(dir);
    } catch (const IoError&) {
      corrupt_ok = true;
    }
  }
  save_checkpoint(params, &opt, dir);
  fs::resize_file(dir / "params.bin", fs::file_size(dir / "params.bin") - 40);
  bool trunc_ok = false;
  try {
    load_checkpoint<float>(dir);
  } catch (const IoError&) {
    trunc_ok = true;
  }

  report(10, fresh_ok && mid_ok && corrupt_ok && trunc_ok,
         std::string("checkpoint round-trips: fresh ") + (fresh_ok ? "bit-exact" : "BAD") +
             ", mid-training with moments " + (mid_ok ? "bit-exact" : "BAD") + ", bad magic " +
             (corrupt_ok ? "rejected" : "ACCEPTED") + ", truncation " +
             (trunc_ok ? "rejected" : "ACCEPTED"));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path repo_root = argc > 1 ? fs::path(argv[1]) : fs::current_path();
  criterion_1();
  criterion_2();
  criteria_3_and_4();
  criterion_5();
  criterion_6();
  criterion_7();
  criterion_8();
  criterion_9(repo_root);
  criterion_10();
  if (g_failures > 0) {
    std::printf("%d criterion(s) FAILED\n", g_failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
