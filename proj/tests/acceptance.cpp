// Prints one PASS/FAIL line per acceptance criterion; exits non-zero if any fails.
// Usage: acceptance [work_dir]

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "distillkit/errors.hpp"
#include "distillkit/evaluation.hpp"
#include "distillkit/kd_losses.hpp"
#include "distillkit/log.hpp"
#include "distillkit/relation_fusion.hpp"
#include "distillkit/trainer.hpp"
#include "helpers.hpp"
#include "oracles.hpp"
#include "toy_models.hpp"

using namespace distillkit;

namespace {

// Collects failed checks with a short reason; the first few are printed.
struct Checks {
  std::vector<std::string> failures;
  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
};

struct Criterion {
  int id;
  std::string title;
  double budget_seconds;
  std::function<void(Checks&, std::string&)> body;
};

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

// ---- 1 ------------------------------------------------------------------

void complexity(Checks& c, std::string& detail) {
  auto model = build_student(StudentArchSpec::standard(23));
  const auto total = count_parameters(*model).total_parameters;
  const int64_t expected = oracle::student_params(23);
  const double reported = 51895;
  c.expect(total == expected, "count " + std::to_string(total) + " != oracle " + std::to_string(expected));
  c.expect(total == 51199, "count is not 51199");
  c.expect(std::abs(total - reported) <= 0.05 * reported, "more than 5% away from 51,895");
  detail = std::to_string(total) + " params, " + std::to_string(total - 51895) + " vs reported";
}

// ---- 2 ------------------------------------------------------------------

void split_fidelity(Checks& c, std::string& detail) {
  DatasetManifest m;
  m.root = "/synthetic";
  for (int k = 0; k < 6; ++k) {
    m.class_names.push_back("c" + std::to_string(k));
    for (int i = 0; i < 1000; ++i) {
      m.records.push_back({m.root / m.class_names.back() / (std::to_string(i) + ".png"), k, Split::Unassigned});
    }
  }
  SplitConfig cfg;
  cfg.seed = 2024;
  const auto a = split_dataset(m, cfg);
  const auto b = split_dataset(m, cfg);
  const auto tr = a.count(Split::Train), va = a.count(Split::Val), te = a.count(Split::Test);
  c.expect(tr == 3600 && va == 1200 && te == 1200, "sizes differ from 3600/1200/1200");
  std::set<size_t> seen;
  bool disjoint = true;
  for (auto s : {Split::Train, Split::Val, Split::Test}) {
    for (auto i : a.indices(s)) disjoint &= seen.insert(i).second;
  }
  c.expect(disjoint && seen.size() == 6000, "splits overlap or miss records");
  bool same = true;
  for (size_t i = 0; i < a.records.size(); ++i) same &= a.records[i].split == b.records[i].split;
  c.expect(same, "same seed gave a different split");
  detail = std::to_string(tr) + "/" + std::to_string(va) + "/" + std::to_string(te);
}

// ---- 3 ------------------------------------------------------------------

void losses(Checks& c, std::string& detail) {
  torch::manual_seed(3);
  double worst = 0;
  for (int64_t dim : {4, 16, 64}) {
    const auto t = torch::randn({3, dim}, torch::kFloat64);
    const auto d = std::to_string(dim);

    c.expect(response_distillation_loss(t, t.clone(), 2.0).item<double>() == 0.0, "response identity, dim " + d);
    {
      auto s = torch::randn({3, dim}, torch::kFloat64).requires_grad_();
      auto tg = t.clone().requires_grad_();
      response_distillation_loss(tg, s, 2.0).backward();
      c.expect(!tg.grad().defined(), "response gradient reached the teacher, dim " + d);
      auto probe = s.detach().clone();
      const auto num = oracle::numeric_gradient([&] { return response_distillation_loss(t, probe, 2.0).item<double>(); },
                                                probe);
      const double e = oracle::relative_error(s.grad(), num);
      worst = std::max(worst, e);
      c.expect(e <= 1e-4, "response gradient check, dim " + d);
    }

    Projection pt(dim, 8), ps(dim, 8);
    pt->to(torch::kFloat64);
    ps->to(torch::kFloat64);
    Projection id_t(dim, dim, true), id_s(dim, dim, true);
    c.expect(feature_distillation_loss(t, t.clone(), id_t, id_s).item<double>() == 0.0, "feature identity, dim " + d);
    c.expect(relation_distillation_loss(t, t.clone(), id_t, id_s).item<double>() == 0.0, "relation identity, dim " + d);

    for (const bool relation : {false, true}) {
      const std::string name = relation ? "relation" : "feature";
      auto tg = t.clone().requires_grad_();
      auto s = torch::randn({3, dim}, torch::kFloat64).requires_grad_();
      auto loss_of = [&](const torch::Tensor& teacher, const torch::Tensor& student) {
        return relation ? relation_distillation_loss(teacher, student, pt, ps)
                        : feature_distillation_loss(teacher, student, pt, ps);
      };
      for (auto& p : pt->parameters()) p.mutable_grad() = torch::Tensor();
      for (auto& p : ps->parameters()) p.mutable_grad() = torch::Tensor();
      // The relation loss trains the fusion block through f*, so teacher
      // isolation is checked on the raw teacher features feeding the fusion.
      if (!relation) {
        loss_of(tg, s).backward();
        c.expect(!tg.grad().defined(), "feature gradient reached the teacher, dim " + d);
      } else {
        loss_of(t, s).backward();
      }
      auto probe = s.detach().clone();
      const auto f = [&] { return loss_of(t, probe).item<double>(); };
      double e = oracle::relative_error(s.grad(), oracle::numeric_gradient(f, probe));
      for (auto* proj : {&pt, &ps}) {
        for (auto& w : (*proj)->parameters()) {
          const auto analytic = w.grad().clone();
          auto data = w.detach();
          e = std::max(e, oracle::relative_error(analytic, oracle::numeric_gradient(f, data)));
        }
      }
      worst = std::max(worst, e);
      c.expect(e <= 1e-4, name + " gradient check, dim " + d);
    }
  }
  // Teacher features entering the fusion block receive no gradient.
  FusionBlock block(std::vector<int64_t>{12, 20}, AttentionConfig{});
  Projection pt(block->config().d_model, 16), ps(32, 16);
  auto t1 = torch::randn({4, 12}).requires_grad_(), t2 = torch::randn({4, 20}).requires_grad_();
  const std::vector<torch::Tensor> feats{t1, t2};
  relation_distillation_loss(fuse_teacher_features(feats, block), torch::randn({4, 32}), pt, ps).backward();
  c.expect(!t1.grad().defined() && !t2.grad().defined(), "relation gradient reached teacher features");
  char buf[64];
  std::snprintf(buf, sizeof buf, "max rel. err %.2e", worst);
  detail = buf;
}

// ---- 4 ------------------------------------------------------------------

AttentionConfig attention(int64_t d, int64_t heads, bool embeddings) {
  AttentionConfig a;
  a.d_model = d;
  a.num_heads = heads;
  a.ffn_dim = 2 * d;
  a.use_teacher_embeddings = embeddings;
  return a;
}

void fusion(Checks& c, std::string& detail) {
  torch::manual_seed(4);
  double perm = 0, rows = 0;
  for (int64_t teachers : {2, 3}) {
    std::vector<int64_t> widths;
    for (int64_t i = 0; i < teachers; ++i) widths.push_back(16 + 8 * i);
    std::vector<torch::Tensor> feats;
    for (auto w : widths) feats.push_back(torch::randn({5, w}));
    FusionBlock with(widths, attention(32, 4, true));
    c.expect(with->forward(feats).sizes() == torch::IntArrayRef({5, 32}), "fused shape, T=" + std::to_string(teachers));
    rows = std::max(rows, (with->trace(feats).attention.sum(-1) - 1.0).abs().max().item<double>());

    FusionBlock without(widths, attention(32, 4, false));
    std::vector<int64_t> id(teachers), rev(teachers);
    for (int64_t i = 0; i < teachers; ++i) id[i] = i, rev[i] = teachers - 1 - i;
    perm = std::max(perm, (without->trace(feats, id).fused - without->trace(feats, rev).fused).abs().max().item<double>());
  }
  c.expect(rows <= 1e-6, "attention rows do not sum to 1");
  c.expect(perm <= 1e-5, "fusion depends on teacher order");

  FusionBlock block(std::vector<int64_t>{6, 10}, attention(8, 2, true));
  block->to(torch::kFloat64);
  Projection pt(8, 5), ps(7, 5);
  pt->to(torch::kFloat64);
  ps->to(torch::kFloat64);
  const std::vector<torch::Tensor> feats{torch::randn({3, 6}, torch::kFloat64), torch::randn({3, 10}, torch::kFloat64)};
  const auto s = torch::randn({3, 7}, torch::kFloat64);
  const auto loss = [&] { return relation_distillation_loss(block->forward(feats), s, pt, ps); };
  loss().backward();
  double worst = 0;
  for (const auto& p : block->named_parameters()) {
    const auto analytic = p.value().grad().clone();
    auto data = p.value().detach();
    const double e = oracle::relative_error(analytic, oracle::numeric_gradient([&] { return loss().item<double>(); }, data));
    worst = std::max(worst, e);
    c.expect(e <= 1e-4, "gradient check failed for " + p.key());
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "perm %.1e, row sum %.1e, grad rel. err %.1e", perm, rows, worst);
  detail = buf;
}

// ---- 5 ------------------------------------------------------------------

void metrics(Checks& c, std::string& detail) {
  std::mt19937_64 rng(5);
  int trials = 0;
  for (int trial = 0; trial < 100; ++trial) {
    for (int64_t k : {2, 6, 23}) {
      std::uniform_int_distribution<int64_t> cls(0, k - 1);
      std::uniform_int_distribution<size_t> len(1, 300);
      const size_t n = len(rng);
      std::vector<int64_t> preds(n), labels(n);
      for (size_t i = 0; i < n; ++i) {
        labels[i] = cls(rng);
        preds[i] = rng() % 2 ? labels[i] : cls(rng);
      }
      const auto got = compute_metrics(preds, labels, k);
      const auto want = oracle::averages(preds, labels, k);
      const auto counts = oracle::count(preds, labels, k);
      // Counts and per-class ratios are bit-exact; averages differ only in
      // summation order, so they get a last-ulp allowance.
      const auto near = [](double a, double b) { return std::abs(a - b) <= 1e-12; };
      bool ok = got.accuracy == want.accuracy && near(got.macro.precision, want.macro_p) &&
                near(got.macro.recall, want.macro_r) && near(got.macro.f1, want.macro_f1) &&
                near(got.weighted.precision, want.weighted_p) && near(got.weighted.recall, want.weighted_r) &&
                near(got.weighted.f1, want.weighted_f1) && confusion_matrix(preds, labels, k).counts == counts.matrix;
      for (int64_t j = 0; j < k && ok; ++j) {
        ok = got.per_class[j].support == counts.support[j] && got.per_class[j].precision == want.precision[j] &&
             got.per_class[j].recall == want.recall[j] && got.per_class[j].f1 == want.f1[j];
      }
      c.expect(ok, "mismatch at trial " + std::to_string(trial) + ", K=" + std::to_string(k));
      c.expect(std::abs(got.weighted.recall - got.accuracy) <= 1e-12, "weighted recall != accuracy");
      ++trials;
    }
  }
  detail = std::to_string(trials) + " randomized comparisons";
}

// ---- 7 ------------------------------------------------------------------

void gradcam_checks(Checks& c, std::string& detail) {
  torch::manual_seed(7);
  auto model = build_student(StudentArchSpec::standard(4, 32));
  const auto image = torch::randn({3, 32, 32});
  for (const auto& layer : model->activation_layers()) {
    for (int64_t cls = 0; cls < 4; ++cls) {
      const auto map = gradcam(*model, image, cls, layer);
      c.expect(map.heatmap.sizes() == torch::IntArrayRef({32, 32}), "heatmap shape at " + layer);
      c.expect(map.heatmap.min().item<float>() >= 0.0f && map.heatmap.max().item<float>() <= 1.0f,
               "heatmap outside [0,1] at " + layer);
    }
  }
  testing::CamToy toy(16);
  std::mt19937_64 rng(7);
  int hits = 0;
  const int trials = 25;
  for (int i = 0; i < trials; ++i) {
    auto x = torch::rand({3, 16, 16}) * 0.1;
    const int64_t r = rng() % 16, col = rng() % 16;
    x.index_put_({torch::indexing::Slice(), r, col}, 1.0);
    hits += gradcam(toy, x, 0).heatmap.flatten().argmax().item<int64_t>() == r * 16 + col;
    c.expect(gradcam(toy, x, 1).heatmap.max().item<float>() == 0.0f, "ReLU floor violated");
  }
  c.expect(hits == trials, "argmax missed the evidence pixel");
  detail = std::to_string(hits) + "/" + std::to_string(trials) + " argmax hits";
}

// ---- 8 ------------------------------------------------------------------

void offline(Checks& c, std::string& detail) {
  testing::TempDir dir("offline");
  synth_dataset(2, 5, 1, dir / "d", 32);
  const auto data = split_dataset(ingest_folder_dataset(dir / "d"), SplitConfig{});
  int resource_errors = 0;
  for (auto mode : {TrainMode::KdResponse, TrainMode::KdFeature, TrainMode::KdFeatureMulti, TrainMode::KdRelation}) {
    TrainConfig cfg;
    cfg.mode = mode;
    cfg.epochs = 1;
    cfg.image_size = 32;
    const size_t n = (mode == TrainMode::KdResponse || mode == TrainMode::KdFeature) ? 1 : 2;
    for (size_t i = 0; i < n; ++i) cfg.teachers.push_back((dir / ("absent_" + std::to_string(i) + ".ckpt")).string());
    const auto out = dir / to_string(mode);
    try {
      train(cfg, data, out);
      c.expect(false, to_string(mode) + " trained without its teacher");
    } catch (const ResourceError&) {
      ++resource_errors;
    } catch (const std::exception& e) {
      c.expect(false, to_string(mode) + " raised a non-resource error: " + e.what());
    }
    c.expect(!fs::exists(out / "model.ckpt") && !fs::exists(out / "run_record.json"),
             to_string(mode) + " left artifacts behind");
  }
  detail = std::to_string(resource_errors) + "/4 modes refused";
}

// ---- 6 and 9 ------------------------------------------------------------

const json kMatrix = json::parse(R"({
  "seeds": [0, 1, 2],
  "defaults": {"epochs": 10, "batch_size": 16, "learning_rate": 0.001, "image_size": 64},
  "teachers": [
    {"name": "TOY_A", "teacher_ids": ["TOY"], "seed": 100, "epochs": 20, "learning_rate": 0.0005},
    {"name": "TOY_B", "teacher_ids": ["TOY"], "seed": 200, "epochs": 20, "learning_rate": 0.0005}
  ],
  "runs": [
    {"name": "STU", "mode": "vanilla"},
    {"name": "KD_RESP", "mode": "kd_response", "teacher_ids": ["TOY_A"]},
    {"name": "KD_FEAT", "mode": "kd_feature", "teacher_ids": ["TOY_A"]},
    {"name": "KD_FEAT_T2", "mode": "kd_feature_multi", "teacher_ids": ["TOY_A", "TOY_B"]},
    {"name": "KD_REL_T2", "mode": "kd_relation", "teacher_ids": ["TOY_A", "TOY_B"]}
  ]
})");

struct MatrixRun {
  fs::path dir;
  std::vector<RunRecord> records;
  std::string error;
};

MatrixRun run_matrix(const fs::path& work, const std::string& tag) {
  MatrixRun run;
  run.dir = work / tag;
  try {
    const auto data_dir = work / "synthetic";
    if (!fs::exists(data_dir / "split.json")) {
      const auto raw = synth_dataset(4, 50, 7, data_dir, 64);
      SplitConfig cfg;
      cfg.seed = 7;
      write_split_sidecar(split_dataset(raw, cfg), cfg, data_dir / "split.json");
    }
    const auto data = apply_split_sidecar(ingest_folder_dataset(data_dir), data_dir / "split.json");
    run.records = run_experiment_matrix(MatrixConfig::from_json(kMatrix), data, run.dir);
  } catch (const std::exception& e) {
    run.error = e.what();
  }
  return run;
}

double accuracy_of(const RunRecord& r) { return r.test_metrics ? r.test_metrics->accuracy : -1.0; }

std::map<std::string, double> means(const std::vector<RunRecord>& records) {
  std::map<std::string, double> out;
  for (const auto& r : aggregate_by_name(records)) out[r.name] = accuracy_of(r);
  return out;
}

void directional(Checks& c, std::string& detail, const MatrixRun& run) {
  if (!run.error.empty()) {
    c.expect(false, "matrix aborted: " + run.error);
    return;
  }
  for (const auto& r : run.records) c.expect(r.status == "ok", r.name + " failed: " + r.error);
  const auto m = means(run.records);
  for (const auto* name : {"TOY_A", "TOY_B", "STU", "KD_RESP", "KD_FEAT", "KD_FEAT_T2", "KD_REL_T2"}) {
    c.expect(m.count(name) == 1, std::string("no row for ") + name);
  }
  if (!c.failures.empty()) return;
  // (a) is judged on seed means: 40 test images give a 2.5 pp grid, so
  // single-seed ties between strong teachers and a strong student are common.
  const double stu = m.at("STU");
  c.expect(m.at("TOY_A") > stu, "TOY_A mean " + pct(m.at("TOY_A")) + " <= STU mean " + pct(stu));
  c.expect(m.at("TOY_B") > stu, "TOY_B mean " + pct(m.at("TOY_B")) + " <= STU mean " + pct(stu));
  c.expect(m.at("KD_REL_T2") >= stu - 0.01, "KD_REL_T2 mean " + pct(m.at("KD_REL_T2")) + " < STU mean - 1pp");

  std::ifstream in(run.dir / "report.md");
  const std::string report{std::istreambuf_iterator<char>(in), {}};
  c.expect(report.rfind("| Type | Model | Fine-Tuning | Accuracy | Precision | F1 Score | Recall |", 0) == 0,
           "report header has the wrong columns");
  for (const auto* type : {"Teacher Models", "Student Model", "KD Models"}) {
    c.expect(report.find(std::string("| ") + type + " |") != std::string::npos, std::string("report lacks ") + type);
  }
  std::ostringstream d;
  d << "means:";
  for (const auto* name : {"TOY_A", "TOY_B", "STU", "KD_RESP", "KD_FEAT", "KD_FEAT_T2", "KD_REL_T2"}) {
    d << " " << name << " " << pct(m.at(name));
  }
  detail = d.str();
}

void reproducible(Checks& c, std::string& detail, const MatrixRun& first, const MatrixRun& second) {
  if (!first.error.empty() || !second.error.empty()) {
    c.expect(false, "matrix aborted: " + first.error + second.error);
    return;
  }
  c.expect(first.records.size() == second.records.size(), "different number of runs");
  if (!c.failures.empty()) return;
  double acc = 0, loss = 0;
  for (size_t i = 0; i < first.records.size(); ++i) {
    const auto& a = first.records[i];
    const auto& b = second.records[i];
    c.expect(a.name == b.name && a.seeds == b.seeds, "run order changed at " + std::to_string(i));
    acc = std::max(acc, std::abs(accuracy_of(a) - accuracy_of(b)));
    if (!a.epochs.empty() && !b.epochs.empty()) {
      loss = std::max(loss, std::abs(a.epochs[0].train.total - b.epochs[0].train.total));
    }
  }
  c.expect(acc <= 0.005, "accuracy drift " + pct(acc));
  c.expect(loss <= 1e-6, "epoch-0 loss drift " + std::to_string(loss));
  char buf[96];
  std::snprintf(buf, sizeof buf, "%zu runs, max acc drift %.2f pp, max epoch-0 loss drift %.1e", first.records.size(),
                100.0 * acc, loss);
  detail = buf;
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  log::set_level("warn");
  std::unique_ptr<testing::TempDir> temp;
  fs::path work;
  if (argc > 1) {
    work = argv[1];
    fs::create_directories(work);
  } else {
    temp = std::make_unique<testing::TempDir>("acceptance");
    work = temp->path();
  }

  MatrixRun first, second;
  const std::vector<Criterion> criteria = {
      {1, "complexity fidelity", 1, complexity},
      {2, "split fidelity", 5, split_fidelity},
      {3, "loss correctness", 30, losses},
      {4, "fusion block", 60, fusion},
      {5, "metric oracle equivalence", 30, metrics},
      {6, "directional KD effect", 1800,
       [&](Checks& c, std::string& d) {
         first = run_matrix(work, "matrix_a");
         directional(c, d, first);
       }},
      {7, "grad-cam", 60, gradcam_checks},
      {8, "offline-scheme enforcement", 5, offline},
      {9, "reproducibility", 1800,
       [&](Checks& c, std::string& d) {
         second = run_matrix(work, "matrix_b");
         reproducible(c, d, first, second);
       }},
  };

  int failed = 0;
  for (const auto& crit : criteria) {
    Checks checks;
    std::string detail;
    const auto start = std::chrono::steady_clock::now();
    try {
      crit.body(checks, detail);
    } catch (const std::exception& e) {
      checks.expect(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    char budget[96];
    std::snprintf(budget, sizeof budget, "%.1fs (limit %.0fs)", secs, crit.budget_seconds);
    checks.expect(secs <= crit.budget_seconds, std::string("over time: ") + budget);
    const bool ok = checks.failures.empty();
    failed += !ok;
    std::cout << (ok ? "PASS" : "FAIL") << " criterion " << crit.id << " " << crit.title << ": " << detail << " ["
              << budget << "]";
    for (size_t i = 0; i < checks.failures.size() && i < 3; ++i) std::cout << (i ? "; " : " -- ") << checks.failures[i];
    if (checks.failures.size() > 3) std::cout << " (+" << checks.failures.size() - 3 << " more)";
    std::cout << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
