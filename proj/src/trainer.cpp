#include "distillkit/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <set>



#include "distillkit/checkpoint.hpp"
#include "distillkit/errors.hpp"
#include "distillkit/log.hpp"
#include "distillkit/evaluation.hpp"

namespace distillkit {

namespace F = torch::nn::functional;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Vanilla: return "vanilla";
    case TrainMode::FinetuneTeacher: return "finetune_teacher";
    case TrainMode::KdResponse: return "kd_response";
    case TrainMode::KdFeature: return "kd_feature";
    case TrainMode::KdFeatureMulti: return "kd_feature_multi";
    case TrainMode::KdRelation: return "kd_relation";
  }
  return "?";
}

TrainMode parse_train_mode(const std::string& s) {
  if (s == "vanilla") return TrainMode::Vanilla;
  if (s == "finetune_teacher") return TrainMode::FinetuneTeacher;
  if (s == "kd_response") return TrainMode::KdResponse;
  if (s == "kd_feature") return TrainMode::KdFeature;
  if (s == "kd_feature_multi") return TrainMode::KdFeatureMulti;
  if (s == "kd_relation") return TrainMode::KdRelation;
  throw ConfigError("unknown training mode '" + s + "'");
}

void TrainConfig::validate() const {
  const auto n = teachers.size();
  const auto mode_name = to_string(mode);
  auto arity = [&](bool ok, const std::string& need) {
    if (!ok) {
      throw ConfigError("mode " + mode_name + " requires " + need + " teacher(s), got " + std::to_string(n));
    }
  };
  switch (mode) {
    case TrainMode::Vanilla: arity(n == 0, "0"); break;
    case TrainMode::FinetuneTeacher:
    case TrainMode::KdResponse:
    case TrainMode::KdFeature: arity(n == 1, "exactly 1"); break;
    case TrainMode::KdFeatureMulti:
    case TrainMode::KdRelation: arity(n >= 2, "at least 2"); break;
  }
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (optimizer != "adam") throw ConfigError("unsupported optimizer '" + optimizer + "' (only adam)");
  if (loss_weights.resp < 0 || loss_weights.feat < 0 || loss_weights.rel < 0) {
    throw ConfigError("loss weights must be non-negative");
  }
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (projection_dim < 1) throw ConfigError("projection_dim must be >= 1");
  if (image_size < 16) throw ConfigError("image_size must be >= 16");
  if (num_threads < 1) throw ConfigError("num_threads must be >= 1");
  if (frozen_prefix_depth && *frozen_prefix_depth < 0) throw ConfigError("frozen_prefix_depth must be >= 0");
  if (mode == TrainMode::KdRelation) attention.validate();
}

json TrainConfig::to_json() const {
  json j = {{"name", display_name()},
            {"mode", to_string(mode)},
            {"teacher_ids", teachers},
            {"teacher_weights_mode", to_string(teacher_weights_mode)},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"optimizer", optimizer},
            {"loss_weights", loss_weights.to_json()},
            {"temperature", temperature},
            {"resp_on_logits", resp_on_logits},
            {"projection_dim", projection_dim},
            {"attention", attention.to_json()},
            {"seed", seed},
            {"image_size", image_size},
            {"num_threads", num_threads}};
  j["frozen_prefix_depth"] = frozen_prefix_depth ? json(*frozen_prefix_depth) : json(nullptr);
  return j;
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown key '" + where + "." + key + "'");
  }
}

template <typename T>
void read(const json& j, const std::string& key, T& dst, const std::string& where) {
  if (!j.contains(key) || j[key].is_null()) return;
  try {
    dst = j[key].get<T>();
  } catch (const json::exception&) {
    throw ConfigError("invalid value for '" + where + "." + key + "'");
  }
}

}  // namespace

TrainConfig TrainConfig::from_json(const json& j, const std::string& where) {
  reject_unknown(j,
                 {"name", "mode", "teacher_ids", "teacher_weights_mode", "frozen_prefix_depth", "epochs", "batch_size",
                  "learning_rate", "optimizer", "loss_weights", "temperature", "resp_on_logits", "projection_dim",
                  "attention", "seed", "image_size", "num_threads"},
                 where);
  TrainConfig c;
  read(j, "name", c.name, where);
  std::string s;
  read(j, "mode", s, where);
  if (!s.empty()) c.mode = parse_train_mode(s);
  read(j, "teacher_ids", c.teachers, where);
  s.clear();
  read(j, "teacher_weights_mode", s, where);
  if (!s.empty()) c.teacher_weights_mode = parse_weights_mode(s);
  if (j.contains("frozen_prefix_depth") && !j["frozen_prefix_depth"].is_null()) {
    int64_t d = 0;
    read(j, "frozen_prefix_depth", d, where);
    c.frozen_prefix_depth = d;
  }
  read(j, "epochs", c.epochs, where);
  read(j, "batch_size", c.batch_size, where);
  read(j, "learning_rate", c.learning_rate, where);
  read(j, "optimizer", c.optimizer, where);
  if (j.contains("loss_weights")) {
    const auto& w = j["loss_weights"];
    const auto sub = where + ".loss_weights";
    reject_unknown(w, {"resp", "feat", "rel"}, sub);
    read(w, "resp", c.loss_weights.resp, sub);
    read(w, "feat", c.loss_weights.feat, sub);
    read(w, "rel", c.loss_weights.rel, sub);
  }
  read(j, "temperature", c.temperature, where);
  read(j, "resp_on_logits", c.resp_on_logits, where);
  read(j, "projection_dim", c.projection_dim, where);
  if (j.contains("attention")) {
    const auto& a = j["attention"];
    const auto sub = where + ".attention";
    reject_unknown(a, {"d_model", "num_heads", "ffn_dim", "use_teacher_embeddings", "pool"}, sub);
    read(a, "d_model", c.attention.d_model, sub);
    read(a, "num_heads", c.attention.num_heads, sub);
    read(a, "ffn_dim", c.attention.ffn_dim, sub);
    read(a, "use_teacher_embeddings", c.attention.use_teacher_embeddings, sub);
    read(a, "pool", c.attention.pool, sub);
  }
  read(j, "seed", c.seed, where);
  read(j, "image_size", c.image_size, where);
  read(j, "num_threads", c.num_threads, where);
  return c;
}

std::string TrainConfig::display_name() const {
  if (!name.empty()) return name;
  const auto n = std::to_string(teachers.size());
  switch (mode) {
    case TrainMode::Vanilla: return "STU";
    case TrainMode::FinetuneTeacher: return teachers.empty() ? "TEACHER" : teachers.front();
    case TrainMode::KdResponse: return "KD_RESP";
    case TrainMode::KdFeature: return "KD_FEAT";
    case TrainMode::KdFeatureMulti: return "KD_FEAT_T" + n;
    case TrainMode::KdRelation: return "KD_REL_T" + n;
  }
  return "RUN";
}

namespace {

uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

SeedPlan SeedPlan::from_master(uint64_t master) {
  SeedPlan p;
  p.master = master;
  uint64_t state = master;
  p.split = splitmix64(state);
  p.init = splitmix64(state);
  p.shuffle = splitmix64(state);
  return p;
}

json SeedPlan::to_json() const {
  return {{"master", master}, {"split", split}, {"init", init}, {"shuffle", shuffle}};
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

struct TeacherOutputs {
  torch::Tensor logits;
  torch::Tensor features;
};

// Teachers are fixed and inputs are not augmented, so their outputs are
// computed once per split.
TeacherOutputs teacher_outputs(Classifier& teacher, const ImageDataset& data, int64_t batch_size) {
  torch::NoGradGuard no_grad;
  teacher.eval();
  std::vector<torch::Tensor> logits, features;
  const auto n = static_cast<int64_t>(data.size());
  for (int64_t start = 0; start < n; start += batch_size) {
    std::vector<int64_t> rows;
    for (int64_t i = start; i < std::min(n, start + batch_size); ++i) rows.push_back(i);
    auto out = teacher.run(data.batch(rows).first);
    logits.push_back(out.logits);
    features.push_back(out.features);
  }
  if (logits.empty()) {
    return {torch::empty({0, teacher.num_classes()}), torch::empty({0, teacher.feature_dim()})};
  }
  return {torch::cat(logits), torch::cat(features)};
}

// Projections and the fusion block: trained alongside the student, never
// part of the deployed model.
struct DistillationHeadImpl : torch::nn::Module {
  std::vector<Projection> teacher_proj;
  std::vector<Projection> student_proj;
  FusionBlock fusion{nullptr};
};
TORCH_MODULE(DistillationHead);

DistillationHead make_head(const TrainConfig& cfg, const Classifier& student, const std::vector<Model>& teachers) {
  DistillationHead head;
  const auto p = cfg.projection_dim;
  auto add_pair = [&](int64_t teacher_width, size_t idx) {
    head->teacher_proj.push_back(head->register_module("proj_t" + std::to_string(idx), Projection(teacher_width, p)));
    head->student_proj.push_back(
        head->register_module("proj_s" + std::to_string(idx), Projection(student.feature_dim(), p)));
  };
  switch (cfg.mode) {
    case TrainMode::KdFeature:
    case TrainMode::KdFeatureMulti:
      for (size_t t = 0; t < teachers.size(); ++t) add_pair(teachers[t]->feature_dim(), t);
      break;
    case TrainMode::KdRelation: {
      std::vector<int64_t> widths;
      for (const auto& t : teachers) widths.push_back(t->feature_dim());
      head->fusion = head->register_module("fusion", FusionBlock(widths, cfg.attention));
      add_pair(cfg.attention.d_model, 0);
      break;
    }
    default: break;
  }
  return head;
}

LossTerms compute_terms(const TrainConfig& cfg, const ForwardResult& out, const torch::Tensor& labels,
                        const std::vector<TeacherOutputs>& teachers, const torch::Tensor& rows,
                        DistillationHead& head) {
  LossTerms terms;
  terms.ce = F::cross_entropy(out.logits, labels);
  auto t_logits = [&](size_t t) { return teachers[t].logits.index_select(0, rows); };
  auto t_features = [&](size_t t) { return teachers[t].features.index_select(0, rows); };
  switch (cfg.mode) {
    case TrainMode::Vanilla:
    case TrainMode::FinetuneTeacher:
      break;
    case TrainMode::KdResponse:
      terms.resp = response_distillation_loss(t_logits(0), out.logits, cfg.temperature, cfg.resp_on_logits);
      break;
    case TrainMode::KdFeature:
      terms.resp = response_distillation_loss(t_logits(0), out.logits, cfg.temperature, cfg.resp_on_logits);
      terms.feat = feature_distillation_loss(t_features(0), out.features, head->teacher_proj[0], head->student_proj[0]);
      break;
    case TrainMode::KdFeatureMulti: {
      std::vector<torch::Tensor> resp, feat;
      for (size_t t = 0; t < teachers.size(); ++t) {
        resp.push_back(response_distillation_loss(t_logits(t), out.logits, cfg.temperature, cfg.resp_on_logits));
        feat.push_back(
            feature_distillation_loss(t_features(t), out.features, head->teacher_proj[t], head->student_proj[t]));
      }
      terms.resp = torch::stack(resp).mean();
      terms.feat = torch::stack(feat).mean();
      break;
    }
    case TrainMode::KdRelation: {
      std::vector<torch::Tensor> feats;
      for (size_t t = 0; t < teachers.size(); ++t) feats.push_back(t_features(t));
      const auto fused = fuse_teacher_features(feats, head->fusion);
      terms.rel = relation_distillation_loss(fused, out.features, head->teacher_proj[0], head->student_proj[0]);
      break;
    }
  }
  return terms;
}

struct BreakdownAccumulator {
  double ce = 0, resp = 0, feat = 0, rel = 0, total = 0;
  bool has_resp = false, has_feat = false, has_rel = false;
  double weight = 0;

  void add(const LossBreakdown& b, double w) {
    ce += w * b.ce;
    total += w * b.total;
    if (b.resp) has_resp = true, resp += w * *b.resp;
    if (b.feat) has_feat = true, feat += w * *b.feat;
    if (b.rel) has_rel = true, rel += w * *b.rel;
    weight += w;
  }

  LossBreakdown mean(const LossWeights& weights) const {
    LossBreakdown b;
    b.weights = weights;
    if (weight <= 0) return b;
    b.ce = ce / weight;
    if (has_resp) b.resp = resp / weight;
    if (has_feat) b.feat = feat / weight;
    if (has_rel) b.rel = rel / weight;
    // Recomputed from the means so the logged identity holds exactly.
    b.total = b.ce + weights.resp * b.resp.value_or(0.0) + weights.feat * b.feat.value_or(0.0) +
              weights.rel * b.rel.value_or(0.0);
    return b;
  }
};

std::vector<torch::Tensor> snapshot(const std::vector<NamedTensor>& state) {
  std::vector<torch::Tensor> out;
  for (const auto& nt : state) out.push_back(nt.tensor.detach().clone());
  return out;
}

void restore(const std::vector<NamedTensor>& state, const std::vector<torch::Tensor>& saved) {
  torch::NoGradGuard no_grad;
  for (size_t i = 0; i < state.size(); ++i) state[i].tensor.copy_(saved[i]);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::string table_type_for(TrainMode m) {
  switch (m) {
    case TrainMode::FinetuneTeacher: return "Teacher Models";
    case TrainMode::Vanilla: return "Student Model";
    default: return "KD Models";
  }
}

struct EvalResult {
  LossBreakdown loss;
  double accuracy = 0.0;
};

EvalResult evaluate_split(const TrainConfig& cfg, Classifier& model, const ImageDataset& data,
                          const std::vector<TeacherOutputs>& teachers, DistillationHead& head) {
  torch::NoGradGuard no_grad;
  model.eval();
  head->eval();
  BreakdownAccumulator acc;
  int64_t correct = 0;
  const auto n = static_cast<int64_t>(data.size());
  constexpr int64_t kEvalBatch = 64;
  for (int64_t start = 0; start < n; start += kEvalBatch) {
    std::vector<int64_t> rows;
    for (int64_t i = start; i < std::min(n, start + kEvalBatch); ++i) rows.push_back(i);
    auto [x, y] = data.batch(rows);
    auto out = model.run(x);
    auto idx = torch::tensor(rows, torch::kInt64);
    auto total = total_loss(compute_terms(cfg, out, y, teachers, idx, head), cfg.loss_weights);
    acc.add(total.breakdown, static_cast<double>(rows.size()));
    correct += out.logits.argmax(1).eq(y).sum().item<int64_t>();
  }
  return {acc.mean(cfg.loss_weights), n > 0 ? static_cast<double>(correct) / static_cast<double>(n) : 0.0};
}

}  // namespace

RunRecord train_models(const TrainConfig& config, const DatasetManifest& data, TrainInputs& inputs,
                       const fs::path& out_dir) {
  config.validate();
  if (!inputs.trainee) throw ConfigError("train: no model to train");
  if (config.mode != TrainMode::FinetuneTeacher && inputs.teachers.size() != config.teachers.size()) {
    throw ConfigError("train: " + std::to_string(inputs.teachers.size()) + " teacher models supplied for " +
                      std::to_string(config.teachers.size()) + " configured teachers");
  }
  for (const auto& t : inputs.teachers) {
    if (t->input_size() != config.image_size) {
      throw ConfigError("teacher expects " + std::to_string(t->input_size()) + "px inputs, run uses " +
                        std::to_string(config.image_size));
    }
    if (t->num_classes() != data.num_classes()) {
      throw ConfigError("teacher has " + std::to_string(t->num_classes()) + " classes, dataset has " +
                        std::to_string(data.num_classes()));
    }
  }
  torch::set_num_threads(static_cast<int>(config.num_threads));
  const auto start_time = std::chrono::steady_clock::now();
  const auto seeds = SeedPlan::from_master(config.seed);
  fs::create_directories(out_dir);

  RunRecord record;
  record.name = config.display_name();
  record.table_type = table_type_for(config.mode);
  record.config = config.to_json();
  record.seeds = seeds.to_json();
  record.artifacts["config"] = (out_dir / "config.resolved.json").string();
  write_json(out_dir / "config.resolved.json", record.config);

  auto& model = *inputs.trainee;
  PreprocessConfig prep;
  prep.image_size = config.image_size;
  const ImageDataset train_set(data, Split::Train, prep);
  const ImageDataset val_set(data, Split::Val, prep);
  const ImageDataset test_set(data, Split::Test, prep);

  // Teachers: inference mode, no gradients, outputs cached per split.
  std::vector<TeacherOutputs> teacher_train, teacher_val;
  for (auto& t : inputs.teachers) {
    t->eval();
    for (auto& p : t->parameters()) p.set_requires_grad(false);
    teacher_train.push_back(teacher_outputs(*t, train_set, 64));
    teacher_val.push_back(teacher_outputs(*t, val_set, 64));
  }

  torch::manual_seed(seeds.init);
  auto head = make_head(config, model, inputs.teachers);

  std::vector<torch::Tensor> params;
  for (auto& p : model.parameters()) {
    if (p.requires_grad()) params.push_back(p);
  }
  for (auto& p : head->parameters()) params.push_back(p);
  torch::optim::Adam optimizer(params, torch::optim::AdamOptions(config.learning_rate));

  const auto model_state = state_of(model);
  const auto head_state = state_of(*head, "distill.");
  auto best_model = snapshot(model_state);
  auto best_head = snapshot(head_state);
  double best_val = -1.0;

  std::mt19937_64 shuffle_rng(seeds.shuffle);
  std::vector<int64_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);

  auto write_record = [&]() {
    record.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
    record.artifacts["run_record"] = (out_dir / "run_record.json").string();
    write_json(out_dir / "run_record.json", record.to_json());
  };

  try {
    for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
      for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);
      model.train();
      head->train();
      BreakdownAccumulator acc;
      int64_t correct = 0;
      const auto n = static_cast<int64_t>(order.size());
      for (int64_t s = 0; s < n; s += config.batch_size) {
        std::vector<int64_t> rows(order.begin() + s, order.begin() + std::min(n, s + config.batch_size));
        auto [x, y] = train_set.batch(rows);
        auto idx = torch::tensor(rows, torch::kInt64);
        auto out = model.run(x);
        auto total = total_loss(compute_terms(config, out, y, teacher_train, idx, head), config.loss_weights);
        if (!std::isfinite(total.breakdown.total)) {
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(s / config.batch_size) + ": " + total.breakdown.to_json().dump());
        }
        optimizer.zero_grad();
        total.value.backward();
        optimizer.step();
        acc.add(total.breakdown, static_cast<double>(rows.size()));
        correct += out.logits.argmax(1).eq(y).sum().item<int64_t>();
      }
      EpochLog entry;
      entry.epoch = epoch;
      entry.train = acc.mean(config.loss_weights);
      entry.train_accuracy = n > 0 ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
      const auto val = evaluate_split(config, model, val_set, teacher_val, head);
      entry.val = val.loss;
      entry.val_accuracy = val.accuracy;
      record.epochs.push_back(entry);
      char line[160];
      std::snprintf(line, sizeof line, "epoch %lld/%lld train loss %.4f acc %.3f | val loss %.4f acc %.3f",
                    static_cast<long long>(epoch + 1), static_cast<long long>(config.epochs), entry.train.total,
                    entry.train_accuracy, entry.val.total, entry.val_accuracy);
      log::info("[" + record.name + "] " + line);
      if (val.accuracy > best_val) {
        best_val = val.accuracy;
        record.best_epoch = epoch;
        best_model = snapshot(model_state);
        best_head = snapshot(head_state);
      }
    }
  } catch (const TrainingError& e) {
    record.status = "failed";
    record.error = e.what();
    write_record();
    throw;
  }

  restore(model_state, best_model);
  restore(head_state, best_head);
  model.eval();

  json extra = {{"run", record.name}, {"mode", to_string(config.mode)}, {"fine_tuning", record.fine_tuning}};
  std::vector<NamedTensor> extra_tensors;
  if (head->fusion) {
    std::vector<std::string> names;
    for (const auto& nt : head_state) {
      if (nt.name.rfind("distill.fusion.", 0) == 0) names.push_back(nt.name);
    }
    extra["fusion_params"] = {{"attention", config.attention.to_json()},
                              {"teacher_widths", head->fusion->teacher_widths()},
                              {"tensors", names}};
  }
  for (size_t i = 0; i < head_state.size(); ++i) extra_tensors.push_back({head_state[i].name, best_head[i]});
  if (config.mode == TrainMode::FinetuneTeacher) {
    record.fine_tuning = config.epochs > 0 ? "Fine-tuned" : "Pre-trained";
    extra["fine_tuning"] = record.fine_tuning;
  }
  const auto ckpt = out_dir / "model.ckpt";
  save_model(model, ckpt, extra, extra_tensors);
  record.artifacts["checkpoint"] = ckpt.string();

  if (test_set.size() > 0) {
    const auto preds = predict(model, test_set);
    std::vector<int64_t> labels(test_set.size());
    for (size_t i = 0; i < labels.size(); ++i) labels[i] = test_set.label(i);
    record.test_metrics = compute_metrics(preds, labels, data.num_classes());
  }
  record.complexity = count_parameters(model);
  record.frozen_parameters = record.complexity->total_parameters - record.complexity->trainable_parameters;
  write_record();
  return record;
}

namespace {

void require_checkpoints(const TrainConfig& config) {
  for (const auto& t : config.teachers) {
    if (!fs::is_regular_file(t)) {
      throw ResourceError("teacher checkpoint not found: " + t +
                          " (offline distillation: fine-tune the teacher before distilling)");
    }
  }
}

}  // namespace

RunRecord train(const TrainConfig& config, const DatasetManifest& data, const fs::path& out_dir) {
  config.validate();
  if (config.mode == TrainMode::FinetuneTeacher) return finetune_teacher(config, data, out_dir);
  require_checkpoints(config);

  TrainInputs inputs;
  std::string teacher_tuning;
  for (const auto& path : config.teachers) {
    const auto ckpt = read_checkpoint(path);
    teacher_tuning = ckpt.header.value("fine_tuning", std::string{"-"});
    auto teacher = build_from_architecture(ckpt.header.at("arch_spec"));
    load_state(*teacher, ckpt);
    inputs.teachers.push_back(teacher);
  }
  torch::manual_seed(SeedPlan::from_master(config.seed).init);
  inputs.trainee = build_student(StudentArchSpec::standard(data.num_classes(), config.image_size));
  auto record = train_models(config, data, inputs, out_dir);
  if (config.mode == TrainMode::KdResponse && record.fine_tuning == "-" && teacher_tuning != "-") {
    record.fine_tuning = teacher_tuning;
    std::ofstream(out_dir / "run_record.json") << record.to_json().dump(2) << "\n";
  }
  return record;
}

RunRecord finetune_teacher(const TrainConfig& config, const DatasetManifest& data, const fs::path& out_dir) {
  if (config.mode != TrainMode::FinetuneTeacher) throw ConfigError("finetune_teacher: mode must be finetune_teacher");
  config.validate();
  TeacherSpec spec;
  spec.backbone = parse_backbone(config.teachers.front());
  spec.weights_mode = config.teacher_weights_mode;
  spec.frozen_prefix_depth = config.frozen_prefix_depth.value_or(spec.backbone == Backbone::Toy ? 0 : 4);
  spec.num_classes = data.num_classes();
  spec.input_size = config.image_size;
  torch::manual_seed(SeedPlan::from_master(config.seed).init);
  TrainInputs inputs;
  inputs.trainee = build_teacher(spec);
  return train_models(config, data, inputs, out_dir);
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

MatrixConfig MatrixConfig::from_json(const json& j) {
  reject_unknown(j, {"teachers", "runs", "seeds", "defaults"}, "matrix");
  MatrixConfig m;
  const json defaults = j.value("defaults", json::object());
  reject_unknown(defaults,
                 {"epochs", "batch_size", "learning_rate", "optimizer", "loss_weights", "temperature",
                  "resp_on_logits", "projection_dim", "attention", "image_size", "num_threads",
                  "teacher_weights_mode", "frozen_prefix_depth"},
                 "matrix.defaults");
  auto merged = [&](const json& entry) {
    json out = defaults;
    for (const auto& [k, v] : entry.items()) out[k] = v;
    return out;
  };
  if (j.contains("teachers")) {
    for (size_t i = 0; i < j["teachers"].size(); ++i) {
      auto c = TrainConfig::from_json(merged(j["teachers"][i]), "matrix.teachers[" + std::to_string(i) + "]");
      if (j["teachers"][i].contains("mode") &&
          parse_train_mode(j["teachers"][i]["mode"].get<std::string>()) != TrainMode::FinetuneTeacher) {
        throw ConfigError("matrix.teachers[" + std::to_string(i) + "].mode must be finetune_teacher");
      }
      c.mode = TrainMode::FinetuneTeacher;
      m.teachers.push_back(c);
    }
  }
  if (j.contains("runs")) {
    for (size_t i = 0; i < j["runs"].size(); ++i) {
      m.runs.push_back(TrainConfig::from_json(merged(j["runs"][i]), "matrix.runs[" + std::to_string(i) + "]"));
    }
  }
  if (j.contains("seeds")) {
    try {
      m.seeds = j["seeds"].get<std::vector<uint64_t>>();
    } catch (const json::exception&) {
      throw ConfigError("invalid value for 'matrix.seeds'");
    }
  }
  if (m.seeds.empty()) throw ConfigError("matrix.seeds must not be empty");
  return m;
}

json MatrixConfig::to_json() const {
  json t = json::array(), r = json::array();
  for (const auto& c : teachers) t.push_back(c.to_json());
  for (const auto& c : runs) r.push_back(c.to_json());
  return {{"teachers", t}, {"runs", r}, {"seeds", seeds}};
}

std::vector<RunRecord> run_experiment_matrix(const MatrixConfig& matrix, const DatasetManifest& data,
                                             const fs::path& out_dir) {
  fs::create_directories(out_dir);
  write_json(out_dir / "config.resolved.json", matrix.to_json());
  std::vector<RunRecord> records;
  const bool multi_seed = matrix.seeds.size() > 1;

  auto run_one = [&](TrainConfig cfg, uint64_t seed, const fs::path& dir) {
    // A configured seed acts as an offset so that teachers sharing a
    // backbone still differ within one matrix seed.
    cfg.seed = seed + cfg.seed;
    cfg.name = cfg.display_name();
    RunRecord rec;
    try {
      rec = cfg.mode == TrainMode::FinetuneTeacher ? finetune_teacher(cfg, data, dir) : train(cfg, data, dir);
    } catch (const std::exception& e) {
      log::error("run " + cfg.name + " (seed " + std::to_string(seed) + ") failed: " + e.what());
      rec.name = cfg.name;
      rec.table_type = table_type_for(cfg.mode);
      rec.status = "failed";
      rec.error = e.what();
      rec.config = cfg.to_json();
      rec.seeds = SeedPlan::from_master(seed).to_json();
    }
    if (multi_seed) rec.seeds["matrix_seed"] = seed;
    records.push_back(rec);
  };

  for (const auto seed : matrix.seeds) {
    const auto seed_dir = out_dir / ("seed_" + std::to_string(seed));
    std::map<std::string, std::string> teacher_ckpt;
    for (const auto& t : matrix.teachers) {
      const auto dir = seed_dir / t.display_name();
      teacher_ckpt[t.display_name()] = (dir / "model.ckpt").string();
      run_one(t, seed, dir);
    }
    for (auto cfg : matrix.runs) {
      for (auto& ref : cfg.teachers) {
        auto it = teacher_ckpt.find(ref);
        if (it != teacher_ckpt.end()) ref = it->second;
      }
      run_one(cfg, seed, seed_dir / cfg.display_name());
    }
  }

  for (auto fmt : {ReportFormat::Markdown, ReportFormat::Csv, ReportFormat::Json}) {
    export_report(records, fmt, out_dir / ("report." + extension_for(fmt)));
  }
  const auto summary = aggregate_by_name(records);
  for (auto fmt : {ReportFormat::Markdown, ReportFormat::Csv}) {
    export_report(summary, fmt, out_dir / ("summary." + extension_for(fmt)));
  }
  return records;
}

std::vector<RunRecord> aggregate_by_name(const std::vector<RunRecord>& records) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunRecord*>> groups;
  for (const auto& r : records) {
    if (!groups.count(r.name)) order.push_back(r.name);
    groups[r.name].push_back(&r);
  }
  std::vector<RunRecord> out;
  for (const auto& name : order) {
    const auto& group = groups[name];
    RunRecord agg;
    agg.name = name;
    agg.table_type = group.front()->table_type;
    agg.fine_tuning = group.front()->fine_tuning;
    MetricsReport mean;
    int64_t ok = 0;
    for (const auto* r : group) {
      if (r->status != "ok" || !r->test_metrics) continue;
      const auto& m = *r->test_metrics;
      mean.accuracy += m.accuracy;
      mean.macro.precision += m.macro.precision;
      mean.macro.recall += m.macro.recall;
      mean.macro.f1 += m.macro.f1;
      mean.weighted.precision += m.weighted.precision;
      mean.weighted.recall += m.weighted.recall;
      mean.weighted.f1 += m.weighted.f1;
      mean.num_samples += m.num_samples;
      ++ok;
    }
    if (ok > 0) {
      const auto k = static_cast<double>(ok);
      mean.accuracy /= k;
      mean.macro = {mean.macro.precision / k, mean.macro.recall / k, mean.macro.f1 / k};
      mean.weighted = {mean.weighted.precision / k, mean.weighted.recall / k, mean.weighted.f1 / k};
      agg.test_metrics = mean;
    } else {
      agg.status = "failed";
    }
    agg.seeds = {{"runs", static_cast<int64_t>(group.size())}, {"succeeded", ok}};
    out.push_back(std::move(agg));
  }
  return out;
}

}  // namespace distillkit
