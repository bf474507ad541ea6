#include "distillkit/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>



#include "CLI11.hpp"
#include "distillkit/checkpoint.hpp"
#include "distillkit/errors.hpp"
#include "distillkit/log.hpp"
#include "distillkit/evaluation.hpp"
#include "distillkit/trainer.hpp"

namespace distillkit {

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ResourceError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

// Options shared by every training subcommand. Unset optionals fall back to
// the config file, then to the TrainConfig defaults.
struct TrainFlags {
  std::string config_path;
  std::optional<std::string> data_root, split_path, out, name;
  std::optional<int64_t> epochs, batch_size, image_size, threads, projection_dim;
  std::optional<double> lr, temperature, beta_resp, beta_feat, beta_rel;
  std::optional<uint64_t> seed;
  std::optional<bool> resp_on_logits;
  std::optional<int64_t> d_model, heads, ffn_dim;
  bool no_teacher_embeddings = false;
  std::optional<std::string> mode, backbone, weights;
  std::optional<int64_t> frozen_depth;
  std::vector<std::string> teachers;

  void add_common(CLI::App* app) {
    app->add_option("--config", config_path, "JSON config file ({data: {root, split}, train: {...}, out})");
    app->add_option("--data", data_root, "Dataset root (one folder per class)");
    app->add_option("--split", split_path, "Split sidecar (default <data>/split.json)");
    app->add_option("--out", out, "Output directory");
    app->add_option("--name", name, "Run name used in reports");
    app->add_option("--epochs", epochs, "Training epochs (default 30)");
    app->add_option("--batch-size", batch_size, "Mini-batch size (default 32)");
    app->add_option("--lr", lr, "Adam learning rate (default 1e-4)");
    app->add_option("--seed", seed, "Master seed for init and shuffling");
    app->add_option("--image-size", image_size, "Input resolution (default 224)");
    app->add_option("--threads", threads, "Intra-op threads (default 1)");
  }

  void add_distill(CLI::App* app) {
    app->add_option("--mode", mode, "kd_response | kd_feature | kd_feature_multi | kd_relation");
    app->add_option("--teachers", teachers, "Teacher checkpoints")->expected(1, -1);
    app->add_option("--beta-resp", beta_resp, "Weight of the response loss (default 1)");
    app->add_option("--beta-feat", beta_feat, "Weight of the feature loss (default 1)");
    app->add_option("--beta-rel", beta_rel, "Weight of the relation loss (default 1)");
    app->add_option("--temperature", temperature, "Softmax temperature (default 1)");
    app->add_option("--resp-on-logits", resp_on_logits, "Response loss on raw logits instead of soft targets");
    app->add_option("--projection-dim", projection_dim, "Shared width of the feature projections (default 128)");
    app->add_option("--d-model", d_model, "Fusion block width (default 128)");
    app->add_option("--heads", heads, "Fusion attention heads (default 4)");
    app->add_option("--ffn-dim", ffn_dim, "Fusion feed-forward width (default 256)");
    app->add_flag("--no-teacher-embeddings", no_teacher_embeddings, "Disable per-slot teacher embeddings");
  }

  void add_teacher(CLI::App* app) {
    app->add_option("--backbone", backbone, "RN50 | RN101 | RN152 | TOY");
    app->add_option("--weights", weights, "scratch | pretrained (default scratch)");
    app->add_option("--frozen-depth", frozen_depth, "Leading layer groups kept frozen (default 4, TOY 0)");
  }
};

struct Resolved {
  TrainConfig train;
  fs::path data_root;
  fs::path split_path;
  fs::path out;
  json file;
};

json load_sectioned(const std::string& path, const std::set<std::string>& sections) {
  if (path.empty()) return json::object();
  auto j = read_json_file(path);
  if (!j.is_object()) throw ConfigError("config: expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!sections.count(key)) throw ConfigError("unknown key 'config." + key + "'");
  }
  return j;
}

void resolve_data(const json& file, const std::optional<std::string>& root, const std::optional<std::string>& split,
                  fs::path& data_root, fs::path& split_path) {
  const json data = file.value("data", json::object());
  if (!data.is_object()) throw ConfigError("config.data: expected an object");
  for (const auto& [key, value] : data.items()) {
    if (key != "root" && key != "split") throw ConfigError("unknown key 'config.data." + key + "'");
  }
  if (root) {
    data_root = *root;
  } else if (data.contains("root")) {
    data_root = data["root"].get<std::string>();
  } else {
    throw ConfigError("missing key 'config.data.root' (or --data)");
  }
  if (split) {
    split_path = *split;
  } else if (data.contains("split")) {
    split_path = data["split"].get<std::string>();
  } else {
    split_path = data_root / "split.json";
  }
}

Resolved resolve(const TrainFlags& f, TrainMode forced_mode) {
  Resolved r;
  r.file = load_sectioned(f.config_path, {"data", "train", "out"});
  json t = r.file.value("train", json::object());
  if (!t.is_object()) throw ConfigError("config.train: expected an object");
  auto set = [&](const char* key, const auto& opt) {
    if (opt) t[key] = *opt;
  };
  set("name", f.name);
  set("epochs", f.epochs);
  set("batch_size", f.batch_size);
  set("learning_rate", f.lr);
  set("seed", f.seed);
  set("image_size", f.image_size);
  set("num_threads", f.threads);
  set("temperature", f.temperature);
  set("resp_on_logits", f.resp_on_logits);
  set("projection_dim", f.projection_dim);
  set("mode", f.mode);
  set("teacher_weights_mode", f.weights);
  set("frozen_prefix_depth", f.frozen_depth);
  if (f.beta_resp) t["loss_weights"]["resp"] = *f.beta_resp;
  if (f.beta_feat) t["loss_weights"]["feat"] = *f.beta_feat;
  if (f.beta_rel) t["loss_weights"]["rel"] = *f.beta_rel;
  if (f.d_model) t["attention"]["d_model"] = *f.d_model;
  if (f.heads) t["attention"]["num_heads"] = *f.heads;
  if (f.ffn_dim) t["attention"]["ffn_dim"] = *f.ffn_dim;
  if (f.no_teacher_embeddings) t["attention"]["use_teacher_embeddings"] = false;
  if (!f.teachers.empty()) t["teacher_ids"] = f.teachers;
  if (f.backbone) t["teacher_ids"] = std::vector<std::string>{*f.backbone};

  if (forced_mode != TrainMode::KdResponse) {
    if (t.contains("mode") && parse_train_mode(t["mode"].get<std::string>()) != forced_mode) {
      throw ConfigError("config.train.mode must be " + to_string(forced_mode) + " for this command");
    }
    t["mode"] = to_string(forced_mode);
  } else if (!t.contains("mode")) {
    throw ConfigError("missing key 'config.train.mode' (or --mode)");
  }
  r.train = TrainConfig::from_json(t, "config.train");
  if (forced_mode == TrainMode::KdResponse && (r.train.mode == TrainMode::Vanilla ||
                                               r.train.mode == TrainMode::FinetuneTeacher)) {
    throw ConfigError("config.train.mode: distill needs a kd_* mode");
  }
  r.train.validate();

  resolve_data(r.file, f.data_root, f.split_path, r.data_root, r.split_path);
  if (f.out) {
    r.out = *f.out;
  } else if (r.file.contains("out")) {
    r.out = r.file["out"].get<std::string>();
  } else {
    throw ConfigError("missing key 'config.out' (or --out)");
  }
  return r;
}

DatasetManifest load_split_manifest(const fs::path& root, const fs::path& split) {
  if (!fs::is_regular_file(split)) {
    throw ResourceError("split sidecar not found: " + split.string() + " (run `prepare` first)");
  }
  const auto excluded = read_json_file(split).value("excluded_classes", std::vector<std::string>{});
  return apply_split_sidecar(ingest_folder_dataset(root, excluded), split);
}

void print_record(const RunRecord& r) {
  if (r.test_metrics) {
    std::cout << r.name << ": test accuracy " << r.test_metrics->accuracy << " (best epoch " << r.best_epoch << ")\n";
  } else {
    std::cout << r.name << ": done (no test split)\n";
  }
}

int run_training(const TrainFlags& f, TrainMode forced) {
  const auto r = resolve(f, forced);
  const auto data = load_split_manifest(r.data_root, r.split_path);
  // Teacher checkpoints are checked inside train() before any data is decoded.
  const auto record = forced == TrainMode::FinetuneTeacher ? finetune_teacher(r.train, data, r.out)
                                                           : train(r.train, data, r.out);
  print_record(record);
  return 0;
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const ResourceError*>(&e)) return "resource";
  if (dynamic_cast<const InputError*>(&e)) return "input";
  if (dynamic_cast<const DomainError*>(&e)) return "domain";
  if (dynamic_cast<const IngestionError*>(&e)) return "ingestion";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const TrainingError*>(&e)) return "training";
  return "internal";
}

int exit_code_for(const std::string& kind) {
  if (kind == "config") return 2;
  if (kind == "resource") return 3;
  return 1;
}

std::vector<RunRecord> collect_records(const fs::path& runs) {
  if (fs::is_regular_file(runs)) return load_run_records(runs);
  if (!fs::is_directory(runs)) throw ResourceError("runs path not found: " + runs.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(runs)) {
    if (entry.is_regular_file() && entry.path().filename() == "run_record.json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> out;
  for (const auto& p : files) {
    for (auto& r : load_run_records(p)) out.push_back(std::move(r));
  }
  if (out.empty()) throw ResourceError("no run_record.json under " + runs.string());
  // Table order: teachers, student, KD models.
  auto rank = [](const RunRecord& r) {
    if (r.table_type == "Teacher Models") return 0;
    if (r.table_type == "Student Model") return 1;
    return 2;
  };
  std::stable_sort(out.begin(), out.end(), [&](const auto& a, const auto& b) { return rank(a) < rank(b); });
  return out;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"distillkit: multi-teacher knowledge distillation for image classifiers"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // synth-data
  int64_t synth_classes = 4, synth_per_class = 50, synth_size = 64;
  uint64_t synth_seed = 0;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth-data", "Write a synthetic folder-per-class PNG dataset");
  synth->add_option("--classes", synth_classes, "Number of classes")->capture_default_str();
  synth->add_option("--per-class", synth_per_class, "Images per class")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Generator seed")->capture_default_str();
  synth->add_option("--image-size", synth_size, "Image side in pixels")->capture_default_str();
  synth->add_option("--out", synth_out, "Output root")->required();

  // prepare
  std::string prep_root, prep_out;
  uint64_t prep_seed = 0;
  std::vector<double> prep_ratios{0.6, 0.2, 0.2};
  bool prep_no_stratify = false;
  std::vector<std::string> prep_exclude;
  auto* prepare = app.add_subcommand("prepare", "Ingest a dataset and write its split sidecar");
  prepare->add_option("--root", prep_root, "Dataset root (one folder per class)")->required();
  prepare->add_option("--seed", prep_seed, "Split seed")->capture_default_str();
  prepare->add_option("--ratios", prep_ratios, "Train, val and test fractions")->expected(3)->capture_default_str();
  prepare->add_flag("--no-stratify", prep_no_stratify, "Shuffle globally instead of per class");
  prepare->add_option("--exclude", prep_exclude, "Class folders to leave out");
  prepare->add_option("--out", prep_out, "Sidecar path (default <root>/split.json)");

  TrainFlags teacher_flags, student_flags, distill_flags;
  auto* train_teacher = app.add_subcommand("train-teacher", "Fine-tune a teacher backbone with cross-entropy");
  teacher_flags.add_common(train_teacher);
  teacher_flags.add_teacher(train_teacher);
  auto* train_student = app.add_subcommand("train-student", "Train the student without distillation");
  student_flags.add_common(train_student);
  auto* distill = app.add_subcommand("distill", "Train the student from fine-tuned teacher checkpoints");
  distill_flags.add_common(distill);
  distill_flags.add_distill(distill);

  // matrix
  std::string matrix_config;
  std::optional<std::string> matrix_data, matrix_split, matrix_out;
  std::vector<uint64_t> matrix_seeds;
  auto* matrix = app.add_subcommand("matrix", "Run teachers and student configurations over seeds and tabulate");
  matrix->add_option("--config", matrix_config, "Matrix JSON {data, out, defaults, teachers, runs, seeds}")
      ->required();
  matrix->add_option("--data", matrix_data, "Dataset root");
  matrix->add_option("--split", matrix_split, "Split sidecar (default <data>/split.json)");
  matrix->add_option("--out", matrix_out, "Output directory");
  matrix->add_option("--seeds", matrix_seeds, "Seeds overriding the config");

  // evaluate
  std::string eval_ckpt, eval_out;
  std::optional<std::string> eval_data, eval_split;
  std::string eval_subset = "test";
  std::vector<std::string> eval_compare;
  auto* evaluate = app.add_subcommand("evaluate", "Metrics, confusion matrix and complexity of a checkpoint");
  evaluate->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required();
  evaluate->add_option("--data", eval_data, "Dataset root")->required();
  evaluate->add_option("--split", eval_split, "Split sidecar (default <data>/split.json)");
  evaluate->add_option("--subset", eval_subset, "train | val | test")->capture_default_str();
  evaluate->add_option("--compare", eval_compare, "Teacher checkpoints for the complexity table");
  evaluate->add_option("--out", eval_out, "Output directory")->required();

  // gradcam
  std::string cam_ckpt, cam_image, cam_layer, cam_out;
  std::optional<int64_t> cam_class;
  auto* cam = app.add_subcommand("gradcam", "Grad-CAM saliency map for one image");
  cam->add_option("--checkpoint", cam_ckpt, "Model checkpoint")->required();
  cam->add_option("--image", cam_image, "Input image")->required();
  cam->add_option("--class", cam_class, "Target class (default: predicted class)");
  cam->add_option("--layer", cam_layer, "Activation layer (default: last conv)");
  cam->add_option("--out", cam_out, "Output directory")->required();

  // report
  std::string rep_runs, rep_format = "markdown";
  std::optional<std::string> rep_out;
  auto* report = app.add_subcommand("report", "Render run records as a comparison table");
  report->add_option("--runs", rep_runs, "Directory searched for run_record.json, or a report JSON")->required();
  report->add_option("--format", rep_format, "markdown | csv | json")->capture_default_str();
  report->add_option("--out", rep_out, "Output file (default <runs>/report.<ext>)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) {
      const auto m = synth_dataset(synth_classes, synth_per_class, synth_seed, synth_out, synth_size);
      std::cout << "wrote " << m.records.size() << " images in " << m.num_classes() << " classes to " << synth_out
                << "\n";
    } else if (*prepare) {
      SplitConfig cfg;
      std::copy(prep_ratios.begin(), prep_ratios.end(), cfg.ratios.begin());
      cfg.seed = prep_seed;
      cfg.stratified = !prep_no_stratify;
      cfg.validate();
      const auto manifest = split_dataset(ingest_folder_dataset(prep_root, prep_exclude), cfg);
      const fs::path out = prep_out.empty() ? fs::path(prep_root) / "split.json" : fs::path(prep_out);
      write_split_sidecar(manifest, cfg, out);
      std::cout << "train " << manifest.count(Split::Train) << ", val " << manifest.count(Split::Val) << ", test "
                << manifest.count(Split::Test) << " -> " << out.string() << "\n";
    } else if (*train_teacher) {
      return run_training(teacher_flags, TrainMode::FinetuneTeacher);
    } else if (*train_student) {
      return run_training(student_flags, TrainMode::Vanilla);
    } else if (*distill) {
      return run_training(distill_flags, TrainMode::KdResponse);
    } else if (*matrix) {
      auto file = read_json_file(matrix_config);
      if (!file.is_object()) throw ConfigError("config: expected an object");
      fs::path root, split, out;
      resolve_data(file, matrix_data, matrix_split, root, split);
      if (matrix_out) {
        out = *matrix_out;
      } else if (file.contains("out")) {
        out = file["out"].get<std::string>();
      } else {
        throw ConfigError("missing key 'config.out' (or --out)");
      }
      file.erase("data");
      file.erase("out");
      if (!matrix_seeds.empty()) file["seeds"] = matrix_seeds;
      const auto cfg = MatrixConfig::from_json(file);
      const auto data = load_split_manifest(root, split);
      const auto records = run_experiment_matrix(cfg, data, out);
      std::cout << render_report(aggregate_by_name(records), ReportFormat::Markdown);
      const auto failed = std::count_if(records.begin(), records.end(), [](const auto& r) { return r.status != "ok"; });
      if (failed > 0) std::cerr << failed << " run(s) failed; see " << (out / "report.json").string() << "\n";
    } else if (*evaluate) {
      const fs::path split = eval_split ? fs::path(*eval_split) : fs::path(*eval_data) / "split.json";
      auto model = load_model(eval_ckpt);
      const auto data = load_split_manifest(*eval_data, split);
      PreprocessConfig prep;
      prep.image_size = model->input_size();
      const ImageDataset subset(data, parse_split(eval_subset), prep);
      if (subset.size() == 0) throw InputError("split '" + eval_subset + "' is empty");
      const auto preds = predict(*model, subset);
      std::vector<int64_t> labels(subset.size());
      for (size_t i = 0; i < labels.size(); ++i) labels[i] = subset.label(i);
      const auto metrics = compute_metrics(preds, labels, data.num_classes());
      const auto cm = confusion_matrix(preds, labels, data.num_classes(), data.class_names);
      fs::create_directories(eval_out);
      write_json(fs::path(eval_out) / "metrics.json", metrics.to_json());
      write_json(fs::path(eval_out) / "confusion.json", cm.to_json());
      write_confusion_png(cm, fs::path(eval_out) / "confusion.png");
      std::vector<std::pair<std::string, Model>> models{{fs::path(eval_ckpt).parent_path().filename().string(), model}};
      for (const auto& c : eval_compare) models.emplace_back(fs::path(c).parent_path().filename().string(), load_model(c));
      const auto table = complexity_report(models);
      write_json(fs::path(eval_out) / "complexity.json", table.to_json());
      std::ofstream(fs::path(eval_out) / "complexity.md") << table.to_markdown();
      std::cout << "accuracy " << metrics.accuracy << ", weighted F1 " << metrics.weighted.f1 << "\n";
    } else if (*cam) {
      auto model = load_model(cam_ckpt);
      PreprocessConfig prep;
      prep.image_size = model->input_size();
      const auto image = load_image(cam_image, prep);
      int64_t target = 0;
      if (cam_class) {
        target = *cam_class;
      } else {
        torch::NoGradGuard no_grad;
        target = model->run(image.unsqueeze(0)).logits.argmax(1).item<int64_t>();
      }
      const auto map = gradcam(*model, image, target, cam_layer);
      const fs::path out(cam_out);
      fs::create_directories(out);
      write_saliency_png(map, out / "saliency.png");
      write_overlay_png(map, image, prep, out / "overlay.png");
      write_json(out / "gradcam.json", {{"checkpoint", cam_ckpt},
                                        {"image", cam_image},
                                        {"target_class", map.target_class},
                                        {"layer", map.source_layer}});
      std::cout << "class " << target << ", layer " << map.source_layer << " -> " << out.string() << "\n";
    } else if (*report) {
      const auto fmt = parse_report_format(rep_format);
      const auto records = collect_records(rep_runs);
      fs::path out;
      if (rep_out) {
        out = *rep_out;
      } else {
        const fs::path base = fs::is_directory(rep_runs) ? fs::path(rep_runs) : fs::path(rep_runs).parent_path();
        out = base / ("report." + extension_for(fmt));
      }
      export_report(records, fmt, out);
      std::cout << "wrote " << records.size() << " row(s) to " << out.string() << "\n";
    }
  } catch (const json::exception& e) {
    std::cerr << json{{"error", {{"kind", "config"}, {"message", e.what()}}}}.dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    const auto kind = error_kind(e);
    std::cerr << json{{"error", {{"kind", kind}, {"message", e.what()}}}}.dump() << "\n";
    return exit_code_for(kind);
  }
  return 0;
}

}  // namespace distillkit
