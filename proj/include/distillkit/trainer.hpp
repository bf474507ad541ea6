#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "distillkit/data_pipeline.hpp"
#include "distillkit/kd_losses.hpp"
#include "distillkit/model_zoo.hpp"
#include "distillkit/relation_fusion.hpp"
#include "distillkit/report.hpp"
#include "json.hpp"

namespace distillkit {

using json = nlohmann::json;
namespace fs = std::filesystem;

enum class TrainMode { Vanilla, FinetuneTeacher, KdResponse, KdFeature, KdFeatureMulti, KdRelation };

std::string to_string(TrainMode m);
TrainMode parse_train_mode(const std::string& s);

struct TrainConfig {
  std::string name;  // row label in reports; derived from the mode when empty
  TrainMode mode = TrainMode::Vanilla;
  // KD modes: teacher checkpoint paths (or matrix teacher names).
  // finetune_teacher: exactly one backbone id (RN50, RN101, RN152, TOY).
  std::vector<std::string> teachers;
  WeightsMode teacher_weights_mode = WeightsMode::Scratch;
  // Leading layer groups frozen while fine-tuning; defaults to 4 for ResNets, 0 for TOY.
  std::optional<int64_t> frozen_prefix_depth;
  int64_t epochs = 30;
  int64_t batch_size = 32;
  double learning_rate = 1e-4;
  std::string optimizer = "adam";
  LossWeights loss_weights;
  double temperature = 1.0;
  bool resp_on_logits = false;
  int64_t projection_dim = 128;
  AttentionConfig attention;
  uint64_t seed = 0;
  int64_t image_size = 224;
  int64_t num_threads = 1;

  // Arity and range checks. Throws ConfigError.
  void validate() const;
  json to_json() const;
  // Unknown keys raise ConfigError naming the key path under `where`.
  static TrainConfig from_json(const json& j, const std::string& where = "config");
  std::string display_name() const;
};

// One master seed fans out to independent split/init/shuffle streams.
struct SeedPlan {
  uint64_t master = 0;
  uint64_t split = 0;
  uint64_t init = 0;
  uint64_t shuffle = 0;

  static SeedPlan from_master(uint64_t master);
  json to_json() const;
};

// Models a run operates on. `trainee` is optimised; `teachers` are held fixed.
struct TrainInputs {
  Model trainee;
  std::vector<Model> teachers;
};

// Trains `inputs.trainee` on the train split, selects the epoch with the best
// validation accuracy, evaluates it on the test split and writes
// run_record.json, config.resolved.json and model.ckpt into out_dir.
// Throws TrainingError (after writing a failed record) on a non-finite loss.
RunRecord train_models(const TrainConfig& config, const DatasetManifest& data, TrainInputs& inputs,
                       const fs::path& out_dir);

// Student training (vanilla and every KD mode). Teacher checkpoints are
// checked before anything else: offline distillation never trains teachers.
RunRecord train(const TrainConfig& config, const DatasetManifest& data, const fs::path& out_dir);

// Builds the teacher (task-sized head, frozen prefix) and trains it with CE.
RunRecord finetune_teacher(const TrainConfig& config, const DatasetManifest& data, const fs::path& out_dir);

struct MatrixConfig {
  std::vector<TrainConfig> teachers;  // finetune_teacher runs; referenced by name
  std::vector<TrainConfig> runs;      // student runs
  std::vector<uint64_t> seeds{0};

  static MatrixConfig from_json(const json& j);
  json to_json() const;
};

// Runs every teacher then every student configuration once per seed, on the
// same split. Failed runs are recorded and the matrix continues. Writes
// report.{md,csv,json} and summary.{md,csv} (mean over seeds) into out_dir.
std::vector<RunRecord> run_experiment_matrix(const MatrixConfig& matrix, const DatasetManifest& data,
                                             const fs::path& out_dir);

// Mean test metrics over records sharing a name.
std::vector<RunRecord> aggregate_by_name(const std::vector<RunRecord>& records);

}  // namespace distillkit
