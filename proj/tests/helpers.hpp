#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "distillkit/cli.hpp"
#include "distillkit/data_pipeline.hpp"

namespace testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("dk_" + tag + "_" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

// 4 classes x 10 images at 32 px, split 0.6/0.2/0.2. Built once per process.
inline const distillkit::DatasetManifest& tiny_dataset() {
  static TempDir dir("tiny");
  static const distillkit::DatasetManifest manifest = [] {
    distillkit::SplitConfig cfg;
    cfg.seed = 3;
    return distillkit::split_dataset(distillkit::synth_dataset(4, 10, 5, dir / "data", 32), cfg);
  }();
  return manifest;
}

inline int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "distillkit");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return distillkit::cli_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace testing
