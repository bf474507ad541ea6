#include "check.hpp"

#include <fstream>
#include <map>

#include "distillkit/report.hpp"
#include "helpers.hpp"

using testing::run_cli;

namespace {

nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

// 4 classes x 50 images at 32 px, prepared once and shared by the tests below.
const testing::TempDir& prepared() {
  static testing::TempDir dir("cli");
  static const bool done = [] {
    const auto d = (dir / "d").string();
    REQUIRE(run_cli({"synth-data", "--classes", "4", "--per-class", "50", "--seed", "2", "--image-size", "32",
                     "--out", d}) == 0);
    REQUIRE(run_cli({"prepare", "--root", d, "--seed", "1"}) == 0);
    return true;
  }();
  (void)done;
  return dir;
}

std::vector<std::string> small_run(const std::string& out) {
  return {"--data", (prepared() / "d").string(), "--out", out, "--epochs", "1", "--batch-size", "16",
          "--image-size", "32", "--lr", "0.001"};
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("prepare writes a 120/40/40 split of 200 images") {
  const auto j = read_json(prepared() / "d" / "split.json");
  std::map<std::string, int> counts;
  for (const auto& a : j.at("assignments")) counts[a.at("split").get<std::string>()]++;
  CHECK(counts["train"] == 120);
  CHECK(counts["val"] == 40);
  CHECK(counts["test"] == 40);
}

TEST_CASE("help exits cleanly on every subcommand") {
  CHECK(run_cli({"--help"}) == 0);
  for (const auto* sub : {"synth-data", "prepare", "train-teacher", "train-student", "distill", "matrix", "evaluate",
                          "gradcam", "report"}) {
    CAPTURE(sub);
    CHECK(run_cli({sub, "--help"}) == 0);
  }
}

TEST_CASE("usage errors exit with 2") {
  CHECK(run_cli({"no-such-command"}) == 2);
  CHECK(run_cli({"train-student", "--epochs", "many"}) == 2);
  const auto out = (prepared() / "rel1").string();
  CHECK(run_cli(cat({"distill", "--mode", "kd_relation", "--teachers", "only_one.ckpt"}, small_run(out))) == 2);

  const auto cfg = prepared() / "bad.json";
  std::ofstream(cfg) << R"({"train": {"epochs": 1, "colour": "blue"}})";
  CHECK(run_cli(cat({"train-student", "--config", cfg.string()}, small_run(out))) == 2);
}

TEST_CASE("missing resources exit with 3") {
  const auto out = (prepared() / "miss").string();
  CHECK(run_cli(cat({"distill", "--mode", "kd_response", "--teachers", (prepared() / "nope.ckpt").string()},
                    small_run(out))) == 3);
  CHECK_FALSE(std::filesystem::exists(prepared() / "miss" / "model.ckpt"));
  CHECK(run_cli({"evaluate", "--checkpoint", (prepared() / "nope.ckpt").string(), "--data",
                 (prepared() / "d").string(), "--out", out}) == 3);
}

TEST_CASE("train, distill, evaluate, gradcam and report") {
  const auto stu = prepared() / "stu";
  REQUIRE(run_cli(cat({"train-student", "--name", "STU"}, small_run(stu.string()))) == 0);
  for (const auto* f : {"model.ckpt", "run_record.json", "config.resolved.json"}) CHECK(std::filesystem::exists(stu / f));

  const auto teacher = prepared() / "toy";
  REQUIRE(run_cli(cat({"train-teacher", "--backbone", "TOY"}, small_run(teacher.string()))) == 0);
  const auto kd = prepared() / "kd";
  REQUIRE(run_cli(cat({"distill", "--mode", "kd_response", "--teachers", (teacher / "model.ckpt").string()},
                      small_run(kd.string()))) == 0);
  CHECK(read_json(kd / "run_record.json").at("name") == "KD_RESP");

  const auto ev = prepared() / "ev";
  REQUIRE(run_cli({"evaluate", "--checkpoint", (stu / "model.ckpt").string(), "--data", (prepared() / "d").string(),
                   "--out", ev.string()}) == 0);
  for (const auto* f : {"metrics.json", "confusion.json", "confusion.png", "complexity.json"}) {
    CHECK(std::filesystem::exists(ev / f));
  }
  CHECK(read_json(ev / "metrics.json").at("num_samples") == 40);

  const auto image = prepared() / "d" / "class_00" / "img_00000.png";
  const auto cam = prepared() / "cam";
  REQUIRE(run_cli({"gradcam", "--checkpoint", (stu / "model.ckpt").string(), "--image", image.string(), "--class",
                   "0", "--out", cam.string()}) == 0);
  CHECK(std::filesystem::exists(cam / "overlay.png"));
  CHECK(run_cli({"gradcam", "--checkpoint", (stu / "model.ckpt").string(), "--image", image.string(), "--class",
                 "0", "--layer", "nope", "--out", cam.string()}) == 2);

  const auto md = prepared() / "report.md";
  REQUIRE(run_cli({"report", "--runs", prepared().path().string(), "--format", "md", "--out", md.string()}) == 0);
  std::ifstream in(md);
  const std::string text{std::istreambuf_iterator<char>(in), {}};
  CHECK(text.find("| Teacher Models | TOY |") != std::string::npos);
  CHECK(text.find("| Student Model | STU |") != std::string::npos);
  CHECK(text.find("| KD Models | KD_RESP |") != std::string::npos);
  CHECK(text.find("Teacher Models") < text.find("Student Model"));
  CHECK(text.find("Student Model") < text.find("KD Models"));
}

}
