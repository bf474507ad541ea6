#include "distillkit/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>


#include "distillkit/errors.hpp"
#include "distillkit/log.hpp"

namespace distillkit {

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unassigned: return "unassigned";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  if (s == "unassigned") return Split::Unassigned;
  throw InputError("unknown split '" + s + "'");
}

std::vector<size_t> DatasetManifest::indices(Split s) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == s) out.push_back(i);
  }
  return out;
}

std::string DatasetManifest::relative_path(const ImageRecord& r) const {
  return r.path.lexically_relative(root).generic_string();
}

void SplitConfig::validate() const {
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw ConfigError("split ratios must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("split ratios must sum to 1, got " + std::to_string(sum));
  }
}

json PreprocessConfig::to_json() const {
  return {{"image_size", image_size}, {"mean", mean}, {"std", stddev}};
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

namespace {

bool has_image_extension(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png";
}

// Cheap readability check: the file opens and carries a PNG or JPEG signature.
bool readable_image(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return false;
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), sizeof sig);
  if (in.gcount() < 3) return false;
  const bool jpeg = sig[0] == 0xFF && sig[1] == 0xD8 && sig[2] == 0xFF;
  const bool png = in.gcount() == 8 && sig[0] == 0x89 && sig[1] == 'P' && sig[2] == 'N' && sig[3] == 'G';
  return jpeg || png;
}

}  // namespace

DatasetManifest ingest_folder_dataset(const fs::path& root, const std::vector<std::string>& exclude) {
  if (!fs::is_directory(root)) throw IngestionError("dataset root is not a directory: " + root.string());
  const std::set<std::string> excluded(exclude.begin(), exclude.end());

  DatasetManifest manifest;
  manifest.root = root;
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_directory()) continue;
    const auto name = entry.path().filename().string();
    if (excluded.count(name)) {
      manifest.excluded_classes.push_back(name);
      continue;
    }
    names.push_back(name);
  }
  std::sort(names.begin(), names.end());
  std::sort(manifest.excluded_classes.begin(), manifest.excluded_classes.end());
  if (names.empty()) throw IngestionError("no classes found under " + root.string() + " after exclusion");
  manifest.class_names = names;

  for (size_t label = 0; label < names.size(); ++label) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(root / names[label])) {
      if (entry.is_regular_file() && has_image_extension(entry.path())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      if (!readable_image(f)) {
        log::warn("skipping unreadable image " + f.string());
        ++manifest.skipped_files;
        continue;
      }
      manifest.records.push_back({f, static_cast<int64_t>(label), Split::Unassigned});
    }
  }
  if (manifest.records.empty()) throw IngestionError("no readable images under " + root.string());
  if (manifest.skipped_files > 0) {
    log::warn(std::to_string(manifest.skipped_files) + " unreadable file(s) skipped during ingestion");
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

namespace {

// Fisher-Yates over a 64-bit Mersenne twister; std::shuffle is not portable
// across standard libraries.
void shuffle_indices(std::vector<size_t>& v, std::mt19937_64& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

std::array<size_t, 3> largest_remainder(size_t n, const std::array<double, 3>& ratios) {
  std::array<size_t, 3> counts{};
  std::array<double, 3> frac{};
  size_t assigned = 0;
  for (size_t k = 0; k < 3; ++k) {
    const double exact = ratios[k] * static_cast<double>(n);
    counts[k] = static_cast<size_t>(std::floor(exact + 1e-9));
    frac[k] = exact - static_cast<double>(counts[k]);
    assigned += counts[k];
  }
  std::array<size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return frac[a] > frac[b]; });
  for (size_t r = 0; assigned < n; ++r, ++assigned) counts[order[r % 3]] += 1;
  return counts;
}

}  // namespace

DatasetManifest split_dataset(const DatasetManifest& manifest, const SplitConfig& cfg) {
  cfg.validate();
  for (const auto& r : manifest.records) {
    if (r.split != Split::Unassigned) throw ConfigError("split_dataset: manifest is already split");
  }
  DatasetManifest out = manifest;
  std::vector<std::vector<size_t>> groups;
  if (cfg.stratified) {
    groups.resize(manifest.class_names.size());
    for (size_t i = 0; i < out.records.size(); ++i) groups[out.records[i].label].push_back(i);
  } else {
    groups.emplace_back(out.records.size());
    for (size_t i = 0; i < out.records.size(); ++i) groups[0][i] = i;
  }
  std::mt19937_64 rng(cfg.seed);
  for (auto& g : groups) {
    shuffle_indices(g, rng);
    const auto counts = largest_remainder(g.size(), cfg.ratios);
    size_t pos = 0;
    for (size_t k = 0; k < 3; ++k) {
      for (size_t c = 0; c < counts[k]; ++c, ++pos) out.records[g[pos]].split = static_cast<Split>(k);
    }
  }
  return out;
}

std::string split_sidecar_json(const DatasetManifest& manifest, const SplitConfig& cfg) {
  json assignments = json::array();
  for (const auto& r : manifest.records) {
    assignments.push_back({{"path", manifest.relative_path(r)}, {"split", to_string(r.split)}});
  }
  json j = {{"seed", cfg.seed},
            {"ratios", cfg.ratios},
            {"stratified", cfg.stratified},
            {"excluded_classes", manifest.excluded_classes},
            {"assignments", assignments}};
  return j.dump(1) + "\n";
}

void write_split_sidecar(const DatasetManifest& manifest, const SplitConfig& cfg, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write split sidecar " + path.string());
  out << split_sidecar_json(manifest, cfg);
}

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ResourceError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InputError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace

SplitConfig read_split_config(const fs::path& sidecar) {
  const auto j = read_json_file(sidecar);
  SplitConfig cfg;
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.ratios = j.at("ratios").get<std::array<double, 3>>();
  cfg.stratified = j.value("stratified", true);
  return cfg;
}

DatasetManifest apply_split_sidecar(const DatasetManifest& manifest, const fs::path& path) {
  const auto j = read_json_file(path);
  std::map<std::string, Split> by_path;
  for (const auto& a : j.at("assignments")) {
    by_path[a.at("path").get<std::string>()] = parse_split(a.at("split").get<std::string>());
  }
  DatasetManifest out = manifest;
  size_t matched = 0;
  for (auto& r : out.records) {
    auto it = by_path.find(out.relative_path(r));
    r.split = it == by_path.end() ? Split::Unassigned : it->second;
    if (it != by_path.end()) ++matched;
  }
  if (matched != by_path.size()) {
    log::warn("split sidecar lists " + std::to_string(by_path.size() - matched) + " file(s) not present in the dataset");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

namespace {

// Any supported image -> 8-bit RGB, S x S, as a 3 x S x S uint8 tensor.
torch::Tensor resize_rgb_u8(const cv::Mat& image, int64_t size) {
  if (image.empty() || image.rows < 1 || image.cols < 1) throw InputError("preprocess: empty image");
  if (size < 1) throw ConfigError("preprocess: image_size must be positive");
  cv::Mat src = image;
  if (src.depth() == CV_16U) {
    src.convertTo(src, CV_8U, 1.0 / 257.0);
  } else if (src.depth() != CV_8U) {
    throw InputError("preprocess: unsupported pixel depth");
  }
  cv::Mat rgb;
  switch (src.channels()) {
    case 1: cv::cvtColor(src, rgb, cv::COLOR_GRAY2RGB); break;
    case 2: {
      // gray + alpha
      std::vector<cv::Mat> planes;
      cv::split(src, planes);
      cv::cvtColor(planes[0], rgb, cv::COLOR_GRAY2RGB);
      break;
    }
    case 3: cv::cvtColor(src, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(src, rgb, cv::COLOR_BGRA2RGB); break;
    default: throw InputError("preprocess: unsupported channel count " + std::to_string(src.channels()));
  }
  cv::Mat resized;
  cv::resize(rgb, resized, cv::Size(static_cast<int>(size), static_cast<int>(size)), 0, 0, cv::INTER_LINEAR);
  auto hwc = torch::from_blob(resized.data, {size, size, 3}, torch::kUInt8).clone();
  return hwc.permute({2, 0, 1}).contiguous();
}

torch::Tensor standardize(const torch::Tensor& u8, const PreprocessConfig& cfg) {
  auto x = u8.to(torch::kFloat32) / 255.0f;
  auto mean = torch::tensor(std::vector<float>(cfg.mean.begin(), cfg.mean.end())).view({3, 1, 1});
  auto stddev = torch::tensor(std::vector<float>(cfg.stddev.begin(), cfg.stddev.end())).view({3, 1, 1});
  if (x.dim() == 4) {
    mean = mean.unsqueeze(0);
    stddev = stddev.unsqueeze(0);
  }
  return (x - mean) / stddev;
}

cv::Mat decode(const fs::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (img.empty()) throw InputError("cannot decode image " + path.string());
  return img;
}

}  // namespace

torch::Tensor preprocess(const cv::Mat& image, const PreprocessConfig& cfg) {
  return standardize(resize_rgb_u8(image, cfg.image_size), cfg);
}

torch::Tensor load_image(const fs::path& path, const PreprocessConfig& cfg) { return preprocess(decode(path), cfg); }

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

namespace {

class SynthRng {
 public:
  explicit SynthRng(uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() {
    // Box-Muller, portable across standard libraries.
    const double u1 = std::max(uniform(), 1e-300);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 engine_;
};

constexpr int kShapeCount = 8;
constexpr double kNoiseSigma = 28.0;  // per-pixel, 8-bit scale
constexpr double kHueJitter = 40.0;   // degrees on the 0..360 wheel

cv::Scalar hsv_to_bgr(double hue_deg, double sat, double val) {
  cv::Mat hsv(1, 1, CV_8UC3, cv::Scalar(std::fmod(hue_deg + 360.0, 360.0) / 2.0, sat, val));
  cv::Mat bgr;
  cv::cvtColor(hsv, bgr, cv::COLOR_HSV2BGR);
  const auto px = bgr.at<cv::Vec3b>(0, 0);
  return cv::Scalar(px[0], px[1], px[2]);
}

void draw_shape(cv::Mat& img, int shape, cv::Point2d c, double r, double angle, const cv::Scalar& color) {
  const int thick = std::max(2, static_cast<int>(r / 3.0));
  auto rotated = [&](std::vector<cv::Point2d> pts) {
    std::vector<cv::Point> out;
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (auto& p : pts) {
      out.emplace_back(static_cast<int>(std::lround(c.x + p.x * ca - p.y * sa)),
                       static_cast<int>(std::lround(c.y + p.x * sa + p.y * ca)));
    }
    return out;
  };
  const cv::Point ci(static_cast<int>(std::lround(c.x)), static_cast<int>(std::lround(c.y)));
  switch (shape) {
    case 0:  // disc
      cv::circle(img, ci, static_cast<int>(r), color, cv::FILLED, cv::LINE_8);
      break;
    case 1: {  // square
      auto pts = rotated({{-r, -r}, {r, -r}, {r, r}, {-r, r}});
      cv::fillConvexPoly(img, pts, color, cv::LINE_8);
      break;
    }
    case 2: {  // triangle
      auto pts = rotated({{0, -r}, {r * 0.87, r * 0.5}, {-r * 0.87, r * 0.5}});
      cv::fillConvexPoly(img, pts, color, cv::LINE_8);
      break;
    }
    case 3: {  // plus
      auto h = rotated({{-r, 0}, {r, 0}});
      auto v = rotated({{0, -r}, {0, r}});
      cv::line(img, h[0], h[1], color, thick, cv::LINE_8);
      cv::line(img, v[0], v[1], color, thick, cv::LINE_8);
      break;
    }
    case 4:  // ring
      cv::circle(img, ci, static_cast<int>(r), color, thick, cv::LINE_8);
      break;
    case 5: {  // stripes
      for (int k = -2; k <= 2; k += 2) {
        auto s = rotated({{-r, k * r / 2.5}, {r, k * r / 2.5}});
        cv::line(img, s[0], s[1], color, thick, cv::LINE_8);
      }
      break;
    }
    case 6: {  // X
      auto a = rotated({{-r, -r}, {r, r}});
      auto b = rotated({{-r, r}, {r, -r}});
      cv::line(img, a[0], a[1], color, thick, cv::LINE_8);
      cv::line(img, b[0], b[1], color, thick, cv::LINE_8);
      break;
    }
    default: {  // hollow square
      auto pts = rotated({{-r, -r}, {r, -r}, {r, r}, {-r, r}});
      cv::polylines(img, pts, true, color, thick, cv::LINE_8);
      break;
    }
  }
}

}  // namespace

DatasetManifest synth_dataset(int64_t num_classes, int64_t per_class, uint64_t seed, const fs::path& out_root,
                              int64_t image_size) {
  if (num_classes < 2) throw ConfigError("synth: num_classes must be >= 2");
  if (per_class < 1) throw ConfigError("synth: per_class must be >= 1");
  if (image_size < 16) throw ConfigError("synth: image_size must be >= 16");
  std::error_code ec;
  fs::create_directories(out_root, ec);
  if (ec || !fs::is_directory(out_root)) throw IoError("cannot create dataset root " + out_root.string());

  const int width = static_cast<int>(num_classes) >= 100 ? 3 : 2;
  const auto size = static_cast<int>(image_size);
  SynthRng rng(seed);
  for (int64_t c = 0; c < num_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof name, "class_%0*lld", width, static_cast<long long>(c));
    const auto dir = out_root / name;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string());
    const int shape = static_cast<int>(c % kShapeCount);
    const double base_hue = 360.0 * static_cast<double>(c) / static_cast<double>(num_classes);
    for (int64_t i = 0; i < per_class; ++i) {
      const double bg = rng.uniform(20.0, 90.0);
      cv::Mat img(size, size, CV_8UC3, cv::Scalar(bg, bg * rng.uniform(0.8, 1.2), bg * rng.uniform(0.8, 1.2)));
      const double r = size * rng.uniform(0.16, 0.28);
      const cv::Point2d centre(size * rng.uniform(0.32, 0.68), size * rng.uniform(0.32, 0.68));
      const double angle = rng.uniform(-0.6, 0.6);
      const auto color = hsv_to_bgr(base_hue + rng.uniform(-kHueJitter, kHueJitter), rng.uniform(120, 255),
                                    rng.uniform(150, 255));
      draw_shape(img, shape, centre, r, angle, color);
      for (int y = 0; y < size; ++y) {
        auto* row = img.ptr<cv::Vec3b>(y);
        for (int x = 0; x < size; ++x) {
          for (int ch = 0; ch < 3; ++ch) {
            row[x][ch] = cv::saturate_cast<uchar>(row[x][ch] + kNoiseSigma * rng.normal());
          }
        }
      }
      char file[32];
      std::snprintf(file, sizeof file, "img_%05lld.png", static_cast<long long>(i));
      if (!cv::imwrite((dir / file).string(), img)) throw IoError("cannot write " + (dir / file).string());
    }
  }
  return ingest_folder_dataset(out_root);
}

// ---------------------------------------------------------------------------
// In-memory dataset
// ---------------------------------------------------------------------------

ImageDataset::ImageDataset(const DatasetManifest& manifest, Split split, PreprocessConfig cfg) : cfg_(std::move(cfg)) {
  const auto rows = manifest.indices(split);
  std::vector<torch::Tensor> images;
  images.reserve(rows.size());
  for (auto i : rows) {
    const auto& rec = manifest.records[i];
    images.push_back(resize_rgb_u8(decode(rec.path), cfg_.image_size));
    labels_.push_back(rec.label);
  }
  // Kept as uint8 and standardised on access so real datasets fit in memory.
  pixels_ = images.empty() ? torch::empty({0, 3, cfg_.image_size, cfg_.image_size}, torch::kUInt8)
                           : torch::stack(images);
  labels_tensor_ = torch::tensor(labels_, torch::kInt64);
}

std::pair<torch::Tensor, torch::Tensor> ImageDataset::batch(const std::vector<int64_t>& rows) const {
  auto idx = torch::tensor(rows, torch::kInt64);
  return {standardize(pixels_.index_select(0, idx), cfg_), labels_tensor_.index_select(0, idx)};
}

torch::Tensor ImageDataset::images() const { return standardize(pixels_, cfg_); }

}  // namespace distillkit
