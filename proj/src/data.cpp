#include "effiseg/data.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace effiseg {

namespace fs = std::filesystem;

namespace {

bool is_image_file(const fs::path& p) {
  static const std::set<std::string> exts = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"};
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return exts.count(ext) != 0;
}

std::map<std::string, fs::path> index_directory(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DatasetError("missing directory: " + dir.string());
  std::map<std::string, fs::path> by_stem;
  std::vector<std::string> duplicates;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
    const std::string stem = entry.path().stem().string();
    if (!by_stem.emplace(stem, entry.path()).second) duplicates.push_back(entry.path().filename().string());
  }
  if (!duplicates.empty()) {
    std::string msg = "duplicate file stems in " + dir.string() + ":";
    for (const auto& d : duplicates) msg += " " + d;
    throw DatasetError(msg);
  }
  return by_stem;
}

std::string join_names(const std::vector<fs::path>& paths) {
  std::string out;
  for (const auto& p : paths) out += (out.empty() ? "" : ", ") + p.filename().string();
  return out;
}

cv::Mat binarize(const cv::Mat& gray) {
  cv::Mat out;
  cv::threshold(gray, out, kMaskThreshold, 1, cv::THRESH_BINARY);
  return out;
}

}  // namespace

std::vector<SampleRef> list_dataset(const fs::path& root, const std::string& name) {
  const fs::path base = root / name;
  const auto images = index_directory(base / "images");
  const auto masks = index_directory(base / "masks");

  std::vector<fs::path> orphan_images, orphan_masks;
  for (const auto& [stem, path] : images)
    if (!masks.count(stem)) orphan_images.push_back(path);
  for (const auto& [stem, path] : masks)
    if (!images.count(stem)) orphan_masks.push_back(path);
  if (!orphan_images.empty() || !orphan_masks.empty()) {
    std::string msg = "unpaired files in " + base.string() + ":";
    if (!orphan_images.empty()) msg += " images without mask [" + join_names(orphan_images) + "]";
    if (!orphan_masks.empty()) msg += " masks without image [" + join_names(orphan_masks) + "]";
    throw DatasetError(msg);
  }
  if (images.empty()) throw DatasetError("dataset " + base.string() + " contains no image/mask pairs");

  std::vector<SampleRef> refs;
  for (const auto& [stem, path] : images) refs.push_back({name, stem, path, masks.at(stem)});
  return refs;  // std::map iteration is already sorted by stem
}

Sample load_sample(const SampleRef& ref) {
  Sample s;
  s.source = ref.source;
  s.id = ref.id;
  cv::Mat bgr = cv::imread(ref.image.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DatasetError("cannot decode image " + ref.image.string());
  cv::cvtColor(bgr, s.image, cv::COLOR_BGR2RGB);
  cv::Mat gray = cv::imread(ref.mask.string(), cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw DatasetError("cannot decode mask " + ref.mask.string());
  if (gray.size() != s.image.size()) {
    throw DatasetError("image and mask sizes differ for " + ref.key() + ": " + std::to_string(s.image.cols) + "x" +
                       std::to_string(s.image.rows) + " vs " + std::to_string(gray.cols) + "x" +
                       std::to_string(gray.rows));
  }
  s.mask = binarize(gray);
  return s;
}

std::vector<Sample> load_dataset(const fs::path& root, const std::string& name) {
  std::vector<Sample> out;
  for (const auto& ref : list_dataset(root, name)) out.push_back(load_sample(ref));
  return out;
}

void SplitSpec::validate() const {
  if (train < 0 || val < 0 || test < 0 || std::abs(train + val + test - 1.0) > 1e-9) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }
}

std::map<std::string, std::string> read_split_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open split manifest " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string key, subset;
    if (!(fields >> key >> subset) || (subset != "train" && subset != "val" && subset != "test")) {
      throw IoError("malformed split manifest line " + std::to_string(lineno) + " in " + path.string());
    }
    out[key] = subset;
  }
  return out;
}

Sample flip_horizontal(const Sample& s) {
  Sample out{s.source, s.id, {}, {}};
  cv::flip(s.image, out.image, 1);
  cv::flip(s.mask, out.mask, 1);
  return out;
}

Sample rotate(const Sample& s, double degrees) {
  const cv::Point2f centre(static_cast<float>(s.image.cols - 1) / 2.0f, static_cast<float>(s.image.rows - 1) / 2.0f);
  const cv::Mat m = cv::getRotationMatrix2D(centre, degrees, 1.0);
  Sample out{s.source, s.id, {}, {}};
  cv::warpAffine(s.image, out.image, m, s.image.size(), cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
  cv::warpAffine(s.mask, out.mask, m, s.mask.size(), cv::INTER_NEAREST, cv::BORDER_REFLECT_101);
  return out;
}

double rotation_angle(const Sample& s, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "rotate/" + s.key()));
  return rng.uniform(-kMaxRotationDegrees, kMaxRotationDegrees);
}

std::array<Sample, 3> augment_sample(const Sample& s, std::uint64_t seed) {
  Sample flipped = flip_horizontal(s);
  flipped.id += "_flip";
  Sample rotated = rotate(s, rotation_angle(s, seed));
  rotated.id += "_rot";
  return {Sample{s.source, s.id, s.image.clone(), s.mask.clone()}, std::move(flipped), std::move(rotated)};
}

std::vector<Sample> augment_offline(const std::vector<Sample>& train, std::uint64_t seed) {
  std::vector<Sample> out;
  out.reserve(train.size() * 3);
  for (const auto& s : train) {
    for (auto& variant : augment_sample(s, seed)) out.push_back(std::move(variant));
  }
  return out;
}

Sample resize_sample(const Sample& s, int height, int width) {
  Sample out{s.source, s.id, {}, {}};
  const cv::Size size(width, height);
  if (s.image.size() == size) {
    out.image = s.image.clone();
    out.mask = s.mask.clone();
    return out;
  }
  cv::resize(s.image, out.image, size, 0, 0, cv::INTER_LINEAR);
  cv::Mat mask;
  cv::resize(s.mask, mask, size, 0, 0, cv::INTER_NEAREST);
  cv::threshold(mask, out.mask, 0, 1, cv::THRESH_BINARY);
  return out;
}

Tensor4<float> image_to_tensor(const cv::Mat& rgb) {
  if (rgb.type() != CV_8UC3) throw ShapeError("expected an 8-bit 3-channel image");
  Tensor4<float> t(Shape4{1, 3, rgb.rows, rgb.cols});
  for (int y = 0; y < rgb.rows; ++y) {
    const auto* row = rgb.ptr<cv::Vec3b>(y);
    for (int x = 0; x < rgb.cols; ++x) {
      for (int c = 0; c < 3; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        t(0, c, y, x) = (static_cast<float>(row[x][c]) / 255.0f - kImageMean[cc]) / kImageStd[cc];
      }
    }
  }
  return t;
}

namespace {

Tensor4<float> mask_to_tensor(const cv::Mat& mask) {
  Tensor4<float> t(Shape4{1, 1, mask.rows, mask.cols});
  for (int y = 0; y < mask.rows; ++y) {
    const auto* row = mask.ptr<std::uint8_t>(y);
    for (int x = 0; x < mask.cols; ++x) t(0, 0, y, x) = row[x] ? 1.0f : 0.0f;
  }
  return t;
}

}  // namespace

Preprocessed preprocess(const Sample& s, int height, int width) {
  const Sample r = resize_sample(s, height, width);
  if (cv::countNonZero(r.mask) == 0) std::cerr << "warning: empty mask after resize for " << s.key() << "\n";
  return {s.source, s.id, image_to_tensor(r.image), mask_to_tensor(r.mask)};
}

void make_batch(const std::vector<Sample>& set, const std::vector<std::size_t>& indices, Tensor4<float>& images,
                Tensor4<float>& masks) {
  if (indices.empty()) throw ShapeError("make_batch needs at least one index");
  const cv::Size size = set.at(indices.front()).image.size();
  const Index n = static_cast<Index>(indices.size());
  images = Tensor4<float>(Shape4{n, 3, size.height, size.width});
  masks = Tensor4<float>(Shape4{n, 1, size.height, size.width});
  for (Index b = 0; b < n; ++b) {
    const Sample& s = set.at(indices[static_cast<std::size_t>(b)]);
    if (s.image.size() != size) throw ShapeError("batch samples differ in size: " + s.key());
    images.sample(b) = image_to_tensor(s.image).sample(0);
    masks.sample(b) = mask_to_tensor(s.mask).sample(0);
  }
}

void write_sample_png(const Sample& s, const fs::path& dir) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  const std::string file = s.source + "__" + s.id + ".png";
  cv::Mat bgr;
  cv::cvtColor(s.image, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite((dir / "images" / file).string(), bgr)) throw IoError("cannot write " + (dir / "images" / file).string());
  const cv::Mat mask255 = s.mask * 255;
  if (!cv::imwrite((dir / "masks" / file).string(), mask255)) throw IoError("cannot write " + (dir / "masks" / file).string());
}

std::vector<Sample> read_sample_dir(const fs::path& dir) {
  fs::path d = dir;
  if (d.filename().empty()) d = d.parent_path();
  std::vector<Sample> out;
  for (const auto& ref : list_dataset(d.parent_path(), d.filename().string())) {
    Sample s = load_sample(ref);
    const auto sep = s.id.find("__");
    if (sep == std::string::npos) throw DatasetError("cache file without source prefix: " + ref.image.string());
    s.source = s.id.substr(0, sep);
    s.id = s.id.substr(sep + 2);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace effiseg
