#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "effiseg/errors.hpp"
#include "effiseg/random.hpp"
#include "effiseg/tensor.hpp"

namespace effiseg {

/// Corpora split into train/val/test; the rest are test-only.
inline const std::vector<std::string> kSplittableCorpora = {"Kvasir", "CVC-ClinicDB"};
inline const std::vector<std::string> kTestOnlyCorpora = {"CVC-ColonDB", "ETIS", "EndoScene"};

/// ImageNet channel statistics on [0, 1] RGB values.
inline constexpr std::array<float, 3> kImageMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kImageStd{0.229f, 0.224f, 0.225f};

inline constexpr int kMaskThreshold = 127;

/// Image/mask pair. `image` is 8-bit RGB (CV_8UC3), `mask` is CV_8UC1 with
/// values in {0, 1}; both have the same size.
struct Sample {
  std::string source;
  std::string id;
  cv::Mat image;
  cv::Mat mask;

  std::string key() const { return source + "/" + id; }
};

/// File locations of one pair, before decoding.
struct SampleRef {
  std::string source;
  std::string id;
  std::filesystem::path image;
  std::filesystem::path mask;

  std::string key() const { return source + "/" + id; }
};

/// Pairs <root>/<name>/images/* with <root>/<name>/masks/* by filename stem,
/// sorted by id. Unpaired files, duplicate stems, missing directories and
/// empty corpora raise DatasetError listing the offenders.
std::vector<SampleRef> list_dataset(const std::filesystem::path& root, const std::string& name);

/// Decodes one pair; the mask is thresholded at 127.
Sample load_sample(const SampleRef& ref);

std::vector<Sample> load_dataset(const std::filesystem::path& root, const std::string& name);

struct SplitSpec {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
  std::uint64_t seed = 0;

  /// Throws ConfigError unless the ratios are non-negative and sum to 1.
  void validate() const;
};

template <typename T>
struct DatasetSplit {
  std::vector<T> train;
  std::vector<T> val;
  std::vector<T> test;
};

/// Per-corpus seeded split: each source is sorted by id, shuffled with a seed
/// derived from (spec.seed, source), then cut into floor(n*test) test,
/// floor(n*val) validation and the remainder for training. Each subset is
/// returned sorted by (source, id). Works on Sample or SampleRef.
template <typename T>
DatasetSplit<T> split(const std::vector<T>& samples, const SplitSpec& spec) {
  spec.validate();
  std::map<std::string, std::vector<const T*>> by_source;
  for (const auto& s : samples) by_source[s.source].push_back(&s);
  DatasetSplit<T> out;
  for (auto& [source, items] : by_source) {
    std::sort(items.begin(), items.end(), [](const T* a, const T* b) { return a->id < b->id; });
    Rng rng(derive_seed(spec.seed, "split/" + source));
    rng.shuffle(items);
    const auto n = items.size();
    const auto n_test = static_cast<std::size_t>(static_cast<double>(n) * spec.test + 1e-9);
    const auto n_val = static_cast<std::size_t>(static_cast<double>(n) * spec.val + 1e-9);
    for (std::size_t i = 0; i < n; ++i) {
      auto& dst = i < n_test ? out.test : i < n_test + n_val ? out.val : out.train;
      dst.push_back(*items[i]);
    }
  }
  auto by_key = [](const T& a, const T& b) { return a.source != b.source ? a.source < b.source : a.id < b.id; };
  std::sort(out.train.begin(), out.train.end(), by_key);
  std::sort(out.val.begin(), out.val.end(), by_key);
  std::sort(out.test.begin(), out.test.end(), by_key);
  return out;
}

/// Plain-text manifest: a "# seed <seed>" header, then "<source>/<id> <subset>"
/// lines sorted by subset then key.
template <typename T>
std::string split_manifest(const DatasetSplit<T>& s, std::uint64_t seed) {
  std::string text = "# seed " + std::to_string(seed) + "\n";
  auto emit = [&](const std::vector<T>& items, const char* subset) {
    for (const auto& item : items) text += item.key() + " " + subset + "\n";
  };
  emit(s.train, "train");
  emit(s.val, "val");
  emit(s.test, "test");
  return text;
}

/// Reads a manifest back into (key -> subset).
std::map<std::string, std::string> read_split_manifest(const std::filesystem::path& path);

inline constexpr double kMaxRotationDegrees = 30.0;

Sample flip_horizontal(const Sample& s);

/// Rotation about the image centre. Bilinear with reflected borders for the
/// image, nearest neighbour for the mask (which therefore stays binary).
Sample rotate(const Sample& s, double degrees);

/// Rotation angle for one sample, uniform in [-30, 30], derived from
/// (seed, source, id) so that it does not depend on processing order.
double rotation_angle(const Sample& s, std::uint64_t seed);

/// Original, "<id>_flip" and "<id>_rot" variants.
std::array<Sample, 3> augment_sample(const Sample& s, std::uint64_t seed);

/// Three samples per input, in input order.
std::vector<Sample> augment_offline(const std::vector<Sample>& train, std::uint64_t seed);

/// Bilinear image / nearest-neighbour mask resize; the mask is re-binarised.
Sample resize_sample(const Sample& s, int height, int width);

/// Network-ready tensors for one sample.
struct Preprocessed {
  std::string source;
  std::string id;
  Tensor4<float> image;  // (1, 3, h, w), standardised
  Tensor4<float> mask;   // (1, 1, h, w), values in {0, 1}
};

/// Resize to height x width, scale to [0, 1] and standardise with the ImageNet
/// statistics. All-background masks are passed through with a warning on stderr.
Preprocessed preprocess(const Sample& s, int height = 224, int width = 224);

/// Standardised image tensor from an 8-bit RGB raster of any size (no resize).
Tensor4<float> image_to_tensor(const cv::Mat& rgb);

/// Standardises and stacks samples `indices` of `set` into (n,3,h,w) and (n,1,h,w).
/// Samples must already have the target size.
void make_batch(const std::vector<Sample>& set, const std::vector<std::size_t>& indices, Tensor4<float>& images,
                Tensor4<float>& masks);

/// Writes image and mask PNGs as <dir>/images/<source>__<id>.png and
/// <dir>/masks/<source>__<id>.png (mask stored as 0/255).
void write_sample_png(const Sample& s, const std::filesystem::path& dir);

/// Reads a directory written by write_sample_png back, sorted by file name.
std::vector<Sample> read_sample_dir(const std::filesystem::path& dir);

}  // namespace effiseg
