#pragma once

// Synthetic stand-in corpora with the real corpora's layout and sizes. Each
// image carries its own mask in the red channel (255 inside, 0 outside), so
// geometric transforms can be checked for image/mask agreement.

#include <filesystem>
#include <string>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "effiseg/data.hpp"

namespace synthetic {

/// One polyp-like ellipse on a textured background; deterministic in (seed, index).
inline effiseg::Sample make_sample(const std::string& source, int index, int height, int width, std::uint64_t seed) {
  effiseg::Rng rng(effiseg::derive_seed(seed, source + "/" + std::to_string(index)));
  effiseg::Sample s;
  s.source = source;
  s.id = "img" + std::to_string(10000 + index).substr(1);
  s.mask = cv::Mat::zeros(height, width, CV_8UC1);
  const cv::Point centre(static_cast<int>(rng.uniform(0.3, 0.7) * width), static_cast<int>(rng.uniform(0.3, 0.7) * height));
  const cv::Size axes(std::max(2, static_cast<int>(rng.uniform(0.15, 0.3) * width)),
                      std::max(2, static_cast<int>(rng.uniform(0.15, 0.3) * height)));
  cv::ellipse(s.mask, centre, axes, rng.uniform(0, 180), 0, 360, cv::Scalar(1), cv::FILLED);
  s.image = cv::Mat(height, width, CV_8UC3);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      auto& px = s.image.at<cv::Vec3b>(y, x);
      px[0] = s.mask.at<std::uint8_t>(y, x) ? 255 : 0;
      px[1] = static_cast<std::uint8_t>(rng.below(256));
      px[2] = static_cast<std::uint8_t>((x * 255) / std::max(1, width - 1));
    }
  }
  return s;
}

/// Writes <root>/<name>/{images,masks}/imgNNNN.png.
inline void write_corpus(const std::filesystem::path& root, const std::string& name, int count, int height = 16,
                         int width = 20, std::uint64_t seed = 0) {
  const auto base = root / name;
  std::filesystem::create_directories(base / "images");
  std::filesystem::create_directories(base / "masks");
  for (int i = 0; i < count; ++i) {
    const auto s = make_sample(name, i, height, width, seed);
    cv::Mat bgr;
    cv::cvtColor(s.image, bgr, cv::COLOR_RGB2BGR);
    cv::imwrite((base / "images" / (s.id + ".png")).string(), bgr);
    cv::imwrite((base / "masks" / (s.id + ".png")).string(), s.mask * 255);
  }
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("effiseg_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace synthetic
