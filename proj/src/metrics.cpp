#include "effiseg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace effiseg {

MetricsReport evaluate(const Predictor& predictor, const std::vector<Preprocessed>& samples, const std::string& dataset,
                       double threshold) {
  if (samples.empty()) throw DatasetError("cannot evaluate empty dataset " + dataset);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return samples[a].id < samples[b].id; });

  MetricsReport report;
  report.dataset = dataset;
  report.threshold = threshold;
  double dice_sum = 0, iou_sum = 0;
  for (std::size_t i : order) {
    const Preprocessed& s = samples[i];
    const Tensor4<float> prob = predictor(s);
    if (prob.shape() != s.mask.shape()) {
      throw ShapeError("prediction " + prob.shape().str() + " does not match mask " + s.mask.shape().str() + " for " +
                       s.id);
    }
    const Overlap o = count_overlap(binarize(prob, threshold), s.mask);
    report.per_image.push_back({s.id, dice(o), iou(o)});
    dice_sum += report.per_image.back().dice;
    iou_sum += report.per_image.back().iou;
  }
  report.mean_dice = dice_sum / static_cast<double>(report.per_image.size());
  report.mean_iou = iou_sum / static_cast<double>(report.per_image.size());
  return report;
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& m : r.per_image) images.push_back({{"id", m.id}, {"dice", m.dice}, {"iou", m.iou}});
  j = {{"dataset", r.dataset},     {"threshold", r.threshold}, {"mean_dice", r.mean_dice},
       {"mean_iou", r.mean_iou},   {"count", r.per_image.size()}, {"per_image", std::move(images)}};
}

namespace {

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

}  // namespace

std::string format_table(const std::vector<MetricsReport>& reports, const std::string& row_label, bool with_reference) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"Method"}, sub{""}, ours{row_label}, ref{"reference"};
  bool any_reference = false;
  for (const auto& r : reports) {
    header.insert(header.end(), {r.dataset, ""});
    sub.insert(sub.end(), {"Dice", "IoU"});
    ours.insert(ours.end(), {fixed3(r.mean_dice), fixed3(r.mean_iou)});
    const auto it = std::find_if(kReferenceScores.begin(), kReferenceScores.end(),
                                 [&](const ReferenceScore& s) { return r.dataset == s.dataset; });
    if (it != kReferenceScores.end()) {
      any_reference = true;
      ref.insert(ref.end(), {fixed3(it->dice), fixed3(it->iou)});
    } else {
      ref.insert(ref.end(), {"-", "-"});
    }
  }
  rows = {header, sub, ours};
  if (with_reference && any_reference) rows.push_back(ref);

  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  // A dataset name spans its Dice and IoU columns.
  for (std::size_t c = 1; c + 1 < header.size(); c += 2) {
    const std::size_t span = width[c] + 3 + width[c + 1];
    if (header[c].size() > span) width[c + 1] += header[c].size() - span;
  }

  std::string out;
  auto rule = [&] {
    std::string line = "+";
    for (std::size_t c = 0; c < width.size(); ++c) line += std::string(width[c] + 2, '-') + "+";
    out += line + "\n";
  };
  rule();
  {
    std::string line = "| " + pad(header[0], width[0]) + " |";
    for (std::size_t c = 1; c + 1 < header.size(); c += 2) line += " " + pad(header[c], width[c] + 3 + width[c + 1]) + " |";
    out += line + "\n";
  }
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (r == 2) rule();
    std::string line = "|";
    for (std::size_t c = 0; c < rows[r].size(); ++c) line += " " + pad(rows[r][c], width[c]) + " |";
    out += line + "\n";
  }
  rule();
  return out;
}

}  // namespace effiseg
