#pragma once

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "effiseg/autograd.hpp"
#include "effiseg/data.hpp"

namespace effiseg {

inline constexpr double kMetricEps = 1e-7;
inline constexpr double kDefaultThreshold = 0.5;
inline constexpr double kSoftDiceSmooth = 1.0;

/// Pixel counts of a prediction/ground-truth pair.
struct Overlap {
  Index intersection = 0;
  Index pred = 0;
  Index gt = 0;

  Index union_size() const { return pred + gt - intersection; }
};

/// Counts over two equally sized {0, 1} arrays. Throws ShapeError on a size
/// mismatch and NumericError on values other than 0 and 1.
template <typename A, typename B>
Overlap count_overlap(const Eigen::ArrayBase<A>& pred, const Eigen::ArrayBase<B>& gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("mask sizes differ: " + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()));
  }
  using PS = typename A::Scalar;
  using GS = typename B::Scalar;
  if (((pred != PS(0)) && (pred != PS(1))).any() || ((gt != GS(0)) && (gt != GS(1))).any()) {
    throw NumericError("masks must contain only 0 and 1");
  }
  Overlap o;
  o.pred = (pred == PS(1)).count();
  o.gt = (gt == GS(1)).count();
  o.intersection = ((pred == PS(1)) && (gt == GS(1))).count();
  return o;
}

inline double dice(const Overlap& o, double eps = kMetricEps) {
  return (2.0 * static_cast<double>(o.intersection) + eps) / (static_cast<double>(o.pred + o.gt) + eps);
}

inline double iou(const Overlap& o, double eps = kMetricEps) {
  return (static_cast<double>(o.intersection) + eps) / (static_cast<double>(o.union_size()) + eps);
}

template <typename A, typename B>
double dice(const Eigen::ArrayBase<A>& pred, const Eigen::ArrayBase<B>& gt, double eps = kMetricEps) {
  return dice(count_overlap(pred, gt), eps);
}

template <typename A, typename B>
double iou(const Eigen::ArrayBase<A>& pred, const Eigen::ArrayBase<B>& gt, double eps = kMetricEps) {
  return iou(count_overlap(pred, gt), eps);
}

template <typename Scalar>
Overlap count_overlap(const Tensor4<Scalar>& pred, const Tensor4<Scalar>& gt) {
  if (pred.shape() != gt.shape()) throw ShapeError("mask shapes differ: " + pred.shape().str() + " vs " + gt.shape().str());
  return count_overlap(pred.array(), gt.array());
}

/// 1 where prob > threshold, else 0.
template <typename Scalar>
Tensor4<Scalar> binarize(const Tensor4<Scalar>& prob, double threshold = kDefaultThreshold) {
  return Tensor4<Scalar>(prob.shape(), (prob.array() > static_cast<Scalar>(threshold)).template cast<Scalar>());
}

namespace detail {

template <typename Scalar>
void check_loss_shapes(const Shape4& p, const Tensor4<Scalar>& gt) {
  if (p != gt.shape() || p.c != 1) {
    throw ShapeError("loss expects matching (n, 1, h, w) shapes, got " + p.str() + " and " + gt.shape().str());
  }
  if (((gt.array() != Scalar(0)) && (gt.array() != Scalar(1))).any()) {
    throw NumericError("loss ground truth must contain only 0 and 1");
  }
}

/// Soft Dice per image and its derivative with respect to the probabilities.
/// Returns mean over images of (1 - soft dice); fills `dprob` if non-null.
template <typename Scalar>
Scalar soft_dice_term(const Tensor4<Scalar>& p, const Tensor4<Scalar>& g, Tensor4<Scalar>* dprob) {
  const Index n = p.n();
  const Index per = p.c() * p.shape().plane();
  const Scalar s = static_cast<Scalar>(kSoftDiceSmooth);
  Scalar total = 0;
  if (dprob) *dprob = Tensor4<Scalar>(p.shape());
  for (Index b = 0; b < n; ++b) {
    const auto pb = p.array().segment(b * per, per);
    const auto gb = g.array().segment(b * per, per);
    const Scalar num = Scalar(2) * (pb * gb).sum() + s;
    const Scalar den = pb.sum() + gb.sum() + s;
    total += Scalar(1) - num / den;
    if (dprob) {
      dprob->array().segment(b * per, per) = -(Scalar(2) * gb * den - num) / (den * den) / static_cast<Scalar>(n);
    }
  }
  return total / static_cast<Scalar>(n);
}

}  // namespace detail

/// Training objective on probabilities: mean binary cross-entropy plus
/// (1 - soft Dice) averaged over images, equally weighted. `prob` must lie
/// strictly inside (0, 1); otherwise NumericError.
template <typename Scalar>
Var<Scalar> segmentation_loss(const Var<Scalar>& prob, const Tensor4<Scalar>& gt) {
  detail::check_loss_shapes(prob.shape(), gt);
  const auto& p = prob.value().array();
  if (!((p > Scalar(0)) && (p < Scalar(1))).all()) throw NumericError("loss probabilities must lie in (0, 1)");
  const Scalar count = static_cast<Scalar>(p.size());
  const auto& g = gt.array();
  const Scalar bce = -(g * p.log() + (Scalar(1) - g) * (Scalar(1) - p).log()).sum() / count;
  Tensor4<Scalar> ddice;
  const Scalar dice_term = detail::soft_dice_term(prob.value(), gt, &ddice);
  auto pn = prob.node();
  return record<Scalar>(Tensor4<Scalar>(Shape4{}, bce + dice_term), {prob},
                        [pn, gt, ddice = std::move(ddice), count](const Tensor4<Scalar>& gy) {
                          const auto& pv = pn->value.array();
                          const auto& gv = gt.array();
                          const auto dbce = ((Scalar(1) - gv) / (Scalar(1) - pv) - gv / pv) / count;
                          accumulate<Scalar>(pn, (dbce + ddice.array()) * gy.data()[0]);
                        });
}

/// The same objective on pre-sigmoid logits, evaluated without forming
/// log(sigmoid) explicitly so that saturated outputs stay finite.
template <typename Scalar>
Var<Scalar> segmentation_loss_from_logits(const Var<Scalar>& logits, const Tensor4<Scalar>& gt) {
  detail::check_loss_shapes(logits.shape(), gt);
  const auto& z = logits.value().array();
  if (!z.allFinite()) throw NumericError("loss received non-finite logits");
  const Scalar count = static_cast<Scalar>(z.size());
  const auto& g = gt.array();
  const Scalar bce = (z.max(Scalar(0)) - z * g + (Scalar(1) + (-z.abs()).exp()).log()).sum() / count;
  Tensor4<Scalar> prob(logits.shape(), (Scalar(1) + (-z).exp()).inverse());
  Tensor4<Scalar> ddice;
  const Scalar dice_term = detail::soft_dice_term(prob, gt, &ddice);
  auto zn = logits.node();
  return record<Scalar>(Tensor4<Scalar>(Shape4{}, bce + dice_term), {logits},
                        [zn, gt, prob = std::move(prob), ddice = std::move(ddice), count](const Tensor4<Scalar>& gy) {
                          const auto& pv = prob.array();
                          accumulate<Scalar>(
                              zn, ((pv - gt.array()) / count + ddice.array() * pv * (Scalar(1) - pv)) * gy.data()[0]);
                        });
}

/// Metrics of one image.
struct ImageMetrics {
  std::string id;
  double dice = 0;
  double iou = 0;
};

struct MetricsReport {
  std::string dataset;
  double threshold = kDefaultThreshold;
  double mean_dice = 0;
  double mean_iou = 0;
  std::vector<ImageMetrics> per_image;  // sorted by id
};

/// Returns foreground probabilities (1, 1, h, w) for one preprocessed image.
using Predictor = std::function<Tensor4<float>(const Preprocessed&)>;

/// Per-image Dice/IoU of the binarised prediction against the sample mask,
/// averaged over images. Images are processed in id order. Throws
/// DatasetError on an empty dataset and ShapeError if a prediction does not
/// match its mask.
MetricsReport evaluate(const Predictor& predictor, const std::vector<Preprocessed>& samples, const std::string& dataset,
                       double threshold = kDefaultThreshold);

void to_json(nlohmann::json& j, const MetricsReport& r);

/// Published scores of the reference model, shown as a context row.
struct ReferenceScore {
  const char* dataset;
  double dice;
  double iou;
};
inline constexpr std::array<ReferenceScore, 5> kReferenceScores{{
    {"Kvasir", 0.894, 0.808},
    {"CVC-ClinicDB", 0.923, 0.857},
    {"CVC-ColonDB", 0.718, 0.560},
    {"EndoScene", 0.893, 0.806},
    {"ETIS", 0.748, 0.597},
}};

/// Plain-text table: one column pair (Dice, IoU) per dataset, one row for
/// these results and, when `with_reference` is set, one row of published
/// reference scores for the same datasets.
std::string format_table(const std::vector<MetricsReport>& reports, const std::string& row_label = "this run",
                         bool with_reference = true);

}  // namespace effiseg
