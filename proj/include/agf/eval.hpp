#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "agf/core.hpp"
#include "agf/image_io.hpp"
#include "agf/methods.hpp"
#include "agf/model.hpp"
#include "json.hpp"

namespace agf {

// ---------------------------------------------------------------------------
// Negative perturbation
// ---------------------------------------------------------------------------

enum class PerturbationMode {
  predicted,  // explain the top-1 class on the clean image
  target,     // explain the ground-truth class
};

struct PerturbationCurve {
  std::vector<double> fractions;
  std::vector<double> accuracy;
  double auc = 0.0;
};

/// H×W heatmap for (image, class).
using HeatmapFn = std::function<Tensor(const Tensor& image, std::size_t cls)>;

inline std::vector<double> default_fractions() {
  std::vector<double> f;
  for (int i = 1; i <= 9; ++i) f.push_back(i / 10.0);
  return f;
}

/// Trapezoidal area under accuracy(fraction), divided by the fraction span.
inline double curve_auc(const std::vector<double>& fractions, const std::vector<double>& accuracy) {
  if (fractions.empty() || fractions.size() != accuracy.size())
    throw data_error("curve needs matching, non-empty fraction and accuracy lists");
  if (fractions.size() == 1) return accuracy.front();
  double area = 0.0;
  for (std::size_t i = 1; i < fractions.size(); ++i)
    area += 0.5 * (accuracy[i] + accuracy[i - 1]) * (fractions[i] - fractions[i - 1]);
  return area / (fractions.back() - fractions.front());
}

/// Pixel indices sorted by ascending heatmap value; ties in row-major order.
inline std::vector<std::size_t> ascending_order(const Tensor& heatmap) {
  std::vector<std::size_t> order(heatmap.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return heatmap[a] < heatmap[b]; });
  return order;
}

inline std::size_t masked_count(double fraction, std::size_t pixels) {
  const double n = std::floor(fraction * static_cast<double>(pixels) + 1e-9);
  return std::min(pixels, static_cast<std::size_t>(std::max(0.0, n)));
}

/// Replaces the `fraction` least relevant pixels of a C×H×W image (all
/// channels) with `fill[c]`.
inline Tensor mask_lowest(const Tensor& image, const std::vector<std::size_t>& order, double fraction,
                          const std::vector<double>& fill) {
  const std::size_t plane = image.shape()[1] * image.shape()[2];
  if (order.size() != plane) throw shape_error("pixel order does not match the image");
  Tensor out = image;
  const std::size_t count = masked_count(fraction, plane);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t c = 0; c < image.shape()[0]; ++c) out[c * plane + order[i]] = fill[c];
  return out;
}

/// Removes increasing fractions of each image, least relevant first, and
/// records the classifier accuracy at each step. Masked pixels take the
/// preprocessing mean, i.e. zero after normalization.
inline PerturbationCurve negative_perturbation(const Model& model, const Dataset& dataset, const HeatmapFn& heatmap_fn,
                                               const std::vector<double>& fractions, PerturbationMode mode) {
  if (dataset.samples.empty()) throw data_error("negative perturbation needs a non-empty dataset");
  if (fractions.empty()) throw data_error("no fractions given");
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (fractions[i] < 0.0 || fractions[i] > 1.0) throw data_error("fractions must lie in [0, 1]");
    if (i && fractions[i] <= fractions[i - 1]) throw data_error("fractions must be strictly increasing");
  }
  const std::size_t channels = model.input_shape[0];
  const std::vector<double> fill =
      model.preprocessing.is_identity() ? std::vector<double>(channels, 0.0) : model.preprocessing.mean;

  std::vector<std::size_t> correct(fractions.size(), 0);
  for (const auto& s : dataset.samples) {
    if (s.labels.empty()) throw data_error(s.name + " has no label");
    const std::size_t label = s.labels.front();
    const std::size_t cls = mode == PerturbationMode::predicted ? argmax(forward(model, s.image).logits) : label;
    const Tensor hm = heatmap_fn(s.image, cls);
    if (hm.rank() != 2 || hm.shape()[0] != s.image.shape()[1] || hm.shape()[1] != s.image.shape()[2])
      throw shape_error("heatmap for " + s.name + " has shape " + to_string(hm.shape()));
    const auto order = ascending_order(hm);
    for (std::size_t f = 0; f < fractions.size(); ++f) {
      const Tensor masked = mask_lowest(s.image, order, fractions[f], fill);
      if (argmax(forward(model, masked).logits) == label) ++correct[f];
    }
  }

  PerturbationCurve curve;
  curve.fractions = fractions;
  for (auto c : correct) curve.accuracy.push_back(static_cast<double>(c) / static_cast<double>(dataset.samples.size()));
  curve.auc = curve_auc(curve.fractions, curve.accuracy);
  return curve;
}

// ---------------------------------------------------------------------------
// Segmentation metrics
// ---------------------------------------------------------------------------

struct SegRecord {
  std::string name;
  double pixel_accuracy = 0.0;
  double average_precision = 0.0;
};

struct SegReport {
  double pixel_accuracy = 0.0;  // over all pixels of all images
  double mean_ap = 0.0;
  std::vector<SegRecord> records;
};

inline Tensor binarize(const Tensor& heatmap, Polarity pol) {
  const double threshold = pol == Polarity::signed_map ? 0.0 : sum(heatmap) / static_cast<double>(heatmap.size());
  return map(heatmap, [threshold](double v) { return v > threshold ? 1.0 : 0.0; });
}

/// Area under the precision-recall curve obtained by thresholding at every
/// distinct score (step interpolation). Zero when the mask is empty.
inline double average_precision(const Tensor& scores, const Tensor& mask) {
  require_same_shape(scores, mask, "average_precision");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double positives = 0.0;
  for (double m : mask.values()) positives += m > 0.0 ? 1.0 : 0.0;
  if (positives == 0.0) return 0.0;

  double tp = 0.0, ap = 0.0, prev_recall = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double v = scores[order[i]];
    while (i < order.size() && scores[order[i]] == v) {
      tp += mask[order[i]] > 0.0 ? 1.0 : 0.0;
      ++i;
    }
    const double recall = tp / positives;
    ap += (recall - prev_recall) * (tp / static_cast<double>(i));
    prev_recall = recall;
  }
  return ap;
}

inline SegReport segmentation_eval(const std::vector<Tensor>& heatmaps, const std::vector<Tensor>& masks,
                                   Polarity pol, const std::vector<std::string>& names = {}) {
  if (heatmaps.size() != masks.size()) throw shape_error("need one mask per heatmap");
  if (heatmaps.empty()) throw data_error("segmentation evaluation needs at least one image");
  SegReport report;
  double agree = 0.0, pixels = 0.0, ap_total = 0.0;
  for (std::size_t i = 0; i < heatmaps.size(); ++i) {
    require_same_shape(heatmaps[i], masks[i], "segmentation_eval");
    const Tensor pred = binarize(heatmaps[i], pol);
    double a = 0.0;
    for (std::size_t p = 0; p < pred.size(); ++p) a += (pred[p] > 0.0) == (masks[i][p] > 0.0) ? 1.0 : 0.0;
    SegRecord rec;
    rec.name = i < names.size() ? names[i] : std::to_string(i);
    rec.pixel_accuracy = a / static_cast<double>(pred.size());
    rec.average_precision = average_precision(heatmaps[i], masks[i]);
    agree += a;
    pixels += static_cast<double>(pred.size());
    ap_total += rec.average_precision;
    report.records.push_back(std::move(rec));
  }
  report.pixel_accuracy = agree / pixels;
  report.mean_ap = ap_total / static_cast<double>(heatmaps.size());
  return report;
}

inline nlohmann::json to_json(const SegReport& r) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& rec : r.records)
    images.push_back({{"name", rec.name}, {"pixel_accuracy", rec.pixel_accuracy}, {"average_precision", rec.average_precision}});
  return {{"pixel_accuracy", r.pixel_accuracy}, {"mean_average_precision", r.mean_ap}, {"images", images}};
}

inline nlohmann::json to_json(const PerturbationCurve& c) {
  return {{"fractions", c.fractions}, {"accuracy", c.accuracy}, {"auc", c.auc}};
}

}  // namespace agf
