#pragma once

// Explaining a self-supervised network φ_τ ∘ φ_F. The latent of the image is
// contrasted with its nearest gallery neighbour, the SSL head is run on the
// difference and the winning pseudo-class is explained through the combined
// network: the head sees the contrasted latent, the feature extractor sees
// the original image.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "agf/agf.hpp"
#include "agf/core.hpp"
#include "agf/model.hpp"
#include "json.hpp"

namespace agf {

struct GalleryEntry {
  std::string id;
  Tensor latent;
  Tensor logits;
};

struct SslGallery {
  std::vector<GalleryEntry> entries;

  void validate() const {
    if (entries.empty()) return;
    const std::size_t dim = entries.front().latent.size();
    for (const auto& e : entries) {
      if (e.latent.size() != dim)
        throw data_error("gallery entry '" + e.id + "' has latent length " + std::to_string(e.latent.size()) +
                         ", expected " + std::to_string(dim));
      if (!all_finite(e.latent) || !all_finite(e.logits))
        throw data_error("gallery entry '" + e.id + "' contains non-finite values");
    }
  }
};

/// One JSON object per line: {"id": ..., "latent": [...], "logits": [...]}.
inline SslGallery load_gallery(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open gallery " + path.string());
  SslGallery gallery;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      GalleryEntry e;
      e.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
      auto latent = j.at("latent").get<std::vector<double>>();
      auto logits = j.value("logits", std::vector<double>{});
      if (latent.empty()) throw data_error("empty latent");
      e.latent = Tensor::vector(std::move(latent));
      if (!logits.empty()) e.logits = Tensor::vector(std::move(logits));
      gallery.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw data_error(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    } catch (const error& ex) {
      throw data_error(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  }
  gallery.validate();
  return gallery;
}

inline void save_gallery(const SslGallery& gallery, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write gallery " + path.string());
  for (const auto& e : gallery.entries) {
    nlohmann::json j{{"id", e.id}, {"latent", e.latent.data()}, {"logits", e.logits.data()}};
    out << j.dump() << '\n';
  }
}

/// Index of the gallery latent closest to `latent` in Euclidean distance,
/// skipping exact matches (distance 0). Ties keep the earliest entry.
inline std::size_t nearest_neighbor(const SslGallery& gallery, const Tensor& latent) {
  if (gallery.entries.empty()) throw data_error("gallery is empty");
  std::size_t best = gallery.entries.size();
  double best_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < gallery.entries.size(); ++i) {
    const Tensor& other = gallery.entries[i].latent;
    if (other.size() != latent.size())
      throw data_error("gallery latent length " + std::to_string(other.size()) + " does not match " +
                       std::to_string(latent.size()));
    double d2 = 0.0;
    for (std::size_t j = 0; j < latent.size(); ++j) {
      const double d = latent[j] - other[j];
      d2 += d * d;
    }
    if (d2 == 0.0) continue;
    if (d2 < best_d2) {
      best_d2 = d2;
      best = i;
    }
  }
  if (best == gallery.entries.size()) throw data_error("every gallery latent coincides with the query");
  return best;
}

enum class LatentFusion {
  difference,  // L_I - L_N
  sum,         // L_I + L_N
  none,        // L_I
};

/// The layers of `features` followed by those of `head`.
inline Model chain_models(const Model& features, const Model& head) {
  Model combined;
  combined.layers = features.layers;
  combined.layers.insert(combined.layers.end(), head.layers.begin(), head.layers.end());
  combined.class_count = head.class_count;
  combined.input_shape = features.input_shape;
  combined.preprocessing = features.preprocessing;
  combined.validate();
  return combined;
}

struct SslExplanation {
  Explanation explanation;
  std::size_t neighbor = 0;  // gallery index (unused when fusion == none)
  std::size_t target = 0;    // argmax of the head on the fused latent
  Tensor fused_latent;
};

inline SslExplanation ssl_explain(const Model& features, const Model& head, const Tensor& image,
                                  const SslGallery& gallery, const AgfConfig& cfg = {},
                                  LatentFusion fusion = LatentFusion::difference) {
  if (!head.preprocessing.is_identity()) throw data_error("SSL head must not carry input preprocessing");
  const Model combined = chain_models(features, head);

  const ForwardTrace feature_trace = forward(features, image);
  const Tensor& latent = feature_trace.logits;
  SslExplanation out;
  switch (fusion) {
    case LatentFusion::difference:
      out.neighbor = nearest_neighbor(gallery, latent);
      out.fused_latent = subtract(latent, gallery.entries[out.neighbor].latent);
      break;
    case LatentFusion::sum:
      out.neighbor = nearest_neighbor(gallery, latent);
      out.fused_latent = add(latent, gallery.entries[out.neighbor].latent);
      break;
    case LatentFusion::none:
      if (gallery.entries.empty()) throw data_error("gallery is empty");
      out.fused_latent = latent;
      break;
  }

  const ForwardTrace head_trace = forward_preprocessed(head, out.fused_latent);
  out.target = argmax(head_trace.logits);

  ForwardTrace trace;
  trace.inputs = feature_trace.inputs;
  trace.inputs.insert(trace.inputs.end(), head_trace.inputs.begin(), head_trace.inputs.end());
  trace.logits = head_trace.logits;
  out.explanation = explain_trace(combined, trace, out.target, cfg);
  return out;
}

}  // namespace agf
