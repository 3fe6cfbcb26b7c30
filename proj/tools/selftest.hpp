#pragma once

// Invariant checks over the shipped fixtures, run by `agf selftest`.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "agf/all.hpp"

namespace agf::selftest {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

inline std::vector<AgfConfig> ablation_configs() {
  std::vector<AgfConfig> cfgs;
  cfgs.push_back({});
  cfgs.push_back(AgfConfig::only_c());
  for (int drop = 0; drop < 5; ++drop) {
    AgfConfig c;
    bool* flags[] = {&c.use_A, &c.use_Fx, &c.use_Fgrad, &c.use_M, &c.use_gate};
    *flags[drop] = false;
    cfgs.push_back(c);
  }
  AgfConfig gc;
  gc.residual = ResidualMode::gradcam;
  cfgs.push_back(gc);
  return cfgs;
}

struct FixtureImage {
  std::string model;
  std::filesystem::path image;
  std::vector<double> logits;
};

inline std::vector<FixtureImage> reference_images(const std::filesystem::path& dir) {
  std::ifstream in(dir / "reference_logits.json");
  if (!in) throw data_error("missing " + (dir / "reference_logits.json").string());
  const auto doc = nlohmann::json::parse(in);
  std::vector<FixtureImage> out;
  for (const auto& [model, entries] : doc.items())
    for (const auto& e : entries)
      out.push_back({model, dir / e.at("image").get<std::string>(), e.at("logits").get<std::vector<double>>()});
  return out;
}

inline Check check_reference_logits(const std::filesystem::path& dir) {
  double worst = 0.0;
  for (const auto& f : reference_images(dir)) {
    const Model m = load_modelpack(dir / "models" / f.model);
    const Tensor y = forward(m, read_pnm(f.image)).logits;
    if (y.size() != f.logits.size()) return {"reference logits", false, f.image.string() + ": class count differs"};
    for (std::size_t i = 0; i < y.size(); ++i) worst = std::max(worst, std::abs(y[i] - f.logits[i]));
  }
  return {"reference logits", worst <= 1e-4, "max abs diff " + fmt(worst)};
}

inline Check check_conservation(const std::filesystem::path& dir) {
  double worst_layer = 0.0, worst_total = 0.0;
  for (const auto& f : reference_images(dir)) {
    const Model m = load_modelpack(dir / "models" / f.model);
    const ForwardTrace trace = forward(m, read_pnm(f.image));
    const std::size_t t = argmax(trace.logits);
    for (const auto& cfg : ablation_configs()) {
      const Explanation ex = explain_trace(m, trace, t, cfg);
      const double base = std::abs(ex.layer_sums.front());
      for (std::size_t i = 1; i < ex.layer_sums.size(); ++i)
        worst_layer = std::max(worst_layer, std::abs(ex.layer_sums[i] - ex.layer_sums[i - 1]) / base);
      worst_total = std::max(worst_total, std::abs(sum(ex.heatmap) - ex.layer_sums.front()) / base);
    }
  }
  return {"attribution conservation", worst_layer <= 1e-5 && worst_total <= 1e-4,
          "worst layer drift " + fmt(worst_layer) + ", end to end " + fmt(worst_total)};
}

inline Check check_delta_shift() {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    Tensor g({64}), r({64});
    for (std::size_t i = 0; i < 64; ++i) {
      g[i] = i % 5 == 0 ? 0.0 : n(rng);
      r[i] = n(rng);
    }
    worst = std::max(worst, std::abs(sum(delta_shift(g, r)) - sum(g)) / std::max(1e-12, std::abs(sum(g))));
  }
  return {"delta shift preserves sums", worst <= 1e-6, "worst relative drift " + fmt(worst)};
}

inline Check check_factorization() {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (std::size_t c = 2; c <= 8; ++c) {
    Tensor data({c, 40}), phi({40});
    for (double& v : data.values()) v = u(rng);
    for (std::size_t p = 0; p < 40; ++p) phi[p] = u(rng) - 0.5;
    const Representatives rep = representatives(data, phi);
    const MixingWeights w = solve_weights_unclipped(rep, data);
    // Normal equations: Rᵀ(RW - H) + λW = 0 for every pixel.
    for (std::size_t p = 0; p < 40; ++p) {
      double eb = w.ridge * w.background[p], ef = w.ridge * w.foreground[p];
      for (std::size_t k = 0; k < c; ++k) {
        const double res = rep.background[k] * w.background[p] + rep.foreground[k] * w.foreground[p] - data[k * 40 + p];
        eb += rep.background[k] * res;
        ef += rep.foreground[k] * res;
      }
      worst = std::max({worst, std::abs(eb), std::abs(ef)});
    }
  }
  return {"factorization normal equations", worst <= 1e-6, "worst residual " + fmt(worst)};
}

inline Check check_determinism(const std::filesystem::path& dir) {
  const auto images = reference_images(dir);
  const Model m = load_modelpack(dir / "models" / images.front().model);
  const Tensor img = read_pnm(images.front().image);
  const bool same = explain(m, img, 0).heatmap == explain(m, img, 0).heatmap;
  return {"deterministic explanations", same, same ? "bitwise equal" : "heatmaps differ between runs"};
}

inline std::vector<Check> run_all(const std::filesystem::path& dir) {
  return {check_reference_logits(dir), check_conservation(dir), check_delta_shift(), check_factorization(),
          check_determinism(dir)};
}

}  // namespace agf::selftest
