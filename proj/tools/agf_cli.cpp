#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "agf/all.hpp"
#include "selftest.hpp"

#ifndef AGF_FIXTURE_DIR
#define AGF_FIXTURE_DIR "tests/fixtures"
#endif

namespace {

namespace fs = std::filesystem;
using namespace agf;

// Exit codes.
constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kDataError = 2;
constexpr int kNumericError = 3;

struct MethodFlags {
  std::string method = "agf";
  std::string ablate;
  std::string residual = "guided";
  std::optional<std::size_t> gradcam_layer;
  std::uint64_t seed = 0;
};

void add_method_flags(CLI::App* cmd, MethodFlags& f, bool allow_random) {
  std::vector<std::string> methods{"agf", "lrp", "clrp", "gradcam"};
  if (allow_random) methods.push_back("random");
  cmd->add_option("--method", f.method, "Attribution method")->check(CLI::IsMember(methods));
  cmd->add_option("--ablate", f.ablate, "Comma list of AGF components to disable: a,fx,fgrad,m,gate");
  cmd->add_option("--residual", f.residual, "AGF residual: guided or gradcam")
      ->check(CLI::IsMember({"guided", "gradcam"}));
  cmd->add_option("--gradcam-layer", f.gradcam_layer, "Grad-CAM layer in reverse numbering (1 = last layer)");
  if (allow_random) cmd->add_option("--seed", f.seed, "Seed for the random baseline");
}

AgfConfig parse_agf_config(const MethodFlags& f) {
  AgfConfig cfg;
  std::stringstream ss(f.ablate);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item == "a")
      cfg.use_A = false;
    else if (item == "fx")
      cfg.use_Fx = false;
    else if (item == "fgrad")
      cfg.use_Fgrad = false;
    else if (item == "m")
      cfg.use_M = false;
    else if (item == "gate")
      cfg.use_gate = false;
    else
      throw CLI::ValidationError("--ablate", "unknown component '" + item + "'");
  }
  if (f.residual == "gradcam") cfg.residual = ResidualMode::gradcam;
  return cfg;
}

MethodOptions method_options(const MethodFlags& f) {
  MethodOptions o;
  o.agf = parse_agf_config(f);
  o.gradcam_layer = f.gradcam_layer;
  o.seed = f.seed;
  return o;
}

std::vector<double> parse_fractions(const std::string& list) {
  if (list.empty()) return default_fractions();
  std::vector<double> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw CLI::ValidationError("--fractions", "not a number: '" + item + "'");
    }
  }
  return out;
}

std::string shortest(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write " + path.string());
  out << text;
  if (!out) throw data_error("short write to " + path.string());
}

void write_heatmaps(const Tensor& hm, const std::string& pgm, const std::string& raw) {
  if (!pgm.empty()) write_heatmap_pgm(hm, pgm);
  if (!raw.empty()) write_heatmap_raw(hm, raw);
}

std::size_t parse_class(const Model& m, long long cls) {
  if (cls < 0 || static_cast<unsigned long long>(cls) >= m.class_count)
    throw data_error("class " + std::to_string(cls) + " outside [0, " + std::to_string(m.class_count) + ")");
  return static_cast<std::size_t>(cls);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-specific attributions for small sequential CNNs"};
  app.require_subcommand(1);

  // explain
  auto* explain_cmd = app.add_subcommand("explain", "Heatmap for one image and class");
  std::string model_path, image_path, out_pgm, out_raw;
  long long cls = -1;
  MethodFlags explain_flags;
  explain_cmd->add_option("--model", model_path, "ModelPack file")->required()->check(CLI::ExistingFile);
  explain_cmd->add_option("--image", image_path, "PGM/PPM image")->required()->check(CLI::ExistingFile);
  explain_cmd->add_option("--class", cls, "Target class (default: top-1 prediction)");
  add_method_flags(explain_cmd, explain_flags, false);
  explain_cmd->add_option("--out", out_pgm, "Rendered heatmap (PGM)");
  explain_cmd->add_option("--raw", out_raw, "Raw float32 heatmap");

  // perturb
  auto* perturb_cmd = app.add_subcommand("perturb", "Negative perturbation curve over a dataset");
  std::string data_dir, mode = "predicted", fractions, out_csv;
  MethodFlags perturb_flags;
  perturb_cmd->add_option("--model", model_path, "ModelPack file")->required()->check(CLI::ExistingFile);
  perturb_cmd->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  add_method_flags(perturb_cmd, perturb_flags, true);
  perturb_cmd->add_option("--mode", mode, "Explained class")->check(CLI::IsMember({"predicted", "target"}));
  perturb_cmd->add_option("--fractions", fractions, "Comma list of masked fractions (default 0.1..0.9)");
  perturb_cmd->add_option("--out", out_csv, "Curve CSV")->required();

  // segeval
  auto* seg_cmd = app.add_subcommand("segeval", "Pixel accuracy and mAP against ground-truth masks");
  std::string out_json;
  MethodFlags seg_flags;
  seg_cmd->add_option("--model", model_path, "ModelPack file")->required()->check(CLI::ExistingFile);
  seg_cmd->add_option("--data", data_dir, "Dataset directory with masks")->required()->check(CLI::ExistingDirectory);
  add_method_flags(seg_cmd, seg_flags, false);
  seg_cmd->add_option("--out", out_json, "Report JSON")->required();

  // ssl-explain
  auto* ssl_cmd = app.add_subcommand("ssl-explain", "Explain a feature extractor against a latent gallery");
  std::string features_path, head_path, gallery_path, fusion = "difference";
  MethodFlags ssl_flags;
  ssl_cmd->add_option("--features", features_path, "Feature extractor ModelPack")->required()->check(CLI::ExistingFile);
  ssl_cmd->add_option("--head", head_path, "Classifier head ModelPack")->required()->check(CLI::ExistingFile);
  ssl_cmd->add_option("--image", image_path, "PGM/PPM image")->required()->check(CLI::ExistingFile);
  ssl_cmd->add_option("--gallery", gallery_path, "Gallery JSON-lines")->required()->check(CLI::ExistingFile);
  ssl_cmd->add_option("--fusion", fusion, "Latent fusion")->check(CLI::IsMember({"difference", "sum", "none"}));
  ssl_cmd->add_option("--ablate", ssl_flags.ablate, "Comma list of AGF components to disable: a,fx,fgrad,m,gate");
  ssl_cmd->add_option("--out", out_pgm, "Rendered heatmap (PGM)");
  ssl_cmd->add_option("--raw", out_raw, "Raw float32 heatmap");

  // selftest
  auto* self_cmd = app.add_subcommand("selftest", "Run the invariant checks on the fixtures");
  std::string fixture_dir = AGF_FIXTURE_DIR;
  self_cmd->add_option("--fixtures", fixture_dir, "Fixture directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*explain_cmd) {
      if (out_pgm.empty() && out_raw.empty()) throw CLI::ValidationError("explain", "give --out and/or --raw");
      const Model model = load_modelpack(model_path);
      const Tensor image = read_pnm(image_path);
      const std::size_t target = cls < 0 ? argmax(forward(model, image).logits) : parse_class(model, cls);
      const Tensor hm =
          compute_heatmap(model, image, target, parse_method(explain_flags.method), method_options(explain_flags));
      write_heatmaps(hm, out_pgm, out_raw);
      std::cout << nlohmann::json{{"class", target}, {"method", explain_flags.method}, {"sum", sum(hm)}}.dump()
                << "\n";
    } else if (*perturb_cmd) {
      const Model model = load_modelpack(model_path);
      const Dataset data = load_dataset(data_dir);
      const Method method = parse_method(perturb_flags.method);
      const MethodOptions opts = method_options(perturb_flags);
      const HeatmapFn fn = [&](const Tensor& img, std::size_t c) { return compute_heatmap(model, img, c, method, opts); };
      const auto curve = negative_perturbation(model, data, fn, parse_fractions(fractions),
                                               mode == "target" ? PerturbationMode::target : PerturbationMode::predicted);
      std::string csv = "fraction,accuracy\n";
      for (std::size_t i = 0; i < curve.fractions.size(); ++i)
        csv += shortest(curve.fractions[i]) + ',' + shortest(curve.accuracy[i]) + '\n';
      write_text(out_csv, csv);
      std::cout << nlohmann::json{{"method", perturb_flags.method}, {"mode", mode}, {"auc", curve.auc}}.dump() << "\n";
    } else if (*seg_cmd) {
      const Model model = load_modelpack(model_path);
      const Dataset data = load_dataset(data_dir);
      const Method method = parse_method(seg_flags.method);
      const MethodOptions opts = method_options(seg_flags);
      std::vector<Tensor> heatmaps, masks;
      std::vector<std::string> names;
      for (const auto& s : data.samples) {
        if (s.masks.empty()) throw data_error(s.name + " has no mask");
        for (std::size_t j = 0; j < s.masks.size(); ++j) {
          heatmaps.push_back(compute_heatmap(model, s.image, s.labels[j], method, opts));
          masks.push_back(s.masks[j]);
          names.push_back(s.masks.size() == 1 ? s.name : s.name + ":" + std::to_string(s.labels[j]));
        }
      }
      const SegReport report = segmentation_eval(heatmaps, masks, polarity(method), names);
      nlohmann::json doc = to_json(report);
      doc["method"] = seg_flags.method;
      write_text(out_json, doc.dump(1) + "\n");
      std::cout << nlohmann::json{{"pixel_accuracy", report.pixel_accuracy}, {"mean_average_precision", report.mean_ap}}
                       .dump()
                << "\n";
    } else if (*ssl_cmd) {
      if (out_pgm.empty() && out_raw.empty()) throw CLI::ValidationError("ssl-explain", "give --out and/or --raw");
      const Model features = load_modelpack(features_path);
      const Model head = load_modelpack(head_path);
      const SslGallery gallery = load_gallery(gallery_path);
      const LatentFusion f = fusion == "sum"    ? LatentFusion::sum
                             : fusion == "none" ? LatentFusion::none
                                                : LatentFusion::difference;
      const auto result = ssl_explain(features, head, read_pnm(image_path), gallery, parse_agf_config(ssl_flags), f);
      write_heatmaps(result.explanation.heatmap, out_pgm, out_raw);
      nlohmann::json summary{{"class", result.target}, {"fusion", fusion}};
      if (f != LatentFusion::none) summary["neighbor"] = gallery.entries[result.neighbor].id;
      std::cout << summary.dump() << "\n";
    } else if (*self_cmd) {
      bool all = true;
      for (const auto& c : selftest::run_all(fixture_dir)) {
        std::cout << (c.passed ? "ok   " : "FAIL ") << c.name << ": " << c.detail << "\n";
        all = all && c.passed;
      }
      return all ? kOk : kNumericError;
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const degenerate_input_error& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumericError;
  } catch (const error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  }
  return kOk;
}
