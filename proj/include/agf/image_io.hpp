#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "agf/core.hpp"

namespace agf {

// ---------------------------------------------------------------------------
// Binary PNM (P5 grayscale / P6 RGB, maxval <= 255)
// ---------------------------------------------------------------------------

/// Reads a PGM/PPM into a C×H×W tensor with values in [0, 1].
inline Tensor read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok.push_back(static_cast<char>(bytes[pos++]));
    return tok;
  };

  const std::string magic = next_token();
  std::size_t channels = 0;
  if (magic == "P5")
    channels = 1;
  else if (magic == "P6")
    channels = 3;
  else
    throw data_error(path.string() + ": not a binary PGM/PPM");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(next_token());
    h = std::stoul(next_token());
    maxval = std::stoul(next_token());
  } catch (const std::exception&) {
    throw data_error(path.string() + ": malformed header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw data_error(path.string() + ": unsupported header");
  ++pos;  // single whitespace after maxval
  if (bytes.size() < pos + w * h * channels) throw data_error(path.string() + ": truncated pixel data");

  Tensor img({channels, h, w});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t k = 0; k < channels; ++k)
        img.at(k, r, c) = static_cast<double>(bytes[pos + (r * w + c) * channels + k]) / static_cast<double>(maxval);
  return img;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

/// Writes a 1- or 3-channel tensor with values in [0, 1] as PGM/PPM.
inline void write_pnm(const Tensor& img, const std::filesystem::path& path) {
  if (img.rank() != 3 || (img.shape()[0] != 1 && img.shape()[0] != 3))
    throw shape_error("write_pnm expects a 1×H×W or 3×H×W tensor");
  const std::size_t channels = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write image " + path.string());
  out << (channels == 1 ? "P5" : "P6") << '\n' << w << ' ' << h << "\n255\n";
  std::vector<std::uint8_t> pixels(h * w * channels);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t k = 0; k < channels; ++k) pixels[(r * w + c) * channels + k] = to_byte(img.at(k, r, c));
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw data_error("short write to " + path.string());
}

/// Loads a PGM mask as an H×W map of 0/1 (non-zero pixels are foreground).
inline Tensor read_mask(const std::filesystem::path& path) {
  const Tensor img = read_pnm(path);
  if (img.shape()[0] != 1) throw data_error(path.string() + ": mask must be a grayscale PGM");
  Tensor mask({img.shape()[1], img.shape()[2]});
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = img[i] > 0.0 ? 1.0 : 0.0;
  return mask;
}

// ---------------------------------------------------------------------------
// Heatmap rendering
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kHeatmapMagic{'H', 'M', 'A', 'P'};

/// Raw heatmap: "HMAP", u32 H, u32 W, H·W float32, all little-endian.
inline void write_heatmap_raw(const Tensor& hm, const std::filesystem::path& path) {
  if (hm.rank() != 2) throw shape_error("heatmap must be H×W");
  if (!all_finite(hm)) throw degenerate_input_error("heatmap contains non-finite values");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write heatmap " + path.string());
  const auto h = static_cast<std::uint32_t>(hm.shape()[0]);
  const auto w = static_cast<std::uint32_t>(hm.shape()[1]);
  out.write(kHeatmapMagic.data(), 4);
  out.write(reinterpret_cast<const char*>(&h), 4);
  out.write(reinterpret_cast<const char*>(&w), 4);
  for (double v : hm.values()) {
    const auto f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), 4);
  }
  if (!out) throw data_error("short write to " + path.string());
}

inline Tensor read_heatmap_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open heatmap " + path.string());
  std::array<char, 4> magic{};
  std::uint32_t h = 0, w = 0;
  in.read(magic.data(), 4);
  in.read(reinterpret_cast<char*>(&h), 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  if (!in || magic != kHeatmapMagic || h == 0 || w == 0) throw data_error(path.string() + ": not a raw heatmap");
  Tensor hm({h, w});
  for (double& v : hm.values()) {
    float f = 0.0f;
    in.read(reinterpret_cast<char*>(&f), 4);
    v = f;
  }
  if (!in) throw data_error(path.string() + ": truncated heatmap");
  return hm;
}

/// Gray level for a signed value: 0 → 128, +max|v| → 255, -max|v| → 0.
inline std::uint8_t heatmap_gray(double v, double max_abs_value) {
  if (max_abs_value == 0.0) return 128;
  const double level = 127.5 * (v / max_abs_value + 1.0);
  return static_cast<std::uint8_t>(std::clamp(std::lround(level), 0L, 255L));
}

inline void write_heatmap_pgm(const Tensor& hm, const std::filesystem::path& path) {
  if (hm.rank() != 2) throw shape_error("heatmap must be H×W");
  if (!all_finite(hm)) throw degenerate_input_error("heatmap contains non-finite values");
  const double m = max_abs(hm);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write heatmap " + path.string());
  out << "P5\n" << hm.shape()[1] << ' ' << hm.shape()[0] << "\n255\n";
  std::vector<std::uint8_t> pixels(hm.size());
  for (std::size_t i = 0; i < hm.size(); ++i) pixels[i] = heatmap_gray(hm[i], m);
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw data_error("short write to " + path.string());
}

// ---------------------------------------------------------------------------
// Labelled image directories
//
//   DIR/images/<name>.ppm|.pgm
//   DIR/labels.csv           <name>,<label>[,<label>...]   (header optional)
//   DIR/masks/<stem>.pgm     mask of the first label, or
//   DIR/masks/<stem>_<label>.pgm   one mask per label
// ---------------------------------------------------------------------------

struct Sample {
  std::string name;
  Tensor image;                      // C×H×W in [0, 1]
  std::vector<std::size_t> labels;   // first entry is the primary label
  std::vector<Tensor> masks;         // parallel to labels; empty when absent
};

struct Dataset {
  std::vector<Sample> samples;
  bool has_masks() const {
    return !samples.empty() && std::all_of(samples.begin(), samples.end(), [](const Sample& s) {
      return !s.masks.empty();
    });
  }
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
  }
  return out;
}

inline bool parse_label(const std::string& s, std::size_t& out) {
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); })) return false;
  out = std::stoul(s);
  return true;
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path labels_path = dir / "labels.csv";
  std::ifstream in(labels_path);
  if (!in) throw data_error("missing " + labels_path.string());

  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv(line);
    Sample s;
    s.name = cells.empty() ? std::string{} : cells[0];
    bool ok = cells.size() >= 2 && !s.name.empty();
    for (std::size_t i = 1; ok && i < cells.size(); ++i) {
      std::size_t label = 0;
      ok = detail::parse_label(cells[i], label);
      if (ok) s.labels.push_back(label);
    }
    if (!ok) {
      if (line_no == 1) continue;  // header row
      throw data_error(labels_path.string() + ":" + std::to_string(line_no) + ": expected name,label[,label...]");
    }
    s.image = read_pnm(dir / "images" / s.name);
    const std::string stem = fs::path(s.name).stem().string();
    std::vector<Tensor> masks;
    for (std::size_t label : s.labels) {
      const fs::path per_label = dir / "masks" / (stem + "_" + std::to_string(label) + ".pgm");
      if (fs::exists(per_label)) masks.push_back(read_mask(per_label));
    }
    if (masks.size() != s.labels.size()) {
      masks.clear();
      const fs::path single = dir / "masks" / (stem + ".pgm");
      if (fs::exists(single)) masks.push_back(read_mask(single));
    }
    for (const auto& m : masks)
      if (m.shape()[0] != s.image.shape()[1] || m.shape()[1] != s.image.shape()[2])
        throw data_error("mask for " + s.name + " does not match the image size");
    s.masks = std::move(masks);
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw data_error(labels_path.string() + " lists no images");
  return ds;
}

}  // namespace agf
