#pragma once

// ModelPack: portable container for sequential CNNs.
//
//   offset  size  field
//   0       4     magic "NNPK"
//   4       4     format version (u32 LE) = 1
//   8       8     manifest length in bytes (u64 LE)
//   16      M     UTF-8 JSON manifest
//   16+M    ...   buffer region: row-major float32 LE tensors
//
// Manifest:
//   {
//     "class_count": 4,
//     "input_shape": [3, 32, 32],
//     "preprocessing": {"mean": [...], "std": [...]},      // optional
//     "layers": [
//       {"kind": "conv2d", "stride": 1, "padding": 1,
//        "weight": {"shape": [8, 3, 3, 3], "offset": 0, "length": 864},
//        "bias":   {"shape": [8], "offset": 864, "length": 32}},
//       {"kind": "relu"},
//       {"kind": "maxpool2d", "kernel": 2, "stride": 2},
//       {"kind": "flatten"},
//       {"kind": "linear", "weight": {...}, "bias": {...}}
//     ]
//   }
//
// Offsets and lengths are in bytes, relative to the start of the buffer region.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "agf/core.hpp"
#include "agf/model.hpp"
#include "json.hpp"

namespace agf {

inline constexpr std::array<char, 4> kModelPackMagic{'N', 'N', 'P', 'K'};
inline constexpr std::uint32_t kModelPackVersion = 1;

enum class LoadErrorKind {
  io,
  bad_magic,
  version_mismatch,
  manifest,
  buffer_length,
  shape_mismatch,
  non_finite,
  unsupported_topology,
};

inline const char* to_string(LoadErrorKind kind) {
  switch (kind) {
    case LoadErrorKind::io: return "io";
    case LoadErrorKind::bad_magic: return "bad magic";
    case LoadErrorKind::version_mismatch: return "version mismatch";
    case LoadErrorKind::manifest: return "manifest";
    case LoadErrorKind::buffer_length: return "buffer length";
    case LoadErrorKind::shape_mismatch: return "shape mismatch";
    case LoadErrorKind::non_finite: return "non-finite weight";
    case LoadErrorKind::unsupported_topology: return "unsupported topology";
  }
  return "unknown";
}

class load_error : public error {
 public:
  load_error(LoadErrorKind kind, const std::string& what)
      : error(std::string("modelpack ") + agf::to_string(kind) + ": " + what), kind_(kind) {}

  LoadErrorKind kind() const noexcept { return kind_; }

 private:
  LoadErrorKind kind_;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "ModelPack I/O assumes a little-endian host");

template <typename T>
T read_le(std::span<const std::uint8_t> bytes, std::size_t offset) {
  T v;
  std::memcpy(&v, bytes.data() + offset, sizeof(T));
  return v;
}

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

inline Tensor read_param(const nlohmann::json& desc, std::span<const std::uint8_t> buffers,
                         const std::string& where) {
  if (!desc.is_object() || !desc.contains("shape") || !desc.contains("offset") || !desc.contains("length"))
    throw load_error(LoadErrorKind::manifest, where + ": parameter needs shape/offset/length");
  Shape shape;
  std::uint64_t offset = 0, length = 0;
  try {
    shape = desc.at("shape").get<Shape>();
    offset = desc.at("offset").get<std::uint64_t>();
    length = desc.at("length").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw load_error(LoadErrorKind::manifest, where + ": " + e.what());
  }
  for (auto d : shape)
    if (d == 0) throw load_error(LoadErrorKind::shape_mismatch, where + ": zero dimension");
  if (length != volume(shape) * sizeof(float))
    throw load_error(LoadErrorKind::shape_mismatch,
                     where + ": shape " + agf::to_string(shape) + " needs " +
                         std::to_string(volume(shape) * sizeof(float)) + " bytes, manifest declares " +
                         std::to_string(length));
  if (offset > buffers.size() || length > buffers.size() - offset)
    throw load_error(LoadErrorKind::buffer_length,
                     where + ": bytes [" + std::to_string(offset) + ", " + std::to_string(offset + length) +
                         ") exceed buffer region of " + std::to_string(buffers.size()));
  std::vector<double> data(volume(shape));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const float f = read_le<float>(buffers, offset + i * sizeof(float));
    if (!std::isfinite(f)) throw load_error(LoadErrorKind::non_finite, where + " element " + std::to_string(i));
    data[i] = static_cast<double>(f);
  }
  return Tensor(std::move(shape), std::move(data));
}

inline std::size_t get_size(const nlohmann::json& j, const char* key, std::size_t fallback,
                            const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw load_error(LoadErrorKind::manifest, where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline Model parse_modelpack(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t header = 16;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kModelPackMagic.data(), 4) != 0) {
    if (bytes.size() < 4) throw load_error(LoadErrorKind::buffer_length, "file shorter than magic");
    throw load_error(LoadErrorKind::bad_magic, "expected \"NNPK\"");
  }
  if (bytes.size() < header) throw load_error(LoadErrorKind::buffer_length, "truncated header");
  const auto version = detail::read_le<std::uint32_t>(bytes, 4);
  if (version != kModelPackVersion)
    throw load_error(LoadErrorKind::version_mismatch, "found version " + std::to_string(version) +
                                                          ", supported " + std::to_string(kModelPackVersion));
  const auto manifest_len = detail::read_le<std::uint64_t>(bytes, 8);
  if (manifest_len > bytes.size() - header)
    throw load_error(LoadErrorKind::buffer_length, "manifest extends past end of file");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + header, bytes.begin() + header + manifest_len);
  } catch (const nlohmann::json::exception& e) {
    throw load_error(LoadErrorKind::manifest, e.what());
  }
  const auto buffers = bytes.subspan(header + manifest_len);

  Model model;
  try {
    model.class_count = manifest.at("class_count").get<std::size_t>();
    model.input_shape = manifest.at("input_shape").get<Shape>();
    if (manifest.contains("preprocessing")) {
      const auto& pre = manifest.at("preprocessing");
      model.preprocessing.mean = pre.value("mean", std::vector<double>{});
      model.preprocessing.std = pre.value("std", std::vector<double>{});
    }
    if (!manifest.at("layers").is_array()) throw load_error(LoadErrorKind::manifest, "layers must be an array");
  } catch (const nlohmann::json::exception& e) {
    throw load_error(LoadErrorKind::manifest, e.what());
  }

  const auto& layers = manifest.at("layers");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& spec = layers[k];
    const std::string where = "layers[" + std::to_string(k) + "]";
    if (!spec.is_object() || !spec.contains("kind") || !spec.at("kind").is_string())
      throw load_error(LoadErrorKind::manifest, where + ": missing kind");
    const auto kind = spec.at("kind").get<std::string>();
    if (kind == "conv2d") {
      Conv2d c;
      c.weight = detail::read_param(spec.value("weight", nlohmann::json{}), buffers, where + ".weight");
      c.bias = detail::read_param(spec.value("bias", nlohmann::json{}), buffers, where + ".bias");
      c.stride = detail::get_size(spec, "stride", 1, where);
      c.padding = detail::get_size(spec, "padding", 0, where);
      model.layers.emplace_back(std::move(c));
    } else if (kind == "linear") {
      Linear l;
      l.weight = detail::read_param(spec.value("weight", nlohmann::json{}), buffers, where + ".weight");
      l.bias = detail::read_param(spec.value("bias", nlohmann::json{}), buffers, where + ".bias");
      model.layers.emplace_back(std::move(l));
    } else if (kind == "relu") {
      model.layers.emplace_back(Relu{});
    } else if (kind == "maxpool2d" || kind == "avgpool2d") {
      const auto kernel = detail::get_size(spec, "kernel", 2, where);
      const auto stride = detail::get_size(spec, "stride", kernel, where);
      if (kind == "maxpool2d")
        model.layers.emplace_back(MaxPool2d{kernel, stride});
      else
        model.layers.emplace_back(AvgPool2d{kernel, stride});
    } else if (kind == "flatten") {
      model.layers.emplace_back(Flatten{});
    } else if (kind == "batchnorm" || kind == "batchnorm2d" || kind == "add" || kind == "residual" ||
               kind == "skip") {
      throw load_error(LoadErrorKind::unsupported_topology,
                       where + ": '" + kind + "' is not supported; only sequential conv/linear chains are");
    } else {
      throw load_error(LoadErrorKind::manifest, where + ": unknown layer kind '" + kind + "'");
    }
  }

  try {
    model.validate();
  } catch (const shape_error& e) {
    throw load_error(LoadErrorKind::shape_mismatch, e.what());
  }
  for (double v : model.preprocessing.mean)
    if (!std::isfinite(v)) throw load_error(LoadErrorKind::non_finite, "preprocessing mean");
  return model;
}

inline Model load_modelpack(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw load_error(LoadErrorKind::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_modelpack(bytes);
}

inline std::vector<std::uint8_t> serialize_modelpack(const Model& model) {
  model.validate();
  std::vector<std::uint8_t> buffers;
  auto put = [&](const Tensor& t) {
    nlohmann::json desc{{"shape", t.shape()}, {"offset", buffers.size()}, {"length", t.size() * sizeof(float)}};
    for (double v : t.values()) detail::append_le(buffers, static_cast<float>(v));
    return desc;
  };

  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : model.layers) {
    nlohmann::json spec{{"kind", kind_name(layer)}};
    if (const auto* c = std::get_if<Conv2d>(&layer)) {
      spec["stride"] = c->stride;
      spec["padding"] = c->padding;
      spec["weight"] = put(c->weight);
      spec["bias"] = put(c->bias);
    } else if (const auto* l = std::get_if<Linear>(&layer)) {
      spec["weight"] = put(l->weight);
      spec["bias"] = put(l->bias);
    } else if (const auto* m = std::get_if<MaxPool2d>(&layer)) {
      spec["kernel"] = m->kernel;
      spec["stride"] = m->stride;
    } else if (const auto* a = std::get_if<AvgPool2d>(&layer)) {
      spec["kernel"] = a->kernel;
      spec["stride"] = a->stride;
    }
    layers.push_back(std::move(spec));
  }
  nlohmann::json manifest{{"class_count", model.class_count},
                          {"input_shape", model.input_shape},
                          {"layers", std::move(layers)}};
  if (!model.preprocessing.is_identity()) {
    manifest["preprocessing"] = {{"mean", model.preprocessing.mean}, {"std", model.preprocessing.std}};
  }
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out(kModelPackMagic.begin(), kModelPackMagic.end());
  detail::append_le(out, kModelPackVersion);
  detail::append_le(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), buffers.begin(), buffers.end());
  return out;
}

inline void save_modelpack(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize_modelpack(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw load_error(LoadErrorKind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw load_error(LoadErrorKind::io, "short write to " + path.string());
}

}  // namespace agf
