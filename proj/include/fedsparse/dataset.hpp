#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedsparse/box.hpp"
#include "fedsparse/detector.hpp"
#include "fedsparse/tensor.hpp"

namespace fedsparse {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ShapeClass : int { Circle = 0, Square = 1, Triangle = 2 };
inline constexpr std::size_t kShapeClassCount = 3;

struct SceneSpec {
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  std::size_t grid_size = 4;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  double min_size = 0.2;  // object side as a fraction of the shorter image side
  double max_size = 0.4;
  double noise = 0.1;
  std::uint64_t seed = 1;
};

struct AnnotatedObject {
  int class_id = 0;
  Box box;  // pixels, x_max / y_max exclusive
};

struct Annotation {
  std::vector<AnnotatedObject> objects;
};

struct Sample {
  Tensor image;  // [3, H, W], values in [0, 1]
  Annotation annotation;
};

/// SplitMix64 finaliser; used to derive independent streams from a base seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  return mix_seed(mix_seed(mix_seed(base) ^ a) ^ (b * 0xd6e8feb86659fd93ULL));
}

namespace detail {

inline constexpr std::array<std::array<double, 3>, kShapeClassCount> kClassColour{{
    {0.95, 0.25, 0.20},
    {0.20, 0.85, 0.30},
    {0.25, 0.35, 0.95},
}};

inline constexpr double kBackground = 0.15;

/// Rasterises one shape of side `side` with top-left corner (x0, y0); returns per-pixel coverage.
inline std::vector<std::uint8_t> rasterise(ShapeClass cls, std::size_t h, std::size_t w, std::size_t x0,
                                           std::size_t y0, std::size_t side) {
  std::vector<std::uint8_t> mask(h * w, 0);
  const double s = static_cast<double>(side);
  const double cx = static_cast<double>(x0) + s / 2.0;
  const double cy = static_cast<double>(y0) + s / 2.0;
  for (std::size_t i = y0; i < y0 + side; ++i) {
    for (std::size_t j = x0; j < x0 + side; ++j) {
      const double px = static_cast<double>(j) + 0.5;
      const double py = static_cast<double>(i) + 0.5;
      bool inside = false;
      switch (cls) {
        case ShapeClass::Square:
          inside = true;
          break;
        case ShapeClass::Circle:
          inside = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= (s / 2.0) * (s / 2.0);
          break;
        case ShapeClass::Triangle:
          inside = std::abs(px - cx) <= (py - static_cast<double>(y0)) / 2.0;
          break;
      }
      if (inside) mask[i * w + j] = 1;
    }
  }
  return mask;
}

inline Box mask_extent(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w) {
  std::size_t x_min = w, y_min = h, x_max = 0, y_max = 0;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      if (!mask[i * w + j]) continue;
      x_min = std::min(x_min, j);
      y_min = std::min(y_min, i);
      x_max = std::max(x_max, j + 1);
      y_max = std::max(y_max, i + 1);
    }
  }
  return Box{static_cast<double>(x_min), static_cast<double>(y_min), static_cast<double>(x_max),
             static_cast<double>(y_max)};
}

inline std::pair<std::size_t, std::size_t> centre_cell(const Box& box, std::size_t grid, double img_h, double img_w) {
  const double cx = (box.x_min + box.x_max) / 2.0;
  const double cy = (box.y_min + box.y_max) / 2.0;
  const double g = static_cast<double>(grid);
  const auto col = std::min(static_cast<std::size_t>(std::max(0.0, std::floor(cx * g / img_w))), grid - 1);
  const auto row = std::min(static_cast<std::size_t>(std::max(0.0, std::floor(cy * g / img_h))), grid - 1);
  return {row, col};
}

inline Sample generate_one(const SceneSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t h = spec.image_height, w = spec.image_width;
  Sample sample;
  sample.image = Tensor(Shape{3, h, w});
  for (double& v : sample.image.data()) v = std::clamp(kBackground + spec.noise * (unit(rng) - 0.5), 0.0, 1.0);

  std::uniform_int_distribution<std::size_t> count_dist(spec.min_objects, spec.max_objects);
  const std::size_t count = count_dist(rng);
  std::vector<std::uint8_t> used_cells(spec.grid_size * spec.grid_size, 0);
  const double shorter = static_cast<double>(std::min(h, w));
  for (std::size_t obj = 0; obj < count; ++obj) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      const auto cls = static_cast<ShapeClass>(static_cast<int>(unit(rng) * kShapeClassCount) % 3);
      const double frac = spec.min_size + (spec.max_size - spec.min_size) * unit(rng);
      const auto side = std::max<std::size_t>(3, static_cast<std::size_t>(std::lround(frac * shorter)));
      if (side > h || side > w) continue;
      std::uniform_int_distribution<std::size_t> xd(0, w - side), yd(0, h - side);
      const std::size_t x0 = xd(rng), y0 = yd(rng);
      auto mask = rasterise(cls, h, w, x0, y0, side);
      const Box box = mask_extent(mask, h, w);
      const auto [row, col] = centre_cell(box, spec.grid_size, static_cast<double>(h), static_cast<double>(w));
      if (used_cells[row * spec.grid_size + col]) continue;
      const bool overlaps = std::any_of(sample.annotation.objects.begin(), sample.annotation.objects.end(),
                                        [&](const AnnotatedObject& o) {
                                          return std::min(o.box.x_max, box.x_max) > std::max(o.box.x_min, box.x_min) &&
                                                 std::min(o.box.y_max, box.y_max) > std::max(o.box.y_min, box.y_min);
                                        });
      if (overlaps) continue;
      used_cells[row * spec.grid_size + col] = 1;
      const auto& colour = kClassColour[static_cast<std::size_t>(cls)];
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < h * w; ++i) {
          if (!mask[i]) continue;
          sample.image[c * h * w + i] = std::clamp(colour[c] + spec.noise * (unit(rng) - 0.5), 0.0, 1.0);
        }
      }
      sample.annotation.objects.push_back({static_cast<int>(cls), box});
      placed = true;
    }
    if (!placed) throw DatasetError("could not place object " + std::to_string(obj) + " without overlap");
  }
  return sample;
}

}  // namespace detail

inline void validate(const SceneSpec& spec) {
  if (spec.image_height < 4 || spec.image_width < 4) throw DatasetError("image must be at least 4x4");
  if (spec.grid_size < 1) throw DatasetError("grid size must be >= 1");
  if (spec.min_objects < 1 || spec.min_objects > spec.max_objects) {
    throw DatasetError("object count range must satisfy 1 <= min <= max");
  }
  if (spec.max_objects > spec.grid_size * spec.grid_size) {
    throw DatasetError("up to " + std::to_string(spec.max_objects) + " objects cannot occupy distinct cells of a " +
                       std::to_string(spec.grid_size) + "x" + std::to_string(spec.grid_size) + " grid");
  }
  if (!(spec.min_size > 0.0 && spec.min_size <= spec.max_size && spec.max_size <= 1.0)) {
    throw DatasetError("object size range must satisfy 0 < min <= max <= 1");
  }
  if (spec.noise < 0.0) throw DatasetError("noise amplitude must be non-negative");
}

/// Deterministic synthetic scenes of filled circles, squares and triangles. Every
/// object centre lies in its own grid cell and boxes never overlap.
inline std::vector<Sample> generate(const SceneSpec& spec, std::size_t count) {
  if (count < 1) throw DatasetError("image count must be >= 1");
  validate(spec);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(detail::generate_one(spec, derive_seed(spec.seed, i)));
  return out;
}

/// Equal-size disjoint random subsets of [0, item_count); the remainder stays unassigned.
template <class Rng>
std::vector<std::vector<std::size_t>> partition_dataset(std::size_t item_count, std::size_t num_clients, Rng& rng) {
  if (num_clients < 1) throw DatasetError("partition_dataset needs at least one client");
  if (item_count < num_clients) {
    throw DatasetError("cannot split " + std::to_string(item_count) + " images across " +
                       std::to_string(num_clients) + " clients");
  }
  std::vector<std::size_t> order(item_count);
  for (std::size_t i = 0; i < item_count; ++i) order[i] = i;
  for (std::size_t i = item_count - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  const std::size_t per = item_count / num_clients;
  std::vector<std::vector<std::size_t>> parts(num_clients);
  for (std::size_t k = 0; k < num_clients; ++k) {
    parts[k].assign(order.begin() + static_cast<std::ptrdiff_t>(k * per),
                    order.begin() + static_cast<std::ptrdiff_t>((k + 1) * per));
  }
  return parts;
}

inline GridTarget encode_grid_target(const Annotation& ann, std::size_t grid, std::size_t img_h, std::size_t img_w,
                                     std::size_t num_classes) {
  GridTarget target(grid, num_classes);
  const double h = static_cast<double>(img_h), w = static_cast<double>(img_w), g = static_cast<double>(grid);
  for (const auto& obj : ann.objects) {
    if (obj.class_id < 0 || static_cast<std::size_t>(obj.class_id) >= num_classes) {
      throw DatasetError("class id " + std::to_string(obj.class_id) + " out of range");
    }
    const auto [row, col] = detail::centre_cell(obj.box, grid, h, w);
    CellTarget& cell = target.cell(row, col);
    if (cell.has_object) {
      throw DatasetError("two object centres fall in cell (" + std::to_string(row) + "," + std::to_string(col) + ")");
    }
    cell.has_object = true;
    cell.x = (obj.box.x_min + obj.box.x_max) / 2.0 * g / w - static_cast<double>(col);
    cell.y = (obj.box.y_min + obj.box.y_max) / 2.0 * g / h - static_cast<double>(row);
    cell.w = obj.box.width() / w;
    cell.h = obj.box.height() / h;
    cell.class_onehot.assign(num_classes, 0.0);
    cell.class_onehot[static_cast<std::size_t>(obj.class_id)] = 1.0;
  }
  return target;
}

/// A sample paired with its grid target, ready for training or evaluation.
struct TrainingExample {
  Tensor image;
  Annotation annotation;
  GridTarget target;
};

inline std::vector<TrainingExample> make_examples(const std::vector<Sample>& samples, const DetectorConfig& cfg) {
  std::vector<TrainingExample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.image.shape() != Shape{cfg.input_channels, cfg.input_height, cfg.input_width}) {
      throw DatasetError("image " + to_string(s.image.shape()) + " does not match detector input");
    }
    out.push_back({s.image, s.annotation,
                   encode_grid_target(s.annotation, cfg.grid_size, cfg.input_height, cfg.input_width, cfg.num_classes)});
  }
  return out;
}

/// Stacks the selected images into an [N, C, H, W] batch.
inline Tensor make_batch(const std::vector<TrainingExample>& examples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DatasetError("empty batch");
  const Shape& one = examples.at(indices[0]).image.shape();
  Tensor batch(Shape{indices.size(), one[0], one[1], one[2]});
  const std::size_t stride = examples.at(indices[0]).image.size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = examples.at(indices[i]).image.data();
    std::copy(src.begin(), src.end(), batch.data().begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// On-disk formats

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(bytes, 4);
}

inline void put_f32(std::ostream& os, double v) { put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

inline std::uint32_t get_u32(std::istream& is, const std::string& what) {
  unsigned char bytes[4];
  if (!is.read(reinterpret_cast<char*>(bytes), 4)) throw DatasetError("truncated " + what);
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

inline double get_f32(std::istream& is, const std::string& what) {
  return static_cast<double>(std::bit_cast<float>(get_u32(is, what)));
}

}  // namespace detail

/// "FDS1", u32 count, channels, height, width, then float32 pixels (little endian).
inline void write_images(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  if (samples.empty()) throw DatasetError("no images to write");
  const Shape& shape = samples.front().image.shape();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DatasetError("cannot open " + path.string() + " for writing");
  os.write("FDS1", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(samples.size()));
  for (std::size_t d : shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (const auto& s : samples) {
    if (s.image.shape() != shape) throw DatasetError("images have inconsistent shapes");
    for (double v : s.image.data()) detail::put_f32(os, v);
  }
  if (!os) throw DatasetError("write failed for " + path.string());
}

inline std::vector<Tensor> read_images(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FDS1", 4) != 0) {
    throw DatasetError(path.string() + " is not an FDS1 image file");
  }
  const std::string what = "image file " + path.string();
  const std::uint32_t count = detail::get_u32(is, what);
  const Shape shape{detail::get_u32(is, what), detail::get_u32(is, what), detail::get_u32(is, what)};
  if (count == 0 || element_count(shape) == 0) throw DatasetError(what + " has zero-sized header");
  std::vector<Tensor> images;
  images.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t(shape);
    for (double& v : t.data()) v = detail::get_f32(is, what);
    images.push_back(std::move(t));
  }
  return images;
}

inline nlohmann::json annotations_to_json(const std::vector<Sample>& samples) {
  nlohmann::json doc = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    nlohmann::json objects = nlohmann::json::array();
    for (const auto& o : samples[i].annotation.objects) {
      objects.push_back({{"class", o.class_id}, {"box", {o.box.x_min, o.box.y_min, o.box.x_max, o.box.y_max}}});
    }
    doc.push_back({{"image_index", i}, {"objects", objects}});
  }
  return doc;
}

inline void write_annotations(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::ofstream os(path);
  if (!os) throw DatasetError("cannot open " + path.string() + " for writing");
  os << annotations_to_json(samples).dump(1) << '\n';
}

inline std::vector<Annotation> read_annotations(const std::filesystem::path& path, std::size_t image_count) {
  std::ifstream is(path);
  if (!is) throw DatasetError("cannot open " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("malformed annotation file " + path.string() + ": " + e.what());
  }
  if (!doc.is_array()) throw DatasetError("annotation file must hold a JSON array");
  std::vector<Annotation> out(image_count);
  for (const auto& rec : doc) {
    const auto idx = rec.at("image_index").get<std::size_t>();
    if (idx >= image_count) throw DatasetError("annotation refers to missing image " + std::to_string(idx));
    for (const auto& o : rec.at("objects")) {
      const auto b = o.at("box").get<std::vector<double>>();
      if (b.size() != 4) throw DatasetError("box must have four coordinates");
      AnnotatedObject obj{o.at("class").get<int>(), Box{b[0], b[1], b[2], b[3]}};
      if (!(obj.box.x_min < obj.box.x_max && obj.box.y_min < obj.box.y_max)) {
        throw DatasetError("degenerate box in annotation for image " + std::to_string(idx));
      }
      out[idx].objects.push_back(obj);
    }
  }
  return out;
}

inline void write_split(const std::filesystem::path& dir, const std::string& split, const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir);
  write_images(dir / (split + "_images.fds"), samples);
  write_annotations(dir / (split + "_annotations.json"), samples);
}

inline std::vector<Sample> read_split(const std::filesystem::path& dir, const std::string& split) {
  auto images = read_images(dir / (split + "_images.fds"));
  auto anns = read_annotations(dir / (split + "_annotations.json"), images.size());
  std::vector<Sample> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) out.push_back({std::move(images[i]), std::move(anns[i])});
  return out;
}

}  // namespace fedsparse
