#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "fedsparse/dataset.hpp"
#include "fedsparse/detector.hpp"

namespace fedsparse {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// "FWM1", u32 tensor count, then per tensor: u32 rank, u32 dims, float32 values.
/// Tensors follow `ModelParams::all_tensors()` order, running statistics included.
inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  const auto tensors = model.all_tensors();
  os.write("FWM1", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const Tensor* t : tensors) {
    detail::put_u32(os, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (double v : t->data()) detail::put_f32(os, v);
  }
  if (!os) throw CheckpointError("write failed for " + path.string());
}

/// Reads a checkpoint into a model built from `config`; every shape must match.
inline ModelParams load_checkpoint(const std::filesystem::path& path, const DetectorConfig& config) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FWM1", 4) != 0) {
    throw CheckpointError(path.string() + " is not an FWM1 checkpoint");
  }
  ModelParams model = build_model(config, 0);
  auto tensors = model.all_tensors();
  const std::string what = "checkpoint " + path.string();
  try {
    const std::uint32_t count = detail::get_u32(is, what);
    if (count != tensors.size()) {
      throw CheckpointError(what + " holds " + std::to_string(count) + " tensors, model expects " +
                            std::to_string(tensors.size()));
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const std::uint32_t rank = detail::get_u32(is, what);
      Shape shape;
      for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(detail::get_u32(is, what));
      if (shape != tensors[i]->shape()) {
        throw CheckpointError(what + ": tensor " + std::to_string(i) + " has shape " + to_string(shape) +
                              ", model expects " + to_string(tensors[i]->shape()));
      }
      for (double& v : tensors[i]->data()) v = detail::get_f32(is, what);
    }
  } catch (const DatasetError& e) {
    throw CheckpointError(e.what());
  }
  return model;
}

}  // namespace fedsparse
