#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsparse/autodiff.hpp"
#include "fedsparse/box.hpp"
#include "fedsparse/tensor.hpp"

namespace fedsparse {

class ModelBuildError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DetectorConfig {
  std::size_t grid_size = 4;
  std::size_t boxes_per_cell = 2;
  std::size_t num_classes = 3;
  std::vector<std::size_t> channel_widths{16, 32, 64, 64};
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  std::size_t input_channels = 3;

  /// Values per cell: B boxes of (x, y, w, h, C) followed by class probabilities.
  std::size_t cell_depth() const { return boxes_per_cell * 5 + num_classes; }

  /// Throws ModelBuildError naming the first block whose output cannot be pooled,
  /// or reporting a final spatial size that differs from the grid.
  void validate() const {
    if (grid_size < 1 || boxes_per_cell < 1 || num_classes < 1) {
      throw ModelBuildError("grid size, boxes per cell and class count must all be >= 1");
    }
    if (channel_widths.empty()) throw ModelBuildError("at least one conv block is required");
    if (input_channels < 1) throw ModelBuildError("input must have at least one channel");
    std::size_t h = input_height;
    std::size_t w = input_width;
    for (std::size_t b = 0; b < channel_widths.size(); ++b) {
      if (channel_widths[b] < 1) {
        throw ModelBuildError("block " + std::to_string(b) + ": channel width must be >= 1");
      }
      if (h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0) {
        throw ModelBuildError("block " + std::to_string(b) + ": input " + std::to_string(h) + "x" +
                              std::to_string(w) + " cannot be max-pooled by 2");
      }
      h /= 2;
      w /= 2;
    }
    if (h != grid_size || w != grid_size) {
      throw ModelBuildError("block " + std::to_string(channel_widths.size() - 1) + ": output " +
                            std::to_string(h) + "x" + std::to_string(w) + " does not match grid " +
                            std::to_string(grid_size) + "x" + std::to_string(grid_size));
    }
  }
};

/// conv3x3 (no bias) -> batch norm -> leaky ReLU -> 2x2 max pool.
struct ConvBlock {
  Tensor kernel;
  BatchNormLayer bn;
};

struct ModelParams {
  DetectorConfig config;
  std::vector<ConvBlock> blocks;
  Tensor head_kernel;  // [cell_depth, last width, 1, 1]
  Tensor head_bias;    // [cell_depth]

  /// Trainable tensors in canonical order: per block kernel, gamma, beta; then head kernel and bias.
  std::vector<Tensor*> trainable() {
    std::vector<Tensor*> out;
    for (auto& b : blocks) {
      out.push_back(&b.kernel);
      out.push_back(&b.bn.gamma);
      out.push_back(&b.bn.beta);
    }
    out.push_back(&head_kernel);
    out.push_back(&head_bias);
    return out;
  }

  std::vector<const Tensor*> trainable() const {
    std::vector<const Tensor*> out;
    for (const auto* t : const_cast<ModelParams*>(this)->trainable()) out.push_back(t);
    return out;
  }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> names;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      names.push_back(p + "kernel");
      names.push_back(p + "gamma");
      names.push_back(p + "beta");
    }
    names.push_back("head.kernel");
    names.push_back("head.bias");
    return names;
  }

  /// Every stored tensor (trainable and running statistics), in checkpoint order.
  std::vector<Tensor*> all_tensors() {
    std::vector<Tensor*> out;
    for (auto& b : blocks) {
      out.insert(out.end(), {&b.kernel, &b.bn.gamma, &b.bn.beta, &b.bn.running_mean, &b.bn.running_var});
    }
    out.push_back(&head_kernel);
    out.push_back(&head_bias);
    return out;
  }

  std::vector<const Tensor*> all_tensors() const {
    std::vector<const Tensor*> out;
    for (const auto* t : const_cast<ModelParams*>(this)->all_tensors()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor* t : trainable()) n += t->size();
    return n;
  }

  void clear_grads() {
    for (Tensor* t : trainable()) t->clear_grad();
  }
};

inline constexpr double kInitialGamma = 0.5;

/// He-normal conv kernels, gamma = 0.5, beta = 0, zero head bias. Deterministic in `seed`.
inline ModelParams build_model(const DetectorConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  auto he = [&rng](Shape shape, std::size_t fan_in) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (double& v : t.data()) v = dist(rng);
    return t;
  };
  ModelParams model;
  model.config = config;
  std::size_t in = config.input_channels;
  for (std::size_t width : config.channel_widths) {
    ConvBlock block;
    block.kernel = he(Shape{width, in, 3, 3}, in * 9);
    block.bn = BatchNormLayer(width, kInitialGamma);
    model.blocks.push_back(std::move(block));
    in = width;
  }
  model.head_kernel = he(Shape{config.cell_depth(), in, 1, 1}, in);
  model.head_bias = Tensor(Shape{config.cell_depth()}, 0.0);
  return model;
}

/// Records the detector on `tape`. Output is [N, S, S, cell_depth] with every
/// channel passed through a sigmoid, so w and h lie in (0, 1).
inline Var forward(Tape& tape, ModelParams& model, const Tensor& images, bool training) {
  const auto& cfg = model.config;
  if (images.rank() != 4 || images.dim(1) != cfg.input_channels || images.dim(2) != cfg.input_height ||
      images.dim(3) != cfg.input_width) {
    throw ShapeError("forward: images " + to_string(images.shape()) + " do not match model input [N," +
                     std::to_string(cfg.input_channels) + "," + std::to_string(cfg.input_height) + "," +
                     std::to_string(cfg.input_width) + "]");
  }
  Var x = tape.constant(images);
  for (auto& block : model.blocks) {
    x = conv2d(x, tape.parameter(block.kernel), 1, 1);
    x = batchnorm_forward(x, block.bn, training);
    x = leaky_relu(x);
    x = max_pool2d(x, 2, 2);
  }
  x = conv2d(x, tape.parameter(model.head_kernel), 1, 0);
  x = add_channel_bias(x, tape.parameter(model.head_bias));
  return sigmoid(nchw_to_nhwc(x));
}

/// Eval-mode forward pass without touching the caller's model.
inline Tensor predict(const ModelParams& model, const Tensor& images) {
  ModelParams copy = model;
  Tape tape;
  return forward(tape, copy, images, false).value();
}

// ---------------------------------------------------------------------------
// Targets and loss

struct CellTarget {
  bool has_object = false;
  double x = 0.0;  // cell-relative centre
  double y = 0.0;
  double w = 0.0;  // image-relative size
  double h = 0.0;
  std::vector<double> class_onehot;
};

struct GridTarget {
  std::size_t grid_size = 0;
  std::size_t num_classes = 0;
  std::vector<CellTarget> cells;  // row-major, grid_size * grid_size

  GridTarget() = default;
  GridTarget(std::size_t s, std::size_t classes)
      : grid_size(s), num_classes(classes), cells(s * s, CellTarget{false, 0, 0, 0, 0, std::vector<double>(classes, 0.0)}) {}

  CellTarget& cell(std::size_t row, std::size_t col) { return cells.at(row * grid_size + col); }
  const CellTarget& cell(std::size_t row, std::size_t col) const { return cells.at(row * grid_size + col); }
};

struct LossConfig {
  double lambda_coord = 5.0;
  double lambda_cls = 1.0;
  double lambda_conf = 1.0;
  double lambda_noobj = 0.5;
  /// Use IoU(pred, truth) instead of 1 as the confidence target of responsible boxes.
  bool iou_confidence_target = false;

  void validate() const {
    if (lambda_coord < 0 || lambda_cls < 0 || lambda_conf < 0 || lambda_noobj < 0) {
      throw std::invalid_argument("loss weights must be non-negative");
    }
  }
};

struct LossDiagnostics {
  std::size_t sqrt_clamps = 0;
  double coord = 0.0;
  double cls = 0.0;
  double conf = 0.0;
  double noobj = 0.0;
};

namespace detail {

inline Box cell_box(double x, double y, double w, double h, std::size_t row, std::size_t col, std::size_t s) {
  const double sd = static_cast<double>(s);
  return Box::from_center((static_cast<double>(col) + x) / sd, (static_cast<double>(row) + y) / sd, w, h);
}

inline constexpr double kLogFloor = 1e-12;

}  // namespace detail

/// Index of the box with the highest IoU against the cell's target; lowest index wins ties.
inline std::size_t responsible_box(std::span<const double> cell_pred, const CellTarget& target,
                                   std::size_t row, std::size_t col, std::size_t grid, std::size_t boxes) {
  const Box truth = detail::cell_box(target.x, target.y, target.w, target.h, row, col, grid);
  std::size_t best = 0;
  double best_iou = -1.0;
  for (std::size_t b = 0; b < boxes; ++b) {
    const double* p = cell_pred.data() + b * 5;
    const double v = iou(detail::cell_box(p[0], p[1], p[2], p[3], row, col, grid), truth);
    if (v > best_iou) {
      best_iou = v;
      best = b;
    }
  }
  return best;
}

/// Composite grid-detection loss, averaged over the batch:
/// coord (squared x, y and sqrt-w, sqrt-h errors of the responsible box),
/// class BCE and responsible-box confidence over object cells, plus a squared
/// confidence penalty on every non-responsible box weighted by lambda_noobj.
inline Var yolo_loss(Var pred, std::span<const GridTarget> targets, const LossConfig& cfg,
                     LossDiagnostics* diag = nullptr) {
  cfg.validate();
  const Tensor& p = pred.value();
  detail::require_rank("yolo_loss prediction", p, 4);
  const std::size_t n = p.dim(0), s = p.dim(1), depth = p.dim(3);
  if (p.dim(2) != s || targets.size() != n) {
    throw ShapeError("yolo_loss: prediction " + to_string(p.shape()) + " vs " + std::to_string(targets.size()) +
                     " targets");
  }
  const std::size_t classes = targets.empty() ? 0 : targets[0].num_classes;
  if (depth <= classes || (depth - classes) % 5 != 0) {
    throw ShapeError("yolo_loss: cell depth " + std::to_string(depth) + " incompatible with " +
                     std::to_string(classes) + " classes");
  }
  const std::size_t boxes = (depth - classes) / 5;
  for (const auto& t : targets) {
    if (t.grid_size != s || t.num_classes != classes) {
      throw ShapeError("yolo_loss: target grid does not match prediction " + to_string(p.shape()));
    }
  }

  auto dpred = std::make_shared<std::vector<double>>(p.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(n);
  double coord = 0.0, cls = 0.0, conf = 0.0, noobj = 0.0;
  std::size_t clamps = 0;
  auto& d = *dpred;

  for (std::size_t img = 0; img < n; ++img) {
    for (std::size_t row = 0; row < s; ++row) {
      for (std::size_t col = 0; col < s; ++col) {
        const std::size_t base = ((img * s + row) * s + col) * depth;
        const double* cp = p.data().data() + base;
        const CellTarget& t = targets[img].cell(row, col);
        std::size_t resp = boxes;  // none
        if (t.has_object) {
          resp = responsible_box(std::span<const double>(cp, depth), t, row, col, s, boxes);
          const std::size_t o = base + resp * 5;
          const double dx = p[o] - t.x;
          const double dy = p[o + 1] - t.y;
          coord += dx * dx + dy * dy;
          d[o] += cfg.lambda_coord * inv_n * 2.0 * dx;
          d[o + 1] += cfg.lambda_coord * inv_n * 2.0 * dy;
          const double truth_wh[2] = {t.w, t.h};
          for (std::size_t k = 0; k < 2; ++k) {
            double v = p[o + 2 + k];
            if (v < 0.0) {
              ++clamps;
              v = 0.0;
            }
            const double root = std::sqrt(v);
            const double diff = root - std::sqrt(std::max(truth_wh[k], 0.0));
            coord += diff * diff;
            if (root > 0.0) d[o + 2 + k] += cfg.lambda_coord * inv_n * diff / root;
          }
          double target_conf = 1.0;
          if (cfg.iou_confidence_target) {
            target_conf = iou(detail::cell_box(p[o], p[o + 1], p[o + 2], p[o + 3], row, col, s),
                              detail::cell_box(t.x, t.y, t.w, t.h, row, col, s));
          }
          const double dc = p[o + 4] - target_conf;
          conf += dc * dc;
          d[o + 4] += cfg.lambda_conf * inv_n * 2.0 * dc;
          for (std::size_t c = 0; c < classes; ++c) {
            const std::size_t idx = base + boxes * 5 + c;
            const double prob = p[idx];
            const double truth = t.class_onehot[c];
            double g = 0.0;
            if (truth > 0.0) {
              const double q = std::max(prob, detail::kLogFloor);
              cls -= truth * std::log(q);
              g -= truth / q;
            }
            if (truth < 1.0) {
              const double q = std::max(1.0 - prob, detail::kLogFloor);
              cls -= (1.0 - truth) * std::log(q);
              g += (1.0 - truth) / q;
            }
            d[idx] += cfg.lambda_cls * inv_n * g;
          }
        }
        for (std::size_t b = 0; b < boxes; ++b) {
          if (b == resp) continue;
          const std::size_t o = base + b * 5 + 4;
          noobj += p[o] * p[o];
          d[o] += cfg.lambda_noobj * inv_n * 2.0 * p[o];
        }
      }
    }
  }

  const double total =
      inv_n * (cfg.lambda_coord * coord + cfg.lambda_cls * cls + cfg.lambda_conf * conf + cfg.lambda_noobj * noobj);
  if (diag != nullptr) {
    diag->sqrt_clamps += clamps;
    diag->coord = coord * inv_n;
    diag->cls = cls * inv_n;
    diag->conf = conf * inv_n;
    diag->noobj = noobj * inv_n;
  }
  return pred.tape->record(Tensor::scalar(total), {pred}, [pred, dpred](Tape& tape, std::span<const double> g) {
    auto dx = tape.grad(pred);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[0] * (*dpred)[i];
  });
}

// ---------------------------------------------------------------------------
// Decoding

/// A detection in absolute pixel coordinates.
struct DetectionBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
  double confidence = 0.0;
  std::vector<double> class_probs;
  std::size_t class_id = 0;
  double score = 0.0;  // confidence * max class probability

  Box box() const { return Box::from_center(cx, cy, w, h); }
};

/// Converts a prediction tensor into per-image detections, dropping boxes whose
/// confidence is below `conf_threshold`.
inline std::vector<std::vector<DetectionBox>> decode(const Tensor& pred, const DetectorConfig& cfg,
                                                     double conf_threshold) {
  if (conf_threshold < 0.0 || conf_threshold > 1.0) {
    throw std::invalid_argument("decode: confidence threshold must lie in [0, 1]");
  }
  const std::size_t s = cfg.grid_size, depth = cfg.cell_depth(), boxes = cfg.boxes_per_cell;
  if (pred.rank() != 4 || pred.dim(1) != s || pred.dim(2) != s || pred.dim(3) != depth) {
    throw ShapeError("decode: prediction " + to_string(pred.shape()) + " does not match detector grid");
  }
  const double cell_w = static_cast<double>(cfg.input_width) / static_cast<double>(s);
  const double cell_h = static_cast<double>(cfg.input_height) / static_cast<double>(s);
  std::vector<std::vector<DetectionBox>> out(pred.dim(0));
  for (std::size_t img = 0; img < pred.dim(0); ++img) {
    for (std::size_t row = 0; row < s; ++row) {
      for (std::size_t col = 0; col < s; ++col) {
        const double* cp = pred.data().data() + ((img * s + row) * s + col) * depth;
        for (std::size_t b = 0; b < boxes; ++b) {
          const double* bp = cp + b * 5;
          if (bp[4] < conf_threshold) continue;
          DetectionBox det;
          det.cx = (static_cast<double>(col) + bp[0]) * cell_w;
          det.cy = (static_cast<double>(row) + bp[1]) * cell_h;
          det.w = bp[2] * static_cast<double>(cfg.input_width);
          det.h = bp[3] * static_cast<double>(cfg.input_height);
          det.confidence = bp[4];
          det.class_probs.assign(cp + boxes * 5, cp + depth);
          std::size_t best = 0;
          for (std::size_t c = 1; c < det.class_probs.size(); ++c) {
            if (det.class_probs[c] > det.class_probs[best]) best = c;
          }
          det.class_id = best;
          det.score = det.confidence * det.class_probs[best];
          out[img].push_back(std::move(det));
        }
      }
    }
  }
  return out;
}

/// Inverse of `decode`: writes each box into the first free slot of the cell
/// containing its centre. Unused slots get confidence 0.
inline Tensor encode_prediction(const std::vector<std::vector<DetectionBox>>& detections,
                                const DetectorConfig& cfg) {
  const std::size_t s = cfg.grid_size, depth = cfg.cell_depth(), boxes = cfg.boxes_per_cell;
  Tensor pred(Shape{detections.size(), s, s, depth}, 0.0);
  const double cell_w = static_cast<double>(cfg.input_width) / static_cast<double>(s);
  const double cell_h = static_cast<double>(cfg.input_height) / static_cast<double>(s);
  std::vector<std::size_t> used(detections.size() * s * s, 0);
  for (std::size_t img = 0; img < detections.size(); ++img) {
    for (const auto& det : detections[img]) {
      const auto col = std::min(static_cast<std::size_t>(std::max(0.0, std::floor(det.cx / cell_w))), s - 1);
      const auto row = std::min(static_cast<std::size_t>(std::max(0.0, std::floor(det.cy / cell_h))), s - 1);
      std::size_t& slot = used[(img * s + row) * s + col];
      if (slot >= boxes) throw std::invalid_argument("encode_prediction: too many boxes in one cell");
      double* cp = pred.data().data() + ((img * s + row) * s + col) * depth;
      double* bp = cp + slot * 5;
      bp[0] = det.cx / cell_w - static_cast<double>(col);
      bp[1] = det.cy / cell_h - static_cast<double>(row);
      bp[2] = det.w / static_cast<double>(cfg.input_width);
      bp[3] = det.h / static_cast<double>(cfg.input_height);
      bp[4] = det.confidence;
      if (det.class_probs.size() == cfg.num_classes) {
        std::copy(det.class_probs.begin(), det.class_probs.end(), cp + boxes * 5);
      }
      ++slot;
    }
  }
  return pred;
}

}  // namespace fedsparse
