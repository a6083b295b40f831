#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "fedsparse/box.hpp"
#include "fedsparse/dataset.hpp"
#include "fedsparse/detector.hpp"

namespace fedsparse {

/// Greedy per-class suppression. Boxes are visited by descending score (earlier
/// index first on ties); a box survives iff its IoU with every kept box of the
/// same class is <= `iou_threshold`. Survivors are returned in visit order.
inline std::vector<DetectionBox> nms(const std::vector<DetectionBox>& boxes, double iou_threshold) {
  if (iou_threshold < 0.0 || iou_threshold > 1.0) throw std::invalid_argument("nms: IoU threshold must lie in [0, 1]");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return boxes[a].score > boxes[b].score; });
  std::vector<DetectionBox> kept;
  for (std::size_t idx : order) {
    const DetectionBox& cand = boxes[idx];
    const Box cb = cand.box();
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const DetectionBox& k) {
      return k.class_id == cand.class_id && iou(k.box(), cb) > iou_threshold;
    });
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

struct ScoredDetection {
  std::size_t image = 0;
  std::size_t class_id = 0;
  double score = 0.0;
  Box box;
};

struct GroundTruth {
  std::size_t image = 0;
  std::size_t class_id = 0;
  Box box;
};

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct ClassAp {
  std::size_t class_id = 0;
  std::size_t ground_truths = 0;
  double ap = 0.0;  // 0..100
  std::vector<PrPoint> curve;
};

struct EvalResult {
  std::vector<ClassAp> per_class;  // classes that have ground truth
  std::vector<std::size_t> skipped_classes;  // classes without ground truth
  double map = 0.0;  // 0..100
};

/// Area under the precision envelope (all-point interpolation), in [0, 1].
inline double interpolated_ap(const std::vector<PrPoint>& curve) {
  std::vector<double> envelope(curve.size());
  double running = 0.0;
  for (std::size_t i = curve.size(); i-- > 0;) {
    running = std::max(running, curve[i].precision);
    envelope[i] = running;
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    ap += (curve[i].recall - prev_recall) * envelope[i];
    prev_recall = curve[i].recall;
  }
  return ap;
}

/// Per-class AP at `iou_threshold` and their mean. Each detection, in descending
/// score order, claims the highest-IoU unclaimed ground truth of its class in the
/// same image when that IoU reaches the threshold; otherwise it is a false positive.
inline EvalResult average_precision(const std::vector<ScoredDetection>& detections,
                                    const std::vector<GroundTruth>& truths, std::size_t num_classes,
                                    double iou_threshold = 0.5) {
  EvalResult result;
  double total = 0.0;
  for (std::size_t cls = 0; cls < num_classes; ++cls) {
    std::vector<std::size_t> gt_idx;
    for (std::size_t i = 0; i < truths.size(); ++i) {
      if (truths[i].class_id == cls) gt_idx.push_back(i);
    }
    if (gt_idx.empty()) {
      result.skipped_classes.push_back(cls);
      continue;
    }
    std::vector<std::size_t> det_idx;
    for (std::size_t i = 0; i < detections.size(); ++i) {
      if (detections[i].class_id == cls) det_idx.push_back(i);
    }
    std::stable_sort(det_idx.begin(), det_idx.end(),
                     [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });
    std::vector<bool> claimed(truths.size(), false);
    ClassAp entry{cls, gt_idx.size(), 0.0, {}};
    std::size_t tp = 0;
    for (std::size_t rank = 0; rank < det_idx.size(); ++rank) {
      const ScoredDetection& det = detections[det_idx[rank]];
      double best = -1.0;
      std::size_t best_gt = truths.size();
      for (std::size_t g : gt_idx) {
        if (claimed[g] || truths[g].image != det.image) continue;
        const double v = iou(det.box, truths[g].box);
        if (v > best) {
          best = v;
          best_gt = g;
        }
      }
      if (best_gt < truths.size() && best >= iou_threshold) {
        claimed[best_gt] = true;
        ++tp;
      }
      entry.curve.push_back({static_cast<double>(tp) / static_cast<double>(gt_idx.size()),
                             static_cast<double>(tp) / static_cast<double>(rank + 1)});
    }
    entry.ap = 100.0 * interpolated_ap(entry.curve);
    total += entry.ap;
    result.per_class.push_back(std::move(entry));
  }
  result.map = result.per_class.empty() ? 0.0 : total / static_cast<double>(result.per_class.size());
  return result;
}

struct EvalOptions {
  double conf_threshold = 0.25;
  double nms_threshold = 0.45;
  double match_iou = 0.5;
  std::size_t batch_size = 50;
};

struct ModelEvaluation {
  double map50 = 0.0;
  double eval_loss = 0.0;  // detection loss, mean over images
  EvalResult detail;
  std::size_t sqrt_clamps = 0;
};

/// Eval-mode forward over `examples`: decode, per-image NMS, then mAP against the annotations.
inline ModelEvaluation evaluate_model(const ModelParams& model, const std::vector<TrainingExample>& examples,
                                      const LossConfig& loss_cfg, const EvalOptions& opts = {}) {
  if (examples.empty()) throw std::invalid_argument("evaluate_model: no examples");
  ModelParams copy = model;
  std::vector<ScoredDetection> detections;
  std::vector<GroundTruth> truths;
  double loss_sum = 0.0;
  ModelEvaluation out;
  for (std::size_t start = 0; start < examples.size(); start += opts.batch_size) {
    const std::size_t end = std::min(examples.size(), start + opts.batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    std::vector<GridTarget> targets;
    for (std::size_t i : idx) targets.push_back(examples[i].target);
    Tape tape;
    Var pred = forward(tape, copy, make_batch(examples, idx), false);
    LossDiagnostics diag;
    loss_sum += yolo_loss(pred, targets, loss_cfg, &diag).value().item() * static_cast<double>(idx.size());
    out.sqrt_clamps += diag.sqrt_clamps;
    const auto decoded = decode(pred.value(), model.config, opts.conf_threshold);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      for (const auto& det : nms(decoded[k], opts.nms_threshold)) {
        detections.push_back({idx[k], det.class_id, det.score, det.box()});
      }
      for (const auto& obj : examples[idx[k]].annotation.objects) {
        truths.push_back({idx[k], static_cast<std::size_t>(obj.class_id), obj.box});
      }
    }
  }
  out.detail = average_precision(detections, truths, model.config.num_classes, opts.match_iou);
  out.map50 = out.detail.map;
  out.eval_loss = loss_sum / static_cast<double>(examples.size());
  return out;
}

}  // namespace fedsparse
