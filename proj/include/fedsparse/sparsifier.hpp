#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsparse/autodiff.hpp"
#include "fedsparse/detector.hpp"

namespace fedsparse {

/// Fraction of prunable channels a client removes; valid range [0.01, 0.99].
class SparsityRate {
 public:
  static constexpr double kMin = 0.01;
  static constexpr double kMax = 0.99;

  explicit SparsityRate(double s) : value_(s) {
    if (!(s >= kMin && s <= kMax)) {
      throw std::invalid_argument("sparsity rate " + std::to_string(s) + " outside [0.01, 0.99]");
    }
  }
  double value() const noexcept { return value_; }

 private:
  double value_;
};

/// A BN channel eligible for pruning. Block 0 (fed by the image) and the head are never prunable.
struct ChannelRef {
  std::size_t block = 0;
  std::size_t channel = 0;
};

inline std::vector<ChannelRef> prunable_channels(const DetectorConfig& cfg) {
  std::vector<ChannelRef> out;
  for (std::size_t b = 1; b < cfg.channel_widths.size(); ++b) {
    for (std::size_t c = 0; c < cfg.channel_widths[b]; ++c) out.push_back({b, c});
  }
  return out;
}

/// Number of channels removed at rate `s` out of `n`: ceil(s * n). A relative slack
/// keeps decimal rates such as 0.3 * 10 from rounding up past the intended integer.
inline std::size_t channels_to_prune(SparsityRate s, std::size_t n) {
  const double raw = s.value() * static_cast<double>(n);
  return static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
}

struct SparseMask {
  /// Per conv block, one bit per BN channel (1 = kept).
  std::vector<std::vector<std::uint8_t>> channel_bits;
  /// Per trainable tensor in `ModelParams::trainable()` order, one bit per value.
  std::vector<std::vector<std::uint8_t>> weight_bits;

  std::size_t pruned_channels() const {
    std::size_t n = 0;
    for (const auto& layer : channel_bits) n += static_cast<std::size_t>(std::count(layer.begin(), layer.end(), 0));
    return n;
  }

  bool operator==(const SparseMask&) const = default;
};

/// Expands channel bits to every value a pruned channel touches: its gamma and beta,
/// its own filter, and the next layer's input slice (the head for the last block).
inline SparseMask expand_mask(const ModelParams& model, std::vector<std::vector<std::uint8_t>> channel_bits) {
  const auto& blocks = model.blocks;
  if (channel_bits.size() != blocks.size()) throw std::invalid_argument("mask has wrong number of blocks");
  SparseMask mask;
  for (const Tensor* t : model.trainable()) mask.weight_bits.emplace_back(t->size(), 1);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::size_t width = blocks[b].bn.channels();
    if (channel_bits[b].size() != width) {
      throw std::invalid_argument("mask block " + std::to_string(b) + " has " +
                                  std::to_string(channel_bits[b].size()) + " bits, layer has " +
                                  std::to_string(width) + " channels");
    }
    for (std::size_t c = 0; c < width; ++c) {
      if (channel_bits[b][c] != 0) continue;
      if (b == 0) throw std::invalid_argument("block 0 channels are not prunable");
      mask.weight_bits[3 * b + 1][c] = 0;
      mask.weight_bits[3 * b + 2][c] = 0;
      const Tensor& own = blocks[b].kernel;
      const std::size_t filter = own.size() / own.dim(0);
      std::fill_n(mask.weight_bits[3 * b].begin() + static_cast<std::ptrdiff_t>(c * filter), filter, 0);
      const bool last = b + 1 == blocks.size();
      const Tensor& next = last ? model.head_kernel : blocks[b + 1].kernel;
      auto& next_bits = mask.weight_bits[last ? 3 * blocks.size() : 3 * (b + 1)];
      const std::size_t outs = next.dim(0), ins = next.dim(1), area = next.dim(2) * next.dim(3);
      for (std::size_t o = 0; o < outs; ++o) {
        std::fill_n(next_bits.begin() + static_cast<std::ptrdiff_t>((o * ins + c) * area), area, 0);
      }
    }
  }
  mask.channel_bits = std::move(channel_bits);
  return mask;
}

inline SparseMask ones_mask(const ModelParams& model) {
  std::vector<std::vector<std::uint8_t>> bits;
  for (const auto& b : model.blocks) bits.emplace_back(b.bn.channels(), 1);
  return expand_mask(model, std::move(bits));
}

/// lambda * sum |gamma| over the prunable BN layers, recorded on `tape`.
inline Var l1_penalty(Tape& tape, ModelParams& model, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("l1 penalty weight must be non-negative");
  Var total = tape.constant(Tensor::scalar(0.0));
  for (std::size_t b = 1; b < model.blocks.size(); ++b) {
    total = add(total, abs_sum(tape.parameter(model.blocks[b].bn.gamma)));
  }
  return scale(total, lambda);
}

namespace detail {

/// Prunable channels ordered by |gamma| ascending, ties by (block, channel).
inline std::vector<std::pair<double, ChannelRef>> ranked_channels(const ModelParams& model) {
  std::vector<std::pair<double, ChannelRef>> ranked;
  for (const ChannelRef& ref : prunable_channels(model.config)) {
    ranked.emplace_back(std::abs(model.blocks[ref.block].bn.gamma[ref.channel]), ref);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  return ranked;
}

inline std::size_t checked_prune_count(SparsityRate s, std::size_t n) {
  if (n == 0) throw std::invalid_argument("model has no prunable channels");
  const std::size_t k = channels_to_prune(s, n);
  if (k >= n) {
    throw std::invalid_argument("sparsity " + std::to_string(s.value()) + " would prune all " + std::to_string(n) +
                                " channels");
  }
  return k;
}

}  // namespace detail

/// The k-th smallest |gamma| over prunable channels, k = ceil(s * n).
inline double global_threshold(const ModelParams& model, SparsityRate s) {
  const auto ranked = detail::ranked_channels(model);
  const std::size_t k = detail::checked_prune_count(s, ranked.size());
  return ranked[k - 1].first;
}

/// Zeroes the channel bits of exactly the k lowest-ranked channels.
inline SparseMask build_mask(const ModelParams& model, double threshold, SparsityRate s) {
  const auto ranked = detail::ranked_channels(model);
  const std::size_t k = detail::checked_prune_count(s, ranked.size());
  if (ranked[k - 1].first != threshold) {
    throw std::invalid_argument("threshold " + std::to_string(threshold) + " was not computed for this model");
  }
  std::vector<std::vector<std::uint8_t>> bits;
  for (const auto& b : model.blocks) bits.emplace_back(b.bn.channels(), 1);
  for (std::size_t i = 0; i < k; ++i) bits[ranked[i].second.block][ranked[i].second.channel] = 0;
  return expand_mask(model, std::move(bits));
}

/// Sets every masked value to exactly 0. Shapes are unchanged.
inline void apply_mask(ModelParams& model, const SparseMask& mask) {
  auto tensors = model.trainable();
  const auto names = model.trainable_names();
  if (mask.weight_bits.size() != tensors.size()) {
    throw std::invalid_argument("mask covers " + std::to_string(mask.weight_bits.size()) + " tensors, model has " +
                                std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (mask.weight_bits[i].size() != tensors[i]->size()) {
      throw std::invalid_argument("mask does not match layer " + names[i]);
    }
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto v = tensors[i]->data();
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (mask.weight_bits[i][j] == 0) v[j] = 0.0;
    }
  }
}

struct PruneCounts {
  std::size_t pruned = 0;
  std::size_t total = 0;
};

inline PruneCounts prune_report(const SparseMask& mask, const ModelParams& model) {
  PruneCounts counts;
  counts.total = model.parameter_count();
  for (const auto& bits : mask.weight_bits) {
    counts.pruned += static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 0));
  }
  return counts;
}

}  // namespace fedsparse
