#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "fedsparse/tensor.hpp"

namespace fedsparse {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
};

/// Reverse-mode gradient tape. Nodes are appended in execution order; `backward`
/// walks them in reverse and visits each recorded operation once.
class Tape {
 public:
  /// Receives the gradient of the node's own output and accumulates into inputs.
  using BackwardFn = std::function<void(Tape&, std::span<const double>)>;

  Var constant(Tensor value) { return push(std::move(value), nullptr, false, {}); }

  /// Trainable leaf. After `backward` the gradient is accumulated into `param`.
  Var parameter(Tensor& param) {
    Tensor copy(param.shape(), param.values());
    return push(std::move(copy), &param, true, {});
  }

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) {
      if (v.tape != this) throw std::logic_error("operation mixes variables from different tapes");
      needs = needs || nodes_[v.id].requires_grad;
    }
    return push(std::move(value), nullptr, needs, needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient buffer of `v`, zero-initialised on first access.
  std::span<double> grad(Var v) {
    Node& node = nodes_.at(v.id);
    if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
    return node.grad;
  }

  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  void backward(Var loss) {
    if (loss.tape != this) throw std::logic_error("loss was recorded on a different tape");
    if (value(loss).size() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " + to_string(value(loss).shape()));
    }
    grad(loss)[0] += 1.0;
    // Untouched trainable leaves get an explicit zero gradient.
    for (Node& node : nodes_) {
      if (node.param != nullptr && node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
    }
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (node.grad.empty()) continue;
      if (node.backward) node.backward(*this, node.grad);
      if (node.param != nullptr) {
        auto dst = node.param->ensure_grad();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += node.grad[j];
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    BackwardFn backward;
    Tensor* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Tensor value, Tensor* param, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, std::move(fn), param, requires_grad});
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // stable references while ops append
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using MatMap = Eigen::Map<RowMatrix>;

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(t.shape()));
  }
}

inline void accumulate(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

struct ConvGeometry {
  std::size_t n, c_in, h, w, c_out, kh, kw, stride, pad, out_h, out_w;
  std::size_t patch() const { return c_in * kh * kw; }
  std::size_t pixels() const { return out_h * out_w; }
};

inline void im2col(const double* image, const ConvGeometry& g, double* col) {
  const std::size_t pixels = g.pixels();
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((c * g.kh + ki) * g.kw + kj) * pixels;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.h) &&
                                iw < static_cast<std::ptrdiff_t>(g.w);
            row[oh * g.out_w + ow] = inside ? image[(c * g.h + ih) * g.w + iw] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, const ConvGeometry& g, double* image) {
  const std::size_t pixels = g.pixels();
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((c * g.kh + ki) * g.kw + kj) * pixels;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) continue;
            image[(c * g.h + ih) * g.w + iw] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation, NCHW input and [C_out, C_in, kH, kW] kernel.
inline Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t padding) {
  const Tensor& x = input.value();
  const Tensor& k = kernel.value();
  detail::require_rank("conv2d input", x, 4);
  detail::require_rank("conv2d kernel", k, 4);
  if (x.dim(1) != k.dim(1)) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " has " + std::to_string(x.dim(1)) +
                     " channels but kernel " + to_string(k.shape()) + " expects " +
                     std::to_string(k.dim(1)));
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (k.dim(2) > x.dim(2) + 2 * padding || k.dim(3) > x.dim(3) + 2 * padding) {
    throw ShapeError("conv2d: kernel " + to_string(k.shape()) + " larger than padded input " +
                     to_string(x.shape()));
  }
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), k.dim(2), k.dim(3),
                         stride, padding, 0, 0};
  g.out_h = (g.h + 2 * padding - g.kh) / stride + 1;
  g.out_w = (g.w + 2 * padding - g.kw) / stride + 1;

  auto cols = std::make_shared<std::vector<double>>(g.n * g.patch() * g.pixels());
  Tensor out(Shape{g.n, g.c_out, g.out_h, g.out_w});
  const detail::ConstMatMap kmat(k.data().data(), g.c_out, g.patch());
  for (std::size_t n = 0; n < g.n; ++n) {
    double* col = cols->data() + n * g.patch() * g.pixels();
    detail::im2col(x.data().data() + n * g.c_in * g.h * g.w, g, col);
    detail::MatMap omat(out.data().data() + n * g.c_out * g.pixels(), g.c_out, g.pixels());
    omat.noalias() = kmat * detail::ConstMatMap(col, g.patch(), g.pixels());
  }

  return input.tape->record(std::move(out), {input, kernel},
                            [input, kernel, g, cols](Tape& tape, std::span<const double> dout) {
    const Tensor& kv = tape.value(kernel);
    const detail::ConstMatMap kmat(kv.data().data(), g.c_out, g.patch());
    const bool want_k = tape.requires_grad(kernel);
    const bool want_x = tape.requires_grad(input);
    std::vector<double> dcol(want_x ? g.patch() * g.pixels() : 0);
    for (std::size_t n = 0; n < g.n; ++n) {
      const detail::ConstMatMap gmat(dout.data() + n * g.c_out * g.pixels(), g.c_out, g.pixels());
      const double* col = cols->data() + n * g.patch() * g.pixels();
      if (want_k) {
        detail::MatMap dk(tape.grad(kernel).data(), g.c_out, g.patch());
        dk.noalias() += gmat * detail::ConstMatMap(col, g.patch(), g.pixels()).transpose();
      }
      if (want_x) {
        detail::MatMap dc(dcol.data(), g.patch(), g.pixels());
        dc.noalias() = kmat.transpose() * gmat;
        detail::col2im_add(dcol.data(), g, tape.grad(input).data() + n * g.c_in * g.h * g.w);
      }
    }
  });
}

/// Per-channel batch normalization state.
struct BatchNormLayer {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double epsilon = 1e-5;
  double momentum = 0.1;

  BatchNormLayer() = default;
  explicit BatchNormLayer(std::size_t channels, double gamma_init = 1.0)
      : gamma(Shape{channels}, gamma_init),
        beta(Shape{channels}, 0.0),
        running_mean(Shape{channels}, 0.0),
        running_var(Shape{channels}, 1.0) {}

  std::size_t channels() const { return gamma.size(); }
};

/// Normalizes each channel over (N, H, W). In training mode the batch statistics
/// are used and the running statistics updated in place.
inline Var batchnorm_forward(Var input, BatchNormLayer& layer, bool training) {
  const Tensor& x = input.value();
  detail::require_rank("batchnorm input", x, 4);
  const std::size_t channels = layer.channels();
  if (x.dim(1) != channels || layer.beta.size() != channels ||
      layer.running_mean.size() != channels || layer.running_var.size() != channels) {
    throw ShapeError("batchnorm: input " + to_string(x.shape()) + " does not match layer with " +
                     std::to_string(channels) + " channels");
  }
  if (!(layer.epsilon > 0.0)) throw std::invalid_argument("batchnorm: epsilon must be positive");
  const std::size_t n = x.dim(0);
  const std::size_t plane = x.dim(2) * x.dim(3);
  const std::size_t count = n * plane;
  if (training && count < 2) {
    throw std::invalid_argument("batchnorm: training mode needs at least 2 values per channel");
  }

  Tape& tape = *input.tape;
  Var gamma = tape.parameter(layer.gamma);
  Var beta = tape.parameter(layer.beta);

  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(channels);
  Tensor out(x.shape());
  const auto xs = x.data();
  auto ys = out.data();
  for (std::size_t c = 0; c < channels; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (training) {
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = xs.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) mean += p[i];
      }
      mean /= static_cast<double>(count);
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = xs.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mean) * (p[i] - mean);
      }
      var /= static_cast<double>(count);
      const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
      layer.running_mean[c] = (1.0 - layer.momentum) * layer.running_mean[c] + layer.momentum * mean;
      layer.running_var[c] = (1.0 - layer.momentum) * layer.running_var[c] + layer.momentum * unbiased;
    } else {
      mean = layer.running_mean[c];
      var = std::max(layer.running_var[c], 0.0);
    }
    const double is = 1.0 / std::sqrt(var + layer.epsilon);
    (*inv_std)[c] = is;
    const double g = layer.gamma[c];
    const double bt = layer.beta[c];
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double z = (xs[off + i] - mean) * is;
        (*xhat)[off + i] = z;
        ys[off + i] = g * z + bt;
      }
    }
  }

  return tape.record(std::move(out), {input, gamma, beta},
                     [input, gamma, beta, xhat, inv_std, n, channels, plane, count,
                      training](Tape& t, std::span<const double> dy) {
    const Tensor& gv = t.value(gamma);
    std::vector<double> sum_dy(channels, 0.0);
    std::vector<double> sum_dy_xhat(channels, 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum_dy[c] += dy[off + i];
          sum_dy_xhat[c] += dy[off + i] * (*xhat)[off + i];
        }
      }
    }
    if (t.requires_grad(gamma)) detail::accumulate(t.grad(gamma), sum_dy_xhat);
    if (t.requires_grad(beta)) detail::accumulate(t.grad(beta), sum_dy);
    if (!t.requires_grad(input)) return;
    auto dx = t.grad(input);
    const double m = static_cast<double>(count);
    for (std::size_t c = 0; c < channels; ++c) {
      const double scale = gv[c] * (*inv_std)[c];
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          if (training) {
            dx[off + i] += scale * (dy[off + i] - sum_dy[c] / m - (*xhat)[off + i] * sum_dy_xhat[c] / m);
          } else {
            dx[off + i] += scale * dy[off + i];
          }
        }
      }
    }
  });
}

inline constexpr double kLeakySlope = 0.1;

inline Var leaky_relu(Var input, double slope = kLeakySlope) {
  const Tensor& x = input.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : slope * x[i];
  return input.tape->record(std::move(out), {input}, [input, slope](Tape& t, std::span<const double> g) {
    const Tensor& xv = t.value(input);
    auto dx = t.grad(input);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xv[i] > 0.0 ? g[i] : slope * g[i];
  });
}

inline Var sigmoid(Var input) {
  const Tensor& x = input.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
  }
  Tape& tape = *input.tape;
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {input}, [input, self](Tape& t, std::span<const double> g) {
    const Tensor& y = t.value(Var{&t, self});
    auto dx = t.grad(input);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape("add", a.value(), b.value());
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, std::span<const double> g) {
    if (t.requires_grad(a)) detail::accumulate(t.grad(a), g);
    if (t.requires_grad(b)) detail::accumulate(t.grad(b), g);
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, std::span<const double> g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.requires_grad(a)) {
      auto da = t.grad(a);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto db = t.grad(b);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double factor) {
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * a.value()[i];
  return a.tape->record(std::move(out), {a}, [a, factor](Tape& t, std::span<const double> g) {
    auto da = t.grad(a);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += factor * g[i];
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& t, std::span<const double> g) {
    auto da = t.grad(a);
    for (double& d : da) d += g[0];
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Sum of absolute values; the subgradient at 0 is taken as 0.
inline Var abs_sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += std::abs(v);
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& t, std::span<const double> g) {
    const Tensor& av = t.value(a);
    auto da = t.grad(a);
    for (std::size_t i = 0; i < da.size(); ++i) {
      da[i] += av[i] > 0.0 ? g[0] : (av[i] < 0.0 ? -g[0] : 0.0);
    }
  });
}

inline Var max_pool2d(Var input, std::size_t kernel, std::size_t stride) {
  const Tensor& x = input.value();
  detail::require_rank("max_pool2d input", x, 4);
  if (kernel < 1 || stride < 1 || kernel > x.dim(2) || kernel > x.dim(3)) {
    throw ShapeError("max_pool2d: window " + std::to_string(kernel) + " does not fit input " +
                     to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = (h - kernel) / stride + 1;
  const std::size_t ow = (w - kernel) / stride + 1;
  Tensor out(Shape{n, c, oh, ow});
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  std::size_t o = 0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * h * w;
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j, ++o) {
          std::size_t best = base + (i * stride) * w + j * stride;
          for (std::size_t ki = 0; ki < kernel; ++ki) {
            for (std::size_t kj = 0; kj < kernel; ++kj) {
              const std::size_t idx = base + (i * stride + ki) * w + j * stride + kj;
              if (x[idx] > x[best]) best = idx;
            }
          }
          out[o] = x[best];
          (*arg)[o] = best;
        }
      }
    }
  }
  return input.tape->record(std::move(out), {input}, [input, arg](Tape& t, std::span<const double> g) {
    auto dx = t.grad(input);
    for (std::size_t i = 0; i < g.size(); ++i) dx[(*arg)[i]] += g[i];
  });
}

inline Var reshape(Var input, Shape shape) {
  Tensor out = input.value().reshaped(std::move(shape));
  return input.tape->record(std::move(out), {input}, [input](Tape& t, std::span<const double> g) {
    detail::accumulate(t.grad(input), g);
  });
}

inline Var flatten(Var input) {
  const Tensor& x = input.value();
  return reshape(input, Shape{x.dim(0), x.size() / x.dim(0)});
}

/// [N, C, H, W] -> [N, H, W, C].
inline Var nchw_to_nhwc(Var input) {
  const Tensor& x = input.value();
  detail::require_rank("nchw_to_nhwc", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out(Shape{n, h, w, c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) out[((b * h + i) * w + j) * c + ch] = x.at(b, ch, i, j);
  return input.tape->record(std::move(out), {input}, [input, n, c, h, w](Tape& t, std::span<const double> g) {
    auto dx = t.grad(input);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j)
            dx[((b * c + ch) * h + i) * w + j] += g[((b * h + i) * w + j) * c + ch];
  });
}

/// Adds bias[c] to every element of channel c of an NCHW tensor.
inline Var add_channel_bias(Var input, Var bias) {
  const Tensor& x = input.value();
  const Tensor& bv = bias.value();
  detail::require_rank("add_channel_bias", x, 4);
  if (bv.size() != x.dim(1)) {
    throw ShapeError("add_channel_bias: bias " + to_string(bv.shape()) + " vs input " + to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor out(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = (b * c + ch) * plane + i;
        out[idx] = x[idx] + bv[ch];
      }
  return input.tape->record(std::move(out), {input, bias},
                            [input, bias, n, c, plane](Tape& t, std::span<const double> g) {
    if (t.requires_grad(input)) detail::accumulate(t.grad(input), g);
    if (t.requires_grad(bias)) {
      auto db = t.grad(bias);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < plane; ++i) db[ch] += g[(b * c + ch) * plane + i];
    }
  });
}

/// Plain SGD: value -= lr * grad for each tensor, then clears the gradients.
inline void sgd_step(std::span<Tensor* const> params, double learning_rate) {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->has_grad()) {
      throw std::logic_error("sgd_step: trainable tensor #" + std::to_string(i) + " has no gradient");
    }
  }
  for (Tensor* p : params) {
    auto g = p->grad();
    auto v = p->data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= learning_rate * g[i];
    p->clear_grad();
  }
}

}  // namespace fedsparse
