#include "urnet/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <string>

#include "urnet/errors.hpp"

namespace urnet {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                         ", got " + shape_to_string(t.shape()));
  }
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kernel, stride, pad;
  std::size_t out_height, out_width;

  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t plane() const { return out_height * out_width; }
  std::size_t columns() const { return batch * plane(); }
};

// Row r = (c*k + ki)*k + kj, column q = b*plane + oy*Wo + ox.
void im2col(std::span<const double> in, const ConvGeometry& g, std::vector<double>& cols) {
  cols.assign(g.patch() * g.columns(), 0.0);
  const auto k = g.kernel;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        double* row = cols.data() + ((c * k + ki) * k + kj) * g.columns();
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* src = in.data() + (b * g.channels + c) * g.height * g.width;
          double* dst = row + b * g.plane();
          for (std::size_t oy = 0; oy < g.out_height; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            for (std::size_t ox = 0; ox < g.out_width; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                              static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
              dst[oy * g.out_width + ox] = src[iy * g.width + ix];
            }
          }
        }
      }
    }
  }
}

void col2im(const RowMatrix& cols, const ConvGeometry& g, std::vector<double>& out) {
  const auto k = g.kernel;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const double* row = cols.data() + ((c * k + ki) * k + kj) * g.columns();
        for (std::size_t b = 0; b < g.batch; ++b) {
          double* dst = out.data() + (b * g.channels + c) * g.height * g.width;
          const double* src = row + b * g.plane();
          for (std::size_t oy = 0; oy < g.out_height; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            for (std::size_t ox = 0; ox < g.out_width; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                              static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
              dst[iy * g.width + ix] += src[oy * g.out_width + ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t pad) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  if (weight.dim(1) != input.dim(1)) {
    throw DimensionError("conv2d: weight axis 1 (" + std::to_string(weight.dim(1)) +
                         ") != input axis 1 (" + std::to_string(input.dim(1)) + ")");
  }
  if (weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0) {
    throw DimensionError("conv2d: kernel must be square and odd, got " + shape_to_string(weight.shape()));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.batch = input.dim(0);
  g.channels = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.out_channels = weight.dim(0);
  g.kernel = weight.dim(2);
  g.stride = stride;
  g.pad = pad;
  if (g.height + 2 * pad < g.kernel || g.width + 2 * pad < g.kernel) {
    throw DimensionError("conv2d: spatial axes 2,3 of " + shape_to_string(input.shape()) +
                         " smaller than kernel " + std::to_string(g.kernel) + " after padding");
  }
  g.out_height = (g.height + 2 * pad - g.kernel) / stride + 1;
  g.out_width = (g.width + 2 * pad - g.kernel) / stride + 1;

  auto cols = std::make_shared<std::vector<double>>();
  im2col(input.data(), g, *cols);
  ConstMatrixMap w(weight.data().data(), static_cast<Eigen::Index>(g.out_channels),
                   static_cast<Eigen::Index>(g.patch()));
  ConstMatrixMap x(cols->data(), static_cast<Eigen::Index>(g.patch()),
                   static_cast<Eigen::Index>(g.columns()));
  RowMatrix product = w * x;

  std::vector<double> out(g.batch * g.out_channels * g.plane());
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      const double* src = product.data() + co * g.columns() + b * g.plane();
      std::copy(src, src + g.plane(), out.data() + (b * g.out_channels + co) * g.plane());
    }
  }

  if (!weight.requires_grad()) cols.reset();
  auto backward = [input, weight, g, cols](std::span<const double> grad_out) {
    RowMatrix grad_mat(static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(g.columns()));
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t co = 0; co < g.out_channels; ++co) {
        const double* src = grad_out.data() + (b * g.out_channels + co) * g.plane();
        std::copy(src, src + g.plane(), grad_mat.data() + co * g.columns() + b * g.plane());
      }
    }
    ConstMatrixMap w(weight.data().data(), static_cast<Eigen::Index>(g.out_channels),
                     static_cast<Eigen::Index>(g.patch()));
    if (weight.requires_grad()) {
      ConstMatrixMap x(cols->data(), static_cast<Eigen::Index>(g.patch()),
                       static_cast<Eigen::Index>(g.columns()));
      RowMatrix grad_w = grad_mat * x.transpose();
      weight.accumulate_grad({grad_w.data(), static_cast<std::size_t>(grad_w.size())});
    }
    if (input.requires_grad()) {
      RowMatrix grad_cols = w.transpose() * grad_mat;
      std::vector<double> grad_in(input.numel(), 0.0);
      col2im(grad_cols, g, grad_in);
      input.accumulate_grad(grad_in);
    }
  };
  return Tensor::make_result({g.batch, g.out_channels, g.out_height, g.out_width}, std::move(out),
                             "conv2d", {input, weight}, std::move(backward));
}

Tensor affine(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "affine", "input");
  require_rank(weight, 2, "affine", "weight");
  require_rank(bias, 1, "affine", "bias");
  const auto batch = input.dim(0), din = input.dim(1), dout = weight.dim(1);
  if (weight.dim(0) != din) {
    throw DimensionError("affine: input axis 1 (" + std::to_string(din) + ") != weight axis 0 (" +
                         std::to_string(weight.dim(0)) + ")");
  }
  if (bias.dim(0) != dout) {
    throw DimensionError("affine: bias axis 0 (" + std::to_string(bias.dim(0)) + ") != weight axis 1 (" +
                         std::to_string(dout) + ")");
  }
  const auto B = static_cast<Eigen::Index>(batch), I = static_cast<Eigen::Index>(din),
             O = static_cast<Eigen::Index>(dout);
  ConstMatrixMap x(input.data().data(), B, I);
  ConstMatrixMap w(weight.data().data(), I, O);
  Eigen::Map<const Eigen::RowVectorXd> b(bias.data().data(), O);
  std::vector<double> out(batch * dout);
  MatrixMap y(out.data(), B, O);
  y.noalias() = x * w;
  y.rowwise() += b;

  auto backward = [input, weight, bias, B, I, O](std::span<const double> grad_out) {
    ConstMatrixMap g(grad_out.data(), B, O);
    if (input.requires_grad()) {
      ConstMatrixMap w(weight.data().data(), I, O);
      RowMatrix gx = g * w.transpose();
      input.accumulate_grad({gx.data(), static_cast<std::size_t>(gx.size())});
    }
    if (weight.requires_grad()) {
      ConstMatrixMap x(input.data().data(), B, I);
      RowMatrix gw = x.transpose() * g;
      weight.accumulate_grad({gw.data(), static_cast<std::size_t>(gw.size())});
    }
    if (bias.requires_grad()) {
      Eigen::RowVectorXd gb = g.colwise().sum();
      bias.accumulate_grad({gb.data(), static_cast<std::size_t>(gb.size())});
    }
  };
  return Tensor::make_result({batch, dout}, std::move(out), "affine", {input, weight, bias},
                             std::move(backward));
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
  auto backward = [x](std::span<const double> g) {
    const auto in = x.data();
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = in[i] > 0.0 ? g[i] : 0.0;
    x.accumulate_grad(gx);
  };
  return Tensor::make_result(x.shape(), std::move(out), "relu", {x}, std::move(backward));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(in[i]);
  auto saved = std::make_shared<std::vector<double>>(out);
  auto backward = [x, saved](std::span<const double> g) {
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = (*saved)[i];
      gx[i] = g[i] * s * (1.0 - s);
    }
    x.accumulate_grad(gx);
  };
  return Tensor::make_result(x.shape(), std::move(out), "sigmoid", {x}, std::move(backward));
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()) + " differ");
  }
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  auto backward = [a, b](std::span<const double> g) {
    if (a.requires_grad()) a.accumulate_grad(g);
    if (b.requires_grad()) b.accumulate_grad(g);
  };
  return Tensor::make_result(a.shape(), std::move(out), "add", {a, b}, std::move(backward));
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * x[i];
  auto backward = [a, factor](std::span<const double> g) {
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = factor * g[i];
    a.accumulate_grad(gx);
  };
  return Tensor::make_result(a.shape(), std::move(out), "scale", {a}, std::move(backward));
}

Tensor scale_features(const Tensor& features, const Tensor& gate) {
  require_rank(gate, 1, "scale_features", "gate");
  if (features.rank() < 1 || features.dim(0) != gate.dim(0)) {
    throw DimensionError("scale_features: feature batch axis 0 (" +
                         std::to_string(features.rank() ? features.dim(0) : 0) +
                         ") != gate axis 0 (" + std::to_string(gate.dim(0)) + ")");
  }
  const auto batch = gate.dim(0);
  const auto per_sample = features.numel() / batch;
  std::vector<double> out(features.numel());
  const auto f = features.data(), s = gate.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < per_sample; ++i) out[b * per_sample + i] = s[b] * f[b * per_sample + i];
  }
  auto backward = [features, gate, batch, per_sample](std::span<const double> g) {
    const auto f = features.data(), s = gate.data();
    if (features.requires_grad()) {
      std::vector<double> gf(g.size());
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < per_sample; ++i) gf[b * per_sample + i] = s[b] * g[b * per_sample + i];
      }
      features.accumulate_grad(gf);
    }
    if (gate.requires_grad()) {
      std::vector<double> gs(batch, 0.0);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < per_sample; ++i) gs[b] += f[b * per_sample + i] * g[b * per_sample + i];
      }
      gate.accumulate_grad(gs);
    }
  };
  return Tensor::make_result(features.shape(), std::move(out), "scale_features", {features, gate},
                             std::move(backward));
}

Tensor global_avg_pool(const Tensor& input) {
  require_rank(input, 4, "global_avg_pool", "input");
  const auto batch = input.dim(0), channels = input.dim(1);
  const auto plane = input.dim(2) * input.dim(3);
  std::vector<double> out(batch * channels);
  const auto x = input.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double sum = 0.0;
    for (std::size_t p = 0; p < plane; ++p) sum += x[i * plane + p];
    out[i] = sum / static_cast<double>(plane);
  }
  auto backward = [input, plane](std::span<const double> g) {
    std::vector<double> gx(input.numel());
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t i = 0; i < g.size(); ++i) {
      for (std::size_t p = 0; p < plane; ++p) gx[i * plane + p] = g[i] * inv;
    }
    input.accumulate_grad(gx);
  };
  return Tensor::make_result({batch, channels}, std::move(out), "global_avg_pool", {input},
                             std::move(backward));
}

Tensor append_constant_column(const Tensor& input, double value) {
  require_rank(input, 2, "append_constant_column", "input");
  const auto batch = input.dim(0), width = input.dim(1);
  std::vector<double> out(batch * (width + 1));
  const auto x = input.data();
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(x.begin() + static_cast<std::ptrdiff_t>(b * width),
              x.begin() + static_cast<std::ptrdiff_t>((b + 1) * width), out.begin() + static_cast<std::ptrdiff_t>(b * (width + 1)));
    out[b * (width + 1) + width] = value;
  }
  auto backward = [input, batch, width](std::span<const double> g) {
    std::vector<double> gx(batch * width);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < width; ++c) gx[b * width + c] = g[b * (width + 1) + c];
    }
    input.accumulate_grad(gx);
  };
  return Tensor::make_result({batch, width + 1}, std::move(out), "append_constant_column", {input},
                             std::move(backward));
}

Tensor stack_columns(const std::vector<Tensor>& columns) {
  if (columns.empty()) throw DimensionError("stack_columns: no columns");
  const auto batch = columns.front().numel();
  const auto n = columns.size();
  std::vector<double> out(batch * n);
  for (std::size_t j = 0; j < n; ++j) {
    require_rank(columns[j], 1, "stack_columns", "column");
    if (columns[j].dim(0) != batch) {
      throw DimensionError("stack_columns: column " + std::to_string(j) + " has axis 0 = " +
                           std::to_string(columns[j].dim(0)) + ", expected " + std::to_string(batch));
    }
    const auto c = columns[j].data();
    for (std::size_t b = 0; b < batch; ++b) out[b * n + j] = c[b];
  }
  auto backward = [columns, batch, n](std::span<const double> g) {
    for (std::size_t j = 0; j < n; ++j) {
      if (!columns[j].requires_grad()) continue;
      std::vector<double> gc(batch);
      for (std::size_t b = 0; b < batch; ++b) gc[b] = g[b * n + j];
      columns[j].accumulate_grad(gc);
    }
  };
  return Tensor::make_result({batch, n}, std::move(out), "stack_columns", columns, std::move(backward));
}

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& shift, BatchNormStats& stats,
                  NormMode mode) {
  require_rank(input, 4, "batch_norm", "input");
  const auto batch = input.dim(0), channels = input.dim(1);
  const auto plane = input.dim(2) * input.dim(3);
  if (gamma.numel() != channels || shift.numel() != channels || stats.running_mean.size() != channels ||
      stats.running_var.size() != channels) {
    throw DimensionError("batch_norm: parameters do not match channel axis 1 (" +
                         std::to_string(channels) + ")");
  }
  const auto count = batch * plane;
  const auto x = input.data();
  auto mean = std::make_shared<std::vector<double>>(channels);
  auto inv_std = std::make_shared<std::vector<double>>(channels);
  if (mode == NormMode::Train) {
    for (std::size_t c = 0; c < channels; ++c) {
      double sum = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = x.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = x.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const double var = sq / static_cast<double>(count);
      (*mean)[c] = mu;
      (*inv_std)[c] = 1.0 / std::sqrt(var + kBatchNormEpsilon);
      const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
      stats.running_mean[c] = (1.0 - kBatchNormMomentum) * stats.running_mean[c] + kBatchNormMomentum * mu;
      stats.running_var[c] = (1.0 - kBatchNormMomentum) * stats.running_var[c] + kBatchNormMomentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      (*mean)[c] = stats.running_mean[c];
      (*inv_std)[c] = 1.0 / std::sqrt(stats.running_var[c] + kBatchNormEpsilon);
    }
  }

  std::vector<double> out(input.numel());
  const auto gm = gamma.data(), sh = shift.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        out[base + i] = gm[c] * ((x[base + i] - (*mean)[c]) * (*inv_std)[c]) + sh[c];
      }
    }
  }

  auto backward = [input, gamma, shift, mean, inv_std, mode, batch, channels, plane,
                   count](std::span<const double> g) {
    const auto x = input.data();
    const auto gm = gamma.data();
    std::vector<double> g_gamma(channels, 0.0), g_shift(channels, 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double xhat = (x[base + i] - (*mean)[c]) * (*inv_std)[c];
          g_gamma[c] += g[base + i] * xhat;
          g_shift[c] += g[base + i];
        }
      }
    }
    if (input.requires_grad()) {
      std::vector<double> gx(input.numel());
      const double m = static_cast<double>(count);
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t base = (b * channels + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            if (mode == NormMode::Eval) {
              gx[base + i] = g[base + i] * gm[c] * (*inv_std)[c];
            } else {
              const double xhat = (x[base + i] - (*mean)[c]) * (*inv_std)[c];
              gx[base + i] = gm[c] * (*inv_std)[c] / m * (m * g[base + i] - g_shift[c] - xhat * g_gamma[c]);
            }
          }
        }
      }
      input.accumulate_grad(gx);
    }
    if (gamma.requires_grad()) gamma.accumulate_grad(g_gamma);
    if (shift.requires_grad()) shift.accumulate_grad(g_shift);
  };
  return Tensor::make_result(input.shape(), std::move(out), "batch_norm", {input, gamma, shift},
                             std::move(backward));
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy", "logits");
  const auto batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch axis 0 = " + std::to_string(batch));
  }
  const auto z = logits.data();
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  auto owned_labels = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw DataError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0," +
                      std::to_string(classes) + ")");
    }
    const double* row = z.data() + b * classes;
    double peak = row[0];
    for (std::size_t k = 1; k < classes; ++k) peak = std::max(peak, row[k]);
    double sum = 0.0;
    for (std::size_t k = 0; k < classes; ++k) sum += std::exp(row[k] - peak);
    const double log_norm = peak + std::log(sum);
    for (std::size_t k = 0; k < classes; ++k) (*probs)[b * classes + k] = std::exp(row[k] - log_norm);
    total += log_norm - row[label];
  }
  const double loss = total / static_cast<double>(batch);
  auto backward = [logits, probs, owned_labels, batch, classes](std::span<const double> g) {
    std::vector<double> gz(*probs);
    const double factor = g[0] / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      gz[b * classes + static_cast<std::size_t>((*owned_labels)[b])] -= 1.0;
      for (std::size_t k = 0; k < classes; ++k) gz[b * classes + k] *= factor;
    }
    logits.accumulate_grad(gz);
  };
  return Tensor::make_result({1}, {loss}, "softmax_cross_entropy", {logits}, std::move(backward));
}

}  // namespace urnet
