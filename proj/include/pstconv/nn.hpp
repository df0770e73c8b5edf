#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pstconv/types.hpp"

namespace pstconv {

/// Batch normalization over the channel axis. Columns of the input matrix are
/// the statistical samples (batch x frames x points, gathered by the caller).
/// Variance is biased (divide by M) both for normalization and for the
/// running estimate.
template <typename Scalar>
struct BatchNorm {
  Vec<Scalar> gamma, beta, running_mean, running_var;
  Scalar momentum = Scalar(0.9);
  Scalar eps = Scalar(1e-5);

  BatchNorm() = default;
  explicit BatchNorm(Index channels)
      : gamma(Vec<Scalar>::Ones(channels)),
        beta(Vec<Scalar>::Zero(channels)),
        running_mean(Vec<Scalar>::Zero(channels)),
        running_var(Vec<Scalar>::Ones(channels)) {}

  Index channels() const { return gamma.size(); }

  struct Cache {
    Mat<Scalar> x_hat;
    Vec<Scalar> inv_std;
    bool training = false;
  };

  /// Training mode normalizes with batch statistics (>= 2 samples required);
  /// eval mode is the affine map from the running estimates. Running stats
  /// update only when update_running is set.
  Mat<Scalar> forward(const Mat<Scalar>& x, bool training, bool update_running, Cache* cache) {
    if (x.rows() != channels()) throw std::invalid_argument("batch_norm: channel mismatch");
    Vec<Scalar> mean, var;
    if (training) {
      if (x.cols() < 2)
        throw std::invalid_argument("batch_norm: training mode needs at least 2 samples");
      mean = x.rowwise().mean();
      var = (x.colwise() - mean).array().square().rowwise().mean();
      if (update_running) {
        running_mean = momentum * running_mean + (Scalar(1) - momentum) * mean;
        running_var = momentum * running_var + (Scalar(1) - momentum) * var;
      }
    } else {
      mean = running_mean;
      var = running_var;
    }
    const Vec<Scalar> inv_std = (var.array() + eps).rsqrt();
    Mat<Scalar> x_hat = (x.colwise() - mean).array().colwise() * inv_std.array();
    Mat<Scalar> y = (x_hat.array().colwise() * gamma.array()).colwise() + beta.array();
    if (cache) {
      cache->x_hat = std::move(x_hat);
      cache->inv_std = inv_std;
      cache->training = training;
    }
    return y;
  }

  /// Accumulates dgamma/dbeta and returns dx. Training mode differentiates
  /// through the batch statistics.
  Mat<Scalar> backward(const Mat<Scalar>& grad_y, const Cache& cache, Vec<Scalar>& dgamma,
                       Vec<Scalar>& dbeta) const {
    dbeta += grad_y.rowwise().sum();
    dgamma += (grad_y.array() * cache.x_hat.array()).rowwise().sum().matrix();
    const auto scale = (gamma.array() * cache.inv_std.array());
    if (!cache.training) {
      return (grad_y.array().colwise() * scale).matrix();
    }
    const Scalar m = static_cast<Scalar>(grad_y.cols());
    const Vec<Scalar> mean_g = grad_y.rowwise().mean();
    const Vec<Scalar> mean_gx = (grad_y.array() * cache.x_hat.array()).rowwise().mean();
    Mat<Scalar> dx = grad_y.colwise() - mean_g;
    dx.array() -= cache.x_hat.array().colwise() * mean_gx.array();
    (void)m;
    return (dx.array().colwise() * scale).matrix();
  }
};

template <typename Scalar>
Mat<Scalar> relu(const Mat<Scalar>& x) {
  return x.cwiseMax(Scalar(0));
}

/// Masks gradients where the forward input was not positive.
template <typename Scalar>
Mat<Scalar> relu_backward(const Mat<Scalar>& x, const Mat<Scalar>& grad_y) {
  return (x.array() > Scalar(0)).template cast<Scalar>() * grad_y.array();
}

/// Mean over points within each frame, then elementwise max over frames.
template <typename Scalar>
struct PoolCache {
  std::vector<Index> argmax_frame;  // per channel, first frame attaining the max
  std::vector<Index> frame_points;
};

template <typename Scalar>
Vec<Scalar> pool_sequence(const std::vector<Mat<Scalar>>& feats, PoolCache<Scalar>* cache = nullptr) {
  if (feats.empty()) throw std::invalid_argument("pool_sequence: no frames");
  const Index c = feats.front().rows();
  Vec<Scalar> out;
  std::vector<Index> argmax(static_cast<std::size_t>(c), 0);
  for (std::size_t t = 0; t < feats.size(); ++t) {
    if (feats[t].rows() != c) throw std::invalid_argument("pool_sequence: channel mismatch");
    if (feats[t].cols() < 1) throw std::invalid_argument("pool_sequence: empty frame");
    const Vec<Scalar> frame_mean = feats[t].rowwise().mean();
    if (t == 0) {
      out = frame_mean;
    } else {
      for (Index ch = 0; ch < c; ++ch) {
        if (frame_mean(ch) > out(ch)) {
          out(ch) = frame_mean(ch);
          argmax[static_cast<std::size_t>(ch)] = static_cast<Index>(t);
        }
      }
    }
  }
  if (cache) {
    cache->argmax_frame = std::move(argmax);
    cache->frame_points.clear();
    for (const auto& f : feats) cache->frame_points.push_back(f.cols());
  }
  return out;
}

template <typename Scalar>
std::vector<Mat<Scalar>> pool_sequence_backward(const Vec<Scalar>& grad, const PoolCache<Scalar>& cache) {
  std::vector<Mat<Scalar>> out;
  out.reserve(cache.frame_points.size());
  for (Index n : cache.frame_points) out.push_back(Mat<Scalar>::Zero(grad.size(), n));
  for (Index ch = 0; ch < grad.size(); ++ch) {
    const Index t = cache.argmax_frame[static_cast<std::size_t>(ch)];
    const Index n = cache.frame_points[static_cast<std::size_t>(t)];
    out[static_cast<std::size_t>(t)].row(ch).setConstant(grad(ch) / static_cast<Scalar>(n));
  }
  return out;
}

/// Affine map applied per column. Serves both the FC head (one column per
/// sequence) and the per-point 1D convolution head (one column per point).
template <typename Scalar>
struct Dense {
  Mat<Scalar> weight;  // out x in
  Vec<Scalar> bias;    // out, or empty when disabled

  Dense() = default;
  Dense(Index out, Index in, bool with_bias = true)
      : weight(Mat<Scalar>::Zero(out, in)),
        bias(with_bias ? Vec<Scalar>::Zero(out) : Vec<Scalar>()) {}

  bool has_bias() const { return bias.size() > 0; }

  Mat<Scalar> forward(const Mat<Scalar>& x) const {
    if (x.rows() != weight.cols()) throw std::invalid_argument("dense: input width mismatch");
    Mat<Scalar> y = weight * x;
    if (has_bias()) y.colwise() += bias;
    return y;
  }

  Mat<Scalar> backward(const Mat<Scalar>& x, const Mat<Scalar>& grad_y, Mat<Scalar>& dweight,
                       Vec<Scalar>& dbias) const {
    dweight.noalias() += grad_y * x.transpose();
    if (has_bias()) dbias += grad_y.rowwise().sum();
    return weight.transpose() * grad_y;
  }
};

template <typename Scalar>
Vec<Scalar> softmax(const Vec<Scalar>& logits) {
  const Scalar m = logits.maxCoeff();
  Vec<Scalar> e = (logits.array() - m).exp();
  return e / e.sum();
}

/// Returns (loss, grad wrt logits); grad is softmax(logits) minus the one-hot
/// target.
template <typename Scalar>
std::pair<Scalar, Vec<Scalar>> softmax_cross_entropy(const Vec<Scalar>& logits, Index label) {
  if (label < 0 || label >= logits.size())
    throw std::invalid_argument("softmax_cross_entropy: label out of range");
  const Scalar m = logits.maxCoeff();
  const Vec<Scalar> shifted = logits.array() - m;
  const Scalar log_sum = std::log(shifted.array().exp().sum());
  const Scalar loss = log_sum - shifted(label);
  Vec<Scalar> grad = (shifted.array() - log_sum).exp();
  grad(label) -= Scalar(1);
  return {loss, grad};
}

/// Step-decay schedule: lr(epoch) = base * rate^(#decay epochs passed).
struct SgdSchedule {
  double base_lr = 0.01;
  double decay_rate = 0.1;
  std::vector<int> decay_epochs{10, 20};
  double momentum = 0.9;

  double lr(int epoch) const {
    double v = base_lr;
    for (int e : decay_epochs)
      if (epoch >= e) v *= decay_rate;
    return v;
  }
};

/// Momentum SGD step over a raw span: v = mu*v + g; p -= lr*v.
inline void sgd_step(double* param, const double* grad, double* velocity, std::size_t n, double lr,
                     double momentum) {
  for (std::size_t i = 0; i < n; ++i) {
    velocity[i] = momentum * velocity[i] + grad[i];
    param[i] -= lr * velocity[i];
  }
}

/// Central-difference gradient checker. Entries point at live parameter
/// storage plus the analytic gradient to compare against; loss() re-runs the
/// forward pass at the current parameter values.
struct GradCheckEntry {
  std::string name;
  double* values;
  const double* analytic;
  std::ptrdiff_t size;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_entry;
  std::ptrdiff_t worst_index = -1;

  bool passed(double tol) const { return max_rel_error < tol; }
};

template <typename LossFn>
GradCheckReport grad_check(LossFn&& loss, const std::vector<GradCheckEntry>& entries,
                           double eps = 1e-5) {
  GradCheckReport report;
  for (const auto& entry : entries) {
    for (std::ptrdiff_t i = 0; i < entry.size; ++i) {
      const double saved = entry.values[i];
      entry.values[i] = saved + eps;
      const double up = loss();
      entry.values[i] = saved - eps;
      const double down = loss();
      entry.values[i] = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double an = entry.analytic[i];
      const double scale = std::max({1.0, std::abs(fd), std::abs(an)});
      const double rel = std::abs(fd - an) / scale;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_entry = entry.name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace pstconv
