#pragma once

#include <vector>

#include "pstconv/tube.hpp"
#include "pstconv/types.hpp"

namespace pstconv {

/// Which factors of the displacement-kernel spatial convolution are active.
/// Full computes sum_j (theta_d*delta_j) had (theta_s*F_j); the two degenerate
/// forms drop one factor each. A featureless input (C = 0) always evaluates
/// the displacement-only form.
enum class SpatialForm { Full, DisplacementOnly, FeatureOnly };

template <typename Scalar>
struct SpatialKernel {
  Mat<Scalar> theta_d;  // C_m x 3 displacement transform kernel
  Mat<Scalar> theta_s;  // C_m x C sharing kernel; 0x0 when C = 0
  SpatialForm form = SpatialForm::Full;

  Index mid_channels() const {
    return form == SpatialForm::FeatureOnly ? theta_s.rows() : theta_d.rows();
  }
  Index in_channels() const { return theta_s.cols(); }
  bool uses_theta_d() const { return form != SpatialForm::FeatureOnly; }
  bool uses_theta_s(Index in_channels) const {
    return form != SpatialForm::DisplacementOnly && in_channels > 0;
  }
};

template <typename Scalar>
struct TemporalKernel {
  std::vector<Mat<Scalar>> taps;  // l matrices, each C' x C_m
  Vec<Scalar> bias;               // C', or empty when disabled

  int size() const { return static_cast<int>(taps.size()); }
  Index out_channels() const { return taps.empty() ? 0 : taps.front().rows(); }
  Index mid_channels() const { return taps.empty() ? 0 : taps.front().cols(); }
  bool has_bias() const { return bias.size() > 0; }
};

/// Spatial convolution of one tube slice: neighbor displacements and features
/// in, one C_m response out. neighbor_feats is CxK (columns follow the
/// neighbor list order); pass a 0xK matrix for featureless input.
template <typename Scalar>
Vec<Scalar> spatial_conv(const NeighborList<Scalar>& neighbors, const Mat<Scalar>& neighbor_feats,
                         const SpatialKernel<Scalar>& kernel) {
  const Index k = neighbors.size();
  const Index c_in = neighbor_feats.rows();
  if (neighbor_feats.cols() != k)
    throw std::invalid_argument("spatial_conv: neighbor feature count does not match the slice");
  const bool with_feats = kernel.uses_theta_s(c_in);
  if (with_feats && kernel.theta_s.cols() != c_in)
    throw std::invalid_argument("spatial_conv: sharing kernel width does not match input features");
  if (kernel.form != SpatialForm::DisplacementOnly && c_in > 0 && kernel.theta_s.size() == 0)
    throw std::invalid_argument("spatial_conv: sharing kernel required for featured input");
  if (kernel.form == SpatialForm::FeatureOnly && c_in == 0)
    throw std::invalid_argument("spatial_conv: feature-only form needs input features");

  if (!with_feats) {
    // sum_j theta_d * delta_j = theta_d * sum_j delta_j
    return kernel.theta_d * neighbors.displacements.rowwise().sum();
  }
  if (!kernel.uses_theta_d()) {
    return kernel.theta_s * neighbor_feats.rowwise().sum();
  }
  const Mat<Scalar> u = kernel.theta_d * neighbors.displacements;  // C_m x K
  const Mat<Scalar> v = kernel.theta_s * neighbor_feats;           // C_m x K
  return (u.array() * v.array()).rowwise().sum().matrix();
}

/// Temporal convolution across the l slices of one tube:
/// F' = sum_{valid k} T_k * M_k + bias. Padded slices contribute nothing.
template <typename Scalar>
Vec<Scalar> temporal_conv(const std::vector<Vec<Scalar>>& m_slices,
                          const std::vector<std::uint8_t>& valid,
                          const TemporalKernel<Scalar>& kernel) {
  if (static_cast<int>(m_slices.size()) != kernel.size() || valid.size() != m_slices.size())
    throw std::invalid_argument("temporal_conv: slice count does not match the kernel");
  Vec<Scalar> out = Vec<Scalar>::Zero(kernel.out_channels());
  for (int k = 0; k < kernel.size(); ++k) {
    if (!valid[static_cast<std::size_t>(k)]) continue;
    out.noalias() += kernel.taps[static_cast<std::size_t>(k)] * m_slices[static_cast<std::size_t>(k)];
  }
  if (kernel.has_bias()) out += kernel.bias;
  return out;
}

/// Forward activation of one PST convolution plus everything the backward
/// pass needs: the tube, a copy of the input features and the intermediate
/// spatial responses M per (anchor frame, tap).
template <typename Scalar>
struct LayerIO {
  std::vector<Mat3X<Scalar>> out_coords;  // L' entries, 3 x N'
  std::vector<Mat<Scalar>> out_feats;     // L' entries, C' x N'

  PointTube<Scalar> tube;
  std::vector<Mat<Scalar>> in_feats;           // L entries, C x N (empty matrices when C = 0)
  std::vector<std::vector<Mat<Scalar>>> mids;  // [L'][l], C_m x N'; empty for invalid taps
  bool has_cache = false;

  void release_cache() {
    tube = {};
    in_feats.clear();
    mids.clear();
    has_cache = false;
  }
};

template <typename Scalar>
struct PstConvGrads {
  std::vector<Mat<Scalar>> input_feats;  // L entries, C x N; empty when C = 0
  Mat<Scalar> theta_d;
  Mat<Scalar> theta_s;
  std::vector<Mat<Scalar>> taps;
  Vec<Scalar> bias;
};

namespace detail {

template <typename Scalar>
void check_kernels(const SpatialKernel<Scalar>& spatial, const TemporalKernel<Scalar>& temporal,
                   Index in_channels, int temporal_kernel) {
  if (spatial.uses_theta_d() && spatial.theta_d.cols() != 3)
    throw std::invalid_argument("pst_conv: theta_d must have 3 columns");
  if (spatial.uses_theta_s(in_channels) && spatial.theta_s.cols() != in_channels)
    throw std::invalid_argument("pst_conv: theta_s width does not match input features");
  if (spatial.form == SpatialForm::Full && in_channels > 0 &&
      spatial.theta_d.rows() != spatial.theta_s.rows())
    throw std::invalid_argument("pst_conv: theta_d and theta_s disagree on C_m");
  if (temporal.size() != temporal_kernel)
    throw std::invalid_argument("pst_conv: temporal kernel size does not match the tube spec");
  const Index c_m = spatial.form == SpatialForm::FeatureOnly ? spatial.theta_s.rows()
                                                             : spatial.theta_d.rows();
  for (const auto& tap : temporal.taps) {
    if (tap.cols() != c_m || tap.rows() != temporal.out_channels())
      throw std::invalid_argument("pst_conv: temporal taps disagree on shape");
  }
  if (temporal.has_bias() && temporal.bias.size() != temporal.out_channels())
    throw std::invalid_argument("pst_conv: bias width does not match output channels");
}

template <typename Scalar>
Mat<Scalar> gather_columns(const Mat<Scalar>& feats, const std::vector<Index>& indices) {
  Mat<Scalar> out(feats.rows(), static_cast<Index>(indices.size()));
  for (Index j = 0; j < out.cols(); ++j) out.col(j) = feats.col(indices[static_cast<std::size_t>(j)]);
  return out;
}

}  // namespace detail

/// PST convolution forward over a prebuilt tube.
template <typename Scalar>
LayerIO<Scalar> pst_conv_forward(const PointCloudSequence<Scalar>& seq, PointTube<Scalar> tube,
                                 const TubeSpec& spec, const SpatialKernel<Scalar>& spatial,
                                 const TemporalKernel<Scalar>& temporal) {
  const Index c_in = seq.feature_channels();
  detail::check_kernels(spatial, temporal, c_in, spec.temporal_kernel);
  const bool with_feats = spatial.uses_theta_s(c_in);

  const int anchor_frames = tube.num_anchor_frames();
  const Index n_out = tube.points_per_frame();
  const int l = spec.temporal_kernel;
  const Index c_mid = with_feats && !spatial.uses_theta_d() ? spatial.theta_s.rows()
                                                            : spatial.theta_d.rows();
  const Index c_out = temporal.out_channels();

  LayerIO<Scalar> io;
  io.out_coords.resize(static_cast<std::size_t>(anchor_frames));
  io.out_feats.resize(static_cast<std::size_t>(anchor_frames));
  io.mids.resize(static_cast<std::size_t>(anchor_frames));

  for (int i = 0; i < anchor_frames; ++i) {
    io.out_coords[static_cast<std::size_t>(i)] = tube.anchors[static_cast<std::size_t>(i)].coords;
    auto& mids = io.mids[static_cast<std::size_t>(i)];
    mids.resize(static_cast<std::size_t>(l));

    for (int k = 0; k < l; ++k) {
      if (!tube.slice_valid[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]) continue;
      const int frame = tube.anchor_frames[static_cast<std::size_t>(i)] + spec.offset(k);
      const auto& frame_feats = seq.frames[static_cast<std::size_t>(frame)].feats;
      Mat<Scalar>& m = mids[static_cast<std::size_t>(k)];
      m.resize(c_mid, n_out);
      for (Index n = 0; n < n_out; ++n) {
        const auto& nb = tube.slices[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)][static_cast<std::size_t>(n)];
        const Mat<Scalar> gathered = detail::gather_columns(frame_feats, nb.indices);
        m.col(n) = spatial_conv(nb, gathered, spatial);
      }
    }

    Mat<Scalar>& out = io.out_feats[static_cast<std::size_t>(i)];
    out = Mat<Scalar>::Zero(c_out, n_out);
    for (int k = 0; k < l; ++k) {
      if (!tube.slice_valid[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]) continue;
      out.noalias() += temporal.taps[static_cast<std::size_t>(k)] * mids[static_cast<std::size_t>(k)];
    }
    if (temporal.has_bias()) out.colwise() += temporal.bias;
  }

  io.tube = std::move(tube);
  io.in_feats.reserve(seq.frames.size());
  for (const auto& f : seq.frames) io.in_feats.push_back(f.feats);
  io.has_cache = true;
  return io;
}

/// PST convolution forward; builds the tube internally.
template <typename Scalar>
LayerIO<Scalar> pst_conv_forward(const PointCloudSequence<Scalar>& seq, const TubeSpec& spec,
                                 const SpatialKernel<Scalar>& spatial,
                                 const TemporalKernel<Scalar>& temporal,
                                 const Sampling& sampling = Sampling::deterministic()) {
  return pst_conv_forward(seq, build_tube(seq, spec, sampling), spec, spatial, temporal);
}

/// Exact gradients w.r.t. all kernel parameters and the input features.
/// Coordinates, sampled indices and neighbor selection are constants; no
/// gradient flows through the geometry.
template <typename Scalar>
PstConvGrads<Scalar> pst_conv_backward(const LayerIO<Scalar>& io, const TubeSpec& spec,
                                       const SpatialKernel<Scalar>& spatial,
                                       const TemporalKernel<Scalar>& temporal,
                                       const std::vector<Mat<Scalar>>& grad_out) {
  if (!io.has_cache) throw std::logic_error("pst_conv_backward: forward cache has been released");
  if (grad_out.size() != io.out_feats.size())
    throw std::invalid_argument("pst_conv_backward: gradient frame count mismatch");

  const Index c_in = io.in_feats.empty() ? 0 : io.in_feats.front().rows();
  const bool with_feats = spatial.uses_theta_s(c_in);
  const bool with_disp = spatial.uses_theta_d();
  const int l = spec.temporal_kernel;

  PstConvGrads<Scalar> g;
  if (with_disp) g.theta_d = Mat<Scalar>::Zero(spatial.theta_d.rows(), 3);
  if (with_feats) g.theta_s = Mat<Scalar>::Zero(spatial.theta_s.rows(), spatial.theta_s.cols());
  g.taps.assign(temporal.taps.size(),
                Mat<Scalar>::Zero(temporal.out_channels(), temporal.mid_channels()));
  if (temporal.has_bias()) g.bias = Vec<Scalar>::Zero(temporal.bias.size());
  if (with_feats) {
    g.input_feats.reserve(io.in_feats.size());
    for (const auto& f : io.in_feats) g.input_feats.push_back(Mat<Scalar>::Zero(f.rows(), f.cols()));
  }

  for (int i = 0; i < io.tube.num_anchor_frames(); ++i) {
    const Mat<Scalar>& go = grad_out[static_cast<std::size_t>(i)];
    if (go.rows() != temporal.out_channels() || go.cols() != io.out_feats[static_cast<std::size_t>(i)].cols())
      throw std::invalid_argument("pst_conv_backward: gradient shape mismatch");
    if (temporal.has_bias()) g.bias += go.rowwise().sum();

    for (int k = 0; k < l; ++k) {
      if (!io.tube.slice_valid[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]) continue;
      const Mat<Scalar>& m = io.mids[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
      g.taps[static_cast<std::size_t>(k)].noalias() += go * m.transpose();
      const Mat<Scalar> gm = temporal.taps[static_cast<std::size_t>(k)].transpose() * go;  // C_m x N'

      const int frame = io.tube.anchor_frames[static_cast<std::size_t>(i)] + spec.offset(k);
      const Mat<Scalar>& frame_feats = io.in_feats[static_cast<std::size_t>(frame)];
      for (Index n = 0; n < gm.cols(); ++n) {
        const auto& nb = io.tube.slices[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)][static_cast<std::size_t>(n)];
        const Vec<Scalar> gcol = gm.col(n);
        if (!with_feats) {
          g.theta_d.noalias() += gcol * nb.displacements.rowwise().sum().transpose();
          continue;
        }
        const Mat<Scalar> gathered = detail::gather_columns(frame_feats, nb.indices);
        if (!with_disp) {
          g.theta_s.noalias() += gcol * gathered.rowwise().sum().transpose();
          const Vec<Scalar> gf = spatial.theta_s.transpose() * gcol;
          for (Index j = 0; j < nb.size(); ++j)
            g.input_feats[static_cast<std::size_t>(frame)].col(nb.indices[static_cast<std::size_t>(j)]) += gf;
          continue;
        }
        const Mat<Scalar> u = spatial.theta_d * nb.displacements;  // C_m x K
        const Mat<Scalar> v = spatial.theta_s * gathered;          // C_m x K
        const Mat<Scalar> gv = v.array().colwise() * gcol.array(); // g had v
        const Mat<Scalar> gu = u.array().colwise() * gcol.array(); // g had u
        g.theta_d.noalias() += gv * nb.displacements.transpose();
        g.theta_s.noalias() += gu * gathered.transpose();
        const Mat<Scalar> gf = spatial.theta_s.transpose() * gu;   // C x K
        for (Index j = 0; j < nb.size(); ++j)
          g.input_feats[static_cast<std::size_t>(frame)].col(nb.indices[static_cast<std::size_t>(j)]) += gf.col(j);
      }
    }
  }
  return g;
}

}  // namespace pstconv
