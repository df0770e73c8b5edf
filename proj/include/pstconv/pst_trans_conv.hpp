#pragma once

#include <array>
#include <vector>

#include "pstconv/tube.hpp"
#include "pstconv/types.hpp"

namespace pstconv {

/// Kernels of the PST transposed convolution: l temporal taps T'_k mapping
/// encoded features to per-offset responses, and the sharing kernel S'
/// applied after spatial interpolation.
template <typename Scalar>
struct TransKernel {
  std::vector<Mat<Scalar>> taps;  // l matrices, each C'_m x C'
  Mat<Scalar> sharing;            // C'' x C'_m

  int size() const { return static_cast<int>(taps.size()); }
  Index mid_channels() const { return taps.empty() ? 0 : taps.front().rows(); }
  Index in_channels() const { return taps.empty() ? 0 : taps.front().cols(); }
  Index out_channels() const { return sharing.rows(); }
};

/// Result of scattering the temporally expanded responses back onto original
/// frame indices. Each frame holds the union of contributing anchor sites:
/// one block of N' columns per (anchor frame, tap) pair that lands on it.
/// Frames nothing scatters into stay empty and decode to zero features.
template <typename Scalar>
struct InterpolatedFrames {
  std::vector<Mat3X<Scalar>> coords;                     // per frame, 3 x A_t
  std::vector<Mat<Scalar>> feats;                        // per frame, C'_m x A_t
  std::vector<std::vector<std::array<int, 2>>> blocks;   // per frame: {anchor index, tap}
};

/// Temporal transposed convolution: every encoded feature F'_i expands into l
/// responses T'_k * F'_i which are scattered to original frame indices with
/// the encoder's stride and padding. Contributions landing on the same frame
/// accumulate as separate anchor sites (one source point never lands twice on
/// one frame).
template <typename Scalar>
InterpolatedFrames<Scalar> temporal_trans_conv(const std::vector<Mat<Scalar>>& feats,
                                               const std::vector<Mat3X<Scalar>>& anchor_coords,
                                               const TubeSpec& spec,
                                               const std::vector<Mat<Scalar>>& taps,
                                               int target_frames) {
  spec.validate();
  if (static_cast<int>(taps.size()) != spec.temporal_kernel)
    throw std::invalid_argument("temporal_trans_conv: tap count does not match the tube spec");
  if (feats.size() != anchor_coords.size())
    throw std::invalid_argument("temporal_trans_conv: feature/coordinate frame count mismatch");
  const int encoded = spec.out_frames(target_frames);
  if (encoded != static_cast<int>(feats.size()))
    throw std::invalid_argument("temporal_trans_conv: encoded length inconsistent with target length");

  const std::vector<int> anchor_frames = select_anchor_frames(target_frames, spec);
  const Index c_mid = taps.front().rows();

  InterpolatedFrames<Scalar> out;
  out.coords.resize(static_cast<std::size_t>(target_frames));
  out.feats.resize(static_cast<std::size_t>(target_frames));
  out.blocks.resize(static_cast<std::size_t>(target_frames));

  for (int i = 0; i < encoded; ++i) {
    for (int k = 0; k < spec.temporal_kernel; ++k) {
      const int target = anchor_frames[static_cast<std::size_t>(i)] + spec.offset(k);
      if (target < 0 || target >= target_frames) continue;
      out.blocks[static_cast<std::size_t>(target)].push_back({i, k});
    }
  }
  for (int t = 0; t < target_frames; ++t) {
    const auto& blocks = out.blocks[static_cast<std::size_t>(t)];
    Index total = 0;
    for (const auto& b : blocks) total += anchor_coords[static_cast<std::size_t>(b[0])].cols();
    out.coords[static_cast<std::size_t>(t)].resize(3, total);
    out.feats[static_cast<std::size_t>(t)].resize(c_mid, total);
    Index col = 0;
    for (const auto& b : blocks) {
      const auto& coords = anchor_coords[static_cast<std::size_t>(b[0])];
      const Index n = coords.cols();
      out.coords[static_cast<std::size_t>(t)].middleCols(col, n) = coords;
      out.feats[static_cast<std::size_t>(t)].middleCols(col, n).noalias() =
          taps[static_cast<std::size_t>(b[1])] * feats[static_cast<std::size_t>(b[0])];
      col += n;
    }
  }
  return out;
}

/// Inverse-square-distance interpolation of anchor responses onto original
/// point coordinates, followed by the sharing kernel. Cached weights are
/// normalized (they sum to one per point). Points with no anchor in radius
/// fall back to the single nearest anchor.
template <typename Scalar>
struct InterpResult {
  Mat<Scalar> out;     // C'' x N
  Mat<Scalar> pooled;  // C'_m x N, normalized weighted anchor responses
  std::vector<std::vector<Index>> sites;  // per point: anchor columns used
  std::vector<Vec<Scalar>> weights;       // per point: normalized weights
};

template <typename Scalar>
InterpResult<Scalar> spatial_interp(const Mat3X<Scalar>& original, const Mat3X<Scalar>& anchor_coords,
                                    const Mat<Scalar>& anchor_feats, Scalar radius,
                                    const Mat<Scalar>& sharing) {
  if (anchor_feats.cols() != anchor_coords.cols())
    throw std::invalid_argument("spatial_interp: anchor coordinate/feature count mismatch");
  if (sharing.cols() != anchor_feats.rows())
    throw std::invalid_argument("spatial_interp: sharing kernel width does not match anchor features");

  constexpr Scalar kMinSqDist = Scalar(1e-10);  // keeps coincident anchors finite and dominant
  const Index n = original.cols();
  const Index a = anchor_coords.cols();

  InterpResult<Scalar> r;
  r.pooled = Mat<Scalar>::Zero(anchor_feats.rows(), n);
  r.sites.resize(static_cast<std::size_t>(n));
  r.weights.resize(static_cast<std::size_t>(n));

  const Scalar r_sq = radius * radius;
  for (Index q = 0; q < n; ++q) {
    if (a == 0) continue;  // frame received no contribution; stays zero
    auto& sites = r.sites[static_cast<std::size_t>(q)];
    Index nearest = 0;
    Scalar nearest_sq = (anchor_coords.col(0) - original.col(q)).squaredNorm();
    for (Index j = 0; j < a; ++j) {
      const Scalar d_sq = (anchor_coords.col(j) - original.col(q)).squaredNorm();
      if (d_sq <= r_sq) sites.push_back(j);
      if (d_sq < nearest_sq) {
        nearest = j;
        nearest_sq = d_sq;
      }
    }
    auto& w = r.weights[static_cast<std::size_t>(q)];
    if (sites.empty()) {
      sites.push_back(nearest);
      w = Vec<Scalar>::Ones(1);
    } else {
      w.resize(static_cast<Index>(sites.size()));
      for (Index j = 0; j < w.size(); ++j) {
        const Scalar d_sq = (anchor_coords.col(sites[static_cast<std::size_t>(j)]) - original.col(q)).squaredNorm();
        w(j) = Scalar(1) / std::max(d_sq, kMinSqDist);
      }
      w /= w.sum();
    }
    for (Index j = 0; j < w.size(); ++j)
      r.pooled.col(q) += w(j) * anchor_feats.col(sites[static_cast<std::size_t>(j)]);
  }
  r.out.noalias() = sharing * r.pooled;
  return r;
}

/// Forward activation of one PST transposed convolution plus the caches the
/// backward pass needs.
template <typename Scalar>
struct TransLayerIO {
  std::vector<Mat<Scalar>> out_feats;  // L entries, C'' x N_t

  InterpolatedFrames<Scalar> interp;
  std::vector<InterpResult<Scalar>> per_frame;
  std::vector<Mat<Scalar>> encoded_feats;  // L' entries, C' x N'
  bool has_cache = false;

  void release_cache() {
    interp = {};
    per_frame.clear();
    encoded_feats.clear();
    has_cache = false;
  }
};

template <typename Scalar>
struct PstTransGrads {
  std::vector<Mat<Scalar>> encoded_feats;  // L' entries, C' x N'
  std::vector<Mat<Scalar>> taps;
  Mat<Scalar> sharing;
};

/// Composition: temporal transposed convolution, then per-frame spatial
/// interpolation onto the stored original coordinates.
template <typename Scalar>
TransLayerIO<Scalar> pst_trans_conv_forward(const std::vector<Mat<Scalar>>& encoded_feats,
                                            const std::vector<Mat3X<Scalar>>& anchor_coords,
                                            const std::vector<Mat3X<Scalar>>& original_coords,
                                            const TransKernel<Scalar>& kernel, const TubeSpec& spec) {
  for (const auto& f : encoded_feats) {
    if (f.rows() != kernel.in_channels())
      throw std::invalid_argument("pst_trans_conv_forward: encoded feature width mismatch");
  }
  TransLayerIO<Scalar> io;
  io.interp = temporal_trans_conv(encoded_feats, anchor_coords, spec, kernel.taps,
                                  static_cast<int>(original_coords.size()));
  io.out_feats.resize(original_coords.size());
  io.per_frame.resize(original_coords.size());
  for (std::size_t t = 0; t < original_coords.size(); ++t) {
    io.per_frame[t] = spatial_interp(original_coords[t], io.interp.coords[t], io.interp.feats[t],
                                     static_cast<Scalar>(spec.radius), kernel.sharing);
    io.out_feats[t] = io.per_frame[t].out;
  }
  io.encoded_feats = encoded_feats;
  io.has_cache = true;
  return io;
}

/// Gradients w.r.t. the encoded features and both kernels; interpolation
/// weights depend only on coordinates and are treated as constants.
template <typename Scalar>
PstTransGrads<Scalar> pst_trans_conv_backward(const TransLayerIO<Scalar>& io,
                                              const TransKernel<Scalar>& kernel,
                                              const std::vector<Mat<Scalar>>& grad_out) {
  if (!io.has_cache) throw std::logic_error("pst_trans_conv_backward: forward cache has been released");
  if (grad_out.size() != io.out_feats.size())
    throw std::invalid_argument("pst_trans_conv_backward: gradient frame count mismatch");

  PstTransGrads<Scalar> g;
  g.sharing = Mat<Scalar>::Zero(kernel.sharing.rows(), kernel.sharing.cols());
  g.taps.assign(kernel.taps.size(), Mat<Scalar>::Zero(kernel.mid_channels(), kernel.in_channels()));
  g.encoded_feats.reserve(io.encoded_feats.size());
  for (const auto& f : io.encoded_feats) g.encoded_feats.push_back(Mat<Scalar>::Zero(f.rows(), f.cols()));

  for (std::size_t t = 0; t < grad_out.size(); ++t) {
    const Mat<Scalar>& go = grad_out[t];
    const auto& pf = io.per_frame[t];
    if (go.rows() != kernel.out_channels() || go.cols() != io.out_feats[t].cols())
      throw std::invalid_argument("pst_trans_conv_backward: gradient shape mismatch");

    g.sharing.noalias() += go * pf.pooled.transpose();
    const Mat<Scalar> g_pool = kernel.sharing.transpose() * go;  // C'_m x N

    Mat<Scalar> g_sites = Mat<Scalar>::Zero(kernel.mid_channels(), io.interp.feats[t].cols());
    for (Index q = 0; q < g_pool.cols(); ++q) {
      const auto& sites = pf.sites[static_cast<std::size_t>(q)];
      const auto& w = pf.weights[static_cast<std::size_t>(q)];
      for (Index j = 0; j < w.size(); ++j)
        g_sites.col(sites[static_cast<std::size_t>(j)]) += w(j) * g_pool.col(q);
    }

    Index col = 0;
    for (const auto& b : io.interp.blocks[t]) {
      const Mat<Scalar>& enc = io.encoded_feats[static_cast<std::size_t>(b[0])];
      const Index n = enc.cols();
      const auto block = g_sites.middleCols(col, n);
      g.taps[static_cast<std::size_t>(b[1])].noalias() += block * enc.transpose();
      g.encoded_feats[static_cast<std::size_t>(b[0])].noalias() +=
          kernel.taps[static_cast<std::size_t>(b[1])].transpose() * block;
      col += n;
    }
  }
  return g;
}

}  // namespace pstconv
