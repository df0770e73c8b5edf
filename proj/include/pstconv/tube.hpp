#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "pstconv/geom.hpp"
#include "pstconv/types.hpp"

namespace pstconv {

/// Centered tubes put the anchor in the middle of the temporal window;
/// trailing tubes put it at the last frame of the window.
enum class AnchorMode { Centered, Trailing };

/// Hyperparameters of one PST convolution: temporal kernel size l (odd),
/// temporal stride and padding [p1, p2], spatial subsampling rate, spatial
/// search radius and neighbor count K.
struct TubeSpec {
  int temporal_kernel = 1;
  int temporal_stride = 1;
  std::array<int, 2> temporal_padding{0, 0};
  int spatial_stride = 1;
  double radius = 1.0;
  int neighbors = 1;
  AnchorMode anchor_mode = AnchorMode::Centered;

  void validate() const {
    if (temporal_kernel < 1 || temporal_kernel % 2 == 0)
      throw std::invalid_argument("TubeSpec: temporal kernel size must be odd and >= 1");
    if (temporal_padding[0] < 0 || temporal_padding[1] < 0)
      throw std::invalid_argument("TubeSpec: padding must be non-negative");
    if (temporal_kernel / 2 < std::max(temporal_padding[0], temporal_padding[1]))
      throw std::invalid_argument("TubeSpec: floor(l/2) must be >= max(p1, p2)");
    if (temporal_stride < 1) throw std::invalid_argument("TubeSpec: temporal stride must be >= 1");
    if (spatial_stride < 1) throw std::invalid_argument("TubeSpec: spatial stride must be >= 1");
    if (!(radius > 0.0)) throw std::invalid_argument("TubeSpec: radius must be positive");
    if (neighbors < 1) throw std::invalid_argument("TubeSpec: neighbor count must be >= 1");
  }

  int half_kernel() const { return temporal_kernel / 2; }

  /// Temporal offset of tap k in [0, l): {-l/2..l/2} centered, {-(l-1)..0} trailing.
  int offset(int tap) const {
    return anchor_mode == AnchorMode::Centered ? tap - half_kernel() : tap - (temporal_kernel - 1);
  }

  /// L' = floor((L + p1 + p2 - l) / s_t) + 1. Throws when the sequence is too
  /// short for this spec.
  int out_frames(int in_frames) const {
    const int span = in_frames + temporal_padding[0] + temporal_padding[1] - temporal_kernel;
    if (in_frames < 1 || span < 0)
      throw std::invalid_argument("TubeSpec: sequence too short for temporal spec");
    return span / temporal_stride + 1;
  }

  /// N' = floor(N / s_s); at least one anchor point is required.
  Index out_points(Index in_points) const {
    const Index n = in_points / spatial_stride;
    if (n < 1) throw std::invalid_argument("TubeSpec: too few points for spatial stride");
    return n;
  }
};

/// Frame indices the tubes are rooted at. Indices are guaranteed in range.
inline std::vector<int> select_anchor_frames(int num_frames, const TubeSpec& spec) {
  spec.validate();
  const int count = spec.out_frames(num_frames);
  std::vector<int> frames(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int base = i * spec.temporal_stride - spec.temporal_padding[0];
    const int anchor = spec.anchor_mode == AnchorMode::Centered
                           ? base + spec.half_kernel()
                           : base + spec.temporal_kernel - 1;
    if (anchor < 0 || anchor >= num_frames)
      throw std::invalid_argument("select_anchor_frames: anchor frame falls outside the sequence");
    frames[static_cast<std::size_t>(i)] = anchor;
  }
  return frames;
}

/// FPS-sampled anchor points of one anchor frame: coordinates plus the source
/// point indices they were copied from.
template <typename Scalar>
struct AnchorSet {
  Mat3X<Scalar> coords;
  std::vector<Index> source;
};

/// Materialized index structure a PST convolution runs over: L' anchor
/// frames, N' anchors each, and one neighbor list per (anchor frame, tap,
/// anchor). Taps whose frame falls into the temporal padding are invalid and
/// carry empty neighbor data.
template <typename Scalar>
struct PointTube {
  std::vector<int> anchor_frames;                                   // L'
  std::vector<AnchorSet<Scalar>> anchors;                           // per anchor frame
  std::vector<std::vector<std::vector<NeighborList<Scalar>>>> slices;  // [L'][l][N']
  std::vector<std::vector<std::uint8_t>> slice_valid;               // [L'][l]

  int num_anchor_frames() const { return static_cast<int>(anchor_frames.size()); }
  Index points_per_frame() const { return anchors.empty() ? 0 : anchors.front().coords.cols(); }
};

/// Builds the point tube for `seq`: anchors are FPS-sampled per anchor frame,
/// copied unchanged to the windowed frames, and every valid (anchor, tap)
/// slice gets a radius neighbor query against that frame's points.
template <typename Scalar>
PointTube<Scalar> build_tube(const PointCloudSequence<Scalar>& seq, const TubeSpec& spec,
                             const Sampling& sampling = Sampling::deterministic()) {
  spec.validate();
  const int num_frames = seq.num_frames();
  const Index points = seq.points_per_frame();
  const Index n_out = spec.out_points(points);
  const int l = spec.temporal_kernel;

  PointTube<Scalar> tube;
  tube.anchor_frames = select_anchor_frames(num_frames, spec);
  const int anchor_count = tube.num_anchor_frames();
  tube.anchors.resize(static_cast<std::size_t>(anchor_count));
  tube.slices.resize(static_cast<std::size_t>(anchor_count));
  tube.slice_valid.resize(static_cast<std::size_t>(anchor_count));

  for (int i = 0; i < anchor_count; ++i) {
    const int frame = tube.anchor_frames[static_cast<std::size_t>(i)];
    const auto& frame_coords = seq.frames[static_cast<std::size_t>(frame)].coords;

    auto& anchors = tube.anchors[static_cast<std::size_t>(i)];
    anchors.source = farthest_point_sample(frame_coords, n_out, sampling.fork(0xF5u, static_cast<std::uint64_t>(frame)));
    anchors.coords.resize(3, n_out);
    for (Index n = 0; n < n_out; ++n)
      anchors.coords.col(n) = frame_coords.col(anchors.source[static_cast<std::size_t>(n)]);

    auto& taps = tube.slices[static_cast<std::size_t>(i)];
    auto& valid = tube.slice_valid[static_cast<std::size_t>(i)];
    taps.resize(static_cast<std::size_t>(l));
    valid.assign(static_cast<std::size_t>(l), 0);
    for (int k = 0; k < l; ++k) {
      const int target = frame + spec.offset(k);
      if (target < 0 || target >= num_frames) continue;  // padding: masked out
      valid[static_cast<std::size_t>(k)] = 1;
      const auto& target_coords = seq.frames[static_cast<std::size_t>(target)].coords;
      auto& lists = taps[static_cast<std::size_t>(k)];
      lists.resize(static_cast<std::size_t>(n_out));
      for (Index n = 0; n < n_out; ++n) {
        const Vec3<Scalar> anchor = anchors.coords.col(n);
        lists[static_cast<std::size_t>(n)] = radius_neighbors<Scalar>(
            anchor, target_coords, static_cast<Scalar>(spec.radius), spec.neighbors,
            sampling.fork(0x4Eu, static_cast<std::uint64_t>(i) * 0x10000u + static_cast<std::uint64_t>(k),
                          static_cast<std::uint64_t>(n)));
      }
    }
  }
  return tube;
}

}  // namespace pstconv
