#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pstconv {

using Index = Eigen::Index;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Mat3X = Eigen::Matrix<Scalar, 3, Eigen::Dynamic>;
template <typename Scalar>
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;

/// One frame of a point cloud sequence: 3xN coordinates plus CxN per-point
/// features. C may be zero (coordinates-only input).
template <typename Scalar>
struct Frame {
  Mat3X<Scalar> coords;
  Mat<Scalar> feats;  // CxN; 0xN when the frame carries no features

  Index num_points() const { return coords.cols(); }
  Index channels() const { return feats.rows(); }
};

/// Ordered list of L frames. Frames are unordered point sets internally.
template <typename Scalar>
struct PointCloudSequence {
  std::vector<Frame<Scalar>> frames;

  int num_frames() const { return static_cast<int>(frames.size()); }

  /// Points per frame. Throws if frames disagree.
  Index points_per_frame() const {
    if (frames.empty()) throw std::invalid_argument("sequence has no frames");
    const Index n = frames.front().num_points();
    for (const auto& f : frames) {
      if (f.num_points() != n)
        throw std::invalid_argument("sequence has inconsistent per-frame point counts");
    }
    return n;
  }

  Index feature_channels() const {
    if (frames.empty()) throw std::invalid_argument("sequence has no frames");
    const Index c = frames.front().channels();
    for (const auto& f : frames) {
      if (f.channels() != c)
        throw std::invalid_argument("sequence has inconsistent feature widths");
    }
    return c;
  }
};

/// Raised when training or inference produces non-finite values.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised on malformed files (bad magic, truncation, schema violations).
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace pstconv
