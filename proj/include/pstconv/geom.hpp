#pragma once

#include <algorithm>
#include <stdexcept>
#include <utility>
#include <vector>

#include "pstconv/random.hpp"
#include "pstconv/types.hpp"

namespace pstconv {

/// Radius-bounded neighborhood of one anchor. Always holds exactly K entries;
/// indices repeat when fewer than K points fall inside the radius. clamped is
/// true iff no point was in range and the globally nearest one was substituted.
template <typename Scalar>
struct NeighborList {
  std::vector<Index> indices;
  Mat3X<Scalar> displacements;  // 3xK, neighbor minus anchor
  bool clamped = false;

  Index size() const { return static_cast<Index>(indices.size()); }
};

namespace detail {

/// Index of the smallest point in (x, y, z, index) lexicographic order.
template <typename Scalar>
Index lexicographic_min(const Mat3X<Scalar>& points) {
  Index best = 0;
  for (Index i = 1; i < points.cols(); ++i) {
    for (int d = 0; d < 3; ++d) {
      if (points(d, i) < points(d, best)) {
        best = i;
        break;
      }
      if (points(d, i) > points(d, best)) break;
    }
  }
  return best;
}

}  // namespace detail

/// Greedy max-min-distance subset selection. The first pick is the
/// lexicographically smallest point (deterministic mode) or seeded-uniform;
/// every following pick maximizes the minimum Euclidean distance to the
/// already-selected set, ties broken by smallest index.
template <typename Scalar>
std::vector<Index> farthest_point_sample(const Mat3X<Scalar>& points, Index n_out,
                                         const Sampling& sampling = Sampling::deterministic()) {
  const Index n = points.cols();
  if (n < 1) throw std::invalid_argument("farthest_point_sample: empty point set");
  if (n_out < 1 || n_out > n)
    throw std::invalid_argument("farthest_point_sample: n_out must be in [1, N]");

  Index first;
  if (sampling.is_seeded()) {
    Rng rng(sampling.seed);
    first = static_cast<Index>(rng.next_below(static_cast<std::uint64_t>(n)));
  } else {
    first = detail::lexicographic_min(points);
  }

  std::vector<Index> picked;
  picked.reserve(static_cast<std::size_t>(n_out));
  picked.push_back(first);

  std::vector<char> selected(static_cast<std::size_t>(n), 0);
  selected[static_cast<std::size_t>(first)] = 1;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> min_sq =
      (points.colwise() - points.col(first)).colwise().squaredNorm().transpose().array();

  while (static_cast<Index>(picked.size()) < n_out) {
    Index best = -1;
    Scalar best_d = Scalar(-1);
    for (Index i = 0; i < n; ++i) {
      if (selected[static_cast<std::size_t>(i)]) continue;
      if (best < 0 || min_sq(i) > best_d) {
        best = i;
        best_d = min_sq(i);
      }
    }
    picked.push_back(best);
    selected[static_cast<std::size_t>(best)] = 1;
    const auto d = (points.colwise() - points.col(best)).colwise().squaredNorm().transpose().array();
    min_sq = min_sq.min(d);
  }
  return picked;
}

/// Neighbors of `anchor` within `radius` (inclusive), capped or padded to
/// exactly K entries. With at least K candidates, deterministic mode keeps the
/// K nearest (ties by index) and seeded mode samples K without replacement.
/// With fewer, entries repeat (deterministic: cycled nearest-first; seeded:
/// uniform repeats). With none, the globally nearest point fills the list and
/// clamped is set.
template <typename Scalar>
NeighborList<Scalar> radius_neighbors(const Vec3<Scalar>& anchor, const Mat3X<Scalar>& points,
                                      Scalar radius, Index k,
                                      const Sampling& sampling = Sampling::deterministic()) {
  const Index n = points.cols();
  if (n < 1) throw std::invalid_argument("radius_neighbors: empty point set");
  if (k < 1) throw std::invalid_argument("radius_neighbors: K must be >= 1");
  if (!(radius > Scalar(0))) throw std::invalid_argument("radius_neighbors: radius must be positive");

  const Eigen::Array<Scalar, Eigen::Dynamic, 1> sq =
      (points.colwise() - anchor).colwise().squaredNorm().transpose().array();
  const Scalar r_sq = radius * radius;

  std::vector<std::pair<Scalar, Index>> in_range;
  in_range.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    if (sq(i) <= r_sq) in_range.emplace_back(sq(i), i);
  }
  std::sort(in_range.begin(), in_range.end());  // by (distance, index)

  NeighborList<Scalar> out;
  out.indices.resize(static_cast<std::size_t>(k));

  const Index m = static_cast<Index>(in_range.size());
  if (m == 0) {
    Index nearest = 0;
    for (Index i = 1; i < n; ++i) {
      if (sq(i) < sq(nearest)) nearest = i;
    }
    std::fill(out.indices.begin(), out.indices.end(), nearest);
    out.clamped = true;
  } else if (m >= k) {
    if (!sampling.is_seeded()) {
      for (Index j = 0; j < k; ++j) out.indices[static_cast<std::size_t>(j)] = in_range[static_cast<std::size_t>(j)].second;
    } else {
      // partial Fisher-Yates over the candidate pool: K without replacement
      Rng rng(sampling.seed);
      for (Index j = 0; j < k; ++j) {
        const Index pick = j + static_cast<Index>(rng.next_below(static_cast<std::uint64_t>(m - j)));
        std::swap(in_range[static_cast<std::size_t>(j)], in_range[static_cast<std::size_t>(pick)]);
        out.indices[static_cast<std::size_t>(j)] = in_range[static_cast<std::size_t>(j)].second;
      }
    }
  } else {
    // fewer candidates than K: repeat neighbors to fill the slice
    for (Index j = 0; j < m; ++j) out.indices[static_cast<std::size_t>(j)] = in_range[static_cast<std::size_t>(j)].second;
    if (!sampling.is_seeded()) {
      for (Index j = m; j < k; ++j)
        out.indices[static_cast<std::size_t>(j)] = in_range[static_cast<std::size_t>(j % m)].second;
    } else {
      Rng rng(sampling.seed);
      for (Index j = m; j < k; ++j)
        out.indices[static_cast<std::size_t>(j)] =
            in_range[static_cast<std::size_t>(rng.next_below(static_cast<std::uint64_t>(m)))].second;
    }
  }

  out.displacements.resize(3, k);
  for (Index j = 0; j < k; ++j)
    out.displacements.col(j) = points.col(out.indices[static_cast<std::size_t>(j)]) - anchor;
  return out;
}

}  // namespace pstconv
