#include <array>
#include <cmath>
#include <vector>

#include "pstconv/data.hpp"

namespace pstconv {

namespace {

struct Segment {
  double x0, y0, x1, y1;
};

double point_segment_distance(double px, double py, const Segment& s) {
  const double dx = s.x1 - s.x0;
  const double dy = s.y1 - s.y0;
  const double len_sq = dx * dx + dy * dy;
  double t = 0.0;
  if (len_sq > 0.0) {
    t = ((px - s.x0) * dx + (py - s.y0) * dy) / len_sq;
    t = std::clamp(t, 0.0, 1.0);
  }
  const double cx = s.x0 + t * dx;
  const double cy = s.y0 + t * dy;
  return std::hypot(px - cx, py - cy);
}

// Stroke polylines on a 28x28 grid (x right, y down), one glyph per digit.
const std::vector<std::vector<Segment>>& digit_strokes() {
  auto poly = [](std::initializer_list<std::array<double, 2>> pts) {
    std::vector<Segment> segs;
    auto it = pts.begin();
    auto prev = *it++;
    for (; it != pts.end(); ++it) {
      segs.push_back({prev[0], prev[1], (*it)[0], (*it)[1]});
      prev = *it;
    }
    return segs;
  };
  auto join = [](std::vector<Segment> a, const std::vector<Segment>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  static const std::vector<std::vector<Segment>> strokes = {
      // 0
      poly({{10, 4}, {18, 4}, {22, 9}, {22, 19}, {18, 24}, {10, 24}, {6, 19}, {6, 9}, {10, 4}}),
      // 1
      join(poly({{12, 7}, {16, 4}, {16, 24}}), poly({{11, 24}, {21, 24}})),
      // 2
      poly({{7, 9}, {9, 5}, {14, 4}, {19, 5}, {21, 9}, {20, 13}, {7, 24}, {21, 24}}),
      // 3
      poly({{7, 6}, {12, 4}, {17, 4}, {20, 7}, {19, 11}, {14, 13}, {19, 15}, {21, 19}, {17, 23},
            {11, 24}, {7, 22}}),
      // 4
      join(poly({{17, 4}, {7, 17}, {22, 17}}), poly({{17, 4}, {17, 24}})),
      // 5
      poly({{20, 4}, {8, 4}, {7, 13}, {15, 11}, {20, 14}, {20, 19}, {15, 24}, {8, 23}}),
      // 6
      poly({{19, 5}, {12, 4}, {7, 11}, {6, 18}, {10, 24}, {16, 24}, {20, 19}, {18, 14}, {12, 13},
            {7, 16}}),
      // 7
      join(poly({{6, 4}, {21, 4}, {12, 24}}), poly({{10, 14}, {18, 14}})),
      // 8
      poly({{14, 13}, {9, 10}, {9, 6}, {14, 4}, {19, 6}, {19, 10}, {14, 13}, {8, 16}, {8, 21},
            {14, 24}, {20, 21}, {20, 16}, {14, 13}}),
      // 9
      poly({{21, 12}, {16, 15}, {9, 14}, {7, 9}, {11, 4}, {17, 4}, {21, 9}, {21, 16}, {17, 24},
            {10, 24}}),
  };
  return strokes;
}

constexpr double kStrokeWidth = 1.6;

}  // namespace

Eigen::Matrix2Xd builtin_digit_points(int digit, std::uint64_t seed) {
  if (digit < 0 || digit > 9) throw std::invalid_argument("builtin_digit_points: digit out of range");
  const auto& segs = digit_strokes()[static_cast<std::size_t>(digit)];
  std::vector<Eigen::Vector2d> lit;
  for (int y = 0; y < 28; ++y) {
    for (int x = 0; x < 28; ++x) {
      for (const auto& s : segs) {
        if (point_segment_distance(x, y, s) <= kStrokeWidth) {
          lit.emplace_back(static_cast<double>(x), static_cast<double>(y));
          break;
        }
      }
    }
  }
  return sample_digit_pixels(std::move(lit), seed);
}

}  // namespace pstconv
