#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pstconv/nn.hpp"

namespace pstconv {

/// Central finite-difference checks of every differentiable operation plus a
/// two-layer end-to-end micro network, on seeded random instances.
std::vector<std::pair<std::string, GradCheckReport>> run_gradcheck_suite(std::uint64_t seed,
                                                                         double eps = 1e-5);

}  // namespace pstconv
