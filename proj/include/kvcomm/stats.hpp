#pragma once

#include <optional>
#include <span>
#include <vector>

namespace kvcomm {

/// Ranks starting at 1; tied values share their average rank.
std::vector<double> average_ranks(std::span<const double> x);

/// Spearman rank correlation (Pearson on average ranks). Empty when either
/// input is constant. Throws ContractViolation on unequal lengths or n < 2.
std::optional<double> spearman(std::span<const double> x, std::span<const double> y);

double mean(std::span<const double> x);

/// Population standard deviation; 0 for fewer than two values.
double stddev(std::span<const double> x);

} // namespace kvcomm
