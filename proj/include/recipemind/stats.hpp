#pragma once

#include <optional>
#include <span>

namespace recipemind::stats {

double mean(std::span<const double> values);
// Average of the two middle values for even lengths.
double median(std::span<const double> values);
// Population standard deviation (divides by n).
double population_std(std::span<const double> values);
double rmse(std::span<const double> predictions, std::span<const double> targets);
// Undefined (nullopt) for fewer than two points or a zero-variance side.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

}  // namespace recipemind::stats
