#pragma once

#include <span>
#include <vector>

namespace euprint::stats {

double mean(std::span<const double> v);
/// Population standard deviation.
double stddev(std::span<const double> v);
/// Linearly interpolated percentile, q in [0, 100].
double percentile(std::vector<double> v, double q);
inline double median(std::vector<double> v) { return percentile(std::move(v), 50.0); }
double pearson(std::span<const double> a, std::span<const double> b);

}  // namespace euprint::stats
