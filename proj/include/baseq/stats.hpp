#pragma once

#include <vector>

#include "baseq/tensor.hpp"

namespace baseq {

/// Population statistics of a [tokens × channels] activation matrix.
struct ChannelStats {
  std::vector<double> means;
  std::vector<double> vars;
  double total_var = 0.0;     ///< variance over every element
  double var_of_means = 0.0;  ///< variance of the per-channel means

  double mean_channel_var() const;
};

/// Throws ValidationError("empty input") when X has no rows or columns.
ChannelStats channel_stats(const Tensor& x);

/// Population mean/variance of all elements.
double mean_of(const Tensor& x);
double variance_of(const Tensor& x);

}  // namespace baseq
