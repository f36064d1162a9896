#include "baseq/stats.hpp"

#include "baseq/error.hpp"

namespace baseq {

double ChannelStats::mean_channel_var() const {
  double s = 0.0;
  for (double v : vars) s += v;
  return vars.empty() ? 0.0 : s / double(vars.size());
}

ChannelStats channel_stats(const Tensor& x) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  if (rows == 0 || cols == 0) throw ValidationError("empty input");

  ChannelStats st;
  st.means.assign(cols, 0.0);
  st.vars.assign(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = x.row(r);
    for (std::size_t j = 0; j < cols; ++j) st.means[j] += row[j];
  }
  for (double& m : st.means) m /= double(rows);
  // Two-pass variance keeps total = within + between tight in floating point.
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = x.row(r);
    for (std::size_t j = 0; j < cols; ++j) {
      const double d = row[j] - st.means[j];
      st.vars[j] += d * d;
    }
  }
  for (double& v : st.vars) v /= double(rows);

  double grand = 0.0;
  for (double m : st.means) grand += m;
  grand /= double(cols);
  double vm = 0.0;
  for (double m : st.means) vm += (m - grand) * (m - grand);
  st.var_of_means = vm / double(cols);
  st.total_var = variance_of(x);
  return st;
}

double mean_of(const Tensor& x) {
  if (x.empty()) throw ValidationError("empty input");
  double s = 0.0;
  for (double v : x.data()) s += v;
  return s / double(x.size());
}

double variance_of(const Tensor& x) {
  const double m = mean_of(x);
  double s = 0.0;
  for (double v : x.data()) s += (v - m) * (v - m);
  return s / double(x.size());
}

}  // namespace baseq
