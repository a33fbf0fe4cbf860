#pragma once

#include <cstdint>

namespace mcsc::schedule {

struct ScheduleConfig {
  std::int64_t t_total = 3000;
  double lr0_cnn = 5e-4;
  double lr0_attn = 1e-4;
  double poly_power = 0.9;
  double w_cl = 1e-3;

  void validate() const;
};

// Gaussian warm-up of the cross pseudo supervision weight:
// 0.1 * exp(-5 * (1 - t / t_total)^2), defined for 0 <= t <= t_total.
double cps_weight(std::int64_t t, std::int64_t t_total);

// lr0 * (1 - t / t_total)^power, defined for 0 <= t < t_total.
double poly_lr(std::int64_t t, std::int64_t t_total, double lr0, double power);

}  // namespace mcsc::schedule
