#include "mcsc/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mcsc::schedule {

void ScheduleConfig::validate() const {
  if (t_total <= 0) throw std::invalid_argument("t_total must be positive");
  if (!(lr0_cnn > 0.0) || !(lr0_attn > 0.0)) throw std::invalid_argument("learning rates must be positive");
  if (!(poly_power > 0.0)) throw std::invalid_argument("poly_power must be positive");
  if (!(w_cl >= 0.0)) throw std::invalid_argument("w_cl must be non-negative");
}

double cps_weight(std::int64_t t, std::int64_t t_total) {
  if (t_total <= 0) throw std::invalid_argument("t_total must be positive");
  if (t < 0 || t > t_total) {
    throw std::out_of_range("cps_weight: t=" + std::to_string(t) + " outside [0, " + std::to_string(t_total) + "]");
  }
  const double remaining = 1.0 - static_cast<double>(t) / static_cast<double>(t_total);
  return 0.1 * std::exp(-5.0 * remaining * remaining);
}

double poly_lr(std::int64_t t, std::int64_t t_total, double lr0, double power) {
  if (t_total <= 0) throw std::invalid_argument("t_total must be positive");
  if (t < 0 || t >= t_total) {
    throw std::out_of_range("poly_lr: t=" + std::to_string(t) + " outside [0, " + std::to_string(t_total) + ")");
  }
  return lr0 * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(t_total), power);
}

}  // namespace mcsc::schedule
