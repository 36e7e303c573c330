#include "ttrd3/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace ttrd3 {

ScheduleShape parse_schedule_shape(const std::string& name) {
  if (name == "uniform") return ScheduleShape::Uniform;
  throw std::invalid_argument("unknown schedule shape '" + name + "'");
}

std::string to_string(ScheduleShape shape) {
  switch (shape) {
    case ScheduleShape::Uniform:
      return "uniform";
  }
  return "unknown";
}

CoeffSchedule::CoeffSchedule(std::vector<double> alphas, std::vector<double> betas, double beta_bar_T_target)
    : alphas_(std::move(alphas)), betas_(std::move(betas)), target_(beta_bar_T_target) {
  if (alphas_.empty() || alphas_.size() != betas_.size()) {
    throw std::invalid_argument("schedule needs equal, nonzero numbers of alphas and betas");
  }
  alpha_bars_.assign(alphas_.size() + 1, 0.0);
  beta_bars_.assign(betas_.size() + 1, 0.0);
  double a = 0.0, b2 = 0.0;
  for (std::size_t i = 0; i < alphas_.size(); ++i) {
    if (!(alphas_[i] > 0.0) || !(betas_[i] > 0.0)) throw std::invalid_argument("schedule rates must be positive");
    a += alphas_[i];
    b2 += betas_[i] * betas_[i];
    alpha_bars_[i + 1] = a;
    beta_bars_[i + 1] = std::sqrt(b2);
  }
}

CoeffSchedule build_schedule(int T, double beta_bar_T, ScheduleShape shape) {
  if (T < 1) throw std::invalid_argument("schedule step count T must be >= 1");
  if (!(beta_bar_T > 0.0)) throw std::invalid_argument("terminal noise intensity must be > 0");
  std::vector<double> alphas, betas;
  switch (shape) {
    case ScheduleShape::Uniform:
      alphas.assign(static_cast<std::size_t>(T), 1.0 / T);
      betas.assign(static_cast<std::size_t>(T), beta_bar_T / std::sqrt(static_cast<double>(T)));
      break;
  }
  return CoeffSchedule(std::move(alphas), std::move(betas), beta_bar_T);
}

double sigma_t(const CoeffSchedule& sched, int t, int prev, double eta) {
  if (!(prev >= 0 && prev < t && t <= sched.T())) {
    throw std::invalid_argument("sigma_t requires 0 <= prev < t <= T");
  }
  if (eta < 0.0) throw std::invalid_argument("eta must be non-negative");
  const double bt2 = sched.beta_bar(t) * sched.beta_bar(t);
  const double bp2 = sched.beta_bar(prev) * sched.beta_bar(prev);
  const double var = eta * (bt2 - bp2) * bp2 / bt2;
  return std::sqrt(std::max(var, 0.0));
}

}  // namespace ttrd3
