#pragma once

#include <string>
#include <vector>

namespace ttrd3 {

enum class ScheduleShape { Uniform };

ScheduleShape parse_schedule_shape(const std::string& name);
std::string to_string(ScheduleShape shape);

/// Residual and noise diffusion rates over T steps, with cumulants.
///
/// Index 0 of `alpha_bars` / `beta_bars` is the clean endpoint (both 0);
/// index t for t in [1, T] is the cumulant after t steps. `alphas[t-1]` and
/// `betas[t-1]` are the per-step rates of step t. Immutable after build.
class CoeffSchedule {
 public:
  CoeffSchedule(std::vector<double> alphas, std::vector<double> betas, double beta_bar_T_target);

  [[nodiscard]] int T() const { return static_cast<int>(alphas_.size()); }
  [[nodiscard]] double alpha(int t) const { return alphas_.at(static_cast<std::size_t>(t - 1)); }
  [[nodiscard]] double beta(int t) const { return betas_.at(static_cast<std::size_t>(t - 1)); }
  [[nodiscard]] double alpha_bar(int t) const { return alpha_bars_.at(static_cast<std::size_t>(t)); }
  [[nodiscard]] double beta_bar(int t) const { return beta_bars_.at(static_cast<std::size_t>(t)); }
  [[nodiscard]] double beta_bar_T_target() const { return target_; }

  [[nodiscard]] const std::vector<double>& alphas() const { return alphas_; }
  [[nodiscard]] const std::vector<double>& betas() const { return betas_; }

 private:
  std::vector<double> alphas_;
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
  std::vector<double> beta_bars_;
  double target_;
};

CoeffSchedule build_schedule(int T, double beta_bar_T, ScheduleShape shape = ScheduleShape::Uniform);

/// Reverse-step standard deviation between `t` and an earlier step `prev`:
/// sigma^2 = eta * (beta_bar_t^2 - beta_bar_prev^2) * beta_bar_prev^2 / beta_bar_t^2.
/// Reduces to eta * beta_t^2 * beta_bar_{t-1}^2 / beta_bar_t^2 for prev = t-1.
double sigma_t(const CoeffSchedule& sched, int t, int prev, double eta);

}  // namespace ttrd3
