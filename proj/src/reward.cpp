#include "skillloop/reward.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "skillloop/common.hpp"

namespace skillloop::reward {

RewardWeights RewardWeights::normalized() const {
  if (w_dice < 0 || w_stab < 0 || w_fmt < 0) throw ValidationError("reward weights must be non-negative");
  const double sum = w_dice + w_stab + w_fmt;
  if (!(sum > 0)) throw ValidationError("reward weights must not all be zero");
  return {w_dice / sum, w_stab / sum, w_fmt / sum};
}

namespace {
double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}
}  // namespace

double population_variance(std::span<const double> values) {
  if (values.empty()) throw ValidationError("variance of an empty list");
  const double m = mean_of(values);
  double ss = 0.0;
  for (double x : values) ss += (x - m) * (x - m);
  return ss / static_cast<double>(values.size());
}

GroupStats group_metrics(std::span<const double> dices, bool sample) {
  if (dices.empty()) throw ValidationError("group_metrics: empty list");
  GroupStats s;
  s.mean = mean_of(dices);
  double ss = 0.0;
  for (double x : dices) ss += (x - s.mean) * (x - s.mean);
  const double denom = sample && dices.size() > 1 ? static_cast<double>(dices.size() - 1) : static_cast<double>(dices.size());
  s.std = std::sqrt(ss / denom);
  s.worst = *std::min_element(dices.begin(), dices.end());
  return s;
}

double stability_term(std::span<const double> dices) {
  if (dices.empty()) throw ValidationError("stability_term: empty list");
  const double sd = group_metrics(dices).std;
  return 1.0 - std::min(1.0, sd / 0.5);
}

RewardBreakdown composite_reward(double dice, double stability, double format, const RewardWeights& weights) {
  auto check = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(std::string("composite_reward: ") + name + " term outside [0,1]");
  };
  check(dice, "dice");
  check(stability, "stability");
  check(format, "format");
  const RewardWeights w = weights.normalized();
  RewardBreakdown r{dice, stability, format, 0.0};
  r.composite = std::clamp(w.w_dice * dice + w.w_stab * stability + w.w_fmt * format, 0.0, 1.0);
  return r;
}

double objective(std::span<const std::vector<double>> group_dices, double lambda) {
  if (group_dices.empty()) throw ValidationError("objective: no groups");
  if (lambda < 0) throw ValidationError("objective: lambda must be >= 0");
  double total = 0.0;
  for (const auto& g : group_dices) total += mean_of(g) - lambda * population_variance(g);
  return total / static_cast<double>(group_dices.size());
}

std::vector<double> grpo_advantages(std::span<const double> rewards) {
  std::vector<double> out(rewards.size(), 0.0);
  if (rewards.empty()) return out;
  const auto s = group_metrics(rewards);
  if (s.std < 1e-8) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - s.mean) / s.std;
  return out;
}

}  // namespace skillloop::reward
