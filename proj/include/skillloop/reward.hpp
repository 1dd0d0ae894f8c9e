#pragma once

// Composite reward, stability-aware objective, group-relative advantages and
// robustness metrics. Population statistics (divide by N) throughout unless a
// function says otherwise.

#include <span>
#include <vector>

namespace skillloop::reward {

struct RewardWeights {
  double w_dice = 0.7;
  double w_stab = 0.2;
  double w_fmt = 0.1;

  /// Rescales to sum 1; throws on negative weights or a zero sum.
  RewardWeights normalized() const;
};

struct RewardBreakdown {
  double dice_term = 0.0;
  double stability_term = 0.0;
  double format_term = 0.0;
  double composite = 0.0;

  bool operator==(const RewardBreakdown&) const = default;
};

struct GroupStats {
  double mean = 0.0;
  double std = 0.0;
  double worst = 0.0;
};

/// Mean, standard deviation and minimum. `sample` switches to the N-1
/// denominator (reporting comparisons only). Throws on an empty list.
GroupStats group_metrics(std::span<const double> dices, bool sample = false);

double population_variance(std::span<const double> values);

/// 1 - min(1, std / 0.5); 0.5 is the largest population std of values in [0,1].
double stability_term(std::span<const double> dices);

/// Throws if a term lies outside [0,1].
RewardBreakdown composite_reward(double dice, double stability, double format, const RewardWeights& weights = {});

/// Mean over groups of mean(dices) - lambda * variance(dices).
double objective(std::span<const std::vector<double>> group_dices, double lambda = 1.0);

/// (r - mean) / std, or all zeros when std < 1e-8.
std::vector<double> grpo_advantages(std::span<const double> rewards);

}  // namespace skillloop::reward
