#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "slmlab/common.hpp"

namespace slm {

// L(D, W, N) = L0 + a D^-alpha + b W^-beta + c N^-gamma
struct ScalingLawFit {
  double l0 = 0, a = 0, b = 0, c = 0;
  double alpha = 1, beta = 1, gamma = 1;
  double residual_rmse = 0;  // in loss (PPL) space
  std::vector<std::array<double, 4>> points;  // fitted-on (D, W, N, loss)
  uint64_t seed = 0;
  std::string method;
};

struct FitOptions {
  int64_t n_starts = 20;
  uint64_t seed = 0;
  bool include_data_term = true;  // off: fixed-N fit, data term neglected
  int64_t max_iters = 300;
};

// Damped least squares (Levenberg-Marquardt) on Huber-weighted PPL
// residuals; nonnegative coefficients and positive exponents enforced by
// softplus reparameterization; multi-start with deterministic reduction
// (lowest robust loss, then lowest start index). After the main fit, each
// power-law term is tentatively pinned to zero and the pruned fit kept when
// it matches the full one, so vanishing terms come out exactly zero.
ScalingLawFit fit_scaling_law(const std::vector<std::array<double, 4>>& records,
                              const FitOptions& opt = {});

double predict(const ScalingLawFit& fit, double depth, double width, double data);

struct SweetSpot {
  bool feasible = false;
  int64_t depth = 0;
  int64_t width = 0;
  double predicted_loss = 0;
  double latency = 0;
  double budget = 0;
};

// Minimum-predicted-loss candidate whose estimated latency fits the budget;
// ties break toward smaller latency, then smaller depth. The latency
// estimator is typically latency_lut::estimate composed over a decoded spec.
SweetSpot sweet_spot(const ScalingLawFit& fit,
                     const std::function<double(int64_t, int64_t)>& latency_s,
                     double budget_s,
                     const std::vector<std::pair<int64_t, int64_t>>& candidates,
                     double data_size = 1e9);

std::string fit_to_json(const ScalingLawFit& fit);
ScalingLawFit fit_from_json(const std::string& text);

}  // namespace slm
