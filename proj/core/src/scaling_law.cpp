#include "slmlab/scaling_law.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <set>

#include <json.hpp>

namespace slm {

namespace {

double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double softplus_inv(double y) {
  if (y > 30.0) return y;
  y = std::max(y, 1e-12);
  return std::log(std::expm1(y));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Terms {
  bool depth = true, width = true, data = true;
  int n_params() const { return 1 + 2 * (depth + width + data); }
};

// raw parameter layout: [L0, a, alpha, b, beta, c, gamma] (inactive slots skipped)
struct Packed {
  Terms terms;
  std::array<double, 7> raw{};  // always full layout; inactive entries ignored

  std::array<double, 7> values() const {
    return {softplus(raw[0]), softplus(raw[1]), softplus(raw[2]), softplus(raw[3]),
            softplus(raw[4]), softplus(raw[5]), softplus(raw[6])};
  }
};

double predict_values(const std::array<double, 7>& v, const Terms& t, double d, double w,
                      double n) {
  double out = v[0];
  if (t.depth) out += v[1] * std::pow(d, -v[2]);
  if (t.width) out += v[3] * std::pow(w, -v[4]);
  if (t.data) out += v[5] * std::pow(n, -v[6]);
  return out;
}

struct LmResult {
  Packed p;
  double robust_loss = 1e300;
};

double huber_loss(const std::vector<double>& r, double delta) {
  double acc = 0;
  for (double x : r) {
    const double a = std::fabs(x);
    acc += a <= delta ? 0.5 * x * x : delta * (a - 0.5 * delta);
  }
  return acc;
}

double huber_delta(std::vector<double> abs_r) {
  if (abs_r.empty()) return 1.0;
  std::nth_element(abs_r.begin(), abs_r.begin() + abs_r.size() / 2, abs_r.end());
  return std::max(1.345 * abs_r[abs_r.size() / 2], 1e-9);
}

LmResult lm_fit(const std::vector<std::array<double, 4>>& pts, const Terms& terms,
                Packed p0, int64_t max_iters) {
  const size_t n = pts.size();
  std::vector<int> idx;  // active raw slots
  idx.push_back(0);
  if (terms.depth) {
    idx.push_back(1);
    idx.push_back(2);
  }
  if (terms.width) {
    idx.push_back(3);
    idx.push_back(4);
  }
  if (terms.data) {
    idx.push_back(5);
    idx.push_back(6);
  }
  const size_t np = idx.size();

  Packed p = p0;
  p.terms = terms;

  auto residuals = [&](const Packed& q, std::vector<double>* out) {
    auto v = q.values();
    out->resize(n);
    for (size_t i = 0; i < n; ++i)
      (*out)[i] = predict_values(v, terms, pts[i][0], pts[i][1], pts[i][2]) - pts[i][3];
  };

  std::vector<double> r, r_try, abs_r(n);
  residuals(p, &r);
  for (size_t i = 0; i < n; ++i) abs_r[i] = std::fabs(r[i]);
  double delta = huber_delta(abs_r);
  double loss = huber_loss(r, delta);

  double lambda = 1e-3;
  std::vector<std::vector<double>> jac(n, std::vector<double>(np));
  for (int64_t iter = 0; iter < max_iters; ++iter) {
    const auto v = p.values();
    // analytic Jacobian through the softplus reparameterization
    for (size_t i = 0; i < n; ++i) {
      const double d = pts[i][0], w = pts[i][1], nn = pts[i][2];
      size_t col = 0;
      jac[i][col++] = sigmoid(p.raw[0]);  // dL0
      if (terms.depth) {
        const double pd = std::pow(d, -v[2]);
        jac[i][col++] = pd * sigmoid(p.raw[1]);
        jac[i][col++] = -v[1] * std::log(d) * pd * sigmoid(p.raw[2]);
      }
      if (terms.width) {
        const double pw = std::pow(w, -v[4]);
        jac[i][col++] = pw * sigmoid(p.raw[3]);
        jac[i][col++] = -v[3] * std::log(w) * pw * sigmoid(p.raw[4]);
      }
      if (terms.data) {
        const double pn = std::pow(nn, -v[6]);
        jac[i][col++] = pn * sigmoid(p.raw[5]);
        jac[i][col++] = -v[5] * std::log(nn) * pn * sigmoid(p.raw[6]);
      }
    }
    // IRLS Huber weights from current residuals
    std::vector<double> wgt(n);
    for (size_t i = 0; i < n; ++i) {
      const double a = std::fabs(r[i]);
      wgt[i] = a <= delta ? 1.0 : delta / a;
    }
    // normal equations
    std::vector<std::vector<double>> ata(np, std::vector<double>(np, 0.0));
    std::vector<double> atb(np, 0.0);
    for (size_t i = 0; i < n; ++i) {
      for (size_t a = 0; a < np; ++a) {
        atb[a] -= wgt[i] * jac[i][a] * r[i];
        for (size_t b = a; b < np; ++b) ata[a][b] += wgt[i] * jac[i][a] * jac[i][b];
      }
    }
    for (size_t a = 0; a < np; ++a)
      for (size_t b = 0; b < a; ++b) ata[a][b] = ata[b][a];

    bool stepped = false;
    for (int attempt = 0; attempt < 8 && !stepped; ++attempt) {
      auto m = ata;
      for (size_t a = 0; a < np; ++a) m[a][a] += lambda * (1.0 + ata[a][a]);
      // Gaussian elimination with partial pivoting
      std::vector<double> x = atb;
      std::vector<std::vector<double>> lu = m;
      std::vector<size_t> perm(np);
      for (size_t i = 0; i < np; ++i) perm[i] = i;
      bool singular = false;
      for (size_t col = 0; col < np && !singular; ++col) {
        size_t piv = col;
        for (size_t rj = col + 1; rj < np; ++rj)
          if (std::fabs(lu[rj][col]) > std::fabs(lu[piv][col])) piv = rj;
        if (std::fabs(lu[piv][col]) < 1e-300) {
          singular = true;
          break;
        }
        std::swap(lu[piv], lu[col]);
        std::swap(x[piv], x[col]);
        for (size_t rj = col + 1; rj < np; ++rj) {
          const double f = lu[rj][col] / lu[col][col];
          for (size_t cj = col; cj < np; ++cj) lu[rj][cj] -= f * lu[col][cj];
          x[rj] -= f * x[col];
        }
      }
      if (singular) {
        lambda *= 10.0;
        continue;
      }
      for (size_t rj = np; rj-- > 0;) {
        for (size_t cj = rj + 1; cj < np; ++cj) x[rj] -= lu[rj][cj] * x[cj];
        x[rj] /= lu[rj][rj];
      }
      Packed trial = p;
      for (size_t a = 0; a < np; ++a)
        trial.raw[idx[a]] = std::clamp(p.raw[idx[a]] + x[a], -60.0, 60.0);
      residuals(trial, &r_try);
      const double trial_loss = huber_loss(r_try, delta);
      if (trial_loss < loss) {
        p = trial;
        r = r_try;
        loss = trial_loss;
        lambda = std::max(lambda / 3.0, 1e-12);
        stepped = true;
      } else {
        lambda = std::min(lambda * 4.0, 1e10);
      }
    }
    if (!stepped) break;
    for (size_t i = 0; i < n; ++i) abs_r[i] = std::fabs(r[i]);
    const double new_delta = huber_delta(abs_r);
    if (std::fabs(new_delta - delta) > 1e-12 * delta) {
      delta = new_delta;
      loss = huber_loss(r, delta);
    }
    if (loss < 1e-24) break;
  }
  // report a scale-free robust loss for cross-start comparison
  LmResult out;
  out.p = p;
  std::vector<double> final_r;
  residuals(p, &final_r);
  double sq = 0;
  for (double x : final_r) sq += x * x;
  out.robust_loss = sq;
  return out;
}

}  // namespace

ScalingLawFit fit_scaling_law(const std::vector<std::array<double, 4>>& records,
                              const FitOptions& opt) {
  if (records.size() < 7)
    throw ValidationError("scaling-law fit needs >= 7 points, got " +
                          std::to_string(records.size()));
  std::set<double> ds, ws, ns;
  double ymin = 1e300, ymax = -1e300;
  for (const auto& r : records) {
    if (r[0] <= 0 || r[1] <= 0 || r[2] <= 0)
      throw ValidationError("scaling-law records require positive D, W, N");
    ds.insert(r[0]);
    ws.insert(r[1]);
    ns.insert(r[2]);
    ymin = std::min(ymin, r[3]);
    ymax = std::max(ymax, r[3]);
  }
  if (ds.size() < 2 || ws.size() < 2)
    throw ValidationError(
        "degenerate sweep span: need >= 2 distinct depths and widths; extend the grid");
  if (opt.include_data_term && ns.size() < 2)
    throw ValidationError(
        "single data size with the data term active; use the fixed-N fit (data term "
        "neglected) or extend the grid");

  Terms terms;
  terms.data = opt.include_data_term;

  const double spread = std::max(ymax - ymin, 1e-6);
  auto make_start = [&](int64_t i) {
    Rng rng(derive_seed(opt.seed, 0x5ca11e, uint64_t(i)));
    Packed p;
    p.raw[0] = softplus_inv(std::max(1e-6, ymin * rng.uniform(0.3, 1.0)));
    p.raw[1] = softplus_inv(spread * rng.uniform(0.1, 2.0));
    p.raw[2] = softplus_inv(rng.uniform(0.2, 1.5));
    p.raw[3] = softplus_inv(spread * rng.uniform(0.1, 2.0));
    p.raw[4] = softplus_inv(rng.uniform(0.2, 1.5));
    p.raw[5] = softplus_inv(spread * rng.uniform(0.1, 2.0));
    p.raw[6] = softplus_inv(rng.uniform(0.2, 1.5));
    return p;
  };

  // multi-start in parallel; reduction is deterministic (loss, then index)
  std::vector<std::future<LmResult>> futs;
  futs.reserve(opt.n_starts);
  for (int64_t i = 0; i < opt.n_starts; ++i)
    futs.push_back(std::async(std::launch::async | std::launch::deferred,
                              [&, i] { return lm_fit(records, terms, make_start(i), opt.max_iters); }));
  LmResult best;
  int64_t best_idx = -1;
  for (int64_t i = 0; i < opt.n_starts; ++i) {
    LmResult r = futs[i].get();
    if (best_idx < 0 || r.robust_loss < best.robust_loss) {
      best = std::move(r);
      best_idx = i;
    }
  }

  // term pruning: pin near-zero coefficients to exactly zero when that does
  // not hurt the fit (lets constant data come out as L0 alone)
  const double tol = std::max(1e-10, best.robust_loss * 1e-6);
  for (int mask = 1; mask < 8; ++mask) {
    Terms pruned = terms;
    if (mask & 1) pruned.depth = false;
    if (mask & 2) pruned.width = false;
    if (mask & 4) {
      if (!terms.data) continue;
      pruned.data = false;
    }
    LmResult r = lm_fit(records, pruned, best.p, opt.max_iters);
    for (int64_t i = 0; i < std::min<int64_t>(opt.n_starts, 5); ++i) {
      LmResult r2 = lm_fit(records, pruned, make_start(i), opt.max_iters);
      if (r2.robust_loss < r.robust_loss) r = r2;
    }
    if (r.robust_loss <= best.robust_loss + tol) {
      r.p.terms = pruned;
      best = std::move(r);
    }
  }

  ScalingLawFit fit;
  const auto v = best.p.values();
  const Terms& ft = best.p.terms;
  fit.l0 = v[0];
  fit.a = ft.depth ? v[1] : 0.0;
  fit.alpha = ft.depth ? v[2] : 1.0;
  fit.b = ft.width ? v[3] : 0.0;
  fit.beta = ft.width ? v[4] : 1.0;
  fit.c = ft.data ? v[5] : 0.0;
  fit.gamma = ft.data ? v[6] : 1.0;
  fit.points = records;
  fit.seed = opt.seed;
  fit.method = opt.include_data_term ? "lm-huber-multistart" : "lm-huber-multistart-fixed-n";
  double sq = 0;
  for (const auto& r : records) {
    const double e = predict(fit, r[0], r[1], r[2]) - r[3];
    sq += e * e;
  }
  fit.residual_rmse = std::sqrt(sq / double(records.size()));
  return fit;
}

double predict(const ScalingLawFit& fit, double depth, double width, double data) {
  if (depth <= 0 || width <= 0 || data <= 0)
    throw ValidationError("predict requires positive D, W, N");
  return fit.l0 + fit.a * std::pow(depth, -fit.alpha) + fit.b * std::pow(width, -fit.beta) +
         fit.c * std::pow(data, -fit.gamma);
}

SweetSpot sweet_spot(const ScalingLawFit& fit,
                     const std::function<double(int64_t, int64_t)>& latency_s,
                     double budget_s,
                     const std::vector<std::pair<int64_t, int64_t>>& candidates,
                     double data_size) {
  if (candidates.empty()) throw ValidationError("sweet_spot requires a nonempty grid");
  SweetSpot best;
  best.budget = budget_s;
  for (const auto& [d, w] : candidates) {
    const double lat = latency_s(d, w);
    if (lat > budget_s) continue;
    const double loss = predict(fit, double(d), double(w), data_size);
    bool better = false;
    if (!best.feasible) {
      better = true;
    } else if (loss != best.predicted_loss) {
      better = loss < best.predicted_loss;
    } else if (lat != best.latency) {
      better = lat < best.latency;
    } else {
      better = d < best.depth;
    }
    if (better) {
      best.feasible = true;
      best.depth = d;
      best.width = w;
      best.predicted_loss = loss;
      best.latency = lat;
    }
  }
  return best;
}

std::string fit_to_json(const ScalingLawFit& fit) {
  nlohmann::json j;
  j["params"] = {{"L0", fit.l0},      {"a", fit.a},       {"b", fit.b},
                 {"c", fit.c},        {"alpha", fit.alpha}, {"beta", fit.beta},
                 {"gamma", fit.gamma}};
  j["residual"] = fit.residual_rmse;
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : fit.points) pts.push_back({p[0], p[1], p[2], p[3]});
  j["points"] = pts;
  j["seed"] = fit.seed;
  j["method"] = fit.method;
  return j.dump(2);
}

ScalingLawFit fit_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ScalingLawFit fit;
  const auto& p = j.at("params");
  fit.l0 = p.at("L0").get<double>();
  fit.a = p.at("a").get<double>();
  fit.b = p.at("b").get<double>();
  fit.c = p.at("c").get<double>();
  fit.alpha = p.at("alpha").get<double>();
  fit.beta = p.at("beta").get<double>();
  fit.gamma = p.at("gamma").get<double>();
  fit.residual_rmse = j.at("residual").get<double>();
  for (const auto& pt : j.at("points"))
    fit.points.push_back({pt[0].get<double>(), pt[1].get<double>(), pt[2].get<double>(),
                          pt[3].get<double>()});
  fit.seed = j.at("seed").get<uint64_t>();
  fit.method = j.at("method").get<std::string>();
  return fit;
}

}  // namespace slm
