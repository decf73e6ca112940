#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "slmlab/corpus.hpp"
#include "slmlab/model.hpp"

namespace slm {

struct TrainConfig {
  double lr_init = 1e-3;
  double lr_min = -1.0;  // < 0 -> lr_init / 100
  int64_t steps = 2000;
  int64_t batch_tokens = 512;
  int64_t context = 64;
  double weight_decay = 0.0;  // must stay 0 when wnorm is on
  bool wnorm = false;
  uint64_t seed = 0;
  std::string precision = "f64";  // "f32" opt-in for speed

  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;

  int64_t telemetry_every = 10;
  int64_t proxy_eval_at = 0;  // 0 = skip; else record proxy PPL at this step
  int64_t eval_windows = 32;

  double resolved_lr_min() const { return lr_min < 0 ? lr_init / 100.0 : lr_min; }
  void validate() const;
};

// lr(0) = lr_init, lr(steps-1) = lr_min, cosine in between
double cosine_lr(const TrainConfig& cfg, int64_t step);

struct TelemetryRow {
  int64_t step;
  double loss;
  double grad_norm;    // mean |g| over all trainable elements
  double weight_norm;  // mean Frobenius norm over Case1/Case2 matrices
  double lr;
  int64_t wnorm_skipped;  // zero rows/columns hit by the projection guard
};

struct RunRecord {
  std::string genome_json;  // empty when the run wasn't genome-driven
  int64_t depth = 0;
  int64_t width = 0;
  int64_t tokens_seen = 0;
  int64_t steps = 0;
  double initial_ppl = 0.0;
  double proxy_ppl = 0.0;  // 0 when not measured
  double final_ppl = 0.0;
  std::string telemetry_path;
  uint64_t seed = 0;
  bool wnorm = false;
  bool failed = false;
  int64_t last_good_step = -1;
  std::vector<TelemetryRow> telemetry;
};

std::string run_record_to_json(const RunRecord& r);
RunRecord run_record_from_json(const std::string& text);
void write_telemetry_csv(const std::filesystem::path& path,
                         const std::vector<TelemetryRow>& rows);
std::vector<TelemetryRow> read_telemetry_csv(const std::filesystem::path& path);

// Fixed-window validation perplexity (pure forward, no tape).
template <typename T>
double evaluate_ppl(const ModelT<T>& model, const Corpus& corpus, int64_t context,
                    int64_t n_windows);

template <typename T>
using StepHook = std::function<void(int64_t step, const ModelT<T>& model, double loss)>;

// Full training loop: Adam, cosine schedule, optional unit-norm projection of
// Case1/Case2 weights after every step, telemetry, deterministic in cfg.seed.
template <typename T>
RunRecord train_model(ModelT<T>& model, const TrainConfig& cfg, const Corpus& corpus,
                      const StepHook<T>& hook = nullptr);

// Convenience: instantiate the model (per cfg.precision) and train.
RunRecord train(const ModelSpec& spec, const TrainConfig& cfg, const Corpus& corpus);

// Validation PPL after a short budget; the search fitness.
double proxy_eval(const ModelSpec& spec, const TrainConfig& base_cfg, const Corpus& corpus,
                  int64_t proxy_steps);

// Depth-width grid sweep of attention+FFN models. Partial failures are
// recorded and the grid continues.
std::vector<RunRecord> sweep_depth_width(const std::vector<int64_t>& depths,
                                         const std::vector<int64_t>& widths,
                                         const TrainConfig& cfg, const Corpus& corpus,
                                         int64_t n_heads = 4);

// ---------------------------------------------------------------------------

template <typename T>
double evaluate_ppl(const ModelT<T>& model, const Corpus& corpus, int64_t context,
                    int64_t n_windows) {
  const auto starts = eval_window_starts(corpus, context + 1, n_windows);
  double nll = 0.0;
  int64_t count = 0;
  for (int64_t s : starts) {
    std::vector<int32_t> inputs(corpus.tokens.begin() + s,
                                corpus.tokens.begin() + s + context);
    TensorT<T> logits = model.spec().meta_tokens > 0
                            ? model.forward_logits_with_meta_prefix(inputs)
                            : model.forward_logits(inputs);
    for (int64_t t = 0; t < context; ++t) {
      const int32_t target = corpus.tokens[s + t + 1];
      const T* row = logits.row_ptr(t);
      double mx = row[0];
      for (int64_t c = 1; c < logits.cols(); ++c) mx = std::max(mx, double(row[c]));
      double denom = 0.0;
      for (int64_t c = 0; c < logits.cols(); ++c) denom += std::exp(double(row[c]) - mx);
      nll -= double(row[target]) - mx - std::log(denom);
      ++count;
    }
  }
  return std::exp(nll / double(std::max<int64_t>(1, count)));
}

template <typename T>
RunRecord train_model(ModelT<T>& model, const TrainConfig& cfg, const Corpus& corpus,
                      const StepHook<T>& hook) {
  cfg.validate();
  RunRecord rec;
  rec.depth = model.spec().depth();
  rec.width = model.spec().width();
  rec.seed = cfg.seed;
  rec.wnorm = cfg.wnorm;
  rec.initial_ppl = evaluate_ppl(model, corpus, cfg.context, cfg.eval_windows);
  rec.final_ppl = rec.initial_ppl;

  auto& params = model.params();
  std::vector<TensorT<T>> m(params.size()), v(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    m[i] = TensorT<T>(params[i].tensor->shape());
    v[i] = TensorT<T>(params[i].tensor->shape());
  }

  const int64_t batch_seqs =
      std::max<int64_t>(1, cfg.batch_tokens / std::max<int64_t>(1, cfg.context));

  for (int64_t step = 0; step < cfg.steps; ++step) {
    const double lr = cosine_lr(cfg, step);
    const auto starts =
        sample_window_starts(corpus, cfg.context + 1, batch_seqs, cfg.seed, step);
    std::vector<std::vector<int32_t>> windows;
    windows.reserve(starts.size());
    for (int64_t s : starts)
      windows.emplace_back(corpus.tokens.begin() + s,
                           corpus.tokens.begin() + s + cfg.context + 1);

    GraphT<T> g;
    auto bound = model.build_loss(g, windows);
    const double loss = double(g.value(bound.loss)[0]);
    if (!std::isfinite(loss)) {
      rec.failed = true;
      rec.last_good_step = step - 1;
      break;
    }
    g.backward(bound.loss);

    // telemetry: pre-update gradients, post-update weights
    double grad_abs_sum = 0.0;
    int64_t grad_count = 0;
    if (cfg.telemetry_every > 0 && step % cfg.telemetry_every == 0) {
      for (size_t i = 0; i < params.size(); ++i) {
        const auto& gr = g.grad(bound.leaf_ids[i]);
        for (int64_t j = 0; j < gr.numel(); ++j) grad_abs_sum += std::fabs(double(gr[j]));
        grad_count += gr.numel();
      }
    }

    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, double(step + 1));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, double(step + 1));
    int64_t wnorm_skipped = 0;
    for (size_t i = 0; i < params.size(); ++i) {
      const auto& gr = g.grad(bound.leaf_ids[i]);
      TensorT<T>& w = *params[i].tensor;
      TensorT<T>& mi = m[i];
      TensorT<T>& vi = v[i];
      for (int64_t j = 0; j < w.numel(); ++j) {
        const double gj = double(gr[j]);
        mi[j] = T(cfg.adam_beta1 * double(mi[j]) + (1.0 - cfg.adam_beta1) * gj);
        vi[j] = T(cfg.adam_beta2 * double(vi[j]) + (1.0 - cfg.adam_beta2) * gj * gj);
        const double mhat = double(mi[j]) / bc1;
        const double vhat = double(vi[j]) / bc2;
        double upd = lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        if (cfg.weight_decay > 0.0) upd += lr * cfg.weight_decay * double(w[j]);
        w[j] = T(double(w[j]) - upd);
      }
      if (cfg.wnorm) wnorm_skipped += wnorm_project(w, params[i].wcase);
    }

    if (cfg.telemetry_every > 0 && step % cfg.telemetry_every == 0) {
      double wsum = 0.0;
      int64_t wmats = 0;
      for (const auto& p : params) {
        if (p.wcase == WnormCase::kExempt) continue;
        wsum += p.tensor->frobenius_norm();
        ++wmats;
      }
      rec.telemetry.push_back(TelemetryRow{step, loss,
                                           grad_count ? grad_abs_sum / double(grad_count) : 0.0,
                                           wmats ? wsum / double(wmats) : 0.0, lr,
                                           wnorm_skipped});
    }
    if (hook) hook(step, model, loss);
    rec.last_good_step = step;
    rec.steps = step + 1;
    rec.tokens_seen += batch_seqs * cfg.context;
    if (cfg.proxy_eval_at > 0 && step + 1 == cfg.proxy_eval_at)
      rec.proxy_ppl = evaluate_ppl(model, corpus, cfg.context, cfg.eval_windows);
  }

  if (!rec.failed)
    rec.final_ppl = evaluate_ppl(model, corpus, cfg.context, cfg.eval_windows);
  if (cfg.proxy_eval_at <= 0 || cfg.proxy_eval_at >= cfg.steps)
    if (rec.proxy_ppl == 0.0) rec.proxy_ppl = rec.final_ppl;
  return rec;
}

}  // namespace slm
