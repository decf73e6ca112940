#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "slmlab/genome.hpp"

namespace slm {

enum class Regime { kDecode, kPrefill };

std::string regime_str(Regime r);

// Desk-scale analogs of the paper's context regimes; attention decode cost
// is bucketed by KV length, linear-attention cost is context-independent
// (bucket 0).
inline const std::vector<int64_t> kCtxBuckets = {512, 2048, 8192};

struct LutEntry {
  double median_s = 0;  // seconds per token
  double iqr_s = 0;
  int64_t reps = 0;
};

struct LatencyLUT {
  std::string host;     // CPU fingerprint; stale LUTs are rejected across machines
  int64_t version = 1;  // measurement protocol version
  // (kind, width, regime, ctx_bucket) -> cost
  std::map<std::tuple<std::string, int64_t, std::string, int64_t>, LutEntry> entries;
  // per-width embedding + final-norm + LM-head step cost
  std::map<int64_t, LutEntry> overhead;

  bool covers(OperatorKind kind, int64_t width, Regime regime) const;
};

struct ProfileOptions {
  int64_t reps = 7;
  int64_t warmup = 3;
  double max_dispersion = 0.25;  // IQR / median gate
  int64_t vocab = 64;
  int64_t n_heads = 4;
  int64_t gqa_group = 4;
  int64_t ffn_expansion = 3;
  double min_rep_seconds = 2e-3;
  uint64_t seed = 7;
};

// Measures per-token step cost of each (kind, width) with the recurrent
// (decode) operator forms, batch 1: median of reps with the IQR/median
// dispersion gate (unstable keys are retried once, then error). Requires
// exclusive use of the benchmark thread.
LatencyLUT profile(const std::vector<OperatorKind>& kinds,
                   const std::vector<int64_t>& widths, Regime regime,
                   const ProfileOptions& opt = {});

struct LatencyEstimate {
  double total_s = 0;
  double overhead_s = 0;  // fixed per-step overhead term, already in total_s
  std::vector<std::pair<std::string, double>> breakdown;  // per operator instance
};

// Additive composition over the spec's operator list for generating
// `gen_len` tokens at context `ctx` with batch 1.
LatencyEstimate estimate(const LatencyLUT& lut, const ModelSpec& spec, int64_t gen_len,
                         int64_t ctx);

// The parameter-count efficiency metric (interchangeable with latency).
int64_t param_cost(const ModelSpec& spec);

// Wall-clock decode of a real model, for estimate-vs-measured checks.
double measure_model_decode(const ModelSpec& spec, int64_t gen_len, uint64_t seed = 7);

std::string host_fingerprint();

std::string lut_to_json(const LatencyLUT& lut);
LatencyLUT lut_from_json(const std::string& text);
void save_lut(const std::filesystem::path& path, const LatencyLUT& lut);
LatencyLUT load_lut(const std::filesystem::path& path, bool enforce_host = true);

}  // namespace slm
