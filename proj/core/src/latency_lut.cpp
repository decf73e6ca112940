#include "slmlab/latency_lut.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "slmlab/model.hpp"

namespace slm {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct MedianIqr {
  double median, iqr;
};

MedianIqr median_iqr(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  auto at = [&](double q) {
    const double pos = q * double(xs.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (pos - double(lo)) * (xs[hi] - xs[lo]);
  };
  return {at(0.5), at(0.75) - at(0.25)};
}

// One operator instance plus its block wrapper (pre-norm, gain, residual),
// stepped against persistent state; mirrors what one model layer costs.
struct OpBench {
  OperatorKind kind;
  int64_t width;
  int64_t n_heads;
  AttentionConfig attn;
  MixerParams mix;
  FfnParams ffn;
  Tensor gain;
  RecurrentState state;
  Tensor x;

  void step() {
    Tensor normed = rms_norm_rows(x);
    for (int64_t c = 0; c < width; ++c) normed[c] *= gain[c];
    Tensor y = kind == OperatorKind::kFfn
                   ? ffn_forward(normed, ffn)
                   : mixer_step(kind, state, normed, mix, attn, n_heads);
    for (int64_t c = 0; c < width; ++c) x[c] += y[c];
  }
};

OpBench make_bench(OperatorKind kind, int64_t width, int64_t ctx_bucket,
                   const ProfileOptions& opt, Rng& rng) {
  OpBench b;
  b.kind = kind;
  b.width = width;
  b.n_heads = opt.n_heads;
  b.attn.n_heads = opt.n_heads;
  b.attn.n_kv_heads = std::max<int64_t>(1, opt.n_heads / opt.gqa_group);
  b.attn.head_dim = width / opt.n_heads;
  b.attn.window = 0;
  b.gain = Tensor::ones({width});
  b.x = Tensor::randn({1, width}, rng, 0.5);
  const double std = 0.05;
  if (kind == OperatorKind::kFfn) {
    b.ffn.wgate = Tensor::randn({opt.ffn_expansion * width, width}, rng, std);
    b.ffn.wup = Tensor::randn({opt.ffn_expansion * width, width}, rng, std);
    b.ffn.wdown = Tensor::randn({width, opt.ffn_expansion * width}, rng, std);
    return b;
  }
  const int64_t kv_dim = is_attention(kind) ? b.attn.kv_dim() : width;
  b.mix.wq = Tensor::randn({width, width}, rng, std);
  b.mix.wk = Tensor::randn({kv_dim, width}, rng, std);
  b.mix.wv = Tensor::randn({kv_dim, width}, rng, std);
  b.mix.wo = Tensor::randn({width, width}, rng, std);
  if (kind == OperatorKind::kDeltaNet || kind == OperatorKind::kGatedDeltaNet)
    b.mix.wbeta = Tensor::randn({opt.n_heads, width}, rng, std);
  if (kind == OperatorKind::kGla)
    b.mix.wdecay = Tensor::randn({width, width}, rng, std);
  else if (kind == OperatorKind::kGatedDeltaNet || kind == OperatorKind::kMamba2)
    b.mix.wdecay = Tensor::randn({opt.n_heads, width}, rng, std);

  b.state.kind = kind;
  if (is_attention(kind)) {
    // fixed-length ring at the bucket size keeps per-step cost stationary
    b.state.kv.reset(std::max<int64_t>(ctx_bucket, 1), b.attn.kv_dim());
    Tensor row({b.attn.kv_dim()});
    for (int64_t i = 0; i < ctx_bucket; ++i) {
      for (int64_t j = 0; j < row.numel(); ++j) row[j] = rng.normal() * 0.3;
      b.state.kv.push(row.data(), row.data());
    }
  }
  return b;
}

template <typename StepFn>
LutEntry time_key(StepFn&& step, const ProfileOptions& opt, const std::string& what) {
  for (int attempt = 0; attempt < 2; ++attempt) {
    // calibrate inner iterations to a stable rep duration
    int64_t inner = 1;
    for (;;) {
      auto t0 = Clock::now();
      for (int64_t i = 0; i < inner; ++i) step();
      const double el = seconds_since(t0);
      if (el >= opt.min_rep_seconds || inner >= (int64_t(1) << 22)) break;
      const double scale = el > 1e-9 ? opt.min_rep_seconds / el : 1024.0;
      inner = std::max(inner + 1, int64_t(double(inner) * std::min(scale * 1.3, 64.0)));
    }
    for (int64_t i = 0; i < opt.warmup; ++i) {
      auto t0 = Clock::now();
      for (int64_t j = 0; j < inner; ++j) step();
      (void)seconds_since(t0);
    }
    std::vector<double> samples;
    samples.reserve(opt.reps);
    for (int64_t r = 0; r < opt.reps; ++r) {
      auto t0 = Clock::now();
      for (int64_t j = 0; j < inner; ++j) step();
      samples.push_back(seconds_since(t0) / double(inner));
    }
    const MedianIqr mi = median_iqr(samples);
    if (mi.median > 0 && mi.iqr / mi.median <= opt.max_dispersion)
      return LutEntry{mi.median, mi.iqr, opt.reps};
  }
  throw ValidationError("latency measurement unstable after retry for " + what +
                        " (IQR/median above the dispersion gate)");
}

std::string kind_key(OperatorKind k) { return op_code(k); }

}  // namespace

std::string regime_str(Regime r) { return r == Regime::kDecode ? "decode" : "prefill"; }

bool LatencyLUT::covers(OperatorKind kind, int64_t width, Regime regime) const {
  if (kind == OperatorKind::kFullAttention || kind == OperatorKind::kSlidingWindowAttention) {
    for (int64_t b : kCtxBuckets)
      if (!entries.count({kind_key(kind), width, regime_str(regime), b})) return false;
    return true;
  }
  return entries.count({kind_key(kind), width, regime_str(regime), 0}) > 0;
}

LatencyLUT profile(const std::vector<OperatorKind>& kinds,
                   const std::vector<int64_t>& widths, Regime regime,
                   const ProfileOptions& opt) {
  LatencyLUT lut;
  lut.host = host_fingerprint();
  lut.version = 1;
  Rng rng(derive_seed(opt.seed, 0x97c0de));
  for (int64_t w : widths) {
    // per-step overhead: embedding lookup + final norm + LM head
    ModelSpec empty;
    empty.hidden = w;
    empty.ffn_dim = opt.ffn_expansion * w;
    empty.vocab = opt.vocab;
    empty.n_heads = opt.n_heads;
    empty.attn.n_heads = opt.n_heads;
    empty.attn.n_kv_heads = std::max<int64_t>(1, opt.n_heads / opt.gqa_group);
    empty.attn.head_dim = w / opt.n_heads;
    Model model(empty, derive_seed(opt.seed, uint64_t(w)), false);
    ModelDecodeState st = model.init_decode_state();
    int32_t tok = 1;
    lut.overhead[w] = time_key(
        [&] {
          Tensor logits = model.decode_step(st, tok);
          tok = int32_t(std::fabs(logits[0]) * 7) % opt.vocab;
        },
        opt, "overhead width " + std::to_string(w));

    for (OperatorKind kind : kinds) {
      if (kind == OperatorKind::kFullAttention ||
          kind == OperatorKind::kSlidingWindowAttention) {
        for (int64_t bucket : kCtxBuckets) {
          OpBench bench = make_bench(kind, w, bucket, opt, rng);
          lut.entries[{kind_key(kind), w, regime_str(regime), bucket}] = time_key(
              [&] { bench.step(); }, opt,
              op_code(kind) + " width " + std::to_string(w) + " ctx " +
                  std::to_string(bucket));
        }
      } else {
        OpBench bench = make_bench(kind, w, 0, opt, rng);
        lut.entries[{kind_key(kind), w, regime_str(regime), 0}] = time_key(
            [&] { bench.step(); }, opt, op_code(kind) + " width " + std::to_string(w));
      }
    }
  }
  return lut;
}

LatencyEstimate estimate(const LatencyLUT& lut, const ModelSpec& spec, int64_t gen_len,
                         int64_t ctx) {
  LatencyEstimate est;
  auto lookup = [&](const std::string& kind, int64_t width, int64_t bucket) -> double {
    auto it = lut.entries.find({kind, width, "decode", bucket});
    if (it == lut.entries.end())
      throw PrerequisiteError("LUT missing entry (kind=" + kind +
                              ", width=" + std::to_string(width) + ", regime=decode" +
                              ", ctx_bucket=" + std::to_string(bucket) +
                              "); produce it with `slmlab profile`");
    return it->second.median_s;
  };
  for (size_t i = 0; i < spec.ops.size(); ++i) {
    const OpInstance& op = spec.ops[i];
    double cost;
    if (is_attention(op.kind)) {
      const int64_t eff = op.window > 0 ? std::min(op.window, ctx) : ctx;
      int64_t bucket = kCtxBuckets.back();
      for (int64_t b : kCtxBuckets)
        if (eff <= b) {
          bucket = b;
          break;
        }
      cost = lookup(op_code(op.kind), spec.hidden, bucket);
    } else {
      cost = lookup(op_code(op.kind), spec.hidden, 0);
    }
    est.breakdown.emplace_back("op" + std::to_string(i) + "." + op_code(op.kind),
                               cost * double(gen_len));
  }
  auto ov = lut.overhead.find(spec.hidden);
  if (ov == lut.overhead.end())
    throw PrerequisiteError("LUT missing overhead entry for width " +
                            std::to_string(spec.hidden) +
                            "; produce it with `slmlab profile`");
  est.overhead_s = ov->second.median_s * double(gen_len);
  est.total_s = est.overhead_s;
  for (const auto& [name, s] : est.breakdown) est.total_s += s;
  return est;
}

int64_t param_cost(const ModelSpec& spec) { return model_params_count(spec); }

double measure_model_decode(const ModelSpec& spec, int64_t gen_len, uint64_t seed) {
  Model model(spec, derive_seed(seed, 0xdecade), false);
  ModelDecodeState st = model.init_decode_state();
  int32_t tok = 1;
  // warm the caches with a short prefix
  for (int64_t i = 0; i < 8; ++i) model.decode_step(st, tok);
  auto t0 = Clock::now();
  for (int64_t i = 0; i < gen_len; ++i) {
    Tensor logits = model.decode_step(st, tok);
    tok = int32_t(i + 2) % spec.vocab;
    (void)logits;
  }
  return seconds_since(t0) / double(gen_len);
}

std::string host_fingerprint() {
  std::string model = "unknown-cpu";
  std::ifstream is("/proc/cpuinfo");
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("model name", 0) == 0) {
      auto pos = line.find(':');
      if (pos != std::string::npos) {
        model = line.substr(pos + 1);
        while (!model.empty() && model.front() == ' ') model.erase(model.begin());
      }
      break;
    }
  }
  return model + " x" + std::to_string(std::thread::hardware_concurrency());
}

std::string lut_to_json(const LatencyLUT& lut) {
  nlohmann::json j;
  j["host"] = lut.host;
  j["version"] = lut.version;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [key, e] : lut.entries) {
    const auto& [kind, width, regime, bucket] = key;
    entries.push_back({{"kind", kind},
                       {"width", width},
                       {"regime", regime},
                       {"ctx_bucket", bucket},
                       {"median_s", e.median_s},
                       {"iqr_s", e.iqr_s},
                       {"reps", e.reps}});
  }
  j["entries"] = entries;
  nlohmann::json overhead = nlohmann::json::array();
  for (const auto& [width, e] : lut.overhead)
    overhead.push_back({{"width", width},
                        {"median_s", e.median_s},
                        {"iqr_s", e.iqr_s},
                        {"reps", e.reps}});
  j["overhead"] = overhead;
  return j.dump(2);
}

LatencyLUT lut_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  LatencyLUT lut;
  lut.host = j.at("host").get<std::string>();
  lut.version = j.at("version").get<int64_t>();
  for (const auto& e : j.at("entries")) {
    lut.entries[{e.at("kind").get<std::string>(), e.at("width").get<int64_t>(),
                 e.at("regime").get<std::string>(), e.at("ctx_bucket").get<int64_t>()}] =
        LutEntry{e.at("median_s").get<double>(), e.at("iqr_s").get<double>(),
                 e.at("reps").get<int64_t>()};
  }
  for (const auto& e : j.at("overhead"))
    lut.overhead[e.at("width").get<int64_t>()] =
        LutEntry{e.at("median_s").get<double>(), e.at("iqr_s").get<double>(),
                 e.at("reps").get<int64_t>()};
  return lut;
}

void save_lut(const std::filesystem::path& path, const LatencyLUT& lut) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write LUT to " + path.string());
  os << lut_to_json(lut) << "\n";
}

LatencyLUT load_lut(const std::filesystem::path& path, bool enforce_host) {
  std::ifstream is(path);
  if (!is)
    throw PrerequisiteError("LUT file not found: " + path.string() +
                            "; produce it with `slmlab profile`");
  std::stringstream ss;
  ss << is.rdbuf();
  LatencyLUT lut = lut_from_json(ss.str());
  if (enforce_host && lut.host != host_fingerprint())
    throw PrerequisiteError("LUT was measured on a different host (" + lut.host +
                            " vs " + host_fingerprint() +
                            "); re-run `slmlab profile` on this machine");
  return lut;
}

}  // namespace slm
