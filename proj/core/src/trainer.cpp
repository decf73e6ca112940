#include "slmlab/trainer.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace slm {

void TrainConfig::validate() const {
  if (wnorm && weight_decay != 0.0)
    throw ValidationError("weight_decay must be 0 when weight normalization is on");
  if (lr_init <= 0.0) throw ValidationError("lr_init must be positive");
  if (steps < 0) throw ValidationError("steps must be >= 0");
  if (context < 1) throw ValidationError("context must be >= 1");
  if (batch_tokens < 1) throw ValidationError("batch_tokens must be >= 1");
  if (precision != "f64" && precision != "f32")
    throw ValidationError("precision must be f64 or f32");
}

double cosine_lr(const TrainConfig& cfg, int64_t step) {
  const double lo = cfg.resolved_lr_min();
  if (cfg.steps <= 1) return step <= 0 ? cfg.lr_init : lo;
  const double x = double(step) / double(cfg.steps - 1);
  return lo + 0.5 * (cfg.lr_init - lo) * (1.0 + std::cos(3.14159265358979323846 * x));
}

std::string run_record_to_json(const RunRecord& r) {
  nlohmann::json j;
  j["genome"] = r.genome_json.empty() ? nlohmann::json(nullptr)
                                      : nlohmann::json::parse(r.genome_json);
  j["D"] = r.depth;
  j["W"] = r.width;
  j["tokens_seen"] = r.tokens_seen;
  j["steps"] = r.steps;
  j["initial_ppl"] = r.initial_ppl;
  j["proxy_ppl"] = r.proxy_ppl;
  j["final_ppl"] = r.final_ppl;
  j["telemetry_path"] = r.telemetry_path;
  j["seed"] = r.seed;
  j["wnorm"] = r.wnorm;
  j["failed"] = r.failed;
  j["last_good_step"] = r.last_good_step;
  return j.dump(2);
}

RunRecord run_record_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  RunRecord r;
  if (!j.at("genome").is_null()) r.genome_json = j.at("genome").dump();
  r.depth = j.at("D").get<int64_t>();
  r.width = j.at("W").get<int64_t>();
  r.tokens_seen = j.at("tokens_seen").get<int64_t>();
  r.steps = j.at("steps").get<int64_t>();
  r.initial_ppl = j.at("initial_ppl").get<double>();
  r.proxy_ppl = j.at("proxy_ppl").get<double>();
  r.final_ppl = j.at("final_ppl").get<double>();
  r.telemetry_path = j.at("telemetry_path").get<std::string>();
  r.seed = j.at("seed").get<uint64_t>();
  r.wnorm = j.at("wnorm").get<bool>();
  r.failed = j.at("failed").get<bool>();
  r.last_good_step = j.at("last_good_step").get<int64_t>();
  return r;
}

void write_telemetry_csv(const std::filesystem::path& path,
                         const std::vector<TelemetryRow>& rows) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot open telemetry file " + path.string());
  os << "step,loss,grad_norm,weight_norm,lr,wnorm_skipped\n";
  os.precision(17);
  for (const auto& r : rows)
    os << r.step << "," << r.loss << "," << r.grad_norm << "," << r.weight_norm << ","
       << r.lr << "," << r.wnorm_skipped << "\n";
}

std::vector<TelemetryRow> read_telemetry_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open telemetry file " + path.string());
  std::string line;
  std::getline(is, line);  // header
  std::vector<TelemetryRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    TelemetryRow r{};
    std::istringstream ss(line);
    char comma;
    ss >> r.step >> comma >> r.loss >> comma >> r.grad_norm >> comma >> r.weight_norm >>
        comma >> r.lr >> comma >> r.wnorm_skipped;
    rows.push_back(r);
  }
  return rows;
}

RunRecord train(const ModelSpec& spec, const TrainConfig& cfg, const Corpus& corpus) {
  cfg.validate();
  if (cfg.precision == "f32") {
    Model32 model(spec, derive_seed(cfg.seed, 0x1417), cfg.wnorm);
    return train_model<float>(model, cfg, corpus);
  }
  Model model(spec, derive_seed(cfg.seed, 0x1417), cfg.wnorm);
  return train_model<double>(model, cfg, corpus);
}

double proxy_eval(const ModelSpec& spec, const TrainConfig& base_cfg, const Corpus& corpus,
                  int64_t proxy_steps) {
  TrainConfig cfg = base_cfg;
  cfg.steps = proxy_steps;
  cfg.proxy_eval_at = 0;
  RunRecord rec = train(spec, cfg, corpus);
  if (rec.failed) return std::numeric_limits<double>::infinity();
  return rec.final_ppl;
}

std::vector<RunRecord> sweep_depth_width(const std::vector<int64_t>& depths,
                                         const std::vector<int64_t>& widths,
                                         const TrainConfig& cfg, const Corpus& corpus,
                                         int64_t n_heads) {
  if (depths.empty() || widths.empty())
    throw ValidationError("sweep grid must be nonempty");
  std::vector<RunRecord> records;
  for (int64_t d : depths) {
    for (int64_t w : widths) {
      ArchitectureGenome g;
      g.stages[0] = {OperatorKind::kFullAttention, std::nullopt, Ratio::kOnly, 1, d};
      g.stages[1] = {OperatorKind::kFullAttention, std::nullopt, Ratio::kOnly, 1, 0};
      g.stages[2] = {OperatorKind::kFullAttention, std::nullopt, Ratio::kOnly, 1, 0};
      g.hidden_size = w;
      g.max_operators = std::max<int64_t>(30, 2 * d);
      DecodeOptions opt;
      opt.n_heads = n_heads;
      ModelSpec spec = decode(g, opt);
      TrainConfig cell = cfg;
      cell.seed = derive_seed(cfg.seed, uint64_t(d), uint64_t(w));
      RunRecord rec;
      try {
        rec = train(spec, cell, corpus);
      } catch (const std::exception&) {
        rec.failed = true;
      }
      rec.genome_json = genome_to_json(g);
      rec.depth = d;
      rec.width = w;
      records.push_back(std::move(rec));
    }
  }
  return records;
}

}  // namespace slm
