#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "slmlab/genome.hpp"
#include "slmlab/latency_lut.hpp"
#include "slmlab/trainer.hpp"

namespace slm {

// The searchable design space: which operators, ratios, FFN counts, block
// counts and hidden sizes candidates may use. The acceptance surrogate runs
// on a restricted space small enough to enumerate exhaustively.
struct SearchSpace {
  std::vector<OperatorKind> ops = {OperatorKind::kDeltaNet, OperatorKind::kFullAttention,
                                   OperatorKind::kMamba2};
  std::vector<Ratio> ratios = {Ratio::kOnly, Ratio::kOneOne, Ratio::kOneTwo,
                               Ratio::kOneThree};
  std::vector<int64_t> ffn_counts = {0, 1, 2};
  std::vector<int64_t> block_counts = {0, 1, 2, 3, 4};
  std::vector<int64_t> ladder = kToyLadder;
  int64_t max_operators = 30;
  DecodeOptions decode;

  static SearchSpace toy();
  static SearchSpace restricted();  // <= 5000 genomes, exhaustively enumerable
};

ArchitectureGenome random_genome(const SearchSpace& space, Rng& rng);

// Every structurally distinct genome in the space (hidden size left at the
// ladder top; callers re-select it per the efficiency budget).
std::vector<ArchitectureGenome> enumerate_space(const SearchSpace& space);

enum class MutationKind { kOperator, kRatio, kFfn, kBlocks };
std::string mutation_kind_str(MutationKind k);

// All single-factor mutations of `parent` of the given kind (repaired, same
// hidden size). Used by mutate() and by the connectivity tests.
std::vector<ArchitectureGenome> enumerate_mutations(const ArchitectureGenome& parent,
                                                    const SearchSpace& space,
                                                    MutationKind kind);

// One uniformly drawn single-factor mutation; kinds with no legal move are
// redrawn (bounded), then error.
ArchitectureGenome mutate(const ArchitectureGenome& parent, const SearchSpace& space,
                          Rng& rng, MutationKind* applied = nullptr);

// ---------------------------------------------------------------------------

enum class Metric { kDecodeLatency, kParams };
std::string metric_str(Metric m);

// Efficiency of a candidate under the chosen metric; also drives the
// hidden-size re-selection rule (largest ladder width within budget).
struct EfficiencyModel {
  Metric metric = Metric::kParams;
  const LatencyLUT* lut = nullptr;  // required for the latency metric
  int64_t gen_len = 1024;
  int64_t ctx = 512;

  double efficiency(const ModelSpec& spec) const;
  // largest ladder width whose efficiency fits the budget (smallest width
  // when none does); returns the re-decoded genome
  ArchitectureGenome select_hidden(const ArchitectureGenome& g, const SearchSpace& space,
                                   double budget) const;
};

struct Evaluator {
  virtual ~Evaluator() = default;
  // proxy fitness (lower is better); +inf marks a failed evaluation
  virtual double evaluate(const ArchitectureGenome& g, const ModelSpec& spec,
                          uint64_t seed) = 0;
};

// Short-training proxy PPL via the real trainer.
struct TrainerEvaluator : Evaluator {
  const Corpus* corpus;
  TrainConfig base;
  int64_t proxy_steps;

  TrainerEvaluator(const Corpus& c, TrainConfig cfg, int64_t steps)
      : corpus(&c), base(std::move(cfg)), proxy_steps(steps) {}
  double evaluate(const ArchitectureGenome&, const ModelSpec& spec, uint64_t seed) override;
};

// Analytic, deterministic stand-in for short training: a depth/width power
// law plus an operator-mix penalty, so search dynamics can be validated
// against exhaustive enumeration in seconds.
struct SurrogateEvaluator : Evaluator {
  double l0 = 2.0, a = 6.0, alpha = 0.7, b = 40.0, beta = 0.9;
  double mix_weight = 0.8, ffn_weight = 0.3;
  double target_attention = 0.2, target_delta = 0.4, target_mamba = 0.4;
  double target_ffn_fraction = 0.5;

  double evaluate(const ArchitectureGenome&, const ModelSpec& spec, uint64_t) override;
};

// ---------------------------------------------------------------------------

struct SearchConfig {
  int64_t population = 32;
  int64_t sample = 8;
  int64_t cycles = 30;
  int64_t offspring_per_cycle = 10;
  Metric metric = Metric::kDecodeLatency;
  double budget = 0;
  uint64_t seed = 0;

  void validate() const;
};

struct Individual {
  ArchitectureGenome genome;
  double proxy_ppl = 0;
  double efficiency = 0;
  bool feasible = false;
  int64_t birth = -1;
  int64_t parent_birth = -1;
  std::string mutation = "seed";
  int64_t cycle = 0;
};

// Aging ring: birth indices strictly increase, eviction strictly follows
// birth order.
struct Population {
  int64_t capacity = 0;
  std::vector<Individual> members;  // oldest first
  int64_t next_birth = 0;

  void add(Individual ind);  // assigns birth; evicts the oldest when full
  size_t size() const { return members.size(); }
};

struct Trajectory {
  std::vector<Individual> evaluated;   // seeds first, then offspring in order
  std::vector<double> best_so_far;     // per cycle, feasible only
};

struct SearchResult {
  bool found_feasible = false;
  ArchitectureGenome best;
  double best_ppl = std::numeric_limits<double>::infinity();
  Trajectory trajectory;
};

// Evaluates seeds (plus random genomes up to capacity) before the search
// begins; refuses to start when no member is feasible.
Population seed_population(const std::vector<ArchitectureGenome>& seeds,
                           int64_t random_count, const SearchConfig& cfg,
                           const SearchSpace& space, const EfficiencyModel& eff,
                           Evaluator& evaluator, Trajectory* traj = nullptr);

// Uniform S-sample tournament; lowest proxy PPL among feasible sampled
// members, falling back to the lowest-efficiency sample (flagged) when none
// is feasible.
const Individual& tournament_select(const Population& pop, int64_t sample_size,
                                    double budget, Rng& rng,
                                    bool* all_infeasible = nullptr);

SearchResult run_search(const SearchConfig& cfg, const SearchSpace& space,
                        const EfficiencyModel& eff, Evaluator& evaluator,
                        const std::vector<ArchitectureGenome>& seeds = {});

void write_trajectory_jsonl(const std::filesystem::path& path, const Trajectory& traj);

// Rank correlation with average ranks for ties.
double spearman(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace slm
