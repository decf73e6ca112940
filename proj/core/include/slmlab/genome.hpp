#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "slmlab/operators.hpp"

namespace slm {

// Hybrid-operator ratio within one building block: count of op_a vs op_b
// per repeat unit. kOnly (0:1) means the stage has a single mixer kind.
enum class Ratio { kOnly, kOneOne, kOneTwo, kOneThree };

std::string ratio_str(Ratio r);
std::optional<Ratio> ratio_from_str(const std::string& s);
int64_t ratio_b_count(Ratio r);  // op_b instances per repeat unit

struct StageSpec {
  OperatorKind op_a = OperatorKind::kDeltaNet;
  std::optional<OperatorKind> op_b;
  Ratio ratio = Ratio::kOnly;
  int64_t ffn_per_mixer = 1;  // 0, 1, or 2
  int64_t n_blocks = 0;

  int64_t mixers_per_block() const { return 1 + ratio_b_count(ratio); }
  int64_t ops_per_block() const { return mixers_per_block() * (1 + ffn_per_mixer); }
};

// Hidden-size ladders. The paper-scale ladder is kept for validating
// full-size genomes; searches here run on the desk-scale ladder.
extern const std::vector<int64_t> kPaperLadder;  // 1024..2560
extern const std::vector<int64_t> kToyLadder;    // 32..128

struct ArchitectureGenome {
  std::array<StageSpec, 3> stages;
  int64_t hidden_size = 48;
  int64_t meta_tokens = 0;
  int64_t max_operators = 30;

  int64_t decoded_op_count() const;
  bool operator==(const ArchitectureGenome&) const = default;
};

// One operator instance in a decoded model; window applies to attention
// (0 = full), carried per instance so attention-configuration ablations can
// rewrite individual layers.
struct OpInstance {
  OperatorKind kind;
  int64_t window = 0;
  bool operator==(const OpInstance&) const = default;
};

struct ModelSpec {
  std::vector<OpInstance> ops;
  int64_t hidden = 0;
  int64_t ffn_dim = 0;
  AttentionConfig attn;  // head_dim = hidden / n_heads
  int64_t n_heads = 4;   // token-mixer heads (linear mixers)
  int64_t meta_tokens = 0;
  int64_t vocab = 64;
  bool tied_embedding = false;

  // scaling-law bookkeeping: D counts mixer+FFN block pairs (= mixers),
  // W is the hidden size
  int64_t depth() const;
  int64_t width() const { return hidden; }
  int64_t mixer_count(OperatorKind k) const;
  std::vector<std::string> op_codes() const;
  OperatorSizing sizing() const;
};

struct DecodeOptions {
  int64_t n_heads = 4;
  int64_t gqa_group = 4;           // n_kv_heads = max(1, n_heads / gqa_group)
  int64_t attention_window = 0;    // 0 = full attention
  int64_t ffn_expansion = 3;
  int64_t vocab = 64;
  bool tied_embedding = false;
};

void validate(const ArchitectureGenome& g);

// Stage-block expansion. Blocks from the three stages are emitted one per
// stage per round (stage order preserved) until every stage is exhausted,
// which is the arrangement the searched interleaved hybrids use.
ModelSpec decode(const ArchitectureGenome& g, const DecodeOptions& opt = {});

// Decrements the last stage's block count until the operator cap holds.
// Idempotent on valid genomes; throws if the cap is unreachable.
ArchitectureGenome repair(const ArchitectureGenome& g);

// Total trainable parameters of the decoded model, including embedding,
// LM head, norm gains and meta tokens.
int64_t model_params_count(const ModelSpec& spec);

// Named model presets: nf-1b, nf-3b, toy-hybrid-small, toy-hybrid-base,
// toy-attn-small, toy-deltanet-small, toy-mamba2-small.
ModelSpec preset(const std::string& name);

// Genome presets: hybrid-interleave-24, hybrid-interleave-36 (paper scale),
// toy-hybrid-interleave (desk scale).
ArchitectureGenome genome_preset(const std::string& name);

std::string genome_to_json(const ArchitectureGenome& g);
ArchitectureGenome genome_from_json(const std::string& text);

// Factor-level difference between two genomes, for mutation audits.
struct GenomeDiff {
  int operator_changes = 0;  // op_a/op_b identity at equal ratio
  int ratio_changes = 0;     // ratio (op_b appearance/disappearance included)
  int ffn_changes = 0;
  int block_changes = 0;
  int total() const {
    return operator_changes + ratio_changes + ffn_changes + block_changes;
  }
};
GenomeDiff genome_diff(const ArchitectureGenome& a, const ArchitectureGenome& b);

}  // namespace slm
