#include "slmlab/operators.hpp"

namespace slm {

std::string op_code(OperatorKind k) {
  switch (k) {
    case OperatorKind::kFullAttention: return "a";
    case OperatorKind::kSlidingWindowAttention: return "swa";
    case OperatorKind::kMamba2: return "m2";
    case OperatorKind::kDeltaNet: return "d";
    case OperatorKind::kGatedDeltaNet: return "gdn";
    case OperatorKind::kGla: return "gla";
    case OperatorKind::kFfn: return "f";
  }
  return "?";
}

std::optional<OperatorKind> op_from_code(const std::string& code) {
  if (code == "a") return OperatorKind::kFullAttention;
  if (code == "swa") return OperatorKind::kSlidingWindowAttention;
  if (code == "m2") return OperatorKind::kMamba2;
  if (code == "d") return OperatorKind::kDeltaNet;
  if (code == "gdn") return OperatorKind::kGatedDeltaNet;
  if (code == "gla") return OperatorKind::kGla;
  if (code == "f") return OperatorKind::kFfn;
  return std::nullopt;
}

bool is_mixer(OperatorKind k) { return k != OperatorKind::kFfn; }

bool is_attention(OperatorKind k) {
  return k == OperatorKind::kFullAttention || k == OperatorKind::kSlidingWindowAttention;
}

void AttentionConfig::validate() const {
  if (n_heads < 1 || n_kv_heads < 1 || head_dim < 1)
    throw ValidationError("attention config requires positive head counts and head_dim");
  if (n_heads % n_kv_heads != 0)
    throw ValidationError("n_heads (" + std::to_string(n_heads) +
                          ") not divisible by n_kv_heads (" + std::to_string(n_kv_heads) +
                          ")");
  if (window < 0) throw ValidationError("attention window must be >= 1 (or 0 for full)");
}

int64_t params_count(OperatorKind kind, int64_t width, const OperatorSizing& sz) {
  if (width <= 0) throw ValidationError("params_count requires width > 0");
  const int64_t d = width;
  switch (kind) {
    case OperatorKind::kFullAttention:
    case OperatorKind::kSlidingWindowAttention: {
      const int64_t hd = d / sz.n_heads;
      const int64_t kv_dim = sz.n_kv_heads * hd;
      return 2 * d * d + 2 * kv_dim * d;  // wq, wo: d x d; wk, wv: kv_dim x d
    }
    case OperatorKind::kDeltaNet:
      return 4 * d * d + sz.n_heads * d;  // q,k,v,o + beta gate
    case OperatorKind::kGatedDeltaNet:
      return 4 * d * d + 2 * sz.n_heads * d;  // + decay gate
    case OperatorKind::kGla:
      return 5 * d * d;  // per-channel decay projection is d x d
    case OperatorKind::kMamba2:
      return 4 * d * d + sz.n_heads * d;
    case OperatorKind::kFfn:
      return 3 * sz.ffn_expansion * d * d;  // gate, up, down
  }
  return 0;
}

}  // namespace slm
