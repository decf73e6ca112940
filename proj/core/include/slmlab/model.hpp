#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "slmlab/checkpoint.hpp"
#include "slmlab/genome.hpp"
#include "slmlab/graph.hpp"
#include "slmlab/operators.hpp"

namespace slm {

// Weight-normalization role of a parameter matrix W[C_out x C_in]:
//   Case1: applied to hidden features -> rows projected to unit L2 norm.
//   Case2: output added back to hidden features -> columns projected.
//   Exempt: embedding, LM head, gains, decay projections, meta tokens.
enum class WnormCase { kCase1, kCase2, kExempt };

// Projects W onto the unit-norm sphere: Case1 row-wise (over C_in), Case2
// column-wise (over C_out). Direction is preserved exactly; all-zero
// rows/columns are left unchanged (division guard, never NaN). Returns the
// count of skipped zero rows/columns for telemetry.
template <typename T>
int64_t wnorm_project(TensorT<T>& w, WnormCase wcase) {
  if (wcase == WnormCase::kExempt) return 0;
  int64_t skipped = 0;
  if (wcase == WnormCase::kCase1) {
    for (int64_t r = 0; r < w.rows(); ++r) {
      T* row = w.row_ptr(r);
      double ss = 0;
      for (int64_t c = 0; c < w.cols(); ++c) ss += double(row[c]) * double(row[c]);
      if (ss == 0) {
        ++skipped;
        continue;
      }
      const T inv = T(1.0 / std::sqrt(ss));
      for (int64_t c = 0; c < w.cols(); ++c) row[c] *= inv;
    }
  } else {
    for (int64_t c = 0; c < w.cols(); ++c) {
      double ss = 0;
      for (int64_t r = 0; r < w.rows(); ++r) ss += double(w.at(r, c)) * double(w.at(r, c));
      if (ss == 0) {
        ++skipped;
        continue;
      }
      const T inv = T(1.0 / std::sqrt(ss));
      for (int64_t r = 0; r < w.rows(); ++r) w.at(r, c) *= inv;
    }
  }
  return skipped;
}

template <typename T>
struct ParamRef {
  std::string name;
  TensorT<T>* tensor;
  WnormCase wcase;
};

template <typename T>
struct ModelDecodeStateT {
  std::vector<RecurrentStateT<T>> op_states;
  int64_t position = 0;
};

using ModelDecodeState = ModelDecodeStateT<double>;

// An executable model instantiated from a ModelSpec: owns parameters, builds
// training graphs, and runs the recurrent decode path. Single-owner; one
// model per training run.
template <typename T>
class ModelT {
 public:
  struct OpParams {
    OperatorKind kind;
    int64_t window = 0;
    TensorT<T> gain;  // pre-norm gain
    MixerParamsT<T> mix;
    FfnParamsT<T> ffn;
  };

  ModelT(const ModelSpec& spec, uint64_t init_seed, bool project_weights_at_init);

  const ModelSpec& spec() const { return spec_; }
  std::vector<ParamRef<T>>& params() { return registry_; }
  const std::vector<ParamRef<T>>& params() const { return registry_; }
  int64_t param_count() const;

  // --- training path -------------------------------------------------------
  struct Bound {
    std::vector<NodeId> leaf_ids;  // parallel to params()
    NodeId loss = -1;
  };

  // Mean next-token cross-entropy over a batch of (ctx+1)-token windows.
  Bound build_loss(GraphT<T>& g, const std::vector<std::vector<int32_t>>& windows) const;

  // --- pure (no-tape) path -------------------------------------------------
  // Logits for every position of `tokens`; with `state` the run continues
  // from (and advances) the given recurrent state.
  TensorT<T> forward_logits(const std::vector<int32_t>& tokens,
                            ModelDecodeStateT<T>* state = nullptr) const;

  // Runs meta||tokens in parallel form and returns logits for the token
  // positions only (prefix-run evaluation path).
  TensorT<T> forward_logits_with_meta_prefix(const std::vector<int32_t>& tokens) const;

  ModelDecodeStateT<T> init_decode_state() const;

  // Learned cache initialization: steps the meta tokens through the model
  // once and returns the primed recurrent state.
  ModelDecodeStateT<T> fold_meta_tokens() const;

  TensorT<T> decode_step(ModelDecodeStateT<T>& state, int32_t token) const;

  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);

  const TensorT<T>& meta_tokens() const { return meta_; }

 private:
  TensorT<T> embed(const std::vector<int32_t>& tokens) const;
  TensorT<T> forward_hidden_pure(TensorT<T> x, ModelDecodeStateT<T>* state) const;
  TensorT<T> decode_step_row(ModelDecodeStateT<T>& state, const T* x_row) const;
  AttentionConfig attn_for(const OpParams& op) const;

  ModelSpec spec_;
  std::vector<OpParams> ops_;
  TensorT<T> embedding_, head_, final_gain_, meta_;
  std::vector<ParamRef<T>> registry_;
};

using Model = ModelT<double>;
using Model32 = ModelT<float>;

// ---------------------------------------------------------------------------

template <typename T>
ModelT<T>::ModelT(const ModelSpec& spec, uint64_t init_seed, bool project_weights_at_init)
    : spec_(spec) {
  spec_.attn.validate();
  const int64_t d = spec_.hidden;
  if (d <= 0 || d % spec_.n_heads != 0)
    throw ValidationError("hidden size must be a positive multiple of n_heads");
  Rng rng(derive_seed(init_seed, 0x6d6f64656cULL));
  const double base_std = 0.02;
  const double resid_std =
      base_std / std::sqrt(2.0 * std::max<int64_t>(1, spec_.depth()));

  auto tn = [&](int64_t rows, int64_t cols, double stddev) {
    TensorT<T> t(rows, cols);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = T(rng.trunc_normal(0.0, stddev));
    return t;
  };

  const int64_t kv_dim = spec_.attn.kv_dim();
  ops_.reserve(spec_.ops.size());
  for (const OpInstance& inst : spec_.ops) {
    OpParams op;
    op.kind = inst.kind;
    op.window = inst.window;
    op.gain = TensorT<T>::ones({d});
    if (inst.kind == OperatorKind::kFfn) {
      op.ffn.wgate = tn(spec_.ffn_dim, d, base_std);
      op.ffn.wup = tn(spec_.ffn_dim, d, base_std);
      op.ffn.wdown = tn(d, spec_.ffn_dim, resid_std);
    } else if (is_attention(inst.kind)) {
      op.mix.wq = tn(d, d, base_std);
      op.mix.wk = tn(kv_dim, d, base_std);
      op.mix.wv = tn(kv_dim, d, base_std);
      op.mix.wo = tn(d, d, resid_std);
    } else {
      op.mix.wq = tn(d, d, base_std);
      op.mix.wk = tn(d, d, base_std);
      op.mix.wv = tn(d, d, base_std);
      op.mix.wo = tn(d, d, resid_std);
      if (inst.kind == OperatorKind::kDeltaNet || inst.kind == OperatorKind::kGatedDeltaNet)
        op.mix.wbeta = tn(spec_.n_heads, d, base_std);
      if (inst.kind == OperatorKind::kGla)
        op.mix.wdecay = tn(d, d, base_std);
      else if (inst.kind == OperatorKind::kGatedDeltaNet ||
               inst.kind == OperatorKind::kMamba2)
        op.mix.wdecay = tn(spec_.n_heads, d, base_std);
    }
    ops_.push_back(std::move(op));
  }
  embedding_ = tn(spec_.vocab, d, base_std);
  head_ = tn(spec_.vocab, d, base_std);
  final_gain_ = TensorT<T>::ones({d});
  if (spec_.meta_tokens > 0) meta_ = tn(spec_.meta_tokens, d, base_std);

  // registry: stable order = checkpoint order = graph leaf order
  auto reg = [&](std::string name, TensorT<T>& t, WnormCase c) {
    registry_.push_back(ParamRef<T>{std::move(name), &t, c});
  };
  reg("embedding", embedding_, WnormCase::kExempt);
  for (size_t i = 0; i < ops_.size(); ++i) {
    const std::string prefix = "op" + std::to_string(i) + "." + op_code(ops_[i].kind) + ".";
    OpParams& op = ops_[i];
    reg(prefix + "gain", op.gain, WnormCase::kExempt);
    if (op.kind == OperatorKind::kFfn) {
      reg(prefix + "wgate", op.ffn.wgate, WnormCase::kCase1);
      reg(prefix + "wup", op.ffn.wup, WnormCase::kCase1);
      reg(prefix + "wdown", op.ffn.wdown, WnormCase::kCase2);
    } else {
      reg(prefix + "wq", op.mix.wq, WnormCase::kCase1);
      reg(prefix + "wk", op.mix.wk, WnormCase::kCase1);
      reg(prefix + "wv", op.mix.wv, WnormCase::kCase1);
      if (op.mix.wbeta.numel() > 0) reg(prefix + "wbeta", op.mix.wbeta, WnormCase::kCase1);
      if (op.mix.wdecay.numel() > 0)
        reg(prefix + "wdecay", op.mix.wdecay, WnormCase::kExempt);
      reg(prefix + "wo", op.mix.wo, WnormCase::kCase2);
    }
  }
  reg("final_gain", final_gain_, WnormCase::kExempt);
  reg("head", head_, WnormCase::kExempt);
  if (spec_.meta_tokens > 0) reg("meta_tokens", meta_, WnormCase::kExempt);

  if (project_weights_at_init)
    for (auto& p : registry_) wnorm_project(*p.tensor, p.wcase);
}

template <typename T>
int64_t ModelT<T>::param_count() const {
  int64_t n = 0;
  for (const auto& p : registry_) n += p.tensor->numel();
  return n;
}

template <typename T>
AttentionConfig ModelT<T>::attn_for(const OpParams& op) const {
  AttentionConfig cfg = spec_.attn;
  cfg.window = op.window;
  return cfg;
}

template <typename T>
typename ModelT<T>::Bound ModelT<T>::build_loss(
    GraphT<T>& g, const std::vector<std::vector<int32_t>>& windows) const {
  if (windows.empty()) throw ValidationError("build_loss requires at least one window");
  Bound bound;
  bound.leaf_ids.reserve(registry_.size());
  for (const auto& p : registry_) bound.leaf_ids.push_back(g.leaf(*p.tensor, true));

  std::map<std::string, NodeId> by_name;
  for (size_t i = 0; i < registry_.size(); ++i) by_name[registry_[i].name] = bound.leaf_ids[i];
  const NodeId none = g.leaf(TensorT<T>(std::vector<int64_t>{0, 0}), false);

  const int64_t m = spec_.meta_tokens;
  std::vector<NodeId> losses;
  for (const auto& window : windows) {
    if (window.size() < 2) throw ValidationError("training window needs >= 2 tokens");
    std::vector<int32_t> inputs(window.begin(), window.end() - 1);
    std::vector<int32_t> targets(window.begin() + 1, window.end());
    const int64_t t_len = static_cast<int64_t>(inputs.size());

    NodeId x = g.embedding(by_name.at("embedding"), inputs);
    if (m > 0) x = g.concat_rows(by_name.at("meta_tokens"), x);

    for (size_t i = 0; i < ops_.size(); ++i) {
      const OpParams& op = ops_[i];
      const std::string prefix = "op" + std::to_string(i) + "." + op_code(op.kind) + ".";
      NodeId normed = g.scale_columns(g.rms_norm(x), by_name.at(prefix + "gain"));
      NodeId y;
      if (op.kind == OperatorKind::kFfn) {
        NodeId gate = g.silu(g.linear(normed, by_name.at(prefix + "wgate")));
        NodeId up = g.linear(normed, by_name.at(prefix + "wup"));
        y = g.linear(g.mul(gate, up), by_name.at(prefix + "wdown"));
      } else if (is_attention(op.kind)) {
        NodeId q = g.linear(normed, by_name.at(prefix + "wq"));
        NodeId k = g.linear(normed, by_name.at(prefix + "wk"));
        NodeId v = g.linear(normed, by_name.at(prefix + "wv"));
        auto node = std::make_unique<AttentionMixNode<T>>(
            spec_.attn.n_heads, spec_.attn.n_kv_heads, op.window);
        NodeId mixed = g.custom(std::move(node), {q, k, v});
        y = g.linear(mixed, by_name.at(prefix + "wo"));
      } else {
        NodeId q = g.linear(normed, by_name.at(prefix + "wq"));
        NodeId k = g.linear(normed, by_name.at(prefix + "wk"));
        NodeId v = g.linear(normed, by_name.at(prefix + "wv"));
        NodeId beta = none, decay = none;
        if (op.kind == OperatorKind::kDeltaNet || op.kind == OperatorKind::kGatedDeltaNet) {
          k = g.l2_normalize_rows(k, spec_.n_heads);
          beta = g.sigmoid(g.linear(normed, by_name.at(prefix + "wbeta")));
        }
        if (op.mix.wdecay.numel() > 0)
          decay = g.sigmoid(g.linear(normed, by_name.at(prefix + "wdecay")));
        auto node =
            std::make_unique<LinearMixNode<T>>(linear_mix_kind(op.kind), spec_.n_heads);
        NodeId mixed = g.custom(std::move(node), {q, k, v, beta, decay});
        y = g.linear(mixed, by_name.at(prefix + "wo"));
      }
      x = g.add(x, y);
    }
    x = g.scale_columns(g.rms_norm(x), by_name.at("final_gain"));
    if (m > 0) x = g.slice_rows(x, m, t_len);
    NodeId logits = g.linear(x, by_name.at("head"));
    losses.push_back(g.cross_entropy(logits, targets));
  }
  NodeId acc = losses[0];
  for (size_t i = 1; i < losses.size(); ++i) acc = g.add(acc, losses[i]);
  bound.loss = g.scale(acc, T(1.0 / double(losses.size())));
  return bound;
}

template <typename T>
TensorT<T> ModelT<T>::embed(const std::vector<int32_t>& tokens) const {
  TensorT<T> x(static_cast<int64_t>(tokens.size()), spec_.hidden);
  for (size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || tokens[t] >= spec_.vocab)
      throw ValidationError("token id out of range: " + std::to_string(tokens[t]));
    std::copy(embedding_.row_ptr(tokens[t]), embedding_.row_ptr(tokens[t]) + spec_.hidden,
              x.row_ptr(t));
  }
  return x;
}

template <typename T>
TensorT<T> ModelT<T>::forward_hidden_pure(TensorT<T> x, ModelDecodeStateT<T>* state) const {
  for (size_t i = 0; i < ops_.size(); ++i) {
    const OpParams& op = ops_[i];
    TensorT<T> normed = rms_norm_rows(x);
    for (int64_t r = 0; r < normed.rows(); ++r)
      for (int64_t c = 0; c < normed.cols(); ++c) normed.at(r, c) *= op.gain[c];
    TensorT<T> y;
    if (op.kind == OperatorKind::kFfn) {
      y = ffn_forward(normed, op.ffn);
    } else {
      RecurrentStateT<T>* st = state ? &state->op_states[i] : nullptr;
      y = mixer_forward(op.kind, normed, op.mix, attn_for(op), spec_.n_heads, st);
    }
    x = add(x, y);
  }
  TensorT<T> out = rms_norm_rows(x);
  for (int64_t r = 0; r < out.rows(); ++r)
    for (int64_t c = 0; c < out.cols(); ++c) out.at(r, c) *= final_gain_[c];
  if (state) state->position += x.rows();
  return out;
}

template <typename T>
TensorT<T> ModelT<T>::forward_logits(const std::vector<int32_t>& tokens,
                                     ModelDecodeStateT<T>* state) const {
  return linear(forward_hidden_pure(embed(tokens), state), head_);
}

template <typename T>
TensorT<T> ModelT<T>::forward_logits_with_meta_prefix(
    const std::vector<int32_t>& tokens) const {
  const int64_t m = spec_.meta_tokens;
  TensorT<T> x(m + static_cast<int64_t>(tokens.size()), spec_.hidden);
  std::copy(meta_.data(), meta_.data() + meta_.numel(), x.data());
  TensorT<T> emb = embed(tokens);
  std::copy(emb.data(), emb.data() + emb.numel(), x.data() + meta_.numel());
  TensorT<T> hidden = forward_hidden_pure(std::move(x), nullptr);
  TensorT<T> logits = linear(hidden, head_);
  TensorT<T> out(static_cast<int64_t>(tokens.size()), spec_.vocab);
  std::copy(logits.row_ptr(m), logits.row_ptr(m) + out.numel(), out.data());
  return out;
}

template <typename T>
ModelDecodeStateT<T> ModelT<T>::init_decode_state() const {
  ModelDecodeStateT<T> st;
  st.op_states.resize(ops_.size());
  for (size_t i = 0; i < ops_.size(); ++i) {
    st.op_states[i].kind = ops_[i].kind;
    if (is_attention(ops_[i].kind))
      st.op_states[i].kv.reset(ops_[i].window, spec_.attn.kv_dim());
  }
  return st;
}

template <typename T>
ModelDecodeStateT<T> ModelT<T>::fold_meta_tokens() const {
  ModelDecodeStateT<T> st = init_decode_state();
  for (int64_t r = 0; r < meta_.rows(); ++r) decode_step_row(st, meta_.row_ptr(r));
  return st;
}

template <typename T>
TensorT<T> ModelT<T>::decode_step_row(ModelDecodeStateT<T>& state, const T* x_row) const {
  TensorT<T> x(1, spec_.hidden);
  std::copy(x_row, x_row + spec_.hidden, x.data());
  for (size_t i = 0; i < ops_.size(); ++i) {
    const OpParams& op = ops_[i];
    TensorT<T> normed = rms_norm_rows(x);
    for (int64_t c = 0; c < spec_.hidden; ++c) normed[c] *= op.gain[c];
    TensorT<T> y;
    if (op.kind == OperatorKind::kFfn)
      y = ffn_forward(normed, op.ffn);
    else
      y = mixer_step(op.kind, state.op_states[i], normed, op.mix, attn_for(op),
                     spec_.n_heads);
    x = add(x, y);
  }
  TensorT<T> out = rms_norm_rows(x);
  for (int64_t c = 0; c < spec_.hidden; ++c) out[c] *= final_gain_[c];
  state.position += 1;
  return linear(out, head_);
}

template <typename T>
TensorT<T> ModelT<T>::decode_step(ModelDecodeStateT<T>& state, int32_t token) const {
  if (token < 0 || token >= spec_.vocab)
    throw ValidationError("token id out of range: " + std::to_string(token));
  return decode_step_row(state, embedding_.row_ptr(token));
}

template <typename T>
void ModelT<T>::save(const std::filesystem::path& dir) const {
  std::map<std::string, Tensor> tensors;
  for (const auto& p : registry_) tensors[p.name] = p.tensor->template cast<double>();
  checkpoint::write_manifest(dir, tensors);
}

template <typename T>
void ModelT<T>::load(const std::filesystem::path& dir) {
  auto tensors = checkpoint::read_manifest(dir);
  for (auto& p : registry_) {
    auto it = tensors.find(p.name);
    if (it == tensors.end())
      throw ValidationError("checkpoint missing parameter " + p.name);
    if (it->second.shape() != p.tensor->shape())
      throw ValidationError("checkpoint shape mismatch for " + p.name);
    *p.tensor = it->second.template cast<T>();
  }
}

}  // namespace slm
