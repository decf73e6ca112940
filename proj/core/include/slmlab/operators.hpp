#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "slmlab/graph.hpp"
#include "slmlab/tensor.hpp"

namespace slm {

enum class OperatorKind {
  kFullAttention,
  kSlidingWindowAttention,
  kMamba2,
  kDeltaNet,
  kGatedDeltaNet,
  kGla,
  kFfn,
};

// Letter codes as used in serialized operator lists.
std::string op_code(OperatorKind k);
std::optional<OperatorKind> op_from_code(const std::string& code);
bool is_mixer(OperatorKind k);
bool is_attention(OperatorKind k);

struct AttentionConfig {
  int64_t n_heads = 4;
  int64_t n_kv_heads = 1;  // grouped-query; group size n_heads / n_kv_heads
  int64_t head_dim = 8;
  int64_t window = 0;  // 0 = full; SWA: position t sees max(0, t-w+1)..t
  // causal always

  int64_t width() const { return n_heads * head_dim; }
  int64_t kv_dim() const { return n_kv_heads * head_dim; }
  void validate() const;
};

// Per-operator matrix sizing shared by params_count and the model builder.
struct OperatorSizing {
  int64_t n_heads = 4;
  int64_t n_kv_heads = 1;
  int64_t ffn_expansion = 3;
};

// Exact trainable-parameter count of one operator instance at `width`
// (embedding/LM-head and per-block norm gains are counted at model level).
int64_t params_count(OperatorKind kind, int64_t width, const OperatorSizing& sz);

// ---------------------------------------------------------------------------
// Parameters. Stored in the W[C_out x C_in] convention; applied as x . W^T.

template <typename T>
struct MixerParamsT {
  TensorT<T> wq, wk, wv, wo;
  TensorT<T> wbeta;   // delta-type write-strength gate, [h x d]
  TensorT<T> wdecay;  // m2/gdn: [h x d]; gla: [d x d] (per key channel)
};

template <typename T>
struct FfnParamsT {
  TensorT<T> wgate, wup, wdown;
};

using MixerParams = MixerParamsT<double>;
using FfnParams = FfnParamsT<double>;

// ---------------------------------------------------------------------------
// Recurrent (decoding) state.

template <typename T>
struct KvCacheT {
  int64_t window = 0;  // 0 = unbounded
  int64_t kv_dim = 0;
  std::vector<T> k, v;  // row-major [len x kv_dim]; ring when windowed
  int64_t len = 0;
  int64_t start = 0;  // ring head
  int64_t seen = 0;

  void reset(int64_t window_, int64_t kv_dim_) {
    window = window_;
    kv_dim = kv_dim_;
    k.clear();
    v.clear();
    len = start = seen = 0;
    if (window > 0) {
      k.resize(window * kv_dim);
      v.resize(window * kv_dim);
    }
  }

  void push(const T* krow, const T* vrow) {
    if (window == 0) {
      k.insert(k.end(), krow, krow + kv_dim);
      v.insert(v.end(), vrow, vrow + kv_dim);
      ++len;
    } else if (len < window) {
      std::copy(krow, krow + kv_dim, k.data() + len * kv_dim);
      std::copy(vrow, vrow + kv_dim, v.data() + len * kv_dim);
      ++len;
    } else {
      std::copy(krow, krow + kv_dim, k.data() + start * kv_dim);
      std::copy(vrow, vrow + kv_dim, v.data() + start * kv_dim);
      start = (start + 1) % window;
    }
    ++seen;
  }

  const T* k_row(int64_t i) const { return k.data() + ((start + i) % cap()) * kv_dim; }
  const T* v_row(int64_t i) const { return v.data() + ((start + i) % cap()) * kv_dim; }

 private:
  int64_t cap() const { return window == 0 ? std::max<int64_t>(len, 1) : window; }
};

// State of one operator instance while decoding. Linear-attention kinds keep
// a per-head associative memory S[d_k x d_v]; attention keeps a KV cache
// (ring buffer of length = window for SWA); gated kinds additionally expose
// the most recent decay for telemetry.
template <typename T>
struct RecurrentStateT {
  OperatorKind kind = OperatorKind::kFfn;
  std::vector<TensorT<T>> s;  // per head
  TensorT<T> last_decay;
  KvCacheT<T> kv;
};

using RecurrentState = RecurrentStateT<double>;

inline constexpr int64_t kChunk = 16;  // blocked-recurrence chunk length

namespace ops {

// ---------------------------------------------------------------------------
// Mixing cores. Inputs are already projected and (for delta-type kinds)
// L2-normalized per head: Q,K [T x h*dk], V [T x h*dv], gates [T x h] or
// [T x h*dk]. S0 may be empty (zero state). All sequence forms advance the
// recurrence in chunks of kChunk tokens; the step forms advance one token.

template <typename T>
void check_delta_key(const T* k, int64_t dk) {
  double ss = 0;
  for (int64_t i = 0; i < dk; ++i) ss += double(k[i]) * double(k[i]);
  double norm = std::sqrt(ss);
  if (norm > 1e-3 && std::fabs(norm - 1.0) > 1e-3)
    throw ShapeError("delta-rule key not L2-normalized: |k| = " + std::to_string(norm));
}

template <typename T>
void check_decay(double a) {
  if (!(a > 0.0 && a <= 1.0))
    throw ShapeError("decay outside (0, 1]: " + std::to_string(a));
}

// S_t = (I - beta k k^T) S_{t-1} + beta k v^T, in place; gamma scales the
// retained part (1 for plain delta rule, the decay for the gated variant).
template <typename T>
void delta_step_head(TensorT<T>& s, const T* k, const T* v, T beta, T gamma, int64_t dk,
                     int64_t dv) {
  check_delta_key(k, dk);
  if (gamma != T(1)) check_decay<T>(double(gamma));
  // u = S^T k
  std::vector<T> u(dv, T(0));
  for (int64_t i = 0; i < dk; ++i) {
    const T* srow = s.row_ptr(i);
    const T ki = k[i];
    for (int64_t j = 0; j < dv; ++j) u[j] += ki * srow[j];
  }
  for (int64_t i = 0; i < dk; ++i) {
    T* srow = s.row_ptr(i);
    const T bk = beta * k[i];
    for (int64_t j = 0; j < dv; ++j) srow[j] = gamma * (srow[j] - bk * u[j]) + bk * v[j];
  }
}

// S_t = decay .* S_{t-1} + k v^T; decay is scalar (m2) or per key channel (gla).
template <typename T>
void decay_step_head(TensorT<T>& s, const T* k, const T* v, const T* decay,
                     bool per_channel, int64_t dk, int64_t dv) {
  for (int64_t i = 0; i < dk; ++i) {
    const T a = per_channel ? decay[i] : decay[0];
    check_decay<T>(double(a));
    T* srow = s.row_ptr(i);
    const T ki = k[i];
    for (int64_t j = 0; j < dv; ++j) srow[j] = a * srow[j] + ki * v[j];
  }
}

// y = S^T q
template <typename T>
void readout_head(const TensorT<T>& s, const T* q, T* y, int64_t dk, int64_t dv) {
  std::fill(y, y + dv, T(0));
  for (int64_t i = 0; i < dk; ++i) {
    const T* srow = s.row_ptr(i);
    const T qi = q[i];
    for (int64_t j = 0; j < dv; ++j) y[j] += qi * srow[j];
  }
}

enum class LinearMixKind { kDelta, kGatedDelta, kMamba2, kGla };

// Sequence-level mixing; writes outputs for all T positions and returns the
// final state. `states_out`, when given, receives S_0..S_T per head
// (training stash). gates: delta/gdn beta [T x h]; m2/gdn decay [T x h];
// gla decay [T x h*dk].
template <typename T>
TensorT<T> linear_mix_seq(LinearMixKind kind, const TensorT<T>& q, const TensorT<T>& k,
                          const TensorT<T>& v, const TensorT<T>& beta,
                          const TensorT<T>& decay, int64_t n_heads,
                          std::vector<TensorT<T>>* state_in_out = nullptr,
                          std::vector<TensorT<T>>* states_stash = nullptr) {
  const int64_t t_len = q.rows();
  const int64_t dk = q.cols() / n_heads;
  const int64_t dv = v.cols() / n_heads;
  TensorT<T> y(t_len, v.cols());

  std::vector<TensorT<T>> state;
  if (state_in_out && !state_in_out->empty()) {
    state = *state_in_out;
  } else {
    state.assign(n_heads, TensorT<T>(dk, dv));
  }
  if (states_stash) {
    states_stash->clear();
    states_stash->reserve((t_len + 1) * n_heads);
    for (int64_t h = 0; h < n_heads; ++h) states_stash->push_back(state[h]);
  }

  for (int64_t c0 = 0; c0 < t_len; c0 += kChunk) {
    const int64_t c1 = std::min(t_len, c0 + kChunk);
    for (int64_t t = c0; t < c1; ++t) {
      for (int64_t h = 0; h < n_heads; ++h) {
        const T* kr = k.row_ptr(t) + h * dk;
        const T* vr = v.row_ptr(t) + h * dv;
        switch (kind) {
          case LinearMixKind::kDelta:
            delta_step_head(state[h], kr, vr, beta.at(t, h), T(1), dk, dv);
            break;
          case LinearMixKind::kGatedDelta:
            delta_step_head(state[h], kr, vr, beta.at(t, h), decay.at(t, h), dk, dv);
            break;
          case LinearMixKind::kMamba2: {
            const T a = decay.at(t, h);
            decay_step_head(state[h], kr, vr, &a, false, dk, dv);
            break;
          }
          case LinearMixKind::kGla:
            decay_step_head(state[h], kr, vr, decay.row_ptr(t) + h * dk, true, dk, dv);
            break;
        }
        readout_head(state[h], q.row_ptr(t) + h * dk, y.row_ptr(t) + h * dv, dk, dv);
        if (states_stash) states_stash->push_back(state[h]);
      }
    }
  }
  if (state_in_out) *state_in_out = std::move(state);
  return y;
}

// Causal (optionally windowed) softmax attention over the whole sequence.
// Q [T x h*hd], K,V [T x hkv*hd]. `probs_stash` receives per-head T x T
// attention matrices when given.
template <typename T>
TensorT<T> attention_mix_seq(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                             int64_t n_heads, int64_t n_kv_heads, int64_t window,
                             std::vector<TensorT<T>>* probs_stash = nullptr) {
  const int64_t t_len = q.rows();
  const int64_t hd = q.cols() / n_heads;
  const int64_t group = n_heads / n_kv_heads;
  const T scale = T(1.0 / std::sqrt(double(hd)));
  TensorT<T> y(t_len, q.cols());
  if (probs_stash) probs_stash->assign(n_heads, TensorT<T>(t_len, t_len));

  std::vector<double> row(t_len);
  for (int64_t h = 0; h < n_heads; ++h) {
    const int64_t kvh = h / group;
    for (int64_t t = 0; t < t_len; ++t) {
      const int64_t lo = window > 0 ? std::max<int64_t>(0, t - window + 1) : 0;
      const T* qr = q.row_ptr(t) + h * hd;
      double mx = -1e300;
      for (int64_t s = lo; s <= t; ++s) {
        const T* kr = k.row_ptr(s) + kvh * hd;
        double acc = 0;
        for (int64_t i = 0; i < hd; ++i) acc += double(qr[i]) * double(kr[i]);
        row[s] = acc * double(scale);
        mx = std::max(mx, row[s]);
      }
      double denom = 0;
      for (int64_t s = lo; s <= t; ++s) {
        row[s] = std::exp(row[s] - mx);
        denom += row[s];
      }
      T* yr = y.row_ptr(t) + h * hd;
      std::fill(yr, yr + hd, T(0));
      for (int64_t s = lo; s <= t; ++s) {
        const T p = T(row[s] / denom);
        if (probs_stash) (*probs_stash)[h].at(t, s) = p;
        const T* vr = v.row_ptr(s) + kvh * hd;
        for (int64_t i = 0; i < hd; ++i) yr[i] += p * vr[i];
      }
    }
  }
  return y;
}

// One decode step against a KV cache; pushes (k_t, v_t) then attends.
template <typename T>
TensorT<T> attention_mix_step(KvCacheT<T>& cache, const TensorT<T>& q_t,
                              const TensorT<T>& k_t, const TensorT<T>& v_t,
                              int64_t n_heads, int64_t n_kv_heads) {
  const int64_t hd = q_t.cols() / n_heads;
  const int64_t group = n_heads / n_kv_heads;
  const T scale = T(1.0 / std::sqrt(double(hd)));
  cache.push(k_t.data(), v_t.data());
  TensorT<T> y(1, q_t.cols());
  std::vector<double> row(cache.len);
  for (int64_t h = 0; h < n_heads; ++h) {
    const int64_t kvh = h / group;
    const T* qr = q_t.data() + h * hd;
    double mx = -1e300;
    for (int64_t s = 0; s < cache.len; ++s) {
      const T* kr = cache.k_row(s) + kvh * hd;
      double acc = 0;
      for (int64_t i = 0; i < hd; ++i) acc += double(qr[i]) * double(kr[i]);
      row[s] = acc * double(scale);
      mx = std::max(mx, row[s]);
    }
    double denom = 0;
    for (int64_t s = 0; s < cache.len; ++s) {
      row[s] = std::exp(row[s] - mx);
      denom += row[s];
    }
    T* yr = y.data() + h * hd;
    std::fill(yr, yr + hd, T(0));
    for (int64_t s = 0; s < cache.len; ++s) {
      const T p = T(row[s] / denom);
      const T* vr = cache.v_row(s) + kvh * hd;
      for (int64_t i = 0; i < hd; ++i) yr[i] += p * vr[i];
    }
  }
  return y;
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Operator-level forward/step forms (projections included).

template <typename T>
struct MixerActs {  // projected activations, exposed for the graph wrappers
  TensorT<T> q, k, v, beta, decay;
};

template <typename T>
MixerActs<T> project_mixer_inputs(OperatorKind kind, const TensorT<T>& x,
                                  const MixerParamsT<T>& p, int64_t n_heads) {
  MixerActs<T> a;
  a.q = linear(x, p.wq);
  a.k = linear(x, p.wk);
  a.v = linear(x, p.wv);
  if (kind == OperatorKind::kDeltaNet || kind == OperatorKind::kGatedDeltaNet) {
    a.k = l2_normalize_rows(a.k, n_heads);
    a.beta = sigmoid(linear(x, p.wbeta));
  }
  if (kind == OperatorKind::kGatedDeltaNet || kind == OperatorKind::kMamba2 ||
      kind == OperatorKind::kGla) {
    a.decay = sigmoid(linear(x, p.wdecay));
  }
  return a;
}

inline ops::LinearMixKind linear_mix_kind(OperatorKind k) {
  switch (k) {
    case OperatorKind::kDeltaNet: return ops::LinearMixKind::kDelta;
    case OperatorKind::kGatedDeltaNet: return ops::LinearMixKind::kGatedDelta;
    case OperatorKind::kMamba2: return ops::LinearMixKind::kMamba2;
    case OperatorKind::kGla: return ops::LinearMixKind::kGla;
    default: throw ShapeError("not a linear mixer: " + op_code(k));
  }
}

// Parallel (training-form) forward of one mixer over a whole sequence.
template <typename T>
TensorT<T> mixer_forward(OperatorKind kind, const TensorT<T>& x, const MixerParamsT<T>& p,
                         const AttentionConfig& attn, int64_t n_heads,
                         RecurrentStateT<T>* state = nullptr) {
  if (is_attention(kind)) {
    const int64_t window = kind == OperatorKind::kSlidingWindowAttention ? attn.window : 0;
    if (kind == OperatorKind::kSlidingWindowAttention && window < 1)
      throw ShapeError("sliding-window attention requires window >= 1");
    TensorT<T> q = linear(x, p.wq);
    TensorT<T> k = linear(x, p.wk);
    TensorT<T> v = linear(x, p.wv);
    TensorT<T> y;
    if (state) {
      // sequence fed token by token against the caller's cache
      y = TensorT<T>(x.rows(), q.cols());
      for (int64_t t = 0; t < x.rows(); ++t) {
        TensorT<T> qt(1, q.cols()), kt(1, k.cols()), vt(1, v.cols());
        std::copy(q.row_ptr(t), q.row_ptr(t) + q.cols(), qt.data());
        std::copy(k.row_ptr(t), k.row_ptr(t) + k.cols(), kt.data());
        std::copy(v.row_ptr(t), v.row_ptr(t) + v.cols(), vt.data());
        TensorT<T> yt =
            ops::attention_mix_step(state->kv, qt, kt, vt, attn.n_heads, attn.n_kv_heads);
        std::copy(yt.data(), yt.data() + yt.numel(), y.row_ptr(t));
      }
    } else {
      y = ops::attention_mix_seq(q, k, v, attn.n_heads, attn.n_kv_heads, window);
    }
    return linear(y, p.wo);
  }
  MixerActs<T> a = project_mixer_inputs(kind, x, p, n_heads);
  std::vector<TensorT<T>>* s = nullptr;
  if (state) s = &state->s;
  TensorT<T> y = ops::linear_mix_seq(linear_mix_kind(kind), a.q, a.k, a.v, a.beta, a.decay,
                                     n_heads, s);
  if (state && a.decay.numel() > 0) {
    state->last_decay = TensorT<T>(1, a.decay.cols());
    std::copy(a.decay.row_ptr(a.decay.rows() - 1),
              a.decay.row_ptr(a.decay.rows() - 1) + a.decay.cols(),
              state->last_decay.data());
  }
  return linear(y, p.wo);
}

// Recurrent (decoding-form) step of one mixer. x_t is [1 x d].
template <typename T>
TensorT<T> mixer_step(OperatorKind kind, RecurrentStateT<T>& st, const TensorT<T>& x_t,
                      const MixerParamsT<T>& p, const AttentionConfig& attn,
                      int64_t n_heads) {
  if (is_attention(kind)) {
    TensorT<T> q = linear(x_t, p.wq);
    TensorT<T> k = linear(x_t, p.wk);
    TensorT<T> v = linear(x_t, p.wv);
    TensorT<T> y = ops::attention_mix_step(st.kv, q, k, v, attn.n_heads, attn.n_kv_heads);
    return linear(y, p.wo);
  }
  MixerActs<T> a = project_mixer_inputs(kind, x_t, p, n_heads);
  const int64_t dk = a.q.cols() / n_heads;
  const int64_t dv = a.v.cols() / n_heads;
  if (st.s.empty()) st.s.assign(n_heads, TensorT<T>(dk, dv));
  TensorT<T> y(1, a.v.cols());
  for (int64_t h = 0; h < n_heads; ++h) {
    const T* kr = a.k.data() + h * dk;
    const T* vr = a.v.data() + h * dv;
    switch (kind) {
      case OperatorKind::kDeltaNet:
        ops::delta_step_head(st.s[h], kr, vr, a.beta.at(0, h), T(1), dk, dv);
        break;
      case OperatorKind::kGatedDeltaNet:
        ops::delta_step_head(st.s[h], kr, vr, a.beta.at(0, h), a.decay.at(0, h), dk, dv);
        break;
      case OperatorKind::kMamba2: {
        const T dec = a.decay.at(0, h);
        ops::decay_step_head(st.s[h], kr, vr, &dec, false, dk, dv);
        break;
      }
      case OperatorKind::kGla:
        ops::decay_step_head(st.s[h], kr, vr, a.decay.data() + h * dk, true, dk, dv);
        break;
      default:
        throw ShapeError("mixer_step: unsupported kind " + op_code(kind));
    }
    ops::readout_head(st.s[h], a.q.data() + h * dk, y.data() + h * dv, dk, dv);
  }
  if (a.decay.numel() > 0) st.last_decay = a.decay;
  return linear(y, p.wo);
}

// Gated MLP with SiLU gate; the residual is added by the block wrapper.
template <typename T>
TensorT<T> ffn_forward(const TensorT<T>& x, const FfnParamsT<T>& p) {
  TensorT<T> g = silu(linear(x, p.wgate));
  TensorT<T> u = linear(x, p.wup);
  return linear(mul(g, u), p.wdown);
}

// ---------------------------------------------------------------------------
// Fused tape nodes for the mixers. Projections stay as generic linear nodes;
// these cover only the mixing math, with hand-written adjoint recurrences.

template <typename T>
struct LinearMixNode : CustomOpT<T> {
  ops::LinearMixKind mix;
  int64_t n_heads;
  std::vector<TensorT<T>> states;  // S_0..S_T per head, stashed by forward

  LinearMixNode(ops::LinearMixKind mix_, int64_t n_heads_) : mix(mix_), n_heads(n_heads_) {}

  std::string kind() const override {
    switch (mix) {
      case ops::LinearMixKind::kDelta: return "delta_mix";
      case ops::LinearMixKind::kGatedDelta: return "gated_delta_mix";
      case ops::LinearMixKind::kMamba2: return "mamba2_mix";
      case ops::LinearMixKind::kGla: return "gla_mix";
    }
    return "linear_mix";
  }

  // inputs: q, k, v, beta (may be unused leaf), decay (may be unused leaf)
  TensorT<T> forward(const GraphT<T>& g, const std::vector<NodeId>& in) override {
    return ops::linear_mix_seq(mix, g.value(in[0]), g.value(in[1]), g.value(in[2]),
                               g.value(in[3]), g.value(in[4]), n_heads, nullptr, &states);
  }

  void backward(GraphT<T>& g, NodeId self) override {
    auto& node = g.node(self);
    const TensorT<T>& dy = node.adjoint;
    const TensorT<T>& q = g.value(node.inputs[0]);
    const TensorT<T>& k = g.value(node.inputs[1]);
    const TensorT<T>& v = g.value(node.inputs[2]);
    const TensorT<T>& beta = g.value(node.inputs[3]);
    const TensorT<T>& decay = g.value(node.inputs[4]);
    const int64_t t_len = q.rows();
    const int64_t dk = q.cols() / n_heads;
    const int64_t dv = v.cols() / n_heads;

    TensorT<T> dq(q.shape()), dkk(k.shape()), dvv(v.shape());
    TensorT<T> dbeta(beta.shape()), ddecay(decay.shape());

    // state before step t for head h: states[t * n_heads + h]
    auto s_prev = [&](int64_t t, int64_t h) -> const TensorT<T>& {
      return states[t * n_heads + h];
    };
    auto s_at = [&](int64_t t, int64_t h) -> const TensorT<T>& {
      return states[(t + 1) * n_heads + h];
    };

    std::vector<T> u(dv), w(dv);
    for (int64_t h = 0; h < n_heads; ++h) {
      TensorT<T> ds(dk, dv);  // adjoint of S_t, carried backwards
      for (int64_t t = t_len - 1; t >= 0; --t) {
        const T* qr = q.row_ptr(t) + h * dk;
        const T* kr = k.row_ptr(t) + h * dk;
        const T* vr = v.row_ptr(t) + h * dv;
        const T* dyr = dy.row_ptr(t) + h * dv;
        const TensorT<T>& st = s_at(t, h);
        const TensorT<T>& sp = s_prev(t, h);

        // readout y_t = S_t^T q_t
        T* dqr = dq.row_ptr(t) + h * dk;
        for (int64_t i = 0; i < dk; ++i) {
          const T* srow = st.row_ptr(i);
          T acc = 0;
          for (int64_t j = 0; j < dv; ++j) acc += srow[j] * dyr[j];
          dqr[i] = acc;
        }
        for (int64_t i = 0; i < dk; ++i) {
          T* dsrow = ds.row_ptr(i);
          const T qi = qr[i];
          for (int64_t j = 0; j < dv; ++j) dsrow[j] += qi * dyr[j];
        }

        T* dkr = dkk.row_ptr(t) + h * dk;
        T* dvr = dvv.row_ptr(t) + h * dv;
        switch (mix) {
          case ops::LinearMixKind::kDelta:
          case ops::LinearMixKind::kGatedDelta: {
            const T b = beta.at(t, h);
            const T gmm = mix == ops::LinearMixKind::kGatedDelta ? decay.at(t, h) : T(1);
            // u = S_{t-1}^T k, w = dS^T k
            std::fill(u.begin(), u.end(), T(0));
            std::fill(w.begin(), w.end(), T(0));
            for (int64_t i = 0; i < dk; ++i) {
              const T ki = kr[i];
              const T* sprow = sp.row_ptr(i);
              const T* dsrow = ds.row_ptr(i);
              for (int64_t j = 0; j < dv; ++j) {
                u[j] += ki * sprow[j];
                w[j] += ki * dsrow[j];
              }
            }
            // dbeta = k^T dS (v - gamma u)
            T db = 0;
            for (int64_t j = 0; j < dv; ++j) db += w[j] * (vr[j] - gmm * u[j]);
            dbeta.at(t, h) += db;
            if (mix == ops::LinearMixKind::kGatedDelta) {
              // dgamma = <dS, S_{t-1}> - beta k^T dS u
              T dg = 0;
              for (int64_t i = 0; i < dk; ++i) {
                const T* sprow = sp.row_ptr(i);
                const T* dsrow = ds.row_ptr(i);
                for (int64_t j = 0; j < dv; ++j) dg += dsrow[j] * sprow[j];
              }
              T kdu = 0;
              for (int64_t j = 0; j < dv; ++j) kdu += w[j] * u[j];
              ddecay.at(t, h) += dg - b * kdu;
            }
            // dv = beta dS^T k
            for (int64_t j = 0; j < dv; ++j) dvr[j] += b * w[j];
            // dk = -gamma beta (dS u + S_{t-1} dS^T k) + beta dS v
            for (int64_t i = 0; i < dk; ++i) {
              const T* dsrow = ds.row_ptr(i);
              const T* sprow = sp.row_ptr(i);
              T dsu = 0, spw = 0, dsv = 0;
              for (int64_t j = 0; j < dv; ++j) {
                dsu += dsrow[j] * u[j];
                spw += sprow[j] * w[j];
                dsv += dsrow[j] * vr[j];
              }
              dkr[i] += b * (dsv - gmm * (dsu + spw));
            }
            // carry: dS_{t-1} = gamma (I - beta k k^T) dS
            for (int64_t i = 0; i < dk; ++i) {
              T* dsrow = ds.row_ptr(i);
              const T bk = b * kr[i];
              for (int64_t j = 0; j < dv; ++j) dsrow[j] = gmm * (dsrow[j] - bk * w[j]);
            }
            break;
          }
          case ops::LinearMixKind::kMamba2: {
            const T a = decay.at(t, h);
            T da = 0;
            for (int64_t i = 0; i < dk; ++i) {
              const T* dsrow = ds.row_ptr(i);
              const T* sprow = sp.row_ptr(i);
              T dsv = 0;
              for (int64_t j = 0; j < dv; ++j) {
                da += dsrow[j] * sprow[j];
                dsv += dsrow[j] * vr[j];
              }
              dkr[i] += dsv;
            }
            ddecay.at(t, h) += da;
            for (int64_t j = 0; j < dv; ++j) {
              T acc = 0;
              for (int64_t i = 0; i < dk; ++i) acc += ds.at(i, j) * kr[i];
              dvr[j] += acc;
            }
            for (int64_t i = 0; i < dk; ++i) {
              T* dsrow = ds.row_ptr(i);
              for (int64_t j = 0; j < dv; ++j) dsrow[j] *= a;
            }
            break;
          }
          case ops::LinearMixKind::kGla: {
            const T* ar = decay.row_ptr(t) + h * dk;
            T* dar = ddecay.row_ptr(t) + h * dk;
            for (int64_t i = 0; i < dk; ++i) {
              const T* dsrow = ds.row_ptr(i);
              const T* sprow = sp.row_ptr(i);
              T da = 0, dsv = 0;
              for (int64_t j = 0; j < dv; ++j) {
                da += dsrow[j] * sprow[j];
                dsv += dsrow[j] * vr[j];
              }
              dar[i] += da;
              dkr[i] += dsv;
            }
            for (int64_t j = 0; j < dv; ++j) {
              T acc = 0;
              for (int64_t i = 0; i < dk; ++i) acc += ds.at(i, j) * kr[i];
              dvr[j] += acc;
            }
            for (int64_t i = 0; i < dk; ++i) {
              T* dsrow = ds.row_ptr(i);
              const T a = ar[i];
              for (int64_t j = 0; j < dv; ++j) dsrow[j] *= a;
            }
            break;
          }
        }
      }
    }

    auto accum_into = [&g](NodeId id, const TensorT<T>& grad) {
      if (!g.node(id).requires_grad) return;
      auto& adj = g.adjoint(id);
      for (int64_t i = 0; i < grad.numel(); ++i) adj[i] += grad[i];
    };
    accum_into(node.inputs[0], dq);
    accum_into(node.inputs[1], dkk);
    accum_into(node.inputs[2], dvv);
    accum_into(node.inputs[3], dbeta);
    accum_into(node.inputs[4], ddecay);
  }
};

template <typename T>
struct AttentionMixNode : CustomOpT<T> {
  int64_t n_heads, n_kv_heads, window;
  std::vector<TensorT<T>> probs;  // per head, T x T

  AttentionMixNode(int64_t h, int64_t hkv, int64_t w)
      : n_heads(h), n_kv_heads(hkv), window(w) {}

  std::string kind() const override { return "attention_mix"; }

  TensorT<T> forward(const GraphT<T>& g, const std::vector<NodeId>& in) override {
    return ops::attention_mix_seq(g.value(in[0]), g.value(in[1]), g.value(in[2]), n_heads,
                                  n_kv_heads, window, &probs);
  }

  void backward(GraphT<T>& g, NodeId self) override {
    auto& node = g.node(self);
    const TensorT<T>& dy = node.adjoint;
    const TensorT<T>& q = g.value(node.inputs[0]);
    const TensorT<T>& k = g.value(node.inputs[1]);
    const TensorT<T>& v = g.value(node.inputs[2]);
    const int64_t t_len = q.rows();
    const int64_t hd = q.cols() / n_heads;
    const int64_t group = n_heads / n_kv_heads;
    const T scale = T(1.0 / std::sqrt(double(hd)));

    TensorT<T> dq(q.shape()), dk(k.shape()), dv(v.shape());
    std::vector<double> dprow;
    for (int64_t h = 0; h < n_heads; ++h) {
      const int64_t kvh = h / group;
      const TensorT<T>& p = probs[h];
      for (int64_t t = 0; t < t_len; ++t) {
        const int64_t lo = window > 0 ? std::max<int64_t>(0, t - window + 1) : 0;
        const T* dyr = dy.row_ptr(t) + h * hd;
        // dp and softmax backward within the visible span
        dprow.assign(t - lo + 1, 0.0);
        double dot = 0;
        for (int64_t s = lo; s <= t; ++s) {
          const T* vr = v.row_ptr(s) + kvh * hd;
          double acc = 0;
          for (int64_t i = 0; i < hd; ++i) acc += double(dyr[i]) * double(vr[i]);
          dprow[s - lo] = acc;
          dot += acc * double(p.at(t, s));
        }
        const T* qr = q.row_ptr(t) + h * hd;
        T* dqr = dq.row_ptr(t) + h * hd;
        for (int64_t s = lo; s <= t; ++s) {
          const double pp = p.at(t, s);
          const double dscore = (dprow[s - lo] - dot) * pp * double(scale);
          const T* kr = k.row_ptr(s) + kvh * hd;
          T* dkr = dk.row_ptr(s) + kvh * hd;
          T* dvr = dv.row_ptr(s) + kvh * hd;
          for (int64_t i = 0; i < hd; ++i) {
            dqr[i] += T(dscore * double(kr[i]));
            dkr[i] += T(dscore * double(qr[i]));
            dvr[i] += T(double(pp) * double(dyr[i]));
          }
        }
      }
    }
    auto accum_into = [&g](NodeId id, const TensorT<T>& grad) {
      if (!g.node(id).requires_grad) return;
      auto& adj = g.adjoint(id);
      for (int64_t i = 0; i < grad.numel(); ++i) adj[i] += grad[i];
    };
    accum_into(node.inputs[0], dq);
    accum_into(node.inputs[1], dk);
    accum_into(node.inputs[2], dv);
  }
};

}  // namespace slm
