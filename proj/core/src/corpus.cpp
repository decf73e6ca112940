#include "slmlab/corpus.hpp"

#include <algorithm>
#include <array>

namespace slm {

namespace {

constexpr int32_t kRecallMarker = 1;
constexpr int32_t kFirstSymbol = 2;

}  // namespace

Corpus make_toy_corpus(uint64_t seed, int64_t n_tokens) {
  Corpus c;
  c.vocab = 64;
  c.tokens.reserve(n_tokens);
  const int32_t n_sym = c.vocab - kFirstSymbol;  // symbols 2..63

  // fixed sparse order-2 transition table
  Rng table_rng(derive_seed(seed, 0x7ab1e));
  std::vector<std::array<int32_t, 4>> succ(n_sym * n_sym);
  for (auto& s : succ)
    for (auto& v : s) v = kFirstSymbol + static_cast<int32_t>(table_rng.next_below(n_sym));
  const double weights[4] = {0.45, 0.75, 0.90, 1.0};  // cumulative

  Rng rng(derive_seed(seed, 0x57124d));
  int32_t a = kFirstSymbol, b = kFirstSymbol + 1;
  auto markov_next = [&]() {
    const auto& s = succ[(a - kFirstSymbol) * n_sym + (b - kFirstSymbol)];
    double u = rng.uniform();
    int32_t next = s[3];
    for (int i = 0; i < 4; ++i)
      if (u < weights[i]) {
        next = s[i];
        break;
      }
    a = b;
    b = next;
    return next;
  };

  while (static_cast<int64_t>(c.tokens.size()) < n_tokens) {
    if (rng.uniform() < 0.8) {
      const int64_t len = 80 + static_cast<int64_t>(rng.next_below(161));
      for (int64_t i = 0; i < len; ++i) c.tokens.push_back(markov_next());
    } else {
      // marker, payload, filler, marker, payload again
      const int64_t pay_len = 4 + static_cast<int64_t>(rng.next_below(5));
      const int64_t fill_len = 8 + static_cast<int64_t>(rng.next_below(9));
      std::vector<int32_t> payload(pay_len);
      for (auto& p : payload)
        p = kFirstSymbol + static_cast<int32_t>(rng.next_below(n_sym));
      c.tokens.push_back(kRecallMarker);
      c.tokens.insert(c.tokens.end(), payload.begin(), payload.end());
      for (int64_t i = 0; i < fill_len; ++i) c.tokens.push_back(markov_next());
      c.tokens.push_back(kRecallMarker);
      c.tokens.insert(c.tokens.end(), payload.begin(), payload.end());
    }
  }
  c.tokens.resize(n_tokens);
  c.train_len = n_tokens - std::max<int64_t>(n_tokens / 50, 2048);
  return c;
}

Corpus make_shift_corpus(uint64_t seed, int64_t n_tokens, int64_t lag) {
  Corpus c;
  c.vocab = 64;
  c.tokens.reserve(n_tokens);
  const int32_t n_sym = c.vocab - kFirstSymbol;
  Rng rng(derive_seed(seed, 0x5417f7));
  while (static_cast<int64_t>(c.tokens.size()) < n_tokens) {
    std::vector<int32_t> block(lag);
    for (auto& t : block) t = kFirstSymbol + static_cast<int32_t>(rng.next_below(n_sym));
    const int64_t reps = 3 + static_cast<int64_t>(rng.next_below(4));
    for (int64_t r = 0; r < reps; ++r)
      c.tokens.insert(c.tokens.end(), block.begin(), block.end());
  }
  c.tokens.resize(n_tokens);
  c.train_len = n_tokens - std::max<int64_t>(n_tokens / 50, 1024);
  return c;
}

std::vector<int64_t> sample_window_starts(const Corpus& corpus, int64_t window_len,
                                          int64_t count, uint64_t seed, int64_t step) {
  if (corpus.train_len <= window_len)
    throw ValidationError("corpus training split shorter than one window");
  Rng rng(derive_seed(seed, 0xba7c4, static_cast<uint64_t>(step)));
  std::vector<int64_t> starts(count);
  for (auto& s : starts)
    s = static_cast<int64_t>(rng.next_below(corpus.train_len - window_len));
  return starts;
}

std::vector<int64_t> eval_window_starts(const Corpus& corpus, int64_t window_len,
                                        int64_t count) {
  if (corpus.val_len() <= window_len)
    throw ValidationError("corpus validation split shorter than one window");
  std::vector<int64_t> starts;
  const int64_t lo = corpus.train_len;
  const int64_t span = corpus.val_len() - window_len;
  for (int64_t i = 0; i < count; ++i)
    starts.push_back(lo + (count == 1 ? 0 : span * i / (count - 1)));
  return starts;
}

}  // namespace slm
