#pragma once

#include <cstdint>
#include <vector>

#include "slmlab/common.hpp"

namespace slm {

// Deterministic synthetic character-level corpus: structured order-2 Markov
// text interleaved with copy/recall patterns, so both local modeling and
// recall-like structure are exercised. Token ids stay below `vocab`.
struct Corpus {
  std::vector<int32_t> tokens;
  int64_t vocab = 64;
  int64_t train_len = 0;  // prefix; the suffix is the validation split

  int64_t val_len() const { return static_cast<int64_t>(tokens.size()) - train_len; }
};

Corpus make_toy_corpus(uint64_t seed = 0xC0FFEE, int64_t n_tokens = 2'000'000);

// Periodic copy streams: random blocks of length `lag`, each repeated a few
// times, so x_t is predictable from x_{t-lag} by any token mixer with memory
// but not by an FFN-only model.
Corpus make_shift_corpus(uint64_t seed, int64_t n_tokens, int64_t lag = 8);

// `count` window start positions for one batch, deterministic in (seed, step).
std::vector<int64_t> sample_window_starts(const Corpus& corpus, int64_t window_len,
                                          int64_t count, uint64_t seed, int64_t step);

// Evenly spaced validation windows (fixed evaluation set).
std::vector<int64_t> eval_window_starts(const Corpus& corpus, int64_t window_len,
                                        int64_t count);

}  // namespace slm
