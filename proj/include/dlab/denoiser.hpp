// SPDX-License-Identifier: Apache-2.0
#pragma once

// Prediction contract shared by every decoding backend, plus the scripted
// backend and teacher-trajectory recording.
//
// A denoiser maps (context view, masked positions) to per-position
// predictions. Implementations are immutable after construction; all
// stochasticity is derived from explicit seeds, so identical inputs give
// identical predictions on every platform.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dlab/common.hpp"
#include "dlab/trajectory.hpp"

namespace dlab::model {

struct Prediction {
  int position = 0;       // 1-based output position
  Token mode = 0;         // argmax token
  double mode_prob = 0;   // in (0, 1]
  double entropy = 0;     // nats, = -sum p ln p over support
  std::vector<std::pair<Token, double>> support;  // sums to 1, mask never present
};

inline double entropy_of_support(const std::vector<std::pair<Token, double>>& support) {
  double h = 0;
  for (const auto& [tok, p] : support)
    if (p > 0) h -= p * std::log(p);
  return h;
}

// What a backend may see of the decoding state: the prompt, the partially
// decoded output (mask_id at undecoded positions), the block layout, and
// cache ages for Completed blocks (staleness signal).
struct ContextView {
  const Tokens* prompt = nullptr;
  const Tokens* output = nullptr;
  Vocab vocab;
  int block_size = 32;
  std::map<int, int> cache_ages;  // block index (1-based) -> age in passes

  int n_output() const { return static_cast<int>(output->size()); }
  bool revealed(int pos) const { return (*output)[pos - 1] != vocab.mask_id; }
  int block_of(int pos) const { return (pos - 1) / block_size + 1; }
  int block_first(int b) const { return (b - 1) * block_size + 1; }
  int block_last(int b) const { return std::min(b * block_size, n_output()); }

  // Masked cells strictly between pos and the nearest revealed token; the
  // prompt's trailing token counts as revealed at position 0. INT_MAX when
  // nothing is revealed on either side.
  int nearest_reveal_gap(int pos) const {
    int best = std::numeric_limits<int>::max();
    for (int j = pos - 1; j >= 1; --j)
      if (revealed(j)) { best = pos - j - 1; break; }
    if (best == std::numeric_limits<int>::max() && !prompt->empty())
      best = pos - 1;
    for (int j = pos + 1; j <= n_output() && j - pos - 1 < best; ++j)
      if (revealed(j)) { best = j - pos - 1; break; }
    return best;
  }

  // Fraction of *other* positions in pos's block that are masked.
  double masked_frac_in_block(int pos) const {
    const int b = block_of(pos);
    const int lo = block_first(b), hi = block_last(b);
    if (hi == lo) return 0.0;
    int masked = 0;
    for (int j = lo; j <= hi; ++j)
      if (j != pos && !revealed(j)) ++masked;
    return static_cast<double>(masked) / (hi - lo);
  }

  std::uint64_t revealed_fingerprint() const {
    std::vector<unsigned char> bits((output->size() + 7) / 8, 0);
    for (int pos = 1; pos <= n_output(); ++pos)
      if (revealed(pos)) bits[(pos - 1) / 8] |= static_cast<unsigned char>(1u << ((pos - 1) % 8));
    return fnv1a64(bits.data(), bits.size());
  }
};

class Denoiser {
 public:
  virtual ~Denoiser() = default;

  // One Prediction per requested position, in request order. Every requested
  // position must be masked in the view.
  virtual std::vector<Prediction> predict(const ContextView& view,
                                          const std::vector<int>& positions) const = 0;

  // Per-offset bias on the decode threshold (offset of a position within its
  // block, 1-based). 1.0 everywhere unless an order policy is attached.
  virtual double threshold_multiplier(int /*offset*/) const { return 1.0; }
  virtual std::optional<int> policy_window() const { return std::nullopt; }

 protected:
  static void check_request(const ContextView& view, const std::vector<int>& positions) {
    for (int pos : positions) {
      if (pos < 1 || pos > view.n_output())
        throw InternalError("denoiser: position " + std::to_string(pos) + " out of range");
      if (view.revealed(pos))
        throw InternalError("denoiser: prediction requested for unmasked position " +
                            std::to_string(pos));
    }
  }
};

namespace detail {

// Invert H(q) = -q ln q - (1-q) ln((1-q)/decoys) on q in [1/(decoys+1), 1],
// where H falls monotonically from ln(decoys+1) to 0.
inline double mode_prob_for_entropy(double h, int decoys) {
  const double h_max = std::log(static_cast<double>(decoys) + 1.0);
  if (h < 0 || h > h_max + 1e-12)
    throw ConfigError("scripted entropy " + format_double(h) + " outside [0, ln(decoys+1)]");
  if (h <= 0) return 1.0;
  double lo = 1.0 / (decoys + 1), hi = 1.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = (lo + hi) / 2;
    const double hm = -mid * std::log(mid) -
                      (1 - mid) * std::log((1 - mid) / decoys);
    (hm > h ? lo : hi) = mid;
  }
  return (lo + hi) / 2;
}

// Support with mass q on `mode` and (1-q)/count on each of `count` distinct
// filler tokens drawn from a deterministic chain avoiding `avoid`.
inline std::vector<std::pair<Token, double>> build_support(
    Token mode, double q, int count, const Vocab& vocab, std::uint64_t chain,
    const std::vector<Token>& avoid) {
  std::vector<std::pair<Token, double>> support;
  support.emplace_back(mode, q);
  if (q >= 1.0) return support;
  const double each = (1.0 - q) / count;
  std::vector<Token> picked;
  std::uint64_t h = chain;
  while (static_cast<int>(picked.size()) < count) {
    h = mix64(h);
    const Token cand = static_cast<Token>(h % static_cast<std::uint64_t>(vocab.size));
    if (cand == mode || cand == vocab.mask_id) continue;
    if (std::find(avoid.begin(), avoid.end(), cand) != avoid.end()) continue;
    if (std::find(picked.begin(), picked.end(), cand) != picked.end()) continue;
    picked.push_back(cand);
  }
  for (Token tok : picked) support.emplace_back(tok, each);
  return support;
}

}  // namespace detail

// Fixed per-position (token, entropy) table; ignores context entirely.
class ScriptedDenoiser : public Denoiser {
 public:
  ScriptedDenoiser(Vocab vocab, Tokens tokens, std::vector<double> entropies, int decoys = 4)
      : vocab_(vocab), tokens_(std::move(tokens)), entropies_(std::move(entropies)),
        decoys_(decoys) {
    vocab_.validate();
    if (tokens_.size() != entropies_.size())
      throw ConfigError("scripted: tokens and entropies must have equal length");
    for (double h : entropies_) detail::mode_prob_for_entropy(h, decoys_);  // range check
    for (Token t : tokens_)
      if (t == vocab_.mask_id || t < 0 || t >= vocab_.size)
        throw ConfigError("scripted: token out of range");
  }

  std::vector<Prediction> predict(const ContextView& view,
                                  const std::vector<int>& positions) const override {
    check_request(view, positions);
    std::vector<Prediction> out;
    out.reserve(positions.size());
    for (int pos : positions) {
      if (pos > static_cast<int>(tokens_.size()))
        throw DataError("scripted: no entry for position " + std::to_string(pos));
      Prediction p;
      p.position = pos;
      p.mode = tokens_[pos - 1];
      p.mode_prob = detail::mode_prob_for_entropy(entropies_[pos - 1], decoys_);
      p.support = detail::build_support(p.mode, p.mode_prob, decoys_, vocab_,
                                        mix64(0x5c71b7ed ^ static_cast<std::uint64_t>(pos)), {});
      p.entropy = entropy_of_support(p.support);
      out.push_back(std::move(p));
    }
    return out;
  }

  int length() const { return static_cast<int>(tokens_.size()); }

 private:
  Vocab vocab_;
  Tokens tokens_;
  std::vector<double> entropies_;
  int decoys_;
};

// Run the teacher one unmask per pass: each pass predicts every masked
// position and reveals the minimum-entropy one (ties to the lowest
// position). Generation does not stop at EOS; all n positions fill.
inline seq::Trajectory record_teacher_trajectory(const Denoiser& teacher, const Tokens& prompt,
                                                 int n, const Vocab& vocab,
                                                 int block_size = 32) {
  if (n < 1) throw ConfigError("record_teacher_trajectory: n must be >= 1");
  seq::Trajectory traj;
  traj.truth.assign(n, vocab.mask_id);
  ContextView view;
  view.prompt = &prompt;
  view.output = &traj.truth;
  view.vocab = vocab;
  view.block_size = block_size;
  std::vector<int> masked(n);
  for (int i = 0; i < n; ++i) masked[i] = i + 1;
  for (int pass = 1; pass <= n; ++pass) {
    std::vector<Prediction> preds;
    try {
      preds = teacher.predict(view, masked);
    } catch (const DataError& e) {
      throw DataError("teacher pass " + std::to_string(pass) + ": " + e.what());
    } catch (const InternalError& e) {
      throw InternalError("teacher pass " + std::to_string(pass) + ": " + e.what());
    }
    const Prediction* best = nullptr;
    for (const auto& p : preds)
      if (!best || p.entropy < best->entropy ||
          (p.entropy == best->entropy && p.position < best->position))
        best = &p;
    if (!best) throw InternalError("teacher returned no predictions");
    traj.truth[best->position - 1] = best->mode;
    traj.order.push_back(best->position);
    masked.erase(std::find(masked.begin(), masked.end(), best->position));
  }
  return traj;
}

}  // namespace dlab::model
