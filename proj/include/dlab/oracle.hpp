// SPDX-License-Identifier: Apache-2.0
#pragma once

// Seeded oracle simulator. Prediction quality q starts at a_max and is
// penalized by distance to the nearest revealed token, by the masked
// fraction of the position's block, and by the staleness of completed
// predecessors' caches, so decoding aggressively in thin or stale context
// measurably costs accuracy. A deterministic Bernoulli(q) draw picks the
// true token or a decoy; the support carries q on the mode and spreads the
// remainder over `decoys` fillers, which fixes the entropy at
// -q ln q - (1-q) ln((1-q)/decoys).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dlab/common.hpp"
#include "dlab/denoiser.hpp"

namespace dlab::model {

struct OracleParams {
  double a_max = 0.98;
  double a_min = 0.20;
  double c_dist = 0.15;
  double c_mask = 0.35;
  double c_stale = 0.25;
  int distance_scale = 8;   // gap at which the distance penalty saturates
  int decoys = 4;
  int stale_scale = 8;      // cache age at which staleness saturates
  std::uint64_t seed = 0;

  void validate() const {
    if (!(0 < a_min && a_min <= a_max && a_max <= 1))
      throw ConfigError("oracle: require 0 < a_min <= a_max <= 1");
    if (c_dist < 0 || c_mask < 0 || c_stale < 0)
      throw ConfigError("oracle: penalty coefficients must be >= 0");
    if (decoys < 1) throw ConfigError("oracle: decoys must be >= 1");
    if (distance_scale < 1 || stale_scale < 1)
      throw ConfigError("oracle: scales must be >= 1");
    if (a_min < 1.0 / (decoys + 1) - 1e-12)
      throw ConfigError("oracle: a_min below 1/(decoys+1) would dethrone the mode");
  }

  nlohmann::ordered_json to_json() const {
    return {{"a_max", a_max},       {"a_min", a_min},
            {"c_dist", c_dist},     {"c_mask", c_mask},
            {"c_stale", c_stale},   {"distance_scale", distance_scale},
            {"decoys", decoys},     {"stale_scale", stale_scale},
            {"seed", seed}};
  }

  static OracleParams from_json(const nlohmann::json& j) {
    OracleParams p;
    if (j.contains("a_max")) p.a_max = j["a_max"].get<double>();
    if (j.contains("a_min")) p.a_min = j["a_min"].get<double>();
    if (j.contains("c_dist")) p.c_dist = j["c_dist"].get<double>();
    if (j.contains("c_mask")) p.c_mask = j["c_mask"].get<double>();
    if (j.contains("c_stale")) p.c_stale = j["c_stale"].get<double>();
    if (j.contains("distance_scale")) p.distance_scale = j["distance_scale"].get<int>();
    if (j.contains("decoys")) p.decoys = j["decoys"].get<int>();
    if (j.contains("stale_scale")) p.stale_scale = j["stale_scale"].get<int>();
    if (j.contains("seed")) p.seed = j["seed"].get<std::uint64_t>();
    p.validate();
    return p;
  }
};

inline double oracle_quality(const ContextView& view, int pos, const OracleParams& params) {
  const int gap = view.nearest_reveal_gap(pos);
  const double d = std::min(gap, params.distance_scale);
  const double dist_pen = params.c_dist * d / params.distance_scale;
  const double mask_pen = params.c_mask * view.masked_frac_in_block(pos);
  double stale = 0;
  int counted = 0;
  const int b = view.block_of(pos);
  for (const auto& [blk, age] : view.cache_ages) {
    if (blk >= b) continue;
    stale += std::min(static_cast<double>(age) / params.stale_scale, 1.0);
    ++counted;
  }
  const double stale_pen = counted ? params.c_stale * stale / counted : 0.0;
  return std::clamp(params.a_max - dist_pen - mask_pen - stale_pen, params.a_min, params.a_max);
}

class OracleDenoiser : public Denoiser {
 public:
  OracleDenoiser(OracleParams params, Tokens target, Vocab vocab)
      : params_(params), target_(std::move(target)), vocab_(vocab) {
    params_.validate();
    vocab_.validate();
    // Decoys avoid target, mask and eos, so they need headroom in the vocab.
    if (params_.decoys > vocab_.size - 3)
      throw ConfigError("oracle: decoys must be <= vocab size - 3");
    for (Token t : target_)
      if (t == vocab_.mask_id || t < 0 || t >= vocab_.size)
        throw ConfigError("oracle: target token out of range");
  }

  std::vector<Prediction> predict(const ContextView& view,
                                  const std::vector<int>& positions) const override {
    check_request(view, positions);
    if (view.n_output() != static_cast<int>(target_.size()))
      throw ConfigError("oracle: view length " + std::to_string(view.n_output()) +
                        " does not match target length " + std::to_string(target_.size()));
    const std::uint64_t fp = view.revealed_fingerprint();
    std::vector<Prediction> out;
    out.reserve(positions.size());
    for (int pos : positions) {
      const double q = oracle_quality(view, pos, params_);
      const Token truth = target_[pos - 1];
      const std::uint64_t draw =
          hash_combine(hash_combine(params_.seed, static_cast<std::uint64_t>(pos)), fp);
      const bool correct = (static_cast<double>(draw >> 11) * 0x1.0p-53) < q;

      // Decoy chain is a function of (seed, position, truth) only, so
      // transcripts replay exactly. EOS is kept out of the decoy pool:
      // a spuriously decoded EOS would end runs at arbitrary points, which
      // the simulator does not model.
      const std::uint64_t chain = hash_combine(
          hash_combine(params_.seed ^ 0xdec0dedull, static_cast<std::uint64_t>(pos)),
          static_cast<std::uint64_t>(static_cast<std::uint32_t>(truth)));
      Prediction p;
      p.position = pos;
      if (correct) {
        p.mode = truth;
        p.mode_prob = q;
        p.support = detail::build_support(truth, q, params_.decoys, vocab_, chain,
                                          {vocab_.eos_id});
      } else {
        std::uint64_t h = chain;
        Token decoy;
        do {
          h = mix64(h);
          decoy = static_cast<Token>(h % static_cast<std::uint64_t>(vocab_.size));
        } while (decoy == truth || decoy == vocab_.mask_id || decoy == vocab_.eos_id);
        p.mode = decoy;
        p.mode_prob = q;
        p.support = detail::build_support(decoy, q, params_.decoys, vocab_, mix64(h),
                                          {vocab_.eos_id, truth});
      }
      p.entropy = entropy_of_support(p.support);
      out.push_back(std::move(p));
    }
    return out;
  }

  const OracleParams& params() const { return params_; }
  const Tokens& target() const { return target_; }

 private:
  OracleParams params_;
  Tokens target_;
  Vocab vocab_;
};

}  // namespace dlab::model
