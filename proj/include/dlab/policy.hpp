// SPDX-License-Identifier: Apache-2.0
#pragma once

// Order policy distilled from trajectory records by counting: offsets the
// teacher tends to reveal early earn a threshold multiplier above 1 (decode
// sooner), offsets it reveals late earn one below 1 (hold back). Wrapping a
// backend with a policy leaves its predictions untouched; only the engine's
// effective decode threshold changes.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dlab/common.hpp"
#include "dlab/denoiser.hpp"
#include "dlab/trajectory.hpp"

namespace dlab::model {

struct OrderPolicy {
  int k_max = 0;
  std::vector<double> multipliers;  // index o-1 for offset o in 1..k_max
  double g_min = 0.5;
  double g_max = 1.5;

  double at(int offset) const {
    if (offset < 1 || offset > k_max) return 1.0;
    return multipliers[offset - 1];
  }

  nlohmann::ordered_json to_json() const {
    return {{"k_max", k_max}, {"multipliers", multipliers},
            {"g_min", g_min}, {"g_max", g_max}};
  }

  static OrderPolicy from_json(const nlohmann::json& j) {
    OrderPolicy p;
    p.k_max = j.at("k_max").get<int>();
    p.multipliers = j.at("multipliers").get<std::vector<double>>();
    if (j.contains("g_min")) p.g_min = j["g_min"].get<double>();
    if (j.contains("g_max")) p.g_max = j["g_max"].get<double>();
    if (static_cast<int>(p.multipliers.size()) != p.k_max)
      throw DataError("policy file: multipliers length does not match k_max");
    for (double m : p.multipliers)
      if (m < p.g_min - 1e-12 || m > p.g_max + 1e-12)
        throw DataError("policy file: multiplier outside [g_min, g_max]");
    return p;
  }
};

// earliness(o) = fraction of records containing offset o whose window
// position s+o arrived revealed; multiplier(o) = clamp(2 * earliness).
inline OrderPolicy fit_order_policy(const std::vector<seq::DistillationRecord>& records,
                                    double g_min = 0.5, double g_max = 1.5) {
  if (records.empty()) throw DataError("fit_order_policy: no records");
  int k_max = 0;
  for (const auto& rec : records) k_max = std::max(k_max, rec.window_len);
  std::vector<std::int64_t> containing(k_max, 0), revealed(k_max, 0);
  for (const auto& rec : records) {
    std::vector<char> is_label(rec.window_len + 1, 0);
    for (int pos : rec.label_positions) {
      const int offset = pos - rec.prefix_len;
      if (offset >= 1 && offset <= rec.window_len) is_label[offset] = 1;
    }
    for (int o = 1; o <= rec.window_len; ++o) {
      ++containing[o - 1];
      if (!is_label[o]) ++revealed[o - 1];
    }
  }
  OrderPolicy policy;
  policy.k_max = k_max;
  policy.g_min = g_min;
  policy.g_max = g_max;
  policy.multipliers.resize(k_max);
  for (int o = 1; o <= k_max; ++o) {
    const double earliness =
        static_cast<double>(revealed[o - 1]) / static_cast<double>(containing[o - 1]);
    policy.multipliers[o - 1] = std::clamp(2.0 * earliness, g_min, g_max);
  }
  return policy;
}

class PolicyWrapped : public Denoiser {
 public:
  PolicyWrapped(std::shared_ptr<const Denoiser> base, OrderPolicy policy)
      : base_(std::move(base)), policy_(std::move(policy)) {
    if (!base_) throw ConfigError("policy wrap: null base denoiser");
  }

  std::vector<Prediction> predict(const ContextView& view,
                                  const std::vector<int>& positions) const override {
    return base_->predict(view, positions);
  }

  // Offsets past k_max fall back to 1.0; the engine reports the warning.
  double threshold_multiplier(int offset) const override { return policy_.at(offset); }
  std::optional<int> policy_window() const override { return policy_.k_max; }

  const OrderPolicy& policy() const { return policy_; }

 private:
  std::shared_ptr<const Denoiser> base_;
  OrderPolicy policy_;
};

}  // namespace dlab::model
