// SPDX-License-Identifier: Apache-2.0
#pragma once

// Decoding trajectories and distillation-record construction.
//
// A Trajectory records the order in which a teacher unmasked an n-token
// output (one position per step). A noisy sequence replays the teacher's
// intermediate state inside a decoding window: prefix revealed, tail fully
// masked, window positions revealed exactly where the trajectory had
// unmasked them by step s + ceil(k*t). Supervision labels cover the masked
// window positions. Positions are 1-based in every interface.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dlab/common.hpp"

namespace dlab::seq {

struct Trajectory {
  std::vector<int> order;  // order[j] = position unmasked at step j+1
  Tokens truth;            // fully unmasked realized sequence
};

// Noise window: prefix [1..s] revealed, window (s..s+k], tail (s+k..n] masked.
struct NoiseSpec {
  int prefix_len = 0;      // s
  int window_len = 1;      // k
  double mask_ratio = 0;   // t in [0, 1]
};

struct DistillationRecord {
  Tokens prompt;
  Tokens noisy;                     // mask positions hold vocab.mask_id
  std::vector<int> label_positions; // ascending, subset of the window
  Tokens labels;                    // ground truth at label_positions
  double mask_ratio = 0;            // t
  int prefix_len = 0;               // s
  int window_len = 0;               // k
  int step_index = 0;               // index within the pair's schedule
};

struct DistillSchedule {
  double t_start = 0.0;
  double t_end = 0.8;
  int k_start = 16;
  int k_end = 32;
};

// Returns nullopt when the trajectory is well-formed for length n, otherwise
// a description naming the first violated invariant.
inline std::optional<std::string> validate_trajectory(const Trajectory& traj, int n,
                                                      const Vocab& vocab) {
  if (static_cast<int>(traj.order.size()) != n)
    return "order length " + std::to_string(traj.order.size()) + " != n " + std::to_string(n);
  if (static_cast<int>(traj.truth.size()) != n)
    return "truth length " + std::to_string(traj.truth.size()) + " != n " + std::to_string(n);
  std::vector<char> seen(n + 1, 0);
  for (int p : traj.order) {
    if (p < 1 || p > n) return "position " + std::to_string(p) + " outside 1.." + std::to_string(n);
    if (seen[p]) return "duplicate position " + std::to_string(p);
    seen[p] = 1;
  }
  for (int i = 0; i < n; ++i)
    if (traj.truth[i] == vocab.mask_id)
      return "truth holds mask at position " + std::to_string(i + 1);
  return std::nullopt;
}

// Positions unmasked after `step` teacher steps, ascending. step in [0, n].
inline std::vector<int> unmasked_at_step(const Trajectory& traj, int step) {
  const int n = static_cast<int>(traj.order.size());
  if (step < 0 || step > n)
    throw ConfigError("unmasked_at_step: step " + std::to_string(step) + " outside 0.." +
                      std::to_string(n));
  std::vector<int> out(traj.order.begin(), traj.order.begin() + step);
  std::sort(out.begin(), out.end());
  return out;
}

inline std::pair<Tokens, std::vector<int>> build_noisy_sequence(const Tokens& truth,
                                                                const Trajectory& traj,
                                                                const NoiseSpec& spec,
                                                                const Vocab& vocab) {
  const int n = static_cast<int>(truth.size());
  if (auto err = validate_trajectory(traj, n, vocab))
    throw DataError("build_noisy_sequence: " + *err);
  if (spec.window_len < 1 || spec.prefix_len < 0 || spec.prefix_len + spec.window_len > n)
    throw ConfigError("build_noisy_sequence: window [s=" + std::to_string(spec.prefix_len) +
                      ", k=" + std::to_string(spec.window_len) + "] out of range for n=" +
                      std::to_string(n));
  if (spec.mask_ratio < 0 || spec.mask_ratio > 1)
    throw ConfigError("build_noisy_sequence: mask ratio outside [0, 1]");

  const int step = spec.prefix_len +
                   static_cast<int>(std::ceil(spec.window_len * spec.mask_ratio));
  std::vector<char> unmasked(n + 1, 0);
  for (int j = 0; j < step; ++j) unmasked[traj.order[j]] = 1;

  Tokens noisy(n);
  std::vector<int> labels;
  for (int i = 1; i <= n; ++i) {
    if (i <= spec.prefix_len) {
      noisy[i - 1] = truth[i - 1];
    } else if (i > spec.prefix_len + spec.window_len) {
      noisy[i - 1] = vocab.mask_id;  // tail mask wins over the trajectory
    } else if (unmasked[i]) {
      noisy[i - 1] = truth[i - 1];
    } else {
      noisy[i - 1] = vocab.mask_id;
      labels.push_back(i);
    }
  }
  return {std::move(noisy), std::move(labels)};
}

inline double curriculum_noise(double progress, double t_start, double t_end) {
  if (progress < 0 || progress > 1)
    throw ConfigError("curriculum_noise: progress outside [0, 1]");
  if (!(0 <= t_start && t_start <= t_end && t_end <= 1))
    throw ConfigError("curriculum_noise: require 0 <= t_start <= t_end <= 1");
  return t_start + progress * (t_end - t_start);
}

inline int curriculum_window(double progress, int k_start, int k_end) {
  if (progress < 0 || progress > 1)
    throw ConfigError("curriculum_window: progress outside [0, 1]");
  if (!(1 <= k_start && k_start <= k_end))
    throw ConfigError("curriculum_window: require 1 <= k_start <= k_end");
  return static_cast<int>(std::lround(k_start + progress * (k_end - k_start)));
}

// One curriculum per pair: record j of `count` sits at progress j/(count-1).
// Window placement is drawn from a per-pair seed stream, so pairs can be
// emitted independently without changing the result.
inline std::vector<DistillationRecord> emit_records(
    const std::vector<std::pair<Tokens, Tokens>>& pairs, const std::vector<Trajectory>& trajs,
    const DistillSchedule& sched, int count, std::uint64_t seed, const Vocab& vocab) {
  if (count < 1) throw ConfigError("emit_records: count must be >= 1");
  if (pairs.size() != trajs.size())
    throw DataError("emit_records: " + std::to_string(pairs.size()) + " pairs vs " +
                    std::to_string(trajs.size()) + " trajectories");
  std::vector<DistillationRecord> records;
  records.reserve(pairs.size() * static_cast<std::size_t>(count));
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto& [prompt, truth] = pairs[p];
    const int n = static_cast<int>(truth.size());
    if (truth.size() != trajs[p].truth.size())
      throw DataError("emit_records: pair " + std::to_string(p) +
                      " truth length does not match its trajectory");
    if (sched.k_end > n)
      throw ConfigError("emit_records: window end " + std::to_string(sched.k_end) +
                        " exceeds sequence length " + std::to_string(n));
    Rng rng = Rng(seed).fork(p);
    for (int j = 0; j < count; ++j) {
      const double progress = count == 1 ? 0.0 : static_cast<double>(j) / (count - 1);
      NoiseSpec spec;
      spec.mask_ratio = curriculum_noise(progress, sched.t_start, sched.t_end);
      spec.window_len = curriculum_window(progress, sched.k_start, sched.k_end);
      spec.prefix_len = static_cast<int>(rng.uniform_int(0, n - spec.window_len));
      auto [noisy, label_positions] = build_noisy_sequence(truth, trajs[p], spec, vocab);
      DistillationRecord rec;
      rec.prompt = prompt;
      rec.noisy = std::move(noisy);
      rec.label_positions = std::move(label_positions);
      for (int pos : rec.label_positions) rec.labels.push_back(truth[pos - 1]);
      rec.mask_ratio = spec.mask_ratio;
      rec.prefix_len = spec.prefix_len;
      rec.window_len = spec.window_len;
      rec.step_index = j;
      records.push_back(std::move(rec));
    }
  }
  return records;
}

}  // namespace dlab::seq
