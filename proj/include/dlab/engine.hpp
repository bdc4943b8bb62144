// SPDX-License-Identifier: Apache-2.0
#pragma once

// Multi-block decoding state machine.
//
// The output region is split into fixed-size blocks, each walking
// Inactive -> Activated -> FullyActivated -> Stabilizing -> Completed
// (a block that finishes early may jump from Activated to Stabilizing).
// A block activates when its predecessor is block_add complete and turns
// fully active at fully_active completion; the prompt counts as a complete
// predecessor for block 1. Tokens decode when their prediction entropy is
// strictly below the effective threshold, and every fully active block with
// no passing token force-decodes its most confident masked position, so each
// pass makes progress. Completed blocks carry a cache age that grows on
// cached passes and resets on full passes (stabilization or the periodic
// refresh); the age is surfaced to the denoiser as a staleness signal.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dlab/common.hpp"
#include "dlab/denoiser.hpp"

namespace dlab::engine {

enum class BlockState { Inactive, Activated, FullyActivated, Stabilizing, Completed };

inline const char* to_string(BlockState s) {
  switch (s) {
    case BlockState::Inactive: return "inactive";
    case BlockState::Activated: return "activated";
    case BlockState::FullyActivated: return "fully_activated";
    case BlockState::Stabilizing: return "stabilizing";
    case BlockState::Completed: return "completed";
  }
  return "?";
}

enum class Mode { MultiBlock, SingleBlock, Vanilla };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::MultiBlock: return "multi_block";
    case Mode::SingleBlock: return "single_block";
    case Mode::Vanilla: return "vanilla";
  }
  return "?";
}

inline Mode mode_from_string(const std::string& s) {
  if (s == "multi_block") return Mode::MultiBlock;
  if (s == "single_block") return Mode::SingleBlock;
  if (s == "vanilla") return Mode::Vanilla;
  throw ConfigError("unknown mode '" + s + "'");
}

struct EngineConfig {
  static constexpr int kNoRefresh = 1 << 30;  // periodic refresh disabled

  int block_size = 32;
  double tau = 0.45;           // entropy threshold, nats
  double block_add = 0.1;      // predecessor completion that activates a block
  double fully_active = 0.95;  // predecessor completion that fully activates
  int cache_delay = 1;         // stabilization rounds before caching
  int refresh_interval = 4;    // full pass every this many passes
  int max_len = 256;
  bool early_stop = true;
  Mode mode = Mode::MultiBlock;
  std::uint64_t seed = 0;

  void validate() const {
    if (block_size < 1) throw ConfigError("engine: block_size must be >= 1");
    if (!(block_add > 0 && block_add <= fully_active && fully_active <= 1))
      throw ConfigError("engine: require 0 < block_add <= fully_active <= 1");
    if (cache_delay < 1) throw ConfigError("engine: cache_delay must be >= 1");
    if (refresh_interval < 1) throw ConfigError("engine: refresh_interval must be >= 1");
    if (tau < 0) throw ConfigError("engine: tau must be >= 0");
    if (max_len < 1) throw ConfigError("engine: max_len must be >= 1");
  }

  nlohmann::ordered_json to_json() const {
    return {{"block_size", block_size},
            {"tau", tau},
            {"block_add", block_add},
            {"fully_active", fully_active},
            {"cache_delay", cache_delay},
            {"refresh_interval", refresh_interval},
            {"max_len", max_len},
            {"early_stop", early_stop},
            {"mode", to_string(mode)},
            {"seed", seed}};
  }

  static EngineConfig from_json(const nlohmann::json& j) {
    EngineConfig c;
    if (j.contains("block_size")) c.block_size = j["block_size"].get<int>();
    if (j.contains("tau")) c.tau = j["tau"].get<double>();
    if (j.contains("block_add")) c.block_add = j["block_add"].get<double>();
    if (j.contains("fully_active")) c.fully_active = j["fully_active"].get<double>();
    if (j.contains("cache_delay")) c.cache_delay = j["cache_delay"].get<int>();
    if (j.contains("refresh_interval")) c.refresh_interval = j["refresh_interval"].get<int>();
    if (j.contains("max_len")) c.max_len = j["max_len"].get<int>();
    if (j.contains("early_stop")) c.early_stop = j["early_stop"].get<bool>();
    if (j.contains("mode")) c.mode = mode_from_string(j["mode"].get<std::string>());
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    c.validate();
    return c;
  }
};

struct TranscriptEvent {
  int pass = 0;
  int position = 0;
  Token token = 0;
  double entropy = 0;
};

struct DecodeMetrics {
  std::int64_t forwards = 0;
  std::int64_t full_forwards = 0;
  std::int64_t tokens_generated = 0;
  double tpf = 0;
  int refresh_events = 0;
  bool truncated = false;
  double wall_clock_s = 0;
  std::vector<TranscriptEvent> transcript;

  nlohmann::ordered_json to_json(bool include_transcript = false,
                                 bool include_wall_clock = true) const {
    nlohmann::ordered_json j;
    j["forwards"] = forwards;
    j["full_forwards"] = full_forwards;
    j["tokens_generated"] = tokens_generated;
    j["tpf"] = tpf;
    j["refresh_events"] = refresh_events;
    j["truncated"] = truncated;
    j["wall_clock_s"] = include_wall_clock ? wall_clock_s : 0.0;
    if (include_transcript) {
      auto t = nlohmann::ordered_json::array();
      for (const auto& e : transcript)
        t.push_back({e.pass, e.position, e.token, e.entropy});
      j["transcript"] = std::move(t);
    }
    return j;
  }
};

struct BlockInfo {
  BlockState state = BlockState::Inactive;
  int first = 0, last = 0;   // 1-based position range
  int unmasked = 0;
  int stab_rounds = 0;
  int cache_age = 0;         // meaningful only while Completed

  int size() const { return last - first + 1; }
  double completion() const { return static_cast<double>(unmasked) / size(); }
};

struct Transition {
  int pass = 0;
  int block = 0;
  BlockState from = BlockState::Inactive;
  BlockState to = BlockState::Inactive;
};

struct DecodeChoice {
  int position = 0;
  Token token = 0;
  double entropy = 0;
};

// Threshold selection plus per-block forced progress. A position decodes iff
// its entropy is strictly below tau * multiplier(offset in block); every
// FullyActivated block that still has masked positions but selected none
// force-decodes its minimum-entropy one (ties to the lowest position).
inline std::vector<DecodeChoice> select_decodes(const std::vector<model::Prediction>& preds,
                                                const std::vector<BlockInfo>& blocks,
                                                int block_size, double tau,
                                                const model::Denoiser& denoiser) {
  std::vector<DecodeChoice> chosen;
  std::map<int, const model::Prediction*> forced;  // block -> best candidate
  std::vector<char> block_has_pick(blocks.size() + 1, 0);
  for (const auto& p : preds) {
    const int b = (p.position - 1) / block_size + 1;
    const int offset = (p.position - 1) % block_size + 1;
    const double tau_eff = tau * denoiser.threshold_multiplier(offset);
    if (p.entropy < tau_eff) {
      chosen.push_back({p.position, p.mode, p.entropy});
      block_has_pick[b] = 1;
    } else if (blocks[b - 1].state == BlockState::FullyActivated) {
      auto it = forced.find(b);
      if (it == forced.end() || p.entropy < it->second->entropy ||
          (p.entropy == it->second->entropy && p.position < it->second->position))
        forced[b] = &p;
    }
  }
  for (const auto& [b, p] : forced)
    if (!block_has_pick[b]) chosen.push_back({p->position, p->mode, p->entropy});
  std::sort(chosen.begin(), chosen.end(),
            [](const DecodeChoice& a, const DecodeChoice& b) { return a.position < b.position; });
  return chosen;
}

class Session {
 public:
  Session(Tokens prompt, const model::Denoiser& denoiser, EngineConfig config, Vocab vocab)
      : prompt_(std::move(prompt)), denoiser_(&denoiser), config_(config), vocab_(vocab) {
    config_.validate();
    vocab_.validate();
    for (Token t : prompt_)
      if (t == vocab_.mask_id) throw DataError("engine: prompt contains the mask token");
    if (config_.max_len % config_.block_size != 0) {
      const int padded =
          (config_.max_len / config_.block_size + 1) * config_.block_size;
      warnings_.push_back("max_len " + std::to_string(config_.max_len) + " padded to " +
                          std::to_string(padded) + " (multiple of block_size)");
      config_.max_len = padded;
    }
    output_.assign(config_.max_len, vocab_.mask_id);
    const int n_blocks = config_.max_len / config_.block_size;
    blocks_.resize(n_blocks);
    for (int b = 1; b <= n_blocks; ++b) {
      blocks_[b - 1].first = (b - 1) * config_.block_size + 1;
      blocks_[b - 1].last = b * config_.block_size;
    }
    // The prompt is a complete predecessor: block 1 starts fully active.
    log_transition(0, 1, BlockState::Activated);
    log_transition(0, 1, BlockState::FullyActivated);
    if (auto kw = denoiser_->policy_window(); kw && *kw < config_.block_size)
      warnings_.push_back("order policy window " + std::to_string(*kw) +
                          " shorter than block_size; offsets beyond it use multiplier 1.0");
  }

  // One forward pass. Returns the number of tokens decoded.
  int step() {
    if (terminated_) throw InternalError("engine: step() after termination");
    ++pass_;
    advance_blocks();

    bool any_stabilizing = false;
    for (const auto& b : blocks_)
      if (b.state == BlockState::Stabilizing) any_stabilizing = true;
    const bool full_pass =
        any_stabilizing || (pass_ % static_cast<std::int64_t>(config_.refresh_interval) == 0);

    bool any_cache = false;
    for (auto& b : blocks_)
      if (b.state == BlockState::Completed) any_cache = true;
    if (full_pass) {
      ++metrics_.full_forwards;
      if (any_cache) ++metrics_.refresh_events;
      for (auto& b : blocks_)
        if (b.state == BlockState::Completed) b.cache_age = 0;
    } else {
      for (auto& b : blocks_)
        if (b.state == BlockState::Completed) ++b.cache_age;
    }

    model::ContextView view;
    view.prompt = &prompt_;
    view.output = &output_;
    view.vocab = vocab_;
    view.block_size = config_.block_size;
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      if (blocks_[i].state == BlockState::Completed)
        view.cache_ages[static_cast<int>(i) + 1] = blocks_[i].cache_age;

    const std::vector<int> positions = request_positions();
    if (positions.empty())
      throw InternalError("engine: pass " + std::to_string(pass_) +
                          " has no masked position to predict");
    std::vector<model::Prediction> preds;
    try {
      preds = denoiser_->predict(view, positions);
    } catch (const DataError& e) {
      throw DataError("pass " + std::to_string(pass_) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("pass " + std::to_string(pass_) + ": " + e.what());
    }

    std::vector<DecodeChoice> choices;
    if (config_.mode == Mode::Vanilla) {
      const model::Prediction* best = nullptr;
      for (const auto& p : preds)
        if (!best || p.entropy < best->entropy ||
            (p.entropy == best->entropy && p.position < best->position))
          best = &p;
      choices.push_back({best->position, best->mode, best->entropy});
    } else if (config_.mode == Mode::SingleBlock) {
      choices = select_single_block(preds);
    } else {
      choices = select_decodes(preds, blocks_, config_.block_size, config_.tau, *denoiser_);
    }
    if (choices.empty())
      throw InternalError("engine: pass " + std::to_string(pass_) + " decoded nothing");

    for (const auto& c : choices) {
      output_[c.position - 1] = c.token;
      auto& blk = blocks_[(c.position - 1) / config_.block_size];
      ++blk.unmasked;
      metrics_.transcript.push_back({static_cast<int>(pass_), c.position, c.token, c.entropy});
    }
    if (full_pass)
      for (auto& b : blocks_)
        if (b.state == BlockState::Stabilizing) ++b.stab_rounds;

    ++metrics_.forwards;
    return static_cast<int>(choices.size());
  }

  // Decode to termination and assemble metrics. The returned token vector is
  // the raw output region; scoring-oriented truncation is the caller's job.
  std::pair<Tokens, DecodeMetrics> run() {
    const auto t0 = std::chrono::steady_clock::now();
    while (!terminated_) {
      step();
      if (config_.early_stop) {
        if (const int p = eos_with_complete_prefix()) {
          terminated_ = true;
          metrics_.tokens_generated = p;
          metrics_.truncated = false;
          break;
        }
      }
      if (all_unmasked()) {
        terminated_ = true;
        metrics_.tokens_generated = config_.max_len;
        metrics_.truncated = !has_eos();
        break;
      }
      if (pass_ > static_cast<std::int64_t>(config_.max_len) + 2)
        throw InternalError("engine: pass budget exceeded without progress");
    }
    metrics_.tpf = static_cast<double>(metrics_.tokens_generated) /
                   static_cast<double>(metrics_.forwards);
    metrics_.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {output_, metrics_};
  }

  const std::vector<BlockInfo>& blocks() const { return blocks_; }
  const std::vector<Transition>& transitions() const { return transitions_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  const Tokens& output() const { return output_; }
  const EngineConfig& config() const { return config_; }
  std::int64_t pass_index() const { return pass_; }
  bool terminated() const { return terminated_; }
  const DecodeMetrics& metrics() const { return metrics_; }

 private:
  void log_transition(int pass, int block, BlockState to) {
    auto& blk = blocks_[block - 1];
    transitions_.push_back({pass, block, blk.state, to});
    blk.state = to;
  }

  double predecessor_completion(int b) const {
    return b == 1 ? 1.0 : blocks_[b - 2].completion();
  }

  // First block (1-based) holding an unmasked EOS, or 0.
  int eos_block() const {
    for (int pos = 1; pos <= config_.max_len; ++pos)
      if (output_[pos - 1] == vocab_.eos_id) return (pos - 1) / config_.block_size + 1;
    return 0;
  }

  void advance_blocks() {
    const int frozen_after = config_.early_stop ? eos_block() : 0;
    for (int b = 1; b <= static_cast<int>(blocks_.size()); ++b) {
      auto& blk = blocks_[b - 1];
      if (blk.state == BlockState::Inactive &&
          predecessor_completion(b) >= config_.block_add &&
          !(frozen_after && b > frozen_after))
        log_transition(static_cast<int>(pass_), b, BlockState::Activated);
      if (blk.state == BlockState::Activated &&
          predecessor_completion(b) >= config_.fully_active)
        log_transition(static_cast<int>(pass_), b, BlockState::FullyActivated);
      if ((blk.state == BlockState::Activated || blk.state == BlockState::FullyActivated) &&
          blk.unmasked == blk.size())
        log_transition(static_cast<int>(pass_), b, BlockState::Stabilizing);
      if (blk.state == BlockState::Stabilizing && blk.stab_rounds >= config_.cache_delay) {
        log_transition(static_cast<int>(pass_), b, BlockState::Completed);
        blk.cache_age = 0;
      }
    }
  }

  std::vector<int> request_positions() const {
    std::vector<int> positions;
    if (config_.mode == Mode::MultiBlock) {
      for (const auto& blk : blocks_) {
        if (blk.state != BlockState::Activated && blk.state != BlockState::FullyActivated)
          continue;
        for (int pos = blk.first; pos <= blk.last; ++pos)
          if (output_[pos - 1] == vocab_.mask_id) positions.push_back(pos);
      }
    } else {
      // vanilla / single_block operate on the first block with masked cells
      for (const auto& blk : blocks_) {
        if (blk.unmasked == blk.size()) continue;
        for (int pos = blk.first; pos <= blk.last; ++pos)
          if (output_[pos - 1] == vocab_.mask_id) positions.push_back(pos);
        break;
      }
    }
    return positions;
  }

  std::vector<DecodeChoice> select_single_block(const std::vector<model::Prediction>& preds) const {
    std::vector<DecodeChoice> chosen;
    const model::Prediction* best = nullptr;
    for (const auto& p : preds) {
      const int offset = (p.position - 1) % config_.block_size + 1;
      if (p.entropy < config_.tau * denoiser_->threshold_multiplier(offset))
        chosen.push_back({p.position, p.mode, p.entropy});
      if (!best || p.entropy < best->entropy ||
          (p.entropy == best->entropy && p.position < best->position))
        best = &p;
    }
    if (chosen.empty()) chosen.push_back({best->position, best->mode, best->entropy});
    std::sort(chosen.begin(), chosen.end(),
              [](const DecodeChoice& a, const DecodeChoice& b) { return a.position < b.position; });
    return chosen;
  }

  int eos_with_complete_prefix() const {
    for (int pos = 1; pos <= config_.max_len; ++pos) {
      if (output_[pos - 1] == vocab_.mask_id) return 0;  // prefix broken
      if (output_[pos - 1] == vocab_.eos_id) return pos;
    }
    return 0;
  }

  bool all_unmasked() const {
    for (Token t : output_)
      if (t == vocab_.mask_id) return false;
    return true;
  }

  bool has_eos() const {
    for (Token t : output_)
      if (t == vocab_.eos_id) return true;
    return false;
  }

  Tokens prompt_;
  const model::Denoiser* denoiser_;
  EngineConfig config_;
  Vocab vocab_;
  Tokens output_;
  std::vector<BlockInfo> blocks_;
  std::vector<Transition> transitions_;
  std::vector<std::string> warnings_;
  DecodeMetrics metrics_;
  std::int64_t pass_ = 0;
  bool terminated_ = false;
};

inline std::pair<Tokens, DecodeMetrics> run_session(const Tokens& prompt,
                                                    const model::Denoiser& denoiser,
                                                    const EngineConfig& config,
                                                    const Vocab& vocab) {
  Session session(prompt, denoiser, config, vocab);
  return session.run();
}

// Baseline entry point: vanilla or single_block only.
inline std::pair<Tokens, DecodeMetrics> run_baseline(const Tokens& prompt,
                                                     const model::Denoiser& denoiser,
                                                     EngineConfig config, const Vocab& vocab,
                                                     Mode mode) {
  if (mode == Mode::MultiBlock)
    throw ConfigError("run_baseline: mode must be vanilla or single_block");
  config.mode = mode;
  return run_session(prompt, denoiser, config, vocab);
}

}  // namespace dlab::engine
