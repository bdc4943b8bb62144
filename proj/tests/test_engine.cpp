// SPDX-License-Identifier: Apache-2.0
//
// State-machine tests: block lifecycle at exact thresholds, strict-threshold
// selection with forced progress, cache/refresh accounting, early stopping,
// baseline modes, and determinism.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <set>
#include <vector>

#include "dlab/common.hpp"
#include "dlab/engine.hpp"
#include "dlab/ngram.hpp"
#include "dlab/oracle.hpp"
#include "dlab/policy.hpp"

using namespace dlab;
using namespace dlab::engine;
using namespace dlab::model;

namespace {

const Vocab kVocab{32, 31, 30};  // size, mask, eos

// Scripted target helper: `entropy` everywhere, eos at `eos_pos` (0 = none).
ScriptedDenoiser uniform_script(int len, double entropy, int eos_pos) {
  Tokens tokens(len, 5);
  if (eos_pos > 0) tokens[eos_pos - 1] = kVocab.eos_id;
  return ScriptedDenoiser(kVocab, tokens, std::vector<double>(len, entropy));
}

Tokens oracle_target(int max_len, int ref_len, Rng& rng) {
  Tokens target(max_len, kVocab.eos_id);
  for (int i = 0; i < ref_len - 1; ++i)
    target[i] = static_cast<Token>(rng.uniform_int(0, kVocab.size - 3));
  return target;
}

bool legal_hop(BlockState from, BlockState to) {
  using S = BlockState;
  return (from == S::Inactive && to == S::Activated) ||
         (from == S::Activated && to == S::FullyActivated) ||
         (from == S::Activated && to == S::Stabilizing) ||
         (from == S::FullyActivated && to == S::Stabilizing) ||
         (from == S::Stabilizing && to == S::Completed);
}

void check_run_invariants(Session& session) {
  auto [output, metrics] = session.run();
  // every transition is a legal hop
  for (const auto& tr : session.transitions()) CHECK(legal_hop(tr.from, tr.to));
  // progress on every pass
  std::set<int> passes;
  for (const auto& e : metrics.transcript) passes.insert(e.pass);
  CHECK(static_cast<std::int64_t>(passes.size()) == metrics.forwards);
  CHECK(metrics.full_forwards <= metrics.forwards);
  CHECK(metrics.tpf >= 1.0);
  // activation ordering: block b activates only after b-1 existed in the log
  std::map<int, int> first_activation;
  for (const auto& tr : session.transitions())
    if (tr.to == BlockState::Activated && !first_activation.count(tr.block))
      first_activation[tr.block] = tr.pass;
  for (const auto& [b, pass] : first_activation)
    if (b > 1 && first_activation.count(b - 1)) CHECK(first_activation[b - 1] <= pass);
  (void)output;
}

}  // namespace

TEST_CASE("init: block layout and padding") {
  auto scripted = uniform_script(64, 0.0, 64);
  EngineConfig cfg;
  cfg.block_size = 32;
  cfg.max_len = 64;
  Session s({1, 2}, scripted, cfg, kVocab);
  REQUIRE(s.blocks().size() == 2);
  CHECK(s.blocks()[0].state == BlockState::FullyActivated);
  CHECK(s.blocks()[1].state == BlockState::Inactive);
  CHECK(s.warnings().empty());

  cfg.max_len = 40;
  Session padded({1, 2}, scripted, cfg, kVocab);
  CHECK(padded.config().max_len == 64);
  REQUIRE(!padded.warnings().empty());

  cfg.max_len = 0;
  CHECK_THROWS_AS(Session({1}, scripted, cfg, kVocab), dlab::ConfigError);

  cfg.max_len = 64;
  Session empty_prompt({}, scripted, cfg, kVocab);  // empty prompt allowed
  CHECK(empty_prompt.blocks()[0].state == BlockState::FullyActivated);
}

TEST_CASE("advance: activation thresholds are inclusive") {
  // block_size 20: decoding exactly 2 tokens is 10% completion.
  const int len = 40;
  Tokens tokens(len, 5);
  std::vector<double> entropies(len, 1.5);
  entropies[0] = entropies[1] = 0.0;
  ScriptedDenoiser scripted(kVocab, tokens, entropies);
  EngineConfig cfg;
  cfg.block_size = 20;
  cfg.max_len = len;
  cfg.early_stop = false;
  Session s({1}, scripted, cfg, kVocab);
  s.step();  // decodes positions 1,2 -> completion 0.10 exactly
  CHECK(s.blocks()[0].unmasked == 2);
  CHECK(s.blocks()[1].state == BlockState::Inactive);
  s.step();  // advance sees 0.10 -> Activated
  CHECK(s.blocks()[1].state == BlockState::Activated);

  // 19/20 = 0.95 exactly -> FullyActivated.
  std::vector<double> e2(len, 1.5);
  for (int i = 0; i < 19; ++i) e2[i] = 0.0;
  ScriptedDenoiser scripted2(kVocab, tokens, e2);
  Session s2({1}, scripted2, cfg, kVocab);
  s2.step();
  CHECK(s2.blocks()[0].unmasked == 19);
  s2.step();
  CHECK(s2.blocks()[1].state == BlockState::FullyActivated);
}

TEST_CASE("advance: early completion skips FullyActivated") {
  // Block 1 stalls at 50%; block 2 activates and finishes first.
  const int len = 8;
  Tokens tokens(len, 5);
  std::vector<double> entropies{0.0, 0.0, 1.5, 1.5, 0.0, 0.0, 0.0, 0.0};
  ScriptedDenoiser scripted(kVocab, tokens, entropies);
  EngineConfig cfg;
  cfg.block_size = 4;
  cfg.max_len = len;
  cfg.early_stop = false;
  Session s({1}, scripted, cfg, kVocab);
  s.step();  // block1 decodes 1,2
  s.step();  // block2 Activated (pred 0.5), decodes 5..8; block1 forced 3
  s.step();  // block2 complete -> Activated -> Stabilizing directly
  bool skip_seen = false;
  for (const auto& tr : s.transitions())
    if (tr.block == 2 && tr.from == BlockState::Activated && tr.to == BlockState::Stabilizing)
      skip_seen = true;
  CHECK(skip_seen);
}

TEST_CASE("select_decodes: strict threshold and per-block forcing") {
  std::vector<BlockInfo> blocks(2);
  blocks[0] = {BlockState::Activated, 1, 4, 0, 0, 0};
  blocks[1] = {BlockState::Inactive, 5, 8, 0, 0, 0};
  auto scripted = uniform_script(8, 0.0, 0);

  SUBCASE("only entropies strictly below tau decode in an Activated block") {
    std::vector<Prediction> preds(2);
    preds[0].position = 1;
    preds[0].mode = 5;
    preds[0].entropy = 0.2;
    preds[1].position = 2;
    preds[1].mode = 5;
    preds[1].entropy = 0.5;
    auto picks = select_decodes(preds, blocks, 4, 0.45, scripted);
    REQUIRE(picks.size() == 1);
    CHECK(picks[0].position == 1);
  }
  SUBCASE("tau 0 with zero entropies forces exactly one decode") {
    blocks[0].state = BlockState::FullyActivated;
    std::vector<Prediction> preds(4);
    for (int i = 0; i < 4; ++i) {
      preds[i].position = i + 1;
      preds[i].mode = 5;
      preds[i].entropy = 0.0;
    }
    auto picks = select_decodes(preds, blocks, 4, 0.0, scripted);
    REQUIRE(picks.size() == 1);  // 0 < 0 is false; forced pick breaks the tie low
    CHECK(picks[0].position == 1);
  }
  SUBCASE("two fully active blocks force one decode each") {
    blocks[0].state = BlockState::FullyActivated;
    blocks[1].state = BlockState::FullyActivated;
    std::vector<Prediction> preds(8);
    for (int i = 0; i < 8; ++i) {
      preds[i].position = i + 1;
      preds[i].mode = 5;
      preds[i].entropy = 1.0 + 0.01 * i;
    }
    auto picks = select_decodes(preds, blocks, 4, 0.45, scripted);
    REQUIRE(picks.size() == 2);
    CHECK(picks[0].position == 1);
    CHECK(picks[1].position == 5);
  }
}

TEST_CASE("hand trace: all-confident script, two blocks, two passes") {
  auto scripted = uniform_script(8, 0.0, 8);
  EngineConfig cfg;
  cfg.block_size = 4;
  cfg.max_len = 8;
  cfg.cache_delay = 1;
  Session s({1}, scripted, cfg, kVocab);
  auto [output, metrics] = s.run();
  CHECK(metrics.forwards == 2);
  CHECK(metrics.tokens_generated == 8);
  CHECK(metrics.tpf == doctest::Approx(4.0));
  CHECK(metrics.full_forwards == 1);  // pass 2 stabilizes block 1
  CHECK(metrics.refresh_events == 0);
  CHECK(output[7] == kVocab.eos_id);
  CHECK(!metrics.truncated);
}

TEST_CASE("forced-progress cadence with cache and periodic refresh") {
  // All entropies above tau: every pass is a single forced decode.
  auto scripted = uniform_script(8, 1.5, 0);  // no eos anywhere
  EngineConfig cfg;
  cfg.block_size = 4;
  cfg.max_len = 8;
  cfg.early_stop = false;
  cfg.cache_delay = 1;
  cfg.refresh_interval = 4;
  Session s({1}, scripted, cfg, kVocab);
  auto [output, metrics] = s.run();
  CHECK(metrics.forwards == 8);
  CHECK(metrics.tokens_generated == 8);
  CHECK(metrics.tpf == doctest::Approx(1.0));
  // Full passes: pass 4 (periodic, no cache yet), pass 5 (stabilizing), pass 8.
  CHECK(metrics.full_forwards == 3);
  CHECK(metrics.refresh_events == 1);  // only pass 8 found a live cache
  CHECK(metrics.truncated);            // no eos produced
  for (const auto& tr : s.transitions()) CHECK(legal_hop(tr.from, tr.to));
}

TEST_CASE("vanilla mode: one decode per pass on every backend") {
  EngineConfig cfg;
  cfg.block_size = 4;
  cfg.max_len = 8;
  cfg.mode = Mode::Vanilla;
  cfg.early_stop = false;

  auto scripted = uniform_script(8, 0.0, 8);
  auto [o1, m1] = run_baseline({1}, scripted, cfg, kVocab, Mode::Vanilla);
  CHECK(m1.forwards == 8);
  CHECK(m1.tpf == doctest::Approx(1.0));

  Rng rng(3);
  auto target = oracle_target(8, 8, rng);
  OracleDenoiser oracle(OracleParams{}, target, kVocab);
  auto [o2, m2] = run_baseline({1}, oracle, cfg, kVocab, Mode::Vanilla);
  CHECK(m2.forwards == 8);
  CHECK(m2.tpf == doctest::Approx(1.0));

  CHECK_THROWS_AS(run_baseline({1}, oracle, cfg, kVocab, Mode::MultiBlock),
                  dlab::ConfigError);
}

TEST_CASE("single_block: confident blocks collapse to one pass each") {
  auto scripted = uniform_script(8, 0.0, 8);
  EngineConfig cfg;
  cfg.block_size = 4;
  cfg.max_len = 8;
  auto [output, metrics] = run_baseline({1}, scripted, cfg, kVocab, Mode::SingleBlock);
  CHECK(metrics.forwards == 2);
  CHECK(metrics.tpf == doctest::Approx(4.0));
}

TEST_CASE("tau = 0 multi_block reproduces vanilla exactly (block fits threshold)") {
  // With block_size 16, a predecessor reaches 0.95 only at completion, so
  // exactly one block force-decodes per pass and the degeneracy is exact.
  Rng rng(9);
  auto target = oracle_target(32, 32, rng);
  OracleParams params;
  params.seed = 5;
  OracleDenoiser oracle(params, target, kVocab);

  EngineConfig cfg;
  cfg.block_size = 16;
  cfg.max_len = 32;
  cfg.early_stop = false;
  cfg.tau = 0.0;
  cfg.mode = Mode::MultiBlock;
  Session multi({1}, oracle, cfg, kVocab);
  auto [om, mm] = multi.run();
  cfg.mode = Mode::Vanilla;
  Session van({1}, oracle, cfg, kVocab);
  auto [ov, mv] = van.run();

  CHECK(mm.tpf == doctest::Approx(1.0));
  CHECK(mv.tpf == doctest::Approx(1.0));
  CHECK(mm.forwards == mv.forwards);
  CHECK(om == ov);
  REQUIRE(mm.transcript.size() == mv.transcript.size());
  for (std::size_t i = 0; i < mm.transcript.size(); ++i) {
    CHECK(mm.transcript[i].position == mv.transcript[i].position);
    CHECK(mm.transcript[i].token == mv.transcript[i].token);
  }
}

TEST_CASE("determinism: identical runs replay byte-identically") {
  Rng rng(13);
  auto target = oracle_target(64, 50, rng);
  OracleParams params;
  params.seed = 99;
  OracleDenoiser oracle(params, target, kVocab);
  EngineConfig cfg;
  cfg.block_size = 16;
  cfg.max_len = 64;
  cfg.tau = 0.6;
  Session a({1, 2, 3}, oracle, cfg, kVocab);
  Session b({1, 2, 3}, oracle, cfg, kVocab);
  auto [oa, ma] = a.run();
  auto [ob, mb] = b.run();
  CHECK(oa == ob);
  CHECK(ma.forwards == mb.forwards);
  REQUIRE(ma.transcript.size() == mb.transcript.size());
  for (std::size_t i = 0; i < ma.transcript.size(); ++i) {
    CHECK(ma.transcript[i].pass == mb.transcript[i].pass);
    CHECK(ma.transcript[i].position == mb.transcript[i].position);
    CHECK(ma.transcript[i].token == mb.transcript[i].token);
    CHECK(ma.transcript[i].entropy == mb.transcript[i].entropy);
  }
}

TEST_CASE("early stop: fewer forwards, identical pre-EOS tokens") {
  Rng rng(23);
  for (int rep = 0; rep < 10; ++rep) {
    const int max_len = 64;
    const int ref_len = static_cast<int>(rng.uniform_int(20, 48));
    auto target = oracle_target(max_len, ref_len, rng);
    OracleParams params;
    params.seed = 1000 + rep;
    OracleDenoiser oracle(params, target, kVocab);
    EngineConfig cfg;
    cfg.block_size = 16;
    cfg.max_len = max_len;
    cfg.tau = 0.45;

    cfg.early_stop = true;
    auto [on_out, on] = run_session({7}, oracle, cfg, kVocab);
    cfg.early_stop = false;
    auto [off_out, off] = run_session({7}, oracle, cfg, kVocab);

    CHECK(on.forwards <= off.forwards);
    const auto p = static_cast<std::size_t>(on.tokens_generated);
    for (std::size_t i = 0; i < p; ++i) CHECK(on_out[i] == off_out[i]);
    // the stopped run's transcript is a prefix of the full run's
    REQUIRE(on.transcript.size() <= off.transcript.size());
    for (std::size_t i = 0; i < on.transcript.size(); ++i) {
      CHECK(on.transcript[i].position == off.transcript[i].position);
      CHECK(on.transcript[i].token == off.transcript[i].token);
    }
  }
}

TEST_CASE("cache ages stay within refresh_interval + cache_delay") {
  Rng rng(31);
  for (int rep = 0; rep < 5; ++rep) {
    auto target = oracle_target(96, 96, rng);
    OracleParams params;
    params.seed = 40 + rep;
    OracleDenoiser oracle(params, target, kVocab);
    EngineConfig cfg;
    cfg.block_size = 16;
    cfg.max_len = 96;
    cfg.tau = 0.6;
    cfg.early_stop = false;
    Session s({1}, oracle, cfg, kVocab);
    while (!s.terminated()) {
      s.step();
      for (const auto& blk : s.blocks())
        if (blk.state == BlockState::Completed)
          CHECK(blk.cache_age <= cfg.refresh_interval + cfg.cache_delay);
      if (s.metrics().transcript.size() >= static_cast<std::size_t>(cfg.max_len)) break;
    }
  }
}

TEST_CASE("state machine invariants over seeded oracle runs") {
  Rng rng(41);
  for (int rep = 0; rep < 10; ++rep) {
    auto target = oracle_target(64, static_cast<int>(rng.uniform_int(30, 64)), rng);
    OracleParams params;
    params.seed = 700 + rep;
    OracleDenoiser oracle(params, target, kVocab);
    EngineConfig cfg;
    cfg.block_size = 16;
    cfg.max_len = 64;
    cfg.tau = 0.45 + 0.3 * rng.next_double();
    Session s({2, 3}, oracle, cfg, kVocab);
    check_run_invariants(s);
  }
}

TEST_CASE("multi_block is at least as parallel as single_block") {
  Rng rng(51);
  std::int64_t multi_tokens = 0, multi_forwards = 0;
  std::int64_t single_tokens = 0, single_forwards = 0;
  for (int rep = 0; rep < 8; ++rep) {
    auto target = oracle_target(64, 64, rng);
    OracleParams params;
    params.seed = 900 + rep;
    OracleDenoiser oracle(params, target, kVocab);
    EngineConfig cfg;
    cfg.block_size = 16;
    cfg.max_len = 64;
    cfg.tau = 1.3;
    cfg.early_stop = false;
    cfg.mode = Mode::MultiBlock;
    auto [om, mm] = run_session({1}, oracle, cfg, kVocab);
    auto [os, ms] = run_baseline({1}, oracle, cfg, kVocab, Mode::SingleBlock);
    multi_tokens += mm.tokens_generated;
    multi_forwards += mm.forwards;
    single_tokens += ms.tokens_generated;
    single_forwards += ms.forwards;
  }
  const double multi_tpf = static_cast<double>(multi_tokens) / multi_forwards;
  const double single_tpf = static_cast<double>(single_tokens) / single_forwards;
  CHECK(multi_tpf >= single_tpf);
}

TEST_CASE("order policy shifts the effective threshold per offset") {
  OrderPolicy policy;
  policy.k_max = 2;
  policy.multipliers = {1.5, 0.5};
  Tokens tokens{5, 5};
  auto base = std::make_shared<ScriptedDenoiser>(kVocab, tokens, std::vector<double>{0.6, 0.1});
  PolicyWrapped wrapped(base, policy);

  EngineConfig cfg;
  cfg.block_size = 2;
  cfg.max_len = 2;
  cfg.tau = 0.45;
  cfg.early_stop = false;
  auto [ow, mw] = run_session({1}, wrapped, cfg, kVocab);
  CHECK(mw.forwards == 1);  // 0.6 < 0.675 and 0.1 < 0.225 both decode

  auto [ob, mb] = run_session({1}, *base, cfg, kVocab);
  CHECK(mb.forwards == 2);  // 0.6 deferred, then forced

  // Policy narrower than the block emits a warning and falls back to 1.0.
  cfg.block_size = 2;
  OrderPolicy narrow;
  narrow.k_max = 1;
  narrow.multipliers = {1.5};
  PolicyWrapped narrow_wrapped(base, narrow);
  Session s({1}, narrow_wrapped, cfg, kVocab);
  CHECK(!s.warnings().empty());
}

TEST_CASE("metrics json carries the pinned fields") {
  auto scripted = uniform_script(8, 0.0, 8);
  EngineConfig cfg;
  cfg.block_size = 4;
  cfg.max_len = 8;
  auto [output, metrics] = run_session({1}, scripted, cfg, kVocab);
  auto j = metrics.to_json(true);
  for (const char* key : {"forwards", "full_forwards", "tokens_generated", "tpf",
                          "refresh_events", "truncated", "wall_clock_s", "transcript"})
    CHECK(j.contains(key));
  CHECK(j["transcript"].size() == metrics.transcript.size());
  auto j2 = metrics.to_json(false, false);
  CHECK(j2["wall_clock_s"] == 0.0);
  CHECK(!j2.contains("transcript"));
}
