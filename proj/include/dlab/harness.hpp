// SPDX-License-Identifier: Apache-2.0
#pragma once

// End-to-end machinery: synthetic Markov corpora and tasks, exact-match
// evaluation, threshold sweeps that produce accuracy-parallelism curves,
// the ablation grid, and the reproducible multi-stage pipeline.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dlab/aup.hpp"
#include "dlab/common.hpp"
#include "dlab/denoiser.hpp"
#include "dlab/engine.hpp"
#include "dlab/io.hpp"
#include "dlab/ngram.hpp"
#include "dlab/oracle.hpp"
#include "dlab/policy.hpp"
#include "dlab/trajectory.hpp"

namespace dlab::harness {

struct Task {
  Tokens prompt;
  Tokens reference;  // ends with exactly one eos

  void validate(const Vocab& vocab, int max_len) const {
    if (reference.empty()) throw DataError("task: empty reference");
    if (static_cast<int>(reference.size()) > max_len)
      throw DataError("task: reference length " + std::to_string(reference.size()) +
                      " exceeds max_len " + std::to_string(max_len));
    if (reference.back() != vocab.eos_id)
      throw DataError("task: reference must end with eos");
    for (std::size_t i = 0; i + 1 < reference.size(); ++i)
      if (reference[i] == vocab.eos_id) throw DataError("task: eos before the reference end");
    for (Token t : reference)
      if (t == vocab.mask_id || t < 0 || t >= vocab.size)
        throw DataError("task: reference token out of range");
    for (Token t : prompt)
      if (t == vocab.mask_id || t < 0 || t >= vocab.size)
        throw DataError("task: prompt token out of range");
  }

  std::uint64_t content_hash() const {
    return hash_combine(hash_tokens(prompt, 0x70726f6d70ull), hash_tokens(reference, 0x726566ull));
  }
};

struct Corpus {
  Vocab vocab;
  std::vector<Tokens> sequences;
  std::vector<Task> tasks;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["vocab"] = {{"size", vocab.size}, {"mask_id", vocab.mask_id}, {"eos_id", vocab.eos_id}};
    j["sequences"] = sequences;
    auto tj = nlohmann::ordered_json::array();
    for (const auto& t : tasks) tj.push_back({{"prompt", t.prompt}, {"reference", t.reference}});
    j["tasks"] = std::move(tj);
    return j;
  }

  static Corpus from_json(const nlohmann::json& j) {
    Corpus c;
    if (!j.contains("vocab")) throw DataError("corpus file: missing vocab");
    c.vocab = Vocab{j["vocab"]["size"].get<int>(), j["vocab"]["mask_id"].get<Token>(),
                    j["vocab"]["eos_id"].get<Token>()};
    c.vocab.validate();
    if (j.contains("sequences")) c.sequences = j["sequences"].get<std::vector<Tokens>>();
    if (j.contains("tasks"))
      for (const auto& tj : j["tasks"])
        c.tasks.push_back({tj.at("prompt").get<Tokens>(), tj.at("reference").get<Tokens>()});
    return c;
  }
};

struct GenParams {
  std::uint64_t seed = 1;
  int vocab_size = 24;
  int sequences = 64;
  int length = 48;     // content tokens per sequence (eos appended)
  int structure = 2;   // Markov order of the source
  int tasks = 32;
  int prompt_len = 0;  // 0: length / 4, at least 1

  void validate() const {
    if (vocab_size < 8) throw ConfigError("corpus: vocab_size must be >= 8");
    if (structure < 1) throw ConfigError("corpus: structure must be >= 1");
    if (length < 2) throw ConfigError("corpus: length must be >= 2");
    if (sequences < 1) throw ConfigError("corpus: sequences must be >= 1");
    if (tasks < 0) throw ConfigError("corpus: tasks must be >= 0");
    const int p = prompt_len == 0 ? std::max(1, length / 4) : prompt_len;
    if (p < 1 || p >= length)
      throw ConfigError("corpus: prompt_len must lie in [1, length)");
  }
};

namespace detail {

// Skewed next-token distribution per context: four seeded candidates with
// fixed masses, so low-order n-gram models have something to learn.
inline Token markov_next(std::uint64_t table_seed, const Tokens& context, int content_tokens,
                         Rng& rng) {
  std::uint64_t h = mix64(table_seed);
  for (Token t : context) h = hash_combine(h, static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)));
  Token cand[4];
  int found = 0;
  std::uint64_t probe = h;
  while (found < 4) {
    probe = mix64(probe);
    const Token c = static_cast<Token>(probe % static_cast<std::uint64_t>(content_tokens));
    bool dup = false;
    for (int i = 0; i < found; ++i) dup = dup || cand[i] == c;
    if (!dup) cand[found++] = c;
  }
  const double u = rng.next_double();
  if (u < 0.55) return cand[0];
  if (u < 0.80) return cand[1];
  if (u < 0.92) return cand[2];
  return cand[3];
}

inline Tokens markov_sequence(std::uint64_t table_seed, int length, int structure,
                              int content_tokens, Rng& rng) {
  Tokens seq;
  seq.reserve(length);
  Tokens context;
  for (int i = 0; i < length; ++i) {
    const Token t = markov_next(table_seed, context, content_tokens, rng);
    seq.push_back(t);
    context.push_back(t);
    if (static_cast<int>(context.size()) > structure) context.erase(context.begin());
  }
  return seq;
}

}  // namespace detail

// Seeded order-`structure` Markov source. Corpus sequences end with eos;
// tasks pair a prefix prompt with the continuation (plus eos) as reference.
inline Corpus gen_corpus(const GenParams& params) {
  params.validate();
  Corpus corpus;
  corpus.vocab = Vocab{params.vocab_size, params.vocab_size - 1, params.vocab_size - 2};
  const int content_tokens = params.vocab_size - 2;
  const std::uint64_t table_seed = hash_combine(params.seed, 0x7461626c65ull);
  const int prompt_len = params.prompt_len == 0 ? std::max(1, params.length / 4)
                                                : params.prompt_len;

  for (int i = 0; i < params.sequences; ++i) {
    Rng rng = Rng(params.seed).fork(0x636f7270ull + i);
    Tokens seq = detail::markov_sequence(table_seed, params.length, params.structure,
                                         content_tokens, rng);
    seq.push_back(corpus.vocab.eos_id);
    corpus.sequences.push_back(std::move(seq));
  }
  for (int i = 0; i < params.tasks; ++i) {
    Rng rng = Rng(params.seed).fork(0x7461736bull + i);
    Tokens seq = detail::markov_sequence(table_seed, params.length, params.structure,
                                         content_tokens, rng);
    Task task;
    task.prompt.assign(seq.begin(), seq.begin() + prompt_len);
    task.reference.assign(seq.begin() + prompt_len, seq.end());
    task.reference.push_back(corpus.vocab.eos_id);
    corpus.tasks.push_back(std::move(task));
  }
  return corpus;
}

// Builds a per-task denoiser for one of the backends, optionally wrapped in
// an order policy. Oracle instances are task-bound (they carry the padded
// target); n-gram and scripted instances are shared.
class DenoiserFactory {
 public:
  static DenoiserFactory oracle(model::OracleParams params, Vocab vocab) {
    DenoiserFactory f;
    f.kind_ = Kind::Oracle;
    f.oracle_params_ = params;
    f.vocab_ = vocab;
    f.spec_ = "oracle";
    return f;
  }

  static DenoiserFactory ngram(std::shared_ptr<const model::NGramModel> model) {
    DenoiserFactory f;
    f.kind_ = Kind::NGram;
    f.vocab_ = model->vocab();
    f.shared_ = std::move(model);
    f.spec_ = "ngram";
    return f;
  }

  static DenoiserFactory scripted(std::shared_ptr<const model::ScriptedDenoiser> model,
                                  Vocab vocab) {
    DenoiserFactory f;
    f.kind_ = Kind::Scripted;
    f.vocab_ = vocab;
    f.shared_ = std::move(model);
    f.spec_ = "scripted";
    return f;
  }

  DenoiserFactory with_policy(model::OrderPolicy policy) const {
    DenoiserFactory f = *this;
    f.policy_ = std::move(policy);
    f.has_policy_ = true;
    f.spec_ = "policy:" + f.spec_;
    return f;
  }

  std::shared_ptr<const model::Denoiser> make(const Task& task, int max_len,
                                              std::uint64_t session_seed) const {
    std::shared_ptr<const model::Denoiser> base;
    switch (kind_) {
      case Kind::Oracle: {
        model::OracleParams p = oracle_params_;
        p.seed = hash_combine(p.seed, session_seed);
        Tokens target = task.reference;
        target.resize(max_len, vocab_.eos_id);  // eos-filled region past the reference
        base = std::make_shared<model::OracleDenoiser>(p, std::move(target), vocab_);
        break;
      }
      case Kind::NGram:
      case Kind::Scripted:
        base = shared_;
        break;
    }
    if (has_policy_) return std::make_shared<model::PolicyWrapped>(std::move(base), policy_);
    return base;
  }

  const Vocab& vocab() const { return vocab_; }
  const std::string& spec() const { return spec_; }
  void set_spec(std::string s) { spec_ = std::move(s); }

 private:
  enum class Kind { Oracle, NGram, Scripted };
  Kind kind_ = Kind::Oracle;
  model::OracleParams oracle_params_;
  std::shared_ptr<const model::Denoiser> shared_;
  Vocab vocab_;
  model::OrderPolicy policy_;
  bool has_policy_ = false;
  std::string spec_;
};

// Exact match of pre-EOS tokens: output truncated at its first eos must
// equal the reference minus the trailing eos, and the eos itself must have
// been produced (an untruncated garbage tail fails both ways).
inline bool exact_match(const Tokens& output, const Tokens& reference, const Vocab& vocab) {
  Tokens ref_pre(reference.begin(), reference.end() - 1);
  std::size_t eos_at = output.size();
  for (std::size_t i = 0; i < output.size(); ++i) {
    if (output[i] == vocab.eos_id) {
      eos_at = i;
      break;
    }
  }
  if (eos_at == output.size()) return false;  // no eos produced
  if (eos_at != ref_pre.size()) return false;
  for (std::size_t i = 0; i < ref_pre.size(); ++i)
    if (output[i] != ref_pre[i]) return false;
  return true;
}

struct EvalResult {
  double accuracy_pct = 0;
  double mean_tpf = 0;  // micro-average: total tokens / total forwards
  std::int64_t total_tokens = 0;
  std::int64_t total_forwards = 0;
  std::int64_t total_full_forwards = 0;
  std::vector<engine::DecodeMetrics> per_task;
};

inline EvalResult evaluate(const DenoiserFactory& factory, const std::vector<Task>& tasks,
                           const engine::EngineConfig& config) {
  if (tasks.empty()) throw DataError("evaluate: no tasks");
  EvalResult result;
  int matches = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const Task& task = tasks[i];
    task.validate(factory.vocab(), config.max_len);
    // Seed from task content, so task order never affects any metric.
    const std::uint64_t session_seed = hash_combine(config.seed, task.content_hash());
    auto denoiser = factory.make(task, config.max_len, session_seed);
    try {
      auto [output, metrics] = engine::run_session(task.prompt, *denoiser, config,
                                                   factory.vocab());
      if (exact_match(output, task.reference, factory.vocab())) ++matches;
      result.total_tokens += metrics.tokens_generated;
      result.total_forwards += metrics.forwards;
      result.total_full_forwards += metrics.full_forwards;
      result.per_task.push_back(std::move(metrics));
    } catch (const InternalError& e) {
      throw InternalError("task " + std::to_string(i) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("task " + std::to_string(i) + ": " + e.what());
    }
  }
  result.accuracy_pct = 100.0 * matches / static_cast<double>(tasks.size());
  result.mean_tpf =
      static_cast<double>(result.total_tokens) / static_cast<double>(result.total_forwards);
  return result;
}

struct SweepCell {
  double tau = 0;
  double mean_tpf = 0;
  double accuracy_pct = 0;
  std::int64_t total_tokens = 0;
  std::int64_t total_forwards = 0;
};

struct SweepReport {
  std::vector<SweepCell> cells;
  std::vector<aup::CurvePoint> curve;  // (mean TPF, accuracy) per tau
  aup::AupResult aup;
  double alpha = 3.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    auto cj = nlohmann::ordered_json::array();
    for (const auto& c : cells)
      cj.push_back({{"tau", c.tau},
                    {"mean_tpf", c.mean_tpf},
                    {"accuracy", c.accuracy_pct},
                    {"total_tokens", c.total_tokens},
                    {"total_forwards", c.total_forwards}});
    j["cells"] = std::move(cj);
    auto pj = nlohmann::ordered_json::array();
    for (const auto& p : curve) pj.push_back({{"rho", p.rho}, {"acc", p.acc}});
    j["curve"] = std::move(pj);
    j["aup"] = aup::to_json(aup, alpha);
    return j;
  }
};

inline SweepReport sweep(const DenoiserFactory& factory, const std::vector<Task>& tasks,
                         const std::vector<double>& taus, engine::EngineConfig config,
                         const aup::AupConfig& aup_config) {
  if (taus.empty()) throw ConfigError("sweep: no tau values");
  for (std::size_t i = 1; i < taus.size(); ++i)
    if (taus[i] <= taus[i - 1]) throw ConfigError("sweep: taus must be strictly ascending");
  SweepReport report;
  report.alpha = aup_config.alpha;
  for (double tau : taus) {
    config.tau = tau;
    const EvalResult r = evaluate(factory, tasks, config);
    report.cells.push_back({tau, r.mean_tpf, r.accuracy_pct, r.total_tokens, r.total_forwards});
    report.curve.push_back({r.mean_tpf, r.accuracy_pct});
  }
  report.aup = aup::compute_aup(report.curve, aup_config);
  return report;
}

struct AblateCell {
  engine::Mode mode = engine::Mode::MultiBlock;
  bool early_stop = true;
  bool refresh_on = true;
  double mean_tpf = 0;
  double accuracy_pct = 0;
  std::int64_t total_forwards = 0;
  std::int64_t total_full_forwards = 0;
};

struct AblateReport {
  double tau = 0;
  std::vector<AblateCell> cells;

  const AblateCell* find(engine::Mode mode, bool early_stop, bool refresh_on) const {
    for (const auto& c : cells)
      if (c.mode == mode && c.early_stop == early_stop && c.refresh_on == refresh_on)
        return &c;
    return nullptr;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["tau"] = tau;
    auto cj = nlohmann::ordered_json::array();
    for (const auto& c : cells) {
      nlohmann::ordered_json e{{"mode", engine::to_string(c.mode)},
                               {"early_stop", c.early_stop},
                               {"refresh", c.refresh_on},
                               {"mean_tpf", c.mean_tpf},
                               {"accuracy", c.accuracy_pct},
                               {"total_forwards", c.total_forwards},
                               {"total_full_forwards", c.total_full_forwards}};
      // relative deltas against the single_block cell with matching flags
      if (const auto* base = find(engine::Mode::SingleBlock, c.early_stop, c.refresh_on);
          base && base != &c && base->mean_tpf > 0) {
        e["tpf_vs_single_block_pct"] = 100.0 * (c.mean_tpf / base->mean_tpf - 1.0);
        e["accuracy_vs_single_block"] = c.accuracy_pct - base->accuracy_pct;
      }
      cj.push_back(std::move(e));
    }
    j["cells"] = std::move(cj);
    return j;
  }
};

inline AblateReport ablate(const DenoiserFactory& factory, const std::vector<Task>& tasks,
                           const engine::EngineConfig& base_config) {
  if (tasks.empty()) throw DataError("ablate: no tasks");
  AblateReport report;
  report.tau = base_config.tau;
  for (engine::Mode mode :
       {engine::Mode::Vanilla, engine::Mode::SingleBlock, engine::Mode::MultiBlock}) {
    for (bool early_stop : {true, false}) {
      for (bool refresh_on : {true, false}) {
        engine::EngineConfig cfg = base_config;
        cfg.mode = mode;
        cfg.early_stop = early_stop;
        cfg.refresh_interval = refresh_on ? base_config.refresh_interval
                                          : engine::EngineConfig::kNoRefresh;
        const EvalResult r = evaluate(factory, tasks, cfg);
        report.cells.push_back({mode, early_stop, refresh_on, r.mean_tpf, r.accuracy_pct,
                                r.total_forwards, r.total_full_forwards});
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Trajectory/distillation file helpers shared by the CLI and the pipeline.
// ---------------------------------------------------------------------------

inline std::string trajectory_jsonl(const std::vector<std::pair<Tokens, seq::Trajectory>>& rows) {
  std::string out;
  for (const auto& [prompt, traj] : rows) {
    nlohmann::ordered_json j{{"prompt", prompt}, {"truth", traj.truth}, {"order", traj.order}};
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<std::pair<Tokens, seq::Trajectory>> parse_trajectory_jsonl(
    const std::string& path) {
  std::vector<std::pair<Tokens, seq::Trajectory>> rows;
  for (const auto& j : io::read_jsonl(path)) {
    seq::Trajectory traj;
    traj.truth = j.at("truth").get<Tokens>();
    traj.order = j.at("order").get<std::vector<int>>();
    rows.push_back({j.at("prompt").get<Tokens>(), std::move(traj)});
  }
  return rows;
}

inline std::string records_jsonl(const std::vector<seq::DistillationRecord>& records,
                                 const Vocab& vocab) {
  std::string out;
  for (const auto& rec : records) {
    Tokens noisy = rec.noisy;
    for (auto& t : noisy)
      if (t == vocab.mask_id) t = -1;
    nlohmann::ordered_json j{{"prompt", rec.prompt},
                             {"noisy", noisy},
                             {"label_positions", rec.label_positions},
                             {"labels", rec.labels},
                             {"t", rec.mask_ratio},
                             {"s", rec.prefix_len},
                             {"k", rec.window_len},
                             {"step_index", rec.step_index}};
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<seq::DistillationRecord> parse_records_jsonl(const std::string& path,
                                                                const Vocab& vocab) {
  std::vector<seq::DistillationRecord> records;
  for (const auto& j : io::read_jsonl(path)) {
    seq::DistillationRecord rec;
    rec.prompt = j.at("prompt").get<Tokens>();
    rec.noisy = j.at("noisy").get<Tokens>();
    for (auto& t : rec.noisy)
      if (t == -1) t = vocab.mask_id;
    rec.label_positions = j.at("label_positions").get<std::vector<int>>();
    rec.labels = j.at("labels").get<Tokens>();
    rec.mask_ratio = j.at("t").get<double>();
    rec.prefix_len = j.at("s").get<int>();
    rec.window_len = j.at("k").get<int>();
    rec.step_index = j.at("step_index").get<int>();
    records.push_back(std::move(rec));
  }
  return records;
}

// Teacher trajectories for (prompt, reference) pairs, written with the
// ground-truth reference (eos-padded to n) in the `truth` field so that
// downstream distillation labels the true response, while `order` carries
// the teacher's own unmasking order.
inline std::vector<std::pair<Tokens, seq::Trajectory>> record_task_trajectories(
    const DenoiserFactory& factory, const std::vector<Task>& tasks, int n,
    std::uint64_t seed, int block_size = 32) {
  std::vector<std::pair<Tokens, seq::Trajectory>> rows;
  for (const auto& task : tasks) {
    Task padded = task;
    padded.reference.resize(n, factory.vocab().eos_id);
    const std::uint64_t session_seed = hash_combine(seed, task.content_hash());
    auto teacher = factory.make(padded, n, session_seed);
    seq::Trajectory traj =
        model::record_teacher_trajectory(*teacher, task.prompt, n, factory.vocab(), block_size);
    traj.truth = padded.reference;  // ground truth supplies the labels
    rows.push_back({task.prompt, std::move(traj)});
  }
  return rows;
}

}  // namespace dlab::harness
