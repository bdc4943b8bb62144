// SPDX-License-Identifier: Apache-2.0
#pragma once

// Model-spec strings and the multi-stage pipeline. A pipeline run goes
// corpus -> model -> teacher trajectories -> distillation records -> order
// policy -> threshold sweeps (base and policy-wrapped) -> AUP comparison,
// with every artifact written atomically and a manifest recording seeds and
// content digests so a rerun can be checked byte for byte.

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dlab/common.hpp"
#include "dlab/harness.hpp"
#include "dlab/io.hpp"

namespace dlab::harness {

// Spec strings: oracle:<params.json>, ngram:<model.json>,
// scripted:<script.json>, policy:<base spec>+<policy.json>.
inline DenoiserFactory load_factory(const std::string& spec, const Vocab& task_vocab) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos)
    throw ConfigError("model spec '" + spec + "' missing ':'");
  const std::string kind = spec.substr(0, colon);
  const std::string rest = spec.substr(colon + 1);
  if (kind == "policy") {
    const auto plus = rest.rfind('+');
    if (plus == std::string::npos)
      throw ConfigError("policy spec needs '<base spec>+<policy.json>'");
    auto base = load_factory(rest.substr(0, plus), task_vocab);
    auto policy = model::OrderPolicy::from_json(io::read_json(rest.substr(plus + 1)));
    auto f = base.with_policy(std::move(policy));
    f.set_spec(spec);
    return f;
  }
  if (kind == "oracle") {
    auto params = model::OracleParams::from_json(io::read_json(rest));
    auto f = DenoiserFactory::oracle(params, task_vocab);
    f.set_spec(spec);
    return f;
  }
  if (kind == "ngram") {
    auto model = std::make_shared<model::NGramModel>(
        model::NGramModel::from_json(io::read_json(rest)));
    auto f = DenoiserFactory::ngram(std::move(model));
    f.set_spec(spec);
    return f;
  }
  if (kind == "scripted") {
    const auto j = io::read_json(rest);
    Vocab vocab = task_vocab;
    if (j.contains("vocab"))
      vocab = Vocab{j["vocab"]["size"].get<int>(), j["vocab"]["mask_id"].get<Token>(),
                    j["vocab"]["eos_id"].get<Token>()};
    auto model = std::make_shared<model::ScriptedDenoiser>(
        vocab, j.at("tokens").get<Tokens>(), j.at("entropies").get<std::vector<double>>());
    auto f = DenoiserFactory::scripted(std::move(model), vocab);
    f.set_spec(spec);
    return f;
  }
  throw ConfigError("unknown model kind '" + kind + "'");
}

struct PipelineResult {
  std::filesystem::path out_dir;
  nlohmann::ordered_json manifest;
};

namespace detail {

template <typename F>
auto stage(const std::string& name, F&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError("stage " + name + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError("stage " + name + ": " + e.what());
  } catch (const InternalError& e) {
    throw InternalError("stage " + name + ": " + e.what());
  }
}

}  // namespace detail

inline PipelineResult run_pipeline(const nlohmann::json& config) {
  if (!config.contains("out_dir")) throw ConfigError("pipeline: config needs out_dir");
  const std::filesystem::path out_dir = config["out_dir"].get<std::string>();
  const std::uint64_t seed = config.value("seed", 1ull);
  std::vector<std::pair<std::string, std::string>> artifacts;  // (name, path)
  auto emit = [&](const std::string& name, const std::string& content) {
    const std::string path = (out_dir / name).string();
    io::write_file_atomic(path, content);
    artifacts.emplace_back(name, path);
  };

  // -- corpus ---------------------------------------------------------------
  Corpus corpus = detail::stage("corpus", [&] {
    if (config.contains("corpus") && config["corpus"].contains("path"))
      return Corpus::from_json(io::read_json(config["corpus"]["path"].get<std::string>()));
    GenParams params;
    params.seed = seed;
    const auto& cj = config.value("corpus", nlohmann::json::object());
    if (cj.contains("vocab_size")) params.vocab_size = cj["vocab_size"].get<int>();
    if (cj.contains("sequences")) params.sequences = cj["sequences"].get<int>();
    if (cj.contains("length")) params.length = cj["length"].get<int>();
    if (cj.contains("structure")) params.structure = cj["structure"].get<int>();
    if (cj.contains("tasks")) params.tasks = cj["tasks"].get<int>();
    if (cj.contains("prompt_len")) params.prompt_len = cj["prompt_len"].get<int>();
    return gen_corpus(params);
  });
  emit("corpus.json", corpus.to_json().dump(2) + "\n");

  // -- model ----------------------------------------------------------------
  DenoiserFactory factory = detail::stage("model", [&]() -> DenoiserFactory {
    const auto& mj = config.value("model", nlohmann::json::object());
    const std::string kind = mj.value("kind", std::string("oracle"));
    if (kind == "oracle") {
      model::OracleParams params;
      if (mj.contains("params")) params = model::OracleParams::from_json(mj["params"]);
      params.seed = hash_combine(seed, params.seed);
      emit("oracle_params.json", params.to_json().dump(2) + "\n");
      return DenoiserFactory::oracle(params, corpus.vocab);
    }
    if (kind == "ngram") {
      auto model = std::make_shared<model::NGramModel>(model::NGramModel::train(
          corpus.sequences, mj.value("order", 2), mj.value("smoothing", 0.1), corpus.vocab));
      emit("ngram.json", model->to_json().dump() + "\n");
      return DenoiserFactory::ngram(std::move(model));
    }
    throw ConfigError("model kind must be oracle or ngram, got '" + kind + "'");
  });

  // -- train/eval split -----------------------------------------------------
  const int train_count =
      config.value("train_tasks", static_cast<int>(corpus.tasks.size()) / 2);
  if (train_count < 1 || train_count >= static_cast<int>(corpus.tasks.size()))
    throw ConfigError("pipeline: train_tasks must split the task list");
  const std::vector<Task> train_tasks(corpus.tasks.begin(), corpus.tasks.begin() + train_count);
  const std::vector<Task> eval_tasks(corpus.tasks.begin() + train_count, corpus.tasks.end());

  engine::EngineConfig engine_config;
  if (config.contains("engine")) engine_config = engine::EngineConfig::from_json(config["engine"]);
  engine_config.seed = hash_combine(seed, engine_config.seed);

  // -- teacher trajectories ---------------------------------------------------
  const auto& dj = config.value("distill", nlohmann::json::object());
  seq::DistillSchedule sched;
  sched.t_start = dj.value("t_start", 0.0);
  sched.t_end = dj.value("t_end", 0.8);
  sched.k_start = dj.value("k_start", 16);
  sched.k_end = dj.value("k_end", 32);
  const int records_per_pair = dj.value("records_per_pair", 8);

  const int traj_len = detail::stage("trajectory", [&] {
    int n = config.value("trajectory", nlohmann::json::object()).value("len", 0);
    if (n == 0) {
      for (const auto& t : train_tasks) n = std::max(n, static_cast<int>(t.reference.size()));
      n = std::max(n, sched.k_end);
    }
    return n;
  });
  auto traj_rows = detail::stage("trajectory", [&] {
    return record_task_trajectories(factory, train_tasks, traj_len,
                                    hash_combine(seed, 0x7472616aull),
                                    engine_config.block_size);
  });
  emit("traj.jsonl", trajectory_jsonl(traj_rows));

  // -- distillation records ---------------------------------------------------
  auto records = detail::stage("distill", [&] {
    std::vector<std::pair<Tokens, Tokens>> pairs;
    std::vector<seq::Trajectory> trajs;
    for (const auto& [prompt, traj] : traj_rows) {
      pairs.push_back({prompt, traj.truth});
      trajs.push_back(traj);
    }
    return seq::emit_records(pairs, trajs, sched, records_per_pair,
                             hash_combine(seed, 0x72656373ull), corpus.vocab);
  });
  emit("records.jsonl", records_jsonl(records, corpus.vocab));

  // -- order policy -----------------------------------------------------------
  auto policy = detail::stage("policy", [&] { return model::fit_order_policy(records); });
  emit("policy.json", policy.to_json().dump(2) + "\n");

  // -- sweeps -----------------------------------------------------------------
  const auto& sj = config.value("sweep", nlohmann::json::object());
  std::vector<double> taus = sj.value("taus", std::vector<double>{0.2, 0.45, 0.7, 1.0, 1.3});
  aup::AupConfig aup_config;
  aup_config.alpha = sj.value("alpha", 3.0);
  aup_config.margin = sj.value("margin", 5.0);

  auto base_report = detail::stage("sweep_base",
                                   [&] { return sweep(factory, eval_tasks, taus, engine_config,
                                                      aup_config); });
  emit("curve_base.csv", aup::to_csv(base_report.curve));
  emit("sweep_base.json", base_report.to_json().dump(2) + "\n");

  auto policy_factory = factory.with_policy(policy);
  auto policy_report = detail::stage("sweep_policy",
                                     [&] { return sweep(policy_factory, eval_tasks, taus,
                                                        engine_config, aup_config); });
  emit("curve_policy.csv", aup::to_csv(policy_report.curve));
  emit("sweep_policy.json", policy_report.to_json().dump(2) + "\n");

  nlohmann::ordered_json compare{{"aup_base", base_report.aup.score},
                                 {"aup_policy", policy_report.aup.score},
                                 {"aup_delta", policy_report.aup.score - base_report.aup.score}};
  emit("aup_compare.json", compare.dump(2) + "\n");

  // -- manifest ---------------------------------------------------------------
  nlohmann::ordered_json manifest;
  manifest["tool"] = "dlab";
  manifest["format_version"] = 1;
  manifest["seed"] = seed;
  manifest["config"] = config;
  auto aj = nlohmann::ordered_json::array();
  for (const auto& [name, path] : artifacts)
    aj.push_back({{"name", name}, {"fnv1a64", io::file_digest_hex(path)}});
  manifest["artifacts"] = std::move(aj);
  io::write_file_atomic((out_dir / "manifest.json").string(), manifest.dump(2) + "\n");

  return {out_dir, manifest};
}

}  // namespace dlab::harness
