// SPDX-License-Identifier: Apache-2.0
#pragma once

// Bidirectional n-gram backend: counts of token given up to `order` revealed
// neighbors on each side, with additive smoothing over the non-mask
// vocabulary. Prediction picks the table for the longest fully-revealed
// context actually available at the position, so masked neighbors degrade
// gracefully down to the unigram table.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dlab/common.hpp"
#include "dlab/denoiser.hpp"

namespace dlab::model {

class NGramModel : public Denoiser {
 public:
  struct Entry {
    std::int64_t total = 0;
    std::unordered_map<Token, std::int64_t> counts;
  };
  struct TokensHash {
    std::size_t operator()(const Tokens& t) const {
      return static_cast<std::size_t>(fnv1a64(t.data(), t.size() * sizeof(Token)));
    }
  };
  using Table = std::unordered_map<Tokens, Entry, TokensHash>;

  NGramModel(int order, double smoothing, Vocab vocab)
      : order_(order), smoothing_(smoothing), vocab_(vocab),
        tables_((order + 1) * (order + 1)) {
    if (order_ < 1) throw ConfigError("ngram: order must be >= 1");
    if (smoothing_ <= 0) throw ConfigError("ngram: smoothing must be > 0");
    vocab_.validate();
  }

  static NGramModel train(const std::vector<Tokens>& corpus, int order, double smoothing,
                          const Vocab& vocab) {
    if (corpus.empty()) throw DataError("ngram: empty training corpus");
    NGramModel m(order, smoothing, vocab);
    for (const auto& seq : corpus) {
      const int len = static_cast<int>(seq.size());
      for (int p = 0; p < len; ++p) {
        for (int l = 0; l <= order && p - l >= 0; ++l) {
          for (int r = 0; r <= order && p + r < len; ++r) {
            Tokens key;
            key.reserve(l + r);
            for (int j = p - l; j < p; ++j) key.push_back(seq[j]);
            for (int j = p + 1; j <= p + r; ++j) key.push_back(seq[j]);
            auto& entry = m.table(l, r)[std::move(key)];
            ++entry.total;
            ++entry.counts[seq[p]];
          }
        }
      }
    }
    return m;
  }

  std::vector<Prediction> predict(const ContextView& view,
                                  const std::vector<int>& positions) const override {
    check_request(view, positions);
    std::vector<Prediction> out;
    out.reserve(positions.size());
    for (int pos : positions) out.push_back(predict_one(view, pos));
    return out;
  }

  int order() const { return order_; }
  double smoothing() const { return smoothing_; }
  const Vocab& vocab() const { return vocab_; }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["kind"] = "ngram";
    j["order"] = order_;
    j["smoothing"] = smoothing_;
    j["vocab"] = {{"size", vocab_.size}, {"mask_id", vocab_.mask_id}, {"eos_id", vocab_.eos_id}};
    auto tables = nlohmann::ordered_json::array();
    for (int l = 0; l <= order_; ++l) {
      for (int r = 0; r <= order_; ++r) {
        nlohmann::ordered_json tj;
        tj["left"] = l;
        tj["right"] = r;
        auto entries = nlohmann::ordered_json::array();
        // Deterministic file bytes: emit contexts in sorted order.
        std::vector<const Tokens*> keys;
        for (const auto& [key, entry] : tables_[index(l, r)]) keys.push_back(&key);
        std::sort(keys.begin(), keys.end(),
                  [](const Tokens* a, const Tokens* b) { return *a < *b; });
        for (const Tokens* key : keys) {
          const Entry& entry = tables_[index(l, r)].at(*key);
          nlohmann::ordered_json ej;
          ej["ctx"] = *key;
          ej["total"] = entry.total;
          std::vector<std::pair<Token, std::int64_t>> counts(entry.counts.begin(),
                                                             entry.counts.end());
          std::sort(counts.begin(), counts.end());
          auto cj = nlohmann::ordered_json::array();
          for (const auto& [tok, c] : counts) cj.push_back({tok, c});
          ej["counts"] = cj;
          entries.push_back(std::move(ej));
        }
        tj["entries"] = std::move(entries);
        tables.push_back(std::move(tj));
      }
    }
    j["tables"] = std::move(tables);
    return j;
  }

  static NGramModel from_json(const nlohmann::json& j) {
    if (!j.contains("order") || !j.contains("smoothing") || !j.contains("vocab"))
      throw DataError("ngram file: missing order/smoothing/vocab");
    Vocab vocab{j["vocab"]["size"].get<int>(), j["vocab"]["mask_id"].get<Token>(),
                j["vocab"]["eos_id"].get<Token>()};
    NGramModel m(j["order"].get<int>(), j["smoothing"].get<double>(), vocab);
    for (const auto& tj : j.at("tables")) {
      const int l = tj.at("left").get<int>(), r = tj.at("right").get<int>();
      for (const auto& ej : tj.at("entries")) {
        Entry entry;
        entry.total = ej.at("total").get<std::int64_t>();
        for (const auto& c : ej.at("counts"))
          entry.counts[c[0].get<Token>()] = c[1].get<std::int64_t>();
        m.table(l, r)[ej.at("ctx").get<Tokens>()] = std::move(entry);
      }
    }
    return m;
  }

 private:
  int index(int l, int r) const { return l * (order_ + 1) + r; }
  Table& table(int l, int r) { return tables_[index(l, r)]; }
  const Table& table(int l, int r) const { return tables_[index(l, r)]; }

  Prediction predict_one(const ContextView& view, int pos) const {
    // Longest contiguous revealed run on each side, prompt included on the
    // left, capped at the model order.
    const auto& prompt = *view.prompt;
    const auto& output = *view.output;
    const int prompt_len = static_cast<int>(prompt.size());
    auto token_at = [&](int abs) -> Token {  // abs: 0-based over prompt+output
      return abs < prompt_len ? prompt[abs] : output[abs - prompt_len];
    };
    const int abs_pos = prompt_len + pos - 1;
    const int abs_len = prompt_len + view.n_output();

    int l = 0;
    while (l < order_ && abs_pos - l - 1 >= 0 &&
           token_at(abs_pos - l - 1) != view.vocab.mask_id)
      ++l;
    int r = 0;
    while (r < order_ && abs_pos + r + 1 < abs_len &&
           token_at(abs_pos + r + 1) != view.vocab.mask_id)
      ++r;

    Tokens key;
    key.reserve(l + r);
    for (int j = abs_pos - l; j < abs_pos; ++j) key.push_back(token_at(j));
    for (int j = abs_pos + 1; j <= abs_pos + r; ++j) key.push_back(token_at(j));

    const Table& tbl = table(l, r);
    const auto it = tbl.find(key);
    static const Entry kEmpty;
    const Entry& entry = it == tbl.end() ? kEmpty : it->second;

    const int support_size = vocab_.size - 1;  // every token except mask
    const double denom = static_cast<double>(entry.total) + smoothing_ * support_size;
    Prediction p;
    p.position = pos;
    p.support.reserve(support_size);
    for (Token tok = 0; tok < vocab_.size; ++tok) {
      if (tok == vocab_.mask_id) continue;
      const auto cit = entry.counts.find(tok);
      const double count = cit == entry.counts.end() ? 0.0 : static_cast<double>(cit->second);
      const double prob = (count + smoothing_) / denom;
      p.support.emplace_back(tok, prob);
      if (prob > p.mode_prob) {
        p.mode_prob = prob;
        p.mode = tok;
      }
    }
    p.entropy = entropy_of_support(p.support);
    return p;
  }

  int order_;
  double smoothing_;
  Vocab vocab_;
  std::vector<Table> tables_;
};

}  // namespace dlab::model
