#pragma once

// Automatic evaluation: corpus BLEU, interpolated Kneser-Ney n-gram
// perplexity, a BiLSTM style classifier, and the GM aggregate.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "stylet/data.hpp"
#include "stylet/errors.hpp"
#include "stylet/nn.hpp"

namespace stylet::eval {

// ---------------------------------------------------------------------------
// Corpus-level BLEU with brevity penalty. Unigram precision is unsmoothed;
// higher orders use add-one smoothing so short corpora stay finite.

using Sentence = std::vector<std::string>;

inline double bleu(const std::vector<Sentence>& candidates,
                   const std::vector<std::vector<Sentence>>& references, int max_n = 4) {
  if (candidates.empty()) throw ValueError("bleu on empty candidate set");
  if (candidates.size() != references.size())
    throw ValueError("bleu: candidate/reference counts differ");

  auto ngram_counts = [](const Sentence& s, int n) {
    std::map<std::vector<std::string>, int> counts;
    if (static_cast<int>(s.size()) >= n)
      for (size_t i = 0; i + n <= s.size(); ++i)
        counts[std::vector<std::string>(s.begin() + i, s.begin() + i + n)]++;
    return counts;
  };

  std::vector<double> match(max_n + 1, 0.0), total(max_n + 1, 0.0);
  double cand_len = 0.0, ref_len = 0.0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    const Sentence& cand = candidates[i];
    if (references[i].empty()) throw ValueError("bleu: candidate without references");
    cand_len += static_cast<double>(cand.size());
    // Closest reference length; ties prefer the shorter one.
    int best = static_cast<int>(references[i][0].size());
    for (const Sentence& r : references[i]) {
      int len = static_cast<int>(r.size());
      int dc = std::abs(len - static_cast<int>(cand.size()));
      int db = std::abs(best - static_cast<int>(cand.size()));
      if (dc < db || (dc == db && len < best)) best = len;
    }
    ref_len += best;

    for (int n = 1; n <= max_n; ++n) {
      auto cc = ngram_counts(cand, n);
      std::map<std::vector<std::string>, int> clip;
      for (const Sentence& r : references[i])
        for (const auto& [gram, count] : ngram_counts(r, n))
          clip[gram] = std::max(clip[gram], count);
      for (const auto& [gram, count] : cc) {
        total[n] += count;
        auto it = clip.find(gram);
        if (it != clip.end()) match[n] += std::min(count, it->second);
      }
    }
  }

  if (total[1] == 0.0 || match[1] == 0.0) return 0.0;
  double log_prec = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    double p = n == 1 ? match[1] / total[1] : (match[n] + 1.0) / (total[n] + 1.0);
    log_prec += std::log(p);
  }
  double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return 100.0 * bp * std::exp(log_prec / max_n);
}

inline double bleu_single(const std::vector<Sentence>& candidates,
                          const std::vector<Sentence>& references, int max_n = 4) {
  std::vector<std::vector<Sentence>> wrapped(references.size());
  for (size_t i = 0; i < references.size(); ++i) wrapped[i] = {references[i]};
  return bleu(candidates, wrapped, max_n);
}

// ---------------------------------------------------------------------------
// Interpolated Kneser-Ney language model, one discount per order. The top
// order uses raw counts; lower orders use continuation counts; the unigram
// level interpolates with a uniform 1/V floor.

class KneserNeyLM {
 public:
  static KneserNeyLM train(const data::Corpus& corpus, const data::Vocab& vocab, int order = 3) {
    if (order < 1 || order > 5) throw ValueError("KN order must lie in 1..5");
    if (corpus.size() == 0) throw ValueError("KN training corpus is empty");
    KneserNeyLM lm;
    lm.order_ = order;
    lm.vocab_size_ = vocab.size();
    lm.counts_.resize(order + 1);
    lm.ctx_total_.resize(order + 1);
    lm.ctx_distinct_.resize(order + 1);

    // Raw top-order counts over BOS-padded, EOS-terminated sequences.
    for (const auto& sent : corpus.sentences) {
      std::vector<int> ids(order - 1, data::kBos);
      for (const std::string& tok : sent) ids.push_back(vocab.encode(tok));
      ids.push_back(data::kEos);
      for (size_t pos = order - 1; pos < ids.size(); ++pos) {
        uint64_t key = 0;
        for (int k = static_cast<int>(pos) - order + 1; k <= static_cast<int>(pos); ++k)
          key = key * lm.vocab_size_ + ids[k];
        lm.counts_[order][key] += 1.0;
      }
    }
    // Continuation counts: each distinct higher-order type contributes one
    // occurrence of its suffix at the next level down.
    for (int level = order - 1; level >= 1; --level) {
      uint64_t head_stride = 1;
      for (int i = 0; i < level; ++i) head_stride *= lm.vocab_size_;
      for (const auto& [key, count] : lm.counts_[level + 1])
        lm.counts_[level][key % head_stride] += 1.0;
    }
    for (int level = 1; level <= order; ++level) {
      for (const auto& [key, count] : lm.counts_[level]) {
        uint64_t ctx = key / lm.vocab_size_;
        lm.ctx_total_[level][ctx] += count;
        lm.ctx_distinct_[level][ctx] += 1;
      }
      // Ney discount from count-of-counts, kept inside (0,1).
      double n1 = 0, n2 = 0;
      for (const auto& [key, count] : lm.counts_[level]) {
        if (count == 1.0) n1 += 1;
        if (count == 2.0) n2 += 1;
      }
      double d = n1 + 2 * n2 > 0 ? n1 / (n1 + 2 * n2) : 0.5;
      lm.discount_.push_back(std::min(0.95, std::max(0.05, d)));
    }
    lm.discount_.insert(lm.discount_.begin(), 0.0);  // 1-indexed by level
    return lm;
  }

  // p(w | context), context given oldest-first; uses up to order-1 tokens.
  double prob(const std::vector<int>& context, int token) const {
    return prob_level(order_, context, token);
  }

  double sentence_log_prob(const std::vector<int>& content_ids) const {
    std::vector<int> ids(order_ - 1, data::kBos);
    ids.insert(ids.end(), content_ids.begin(), content_ids.end());
    ids.push_back(data::kEos);
    double acc = 0.0;
    for (size_t pos = order_ - 1; pos < ids.size(); ++pos) {
      std::vector<int> ctx(ids.begin() + pos - order_ + 1, ids.begin() + pos);
      double p = prob(ctx, ids[pos]);
      if (!(p > 0.0)) throw ValueError("KN produced a nonpositive probability");
      acc += std::log(p);
    }
    return acc;
  }

  // exp(-(sum log p) / token count), EOS counted, natural log.
  double perplexity(const std::vector<Sentence>& sentences, const data::Vocab& vocab) const {
    if (sentences.empty()) throw ValueError("perplexity of empty sentence set");
    double log_sum = 0.0;
    double tokens = 0.0;
    for (const Sentence& sent : sentences) {
      std::vector<int> ids;
      for (const std::string& tok : sent) ids.push_back(vocab.encode(tok));
      log_sum += sentence_log_prob(ids);
      tokens += static_cast<double>(ids.size()) + 1.0;  // + EOS
    }
    return std::exp(-log_sum / tokens);
  }

  // Diagnostic: sum of p(w | context) over the whole vocabulary.
  double context_prob_sum(const std::vector<int>& context) const {
    double total = 0.0;
    for (int w = 0; w < vocab_size_; ++w) total += prob(context, w);
    return total;
  }

  int order() const { return order_; }

 private:
  double prob_level(int level, const std::vector<int>& context, int token) const {
    if (level == 0) return 1.0 / static_cast<double>(vocab_size_);
    uint64_t ctx = 0;
    for (int i = static_cast<int>(context.size()) - (level - 1);
         i < static_cast<int>(context.size()); ++i)
      ctx = ctx * vocab_size_ + context[i];
    auto total_it = ctx_total_[level].find(ctx);
    std::vector<int> shorter(context);
    if (total_it == ctx_total_[level].end())
      return prob_level(level - 1, shorter, token);
    double total = total_it->second;
    double d = discount_[level];
    uint64_t key = ctx * vocab_size_ + token;
    auto cit = counts_[level].find(key);
    double count = cit == counts_[level].end() ? 0.0 : cit->second;
    double distinct = static_cast<double>(ctx_distinct_[level].at(ctx));
    double base = std::max(count - d, 0.0) / total;
    double lambda = d * distinct / total;
    return base + lambda * prob_level(level - 1, shorter, token);
  }

  int order_ = 3;
  int vocab_size_ = 0;
  std::vector<double> discount_;  // 1-indexed by level
  std::vector<std::unordered_map<uint64_t, double>> counts_;
  std::vector<std::unordered_map<uint64_t, double>> ctx_total_;
  std::vector<std::unordered_map<uint64_t, int>> ctx_distinct_;
};

// ---------------------------------------------------------------------------
// BiLSTM classifier: last hidden states of both directions, linear head.

struct ClassifierConfig {
  int embed_dim = 32;
  int hidden = 32;
  int epochs = 8;
  int batch_size = 32;
  double lr = 1e-3;
  int max_len = 20;
  uint64_t seed = 1;
};

class BiLstmClassifier {
 public:
  BiLstmClassifier() = default;
  BiLstmClassifier(int vocab_size, int num_classes, const ClassifierConfig& cfg) : cfg_(cfg) {
    std::mt19937_64 rng = nn::make_rng(cfg.seed, 501);
    num_classes_ = num_classes;
    embed_ = nn::uniform_param("clf.embed", {vocab_size, cfg.embed_dim}, rng);
    enc_ = nn::make_bilstm("clf.enc", cfg.embed_dim, cfg.hidden, rng);
    w_out_ = nn::uniform_param("clf.w_out", {2 * cfg.hidden, num_classes}, rng);
    b_out_ = nn::zeros_param("clf.b_out", {num_classes});
  }

  ad::Tensor logits(ad::Tape& t, nn::Binding& bind, const std::vector<int>& ids) {
    ad::Tensor emb = t.embed_lookup(bind.use(embed_), ids);
    nn::BiLstmOut enc = nn::bilstm_run(t, bind, emb, enc_);
    return nn::linear(t, enc.final_concat, bind.use(w_out_), bind.use(b_out_));
  }

  int predict(const std::vector<int>& ids) {
    ad::Tape t;
    nn::Binding bind(t);
    const std::vector<double>& v = logits(t, bind, ids).value();
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
  }

  // Fraction of sentences classified as their given label, in [0,1].
  double accuracy(const data::Corpus& corpus, const data::Vocab& vocab) {
    int hits = 0;
    for (size_t i = 0; i < corpus.size(); ++i) {
      std::vector<int> ids = content_ids(corpus.sentences[i], vocab);
      if (predict(ids) == corpus.labels[i]) ++hits;
    }
    return corpus.size() ? static_cast<double>(hits) / corpus.size() : 0.0;
  }

  void train(const data::Corpus& train_corpus, const data::Corpus& valid_corpus,
             const data::Vocab& vocab) {
    nn::AdamState adam;
    adam.lr = cfg_.lr;
    std::vector<nn::Param*> params = this->params();
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      std::mt19937_64 rng = nn::make_rng(cfg_.seed, 502, epoch);
      for (const auto& batch : data::shuffled_batches(train_corpus.size(), cfg_.batch_size, rng)) {
        ad::Tape t;
        nn::Binding bind(t);
        std::vector<ad::Tensor> losses;
        for (int idx : batch) {
          std::vector<int> ids = content_ids(train_corpus.sentences[idx], vocab);
          ad::Tensor lp = t.log_softmax(logits(t, bind, ids));
          losses.push_back(t.scale(t.pick(lp, {train_corpus.labels[idx]}), -1.0));
        }
        ad::Tensor loss = t.scale(t.add_n(losses), 1.0 / losses.size());
        t.backward(loss);
        bind.collect();
        nn::adam_step(params, adam);
      }
    }
    valid_accuracy_ = accuracy(valid_corpus, vocab);
  }

  std::vector<nn::Param*> params() {
    return {&embed_, &enc_.fwd.w, &enc_.fwd.b, &enc_.bwd.w, &enc_.bwd.b, &w_out_, &b_out_};
  }

  std::vector<int> content_ids(const Sentence& tokens, const data::Vocab& vocab) const {
    std::vector<int> ids;
    int keep = std::min<int>(static_cast<int>(tokens.size()), cfg_.max_len);
    for (int i = 0; i < keep; ++i) ids.push_back(vocab.encode(tokens[i]));
    if (ids.empty()) ids.push_back(data::kUnk);
    return ids;
  }

  void save(const std::string& path) { nn::save_checkpoint(path, params()); }
  void load(const std::string& path) { nn::load_checkpoint(path, params()); }

  double valid_accuracy() const { return valid_accuracy_; }
  int num_classes() const { return num_classes_; }
  const ClassifierConfig& config() const { return cfg_; }

 private:
  ClassifierConfig cfg_;
  int num_classes_ = 0;
  nn::Param embed_, w_out_, b_out_;
  nn::BiLstmParams enc_;
  double valid_accuracy_ = 0.0;
};

// Percent of transferred sentences classified as their target label.
inline double style_accuracy(BiLstmClassifier& clf, const data::Vocab& vocab,
                             const std::vector<Sentence>& transferred,
                             const std::vector<int>& target_labels) {
  if (transferred.empty()) throw ValueError("style_accuracy on empty input");
  if (transferred.size() != target_labels.size())
    throw ValueError("style_accuracy: misaligned targets");
  int hits = 0;
  for (size_t i = 0; i < transferred.size(); ++i)
    if (clf.predict(clf.content_ids(transferred[i], vocab)) == target_labels[i]) ++hits;
  return 100.0 * hits / static_cast<double>(transferred.size());
}

// ---------------------------------------------------------------------------
// GM aggregate: fourth root of ACC * BLEU_s * BLEU_r * (1 / ln PPL), all on
// the percent scale, natural logarithm.

inline double gm_score(double acc, double bleu_s, double bleu_r, double ppl) {
  if (acc <= 0 || bleu_s <= 0 || bleu_r <= 0) throw DomainError("gm_score inputs must be > 0");
  if (ppl <= 1.0) throw DomainError("gm_score requires ppl > 1");
  return std::pow(acc * bleu_s * bleu_r / std::log(ppl), 0.25);
}

// GM without a reference-BLEU column, used for checkpoint selection on
// splits that ship no references.
inline double gm_score_no_ref(double acc, double bleu_s, double ppl) {
  if (acc <= 0 || bleu_s <= 0) throw DomainError("gm inputs must be > 0");
  if (ppl <= 1.0) throw DomainError("gm requires ppl > 1");
  return std::pow(acc * bleu_s / std::log(ppl), 1.0 / 3.0);
}

struct StyleBreakdown {
  int style = 0;
  int count = 0;
  double acc = 0.0;
  double bleu_s = 0.0;
};

struct MetricsReport {
  double acc = 0.0;     // percent
  double bleu_s = 0.0;  // percent
  double bleu_r = 0.0;  // percent; meaningful only when has_bleu_r
  bool has_bleu_r = false;
  double ppl = 0.0;
  double gm = 0.0;
  double identity_fraction = 0.0;  // outputs identical to their source
  double classifier_valid_acc = 0.0;
  std::vector<StyleBreakdown> per_style;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"acc", acc},       {"bleu_s", bleu_s},
                        {"bleu_r", bleu_r}, {"has_bleu_r", has_bleu_r},
                        {"ppl", ppl},       {"gm", gm},
                        {"identity_fraction", identity_fraction},
                        {"classifier_valid_acc", classifier_valid_acc}};
    j["per_style"] = nlohmann::json::array();
    for (const auto& b : per_style)
      j["per_style"].push_back(
          {{"style", b.style}, {"count", b.count}, {"acc", b.acc}, {"bleu_s", b.bleu_s}});
    return j;
  }
};

struct EvalInputs {
  std::vector<Sentence> outputs;
  const data::Corpus* source = nullptr;
  std::vector<int> target_labels;
  std::vector<Sentence> references;  // empty when unavailable
};

inline MetricsReport evaluate_run(const EvalInputs& in, BiLstmClassifier& clf,
                                  const KneserNeyLM& lm, const data::Vocab& vocab) {
  if (!in.source || in.outputs.size() != in.source->size())
    throw ValueError("evaluate_run: outputs misaligned with the test corpus");
  if (in.outputs.size() != in.target_labels.size())
    throw ValueError("evaluate_run: targets misaligned");
  if (!in.references.empty() && in.references.size() != in.outputs.size())
    throw ValueError("evaluate_run: references misaligned");

  MetricsReport rep;
  rep.classifier_valid_acc = clf.valid_accuracy() * 100.0;
  rep.acc = style_accuracy(clf, vocab, in.outputs, in.target_labels);
  rep.bleu_s = bleu_single(in.outputs, in.source->sentences);
  if (!in.references.empty()) {
    rep.bleu_r = bleu_single(in.outputs, in.references);
    rep.has_bleu_r = true;
  }
  rep.ppl = lm.perplexity(in.outputs, vocab);
  rep.gm = rep.has_bleu_r && rep.bleu_r > 0 && rep.acc > 0 && rep.bleu_s > 0 && rep.ppl > 1
               ? gm_score(rep.acc, rep.bleu_s, rep.bleu_r, rep.ppl)
               : (rep.acc > 0 && rep.bleu_s > 0 && rep.ppl > 1
                      ? gm_score_no_ref(rep.acc, rep.bleu_s, rep.ppl)
                      : 0.0);
  int identical = 0;
  for (size_t i = 0; i < in.outputs.size(); ++i)
    if (in.outputs[i] == in.source->sentences[i]) ++identical;
  rep.identity_fraction = static_cast<double>(identical) / in.outputs.size();

  for (int y = 0; y < in.source->num_styles; ++y) {
    StyleBreakdown b;
    b.style = y;
    std::vector<Sentence> outs, srcs;
    int hits = 0;
    for (size_t i = 0; i < in.outputs.size(); ++i) {
      if (in.source->labels[i] != y) continue;
      b.count++;
      outs.push_back(in.outputs[i]);
      srcs.push_back(in.source->sentences[i]);
      if (clf.predict(clf.content_ids(in.outputs[i], vocab)) == in.target_labels[i]) ++hits;
    }
    if (b.count) {
      b.acc = 100.0 * hits / b.count;
      b.bleu_s = bleu_single(outs, srcs);
    }
    rep.per_style.push_back(b);
  }
  return rep;
}

// Comparison CSV matching the automatic-metric columns.
inline void write_comparison_csv(const std::string& path,
                                 const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write comparison csv: " + path);
  os << "system,acc,bleu_s,bleu_r,ppl,gm\n";
  for (const auto& [name, r] : rows) {
    os << name << "," << r.acc << "," << r.bleu_s << ",";
    if (r.has_bleu_r) os << r.bleu_r;
    os << "," << r.ppl << "," << r.gm << "\n";
  }
}

}  // namespace stylet::eval
