#pragma once

// Prototype-form instantiation: a straight-through BiLSTM masker producing
// binary content masks, complementary content/style prototypes, a rationale
// loss (classification fidelity + L1 compactness), mask-run collapsing, and
// per-style seq2seq infilling decoders with bilinear attention trained in a
// second step with the masker frozen.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stylet/data.hpp"
#include "stylet/decode.hpp"
#include "stylet/embedding_model.hpp"
#include "stylet/errors.hpp"
#include "stylet/nn.hpp"
#include "stylet/tensor.hpp"

namespace stylet::proto {

using embed::Example;

struct ProtoConfig {
  int embed_dim = 300;
  int masker_hidden = 256;
  int cls_hidden = 256;
  int enc_hidden = 256;
  int dec_hidden = 256;
  int num_styles = 2;
  int max_len = 20;
  double gamma = 1.0;
  double alpha = 0.150;
  double rat_lr = 5e-4;
  double cyclic_base_lr = 1e-4;
  double cyclic_max_lr = 1e-3;
  int cyclic_interval = 6000;
  int epochs_rationale = 10;
  int epochs_infill = 30;
  int batch_size = 64;
  int eval_every = 5;
  uint64_t seed = 42;
};

// Seq2seq infiller: unidirectional LSTM encoder over the collapsed content
// prototype, LSTM decoder with a bilinear attention over encoder states.
struct InfillDecoder {
  nn::LstmParams enc;
  nn::LstmParams dec;
  nn::Param w_att;   // [dec_hidden, enc_hidden]
  nn::Param w_out;   // [dec_hidden + enc_hidden, vocab]
  nn::Param b_out;
};

struct ProtoModelState {
  ProtoConfig cfg;
  int vocab_size = 0;
  // Masker (owns its embedding so freezing it after step 1 is airtight).
  nn::Param mask_embed;
  nn::BiLstmParams masker;
  nn::Param w_mask, b_mask;
  // Style-prototype classifier.
  nn::Param cls_embed;
  nn::BiLstmParams cls_enc;
  nn::Param w_cls, b_cls;
  // Infillers share one embedding across styles.
  nn::Param inf_embed;
  std::vector<InfillDecoder> infill;

  static ProtoModelState init(int vocab_size, const ProtoConfig& cfg) {
    std::mt19937_64 rng = nn::make_rng(cfg.seed, 801);
    ProtoModelState m;
    m.cfg = cfg;
    m.vocab_size = vocab_size;
    m.mask_embed = nn::uniform_param("proto.mask_embed", {vocab_size, cfg.embed_dim}, rng);
    m.masker = nn::make_bilstm("proto.masker", cfg.embed_dim, cfg.masker_hidden, rng);
    m.w_mask = nn::uniform_param("proto.w_mask", {2 * cfg.masker_hidden, 1}, rng);
    // Start with an open style mask (content logits below 0.5) so the
    // classifier sees the full sentence before compactness starts pruning.
    m.b_mask = nn::zeros_param("proto.b_mask", {1});
    m.b_mask.value[0] = -2.0;
    m.cls_embed = nn::uniform_param("proto.cls_embed", {vocab_size, cfg.embed_dim}, rng);
    m.cls_enc = nn::make_bilstm("proto.cls_enc", cfg.embed_dim, cfg.cls_hidden, rng);
    m.w_cls = nn::uniform_param("proto.w_cls", {2 * cfg.cls_hidden, cfg.num_styles}, rng);
    m.b_cls = nn::zeros_param("proto.b_cls", {cfg.num_styles});
    m.inf_embed = nn::uniform_param("proto.inf_embed", {vocab_size, cfg.embed_dim}, rng);
    for (int y = 0; y < cfg.num_styles; ++y) {
      std::string prefix = "proto.inf" + std::to_string(y);
      InfillDecoder d;
      d.enc = nn::make_lstm(prefix + ".enc", cfg.embed_dim, cfg.enc_hidden, rng);
      d.dec = nn::make_lstm(prefix + ".dec", cfg.embed_dim, cfg.dec_hidden, rng);
      d.w_att = nn::uniform_param(prefix + ".w_att", {cfg.dec_hidden, cfg.enc_hidden}, rng);
      d.w_out = nn::uniform_param(prefix + ".w_out", {cfg.dec_hidden + cfg.enc_hidden, vocab_size},
                                  rng);
      d.b_out = nn::zeros_param(prefix + ".b_out", {vocab_size});
      m.infill.push_back(std::move(d));
    }
    return m;
  }

  std::vector<nn::Param*> masker_params() {
    return {&mask_embed, &masker.fwd.w, &masker.fwd.b, &masker.bwd.w, &masker.bwd.b,
            &w_mask, &b_mask, &cls_embed, &cls_enc.fwd.w, &cls_enc.fwd.b, &cls_enc.bwd.w,
            &cls_enc.bwd.b, &w_cls, &b_cls};
  }
  std::vector<nn::Param*> infiller_params() {
    std::vector<nn::Param*> out = {&inf_embed};
    for (InfillDecoder& d : infill) {
      out.push_back(&d.enc.w);
      out.push_back(&d.enc.b);
      out.push_back(&d.dec.w);
      out.push_back(&d.dec.b);
      out.push_back(&d.w_att);
      out.push_back(&d.w_out);
      out.push_back(&d.b_out);
    }
    return out;
  }
  std::vector<nn::Param*> all_params() {
    auto out = masker_params();
    for (nn::Param* p : infiller_params()) out.push_back(p);
    return out;
  }
  void save(const std::string& path) { nn::save_checkpoint(path, all_params()); }
  void load(const std::string& path) { nn::load_checkpoint(path, all_params()); }
};

struct MaskVector {
  std::vector<int> hard;     // 0/1 forward values (1 = content)
  std::vector<double> soft;  // sigmoid logits in (0,1)
  ad::Tensor tensor;         // [T, 1] straight-through values on the tape
};

// Per-token content mask: hard threshold at 0.5 forward, soft gradients via
// the straight-through estimator. `soft_mode` skips the hardening and leaves
// the sigmoid values on the tape; finite-difference validation uses it
// because the hard forward is piecewise constant.
inline MaskVector mask_forward(ad::Tape& t, nn::Binding& bind, ProtoModelState& m,
                               const std::vector<int>& ids, bool soft_mode = false) {
  if (ids.empty()) throw ValueError("mask_forward on empty sentence");
  ad::Tensor emb = t.embed_lookup(bind.use(m.mask_embed), ids);
  nn::BiLstmOut enc = nn::bilstm_run(t, bind, emb, m.masker);
  ad::Tensor states = enc.states[0];
  for (size_t i = 1; i < enc.states.size(); ++i) states = t.concat(states, enc.states[i], 0);
  ad::Tensor logits = t.sigmoid(t.add(t.matmul(states, bind.use(m.w_mask)), bind.use(m.b_mask)));
  MaskVector mask;
  mask.tensor = soft_mode ? logits : t.ste_binarize(logits);
  mask.soft = logits.value();
  for (double v : mask.soft) mask.hard.push_back(v > 0.5 ? 1 : 0);
  return mask;
}

struct Prototype {
  std::vector<std::string> tokens;  // with [MASK] placeholders
  std::vector<int> origin_mask;     // 1 where the original token is kept
};

// Content keeps tokens where the content mask is 1; style is the exact
// complement. No position carries a real token in both.
inline std::pair<Prototype, Prototype> split_prototypes(const std::vector<std::string>& tokens,
                                                        const std::vector<int>& content_mask) {
  if (tokens.size() != content_mask.size())
    throw ValueError("split_prototypes: mask length mismatch");
  const std::string& mask_tok = data::reserved_tokens()[data::kMask];
  Prototype content, style;
  for (size_t i = 0; i < tokens.size(); ++i) {
    bool keep = content_mask[i] == 1;
    content.tokens.push_back(keep ? tokens[i] : mask_tok);
    content.origin_mask.push_back(keep ? 1 : 0);
    style.tokens.push_back(keep ? mask_tok : tokens[i]);
    style.origin_mask.push_back(keep ? 0 : 1);
  }
  return {content, style};
}

// Maximal runs of consecutive [MASK] placeholders become one token.
inline std::vector<std::string> collapse_mask_runs(const std::vector<std::string>& tokens) {
  const std::string& mask_tok = data::reserved_tokens()[data::kMask];
  std::vector<std::string> out;
  for (const std::string& tok : tokens) {
    if (tok == mask_tok && !out.empty() && out.back() == mask_tok) continue;
    out.push_back(tok);
  }
  return out;
}

// Style-prototype classifier logits: masked positions take zero word
// vectors, so the mask multiplies the embeddings (ST gradients flow to the
// masker).
inline ad::Tensor style_proto_logits(ad::Tape& t, nn::Binding& bind, ProtoModelState& m,
                                     const std::vector<int>& ids, ad::Tensor style_mask_col) {
  ad::Tensor emb = t.embed_lookup(bind.use(m.cls_embed), ids);
  ad::Tensor ones_row = t.leaf({1, m.cfg.embed_dim}, std::vector<double>(m.cfg.embed_dim, 1.0));
  ad::Tensor mask_full = t.matmul(style_mask_col, ones_row);  // [T, e]
  ad::Tensor masked = t.mul(emb, mask_full);
  nn::BiLstmOut enc = nn::bilstm_run(t, bind, masked, m.cls_enc);
  return nn::linear(t, enc.final_concat, bind.use(m.w_cls), bind.use(m.b_cls));
}

struct RationaleBreakdown {
  double total = 0.0;
  double cls = 0.0;
  double compact = 0.0;
};

// gamma * cross-entropy of the style-prototype classifier plus
// alpha * mean(style mask).
inline ad::Tensor rationale_loss(ad::Tape& t, nn::Binding& bind, ProtoModelState& m,
                                 const std::vector<Example>& batch, double gamma, double alpha,
                                 RationaleBreakdown* breakdown, bool soft_masks = false) {
  if (batch.empty()) throw ValueError("empty batch");
  if (alpha < 0 || gamma <= 0) throw ValueError("rationale_loss needs alpha >= 0, gamma > 0");
  std::vector<ad::Tensor> cls_terms, compact_terms;
  for (const Example& ex : batch) {
    MaskVector mask = mask_forward(t, bind, m, ex.content_ids, soft_masks);
    ad::Tensor style_mask = t.sub(t.scalar(1.0), mask.tensor);  // [T,1]
    ad::Tensor logits = style_proto_logits(t, bind, m, ex.content_ids, style_mask);
    cls_terms.push_back(t.scale(t.pick(t.log_softmax(logits), {ex.label}), -gamma));
    compact_terms.push_back(t.scale(t.mean(style_mask), alpha));
  }
  double inv = 1.0 / static_cast<double>(batch.size());
  ad::Tensor cls = t.scale(t.add_n(cls_terms), inv);
  ad::Tensor compact = t.scale(t.add_n(compact_terms), inv);
  ad::Tensor total = t.add(cls, compact);
  if (breakdown) {
    breakdown->cls = cls.item();
    breakdown->compact = compact.item();
    breakdown->total = total.item();
  }
  return total;
}

// Hard content masks with the masker frozen (forward only).
inline std::vector<int> compute_mask(ProtoModelState& m, const std::vector<int>& ids) {
  ad::Tape t;
  nn::Binding bind(t);
  return mask_forward(t, bind, m, ids).hard;
}

// Collapsed content-prototype token ids for an example under the frozen
// masker. [MASK] maps to its reserved id.
inline std::vector<int> collapsed_prototype_ids(ProtoModelState& m, const data::Vocab& vocab,
                                                const std::vector<int>& ids) {
  std::vector<int> out;
  for (size_t i = 0; i < ids.size(); ++i) out.push_back(ids[i]);
  std::vector<int> mask = compute_mask(m, ids);
  std::vector<int> collapsed;
  for (size_t i = 0; i < out.size(); ++i) {
    int tok = mask[i] == 1 ? out[i] : data::kMask;
    if (tok == data::kMask && !collapsed.empty() && collapsed.back() == data::kMask) continue;
    collapsed.push_back(tok);
  }
  return collapsed;
}

// Attention-equipped teacher-forced infill logits from collapsed prototype
// ids to the full target sequence.
inline ad::Tensor infill_logits(ad::Tape& t, nn::Binding& bind, ProtoModelState& m, int style,
                                const std::vector<int>& proto_ids,
                                const std::vector<int>& target_ids) {
  if (style < 0 || style >= m.cfg.num_styles) throw ValueError("style index out of range");
  if (proto_ids.empty()) throw ValueError("empty prototype");
  InfillDecoder& inf = m.infill[style];
  ad::Tensor emb_p = t.embed_lookup(bind.use(m.inf_embed), proto_ids);
  ad::Tensor enc_w = bind.use(inf.enc.w), enc_b = bind.use(inf.enc.b);
  nn::LstmState es = nn::lstm_zero_state(t, m.cfg.enc_hidden);
  ad::Tensor enc_states;
  for (size_t i = 0; i < proto_ids.size(); ++i) {
    es = nn::lstm_step(t, t.slice(emb_p, 0, static_cast<int>(i), 1), es, enc_w, enc_b,
                       m.cfg.enc_hidden);
    enc_states = i == 0 ? es.h : t.concat(enc_states, es.h, 0);
  }

  std::vector<int> inputs = {data::kBos};
  inputs.insert(inputs.end(), target_ids.begin(), target_ids.end() - 1);
  ad::Tensor emb_in = t.embed_lookup(bind.use(m.inf_embed), inputs);
  ad::Tensor dec_w = bind.use(inf.dec.w), dec_b = bind.use(inf.dec.b);
  ad::Tensor w_att = bind.use(inf.w_att);
  ad::Tensor w_out = bind.use(inf.w_out), b_out = bind.use(inf.b_out);
  int tp = static_cast<int>(proto_ids.size());

  nn::LstmState ds = nn::lstm_zero_state(t, m.cfg.dec_hidden);
  ad::Tensor out;
  for (size_t i = 0; i < inputs.size(); ++i) {
    ds = nn::lstm_step(t, t.slice(emb_in, 0, static_cast<int>(i), 1), ds, dec_w, dec_b,
                       m.cfg.dec_hidden);
    // Bilinear attention scores over encoder states.
    ad::Tensor q = t.matmul(ds.h, w_att);                          // [1, enc_h]
    ad::Tensor scores = t.matmul(enc_states, t.reshape(q, {m.cfg.enc_hidden, 1}));  // [tp, 1]
    ad::Tensor attn = t.softmax(t.reshape(scores, {1, tp}));
    ad::Tensor ctx = t.matmul(attn, enc_states);                   // [1, enc_h]
    ad::Tensor logits = nn::linear(t, t.concat(ds.h, ctx, 1), w_out, b_out);
    out = i == 0 ? logits : t.concat(out, logits, 0);
  }
  return out;
}

// Teacher-forced cross-entropy of reconstructing x from its collapsed
// content prototype via the style-y infiller. Masker must be frozen.
inline ad::Tensor infill_loss(ad::Tape& t, nn::Binding& bind, ProtoModelState& m,
                              const std::vector<Example>& batch, const data::Vocab& vocab,
                              double* value) {
  if (batch.empty()) throw ValueError("empty batch");
  std::vector<ad::Tensor> terms;
  for (const Example& ex : batch) {
    std::vector<int> proto_ids = collapsed_prototype_ids(m, vocab, ex.content_ids);
    std::vector<int> targets = ex.content_ids;
    targets.push_back(data::kEos);
    terms.push_back(
        embed::sequence_ce(t, infill_logits(t, bind, m, ex.label, proto_ids, targets), targets));
  }
  ad::Tensor loss = t.scale(t.add_n(terms), 1.0 / batch.size());
  if (value) *value = loss.item();
  return loss;
}

// Triangular cyclic learning rate between base and max.
inline double cyclic_lr(int64_t step, double base, double max, int interval) {
  if (interval <= 0) throw ValueError("cyclic interval must be positive");
  double cycle = std::floor(1.0 + static_cast<double>(step) / (2.0 * interval));
  double x = std::fabs(static_cast<double>(step) / interval - 2.0 * cycle + 1.0);
  return base + (max - base) * std::max(0.0, 1.0 - x);
}

struct TwoStepReport {
  std::vector<double> rationale_losses;  // per epoch
  std::vector<double> infill_losses;     // per epoch
  double masker_cls_accuracy = 0.0;      // style-prototype classifier, step 1 end
  bool degenerate_masker = false;
};

using EpochHook = std::function<void(const std::string& phase, int epoch, double loss)>;

// Step 1: minimize the rationale loss at a fixed learning rate.
inline void rationale_phase(ProtoModelState& m, const std::vector<Example>& examples,
                            TwoStepReport& report, const EpochHook& hook = nullptr) {
  const ProtoConfig& cfg = m.cfg;
  nn::AdamState rat_adam;
  rat_adam.lr = cfg.rat_lr;
  std::vector<nn::Param*> mask_params = m.masker_params();
  for (int epoch = 0; epoch < cfg.epochs_rationale; ++epoch) {
    double ep = 0;
    int nb = 0;
    std::mt19937_64 rng = nn::make_rng(cfg.seed, 810, epoch);
    for (const auto& idx : data::shuffled_batches(examples.size(), cfg.batch_size, rng)) {
      std::vector<Example> batch;
      for (int i : idx) batch.push_back(examples[i]);
      ad::Tape t;
      nn::Binding bind(t);
      RationaleBreakdown b;
      ad::Tensor loss = rationale_loss(t, bind, m, batch, cfg.gamma, cfg.alpha, &b);
      if (!std::isfinite(b.total)) throw DomainError("non-finite rationale loss");
      t.backward(loss);
      bind.collect();
      nn::adam_step(mask_params, rat_adam);
      ep += b.total;
      ++nb;
    }
    report.rationale_losses.push_back(ep / nb);
    if (hook) hook("rationale", epoch, ep / nb);
  }
}

// Style-prototype classifier accuracy under the current masker.
inline double masker_classifier_accuracy(ProtoModelState& m,
                                         const std::vector<Example>& examples) {
  int hits = 0;
  for (const Example& ex : examples) {
    ad::Tape t;
    nn::Binding bind(t);
    MaskVector mask = mask_forward(t, bind, m, ex.content_ids);
    ad::Tensor style_mask = t.sub(t.scalar(1.0), mask.tensor);
    ad::Tensor logits = style_proto_logits(t, bind, m, ex.content_ids, style_mask);
    const std::vector<double>& v = logits.value();
    int pred = static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
    if (pred == ex.label) ++hits;
  }
  return static_cast<double>(hits) / examples.size();
}

// Step 2: train the infillers under a triangular cyclic learning rate; the
// masker is not touched.
inline void infill_phase(ProtoModelState& m, const std::vector<Example>& examples,
                         const data::Vocab& vocab, TwoStepReport& report,
                         const EpochHook& hook = nullptr) {
  const ProtoConfig& cfg = m.cfg;
  nn::AdamState inf_adam;
  std::vector<nn::Param*> inf_params = m.infiller_params();
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs_infill; ++epoch) {
    double ep = 0;
    int nb = 0;
    std::mt19937_64 rng = nn::make_rng(cfg.seed, 820, epoch);
    for (const auto& idx : data::shuffled_batches(examples.size(), cfg.batch_size, rng)) {
      std::vector<Example> batch;
      for (int i : idx) batch.push_back(examples[i]);
      ad::Tape t;
      nn::Binding bind(t);
      double value = 0;
      ad::Tensor loss = infill_loss(t, bind, m, batch, vocab, &value);
      if (!std::isfinite(value)) throw DomainError("non-finite infill loss");
      t.backward(loss);
      bind.collect();
      inf_adam.lr = cyclic_lr(step, cfg.cyclic_base_lr, cfg.cyclic_max_lr, cfg.cyclic_interval);
      nn::adam_step(inf_params, inf_adam);
      ++step;
      ep += value;
      ++nb;
    }
    report.infill_losses.push_back(ep / nb);
    if (hook) hook("infill", epoch, ep / nb);
  }
}

// The two-step schedule: rationale first, then infilling with the masker
// frozen; a masker whose classifier falls below the majority baseline is
// flagged as degenerate.
inline TwoStepReport two_step_train(ProtoModelState& m, const std::vector<Example>& examples,
                                    const data::Vocab& vocab, const data::Corpus& train_corpus,
                                    const EpochHook& hook = nullptr) {
  TwoStepReport report;
  rationale_phase(m, examples, report, hook);
  report.masker_cls_accuracy = masker_classifier_accuracy(m, examples);
  if (report.masker_cls_accuracy < train_corpus.majority_fraction()) {
    report.degenerate_masker = true;
    if (hook) hook("warning", -1, report.masker_cls_accuracy);
  }
  infill_phase(m, examples, vocab, report, hook);
  return report;
}

namespace detail {

struct InfillStepFn {
  ProtoModelState* m;
  int style;
  std::vector<double> enc_states;  // [tp * enc_hidden]
  int tp;

  decode::Step operator()(int prev, const std::vector<double>& h,
                          const std::vector<double>& c) const {
    ProtoModelState& st = *m;
    InfillDecoder& inf = st.infill[style];
    ad::Tape t;
    nn::Binding bind(t);
    ad::Tensor E = t.leaf({tp, st.cfg.enc_hidden}, enc_states);
    ad::Tensor emb = t.embed_lookup(bind.frozen(st.inf_embed), {prev});
    nn::LstmState s{t.leaf({1, st.cfg.dec_hidden}, h), t.leaf({1, st.cfg.dec_hidden}, c)};
    s = nn::lstm_step(t, emb, s, bind.frozen(inf.dec.w), bind.frozen(inf.dec.b),
                      st.cfg.dec_hidden);
    ad::Tensor q = t.matmul(s.h, bind.frozen(inf.w_att));
    ad::Tensor scores = t.matmul(E, t.reshape(q, {st.cfg.enc_hidden, 1}));
    ad::Tensor attn = t.softmax(t.reshape(scores, {1, tp}));
    ad::Tensor ctx = t.matmul(attn, E);
    ad::Tensor logits =
        nn::linear(t, t.concat(s.h, ctx, 1), bind.frozen(inf.w_out), bind.frozen(inf.b_out));
    decode::Step out;
    out.log_probs = t.log_softmax(logits).value();
    out.log_probs[data::kPad] = -1e30;
    out.log_probs[data::kBos] = -1e30;
    out.h = s.h.value();
    out.c = s.c.value();
    return out;
  }
};

}  // namespace detail

// Decode with the style-y infiller from given prototype ids.
inline std::vector<int> infill_decode_ids(ProtoModelState& m, int style,
                                          const std::vector<int>& proto_ids,
                                          embed::DecodeMode mode, int max_decode_len) {
  detail::InfillStepFn step;
  step.m = &m;
  step.style = style;
  step.tp = static_cast<int>(proto_ids.size());
  {
    ad::Tape t;
    nn::Binding bind(t);
    ad::Tensor emb = t.embed_lookup(bind.frozen(m.inf_embed), proto_ids);
    nn::LstmState es = nn::lstm_zero_state(t, m.cfg.enc_hidden);
    for (size_t i = 0; i < proto_ids.size(); ++i) {
      es = nn::lstm_step(t, t.slice(emb, 0, static_cast<int>(i), 1), es,
                         bind.frozen(m.infill[style].enc.w), bind.frozen(m.infill[style].enc.b),
                         m.cfg.enc_hidden);
      const std::vector<double>& hv = es.h.value();
      step.enc_states.insert(step.enc_states.end(), hv.begin(), hv.end());
    }
  }
  return mode.beam_width <= 1
             ? decode::greedy(step, m.cfg.dec_hidden, max_decode_len)
             : decode::beam(step, m.cfg.dec_hidden, max_decode_len, mode.beam_width);
}

struct TransferResult {
  std::vector<std::string> output;
  std::vector<int> content_mask;
  bool identity_prototype = false;  // no style tokens were found
};

// mask -> content prototype -> collapse -> decode with the target style's
// infiller.
inline TransferResult transfer_prototype(ProtoModelState& m, const data::Vocab& vocab,
                                         const std::vector<std::string>& tokens, int y_target,
                                         embed::DecodeMode mode, int max_decode_len) {
  if (y_target < 0 || y_target >= m.cfg.num_styles) throw ValueError("target style out of range");
  std::vector<int> ids = data::encode_content(tokens, vocab, m.cfg.max_len);
  if (ids.empty()) ids.push_back(data::kUnk);
  TransferResult result;
  result.content_mask = compute_mask(m, ids);
  result.identity_prototype =
      std::count(result.content_mask.begin(), result.content_mask.end(), 0) == 0;
  std::vector<int> proto_ids = collapsed_prototype_ids(m, vocab, ids);
  std::vector<int> out_ids = infill_decode_ids(m, y_target, proto_ids, mode, max_decode_len);
  result.output = data::decode_ids(out_ids, vocab);
  return result;
}

// Per-sentence prototypes as JSON lines for inspection and reuse.
inline void write_prototypes_jsonl(const std::string& path, ProtoModelState& m,
                                   const data::Corpus& corpus, const data::Vocab& vocab) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write prototypes: " + path);
  for (size_t i = 0; i < corpus.size(); ++i) {
    std::vector<int> ids = data::encode_content(corpus.sentences[i], vocab, m.cfg.max_len);
    if (ids.empty()) ids.push_back(data::kUnk);
    std::vector<int> mask = compute_mask(m, ids);
    std::vector<std::string> clipped(corpus.sentences[i].begin(),
                                     corpus.sentences[i].begin() + ids.size());
    auto [content, style] = split_prototypes(clipped, mask);
    nlohmann::json j;
    j["tokens"] = clipped;
    j["content_mask"] = mask;
    j["collapsed"] = collapse_mask_runs(content.tokens);
    os << j.dump() << "\n";
  }
}

}  // namespace stylet::proto
