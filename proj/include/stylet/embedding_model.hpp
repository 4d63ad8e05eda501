#pragma once

// Embedding-form instantiation: shared BiLSTM encoder with content/style
// heads, one LSTM decoder per style (content code concatenated on inputs and
// hidden states), a style classifier on s, and adversarially estimated
// marginal-KL regularization. Includes the representation-splitting (RS)
// variant with a single decoder over (s, c).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "stylet/data.hpp"
#include "stylet/decode.hpp"
#include "stylet/distributions.hpp"
#include "stylet/errors.hpp"
#include "stylet/nn.hpp"
#include "stylet/tensor.hpp"

namespace stylet::embed {

struct TermToggles {
  bool use_recon = true;        // term 1, always on
  bool use_marginal_kl = true;  // term 3
  bool use_js = true;           // term 4
  bool use_cls = true;          // classification loss
  double gamma = 1.0;

  void validate() const {
    if (!use_recon) throw ConfigError("reconstruction term cannot be disabled");
    if (use_js && !use_marginal_kl)
      throw ConfigError("the JS term requires the marginal KL term");
    if (gamma < 0) throw ConfigError("gamma must be nonnegative");
  }
  std::string tag() const {
    std::string s = "recon";
    if (use_marginal_kl) s += "+mkl";
    if (use_js) s += "+js";
    if (use_cls) s += "+cls";
    return s;
  }
};

struct EmbedConfig {
  int embed_dim = 300;
  int enc_hidden = 256;
  int d_c = 26;
  int d_s = 26;
  int dec_hidden = 256;
  int num_styles = 2;
  int max_len = 20;
  TermToggles toggles;
  double lr = 1e-3;
  double disc_lr = 5e-2;
  int disc_steps = 5;
  int batch_size = 64;
  int epochs = 20;
  int eval_every = 2;
  uint64_t seed = 42;
};

// MLP discriminator d -> 2d -> 1 with ReLU.
struct Discriminator {
  nn::Param w1, b1, w2, b2;

  static Discriminator make(const std::string& prefix, int dim, std::mt19937_64& rng) {
    Discriminator d;
    d.w1 = nn::uniform_param(prefix + ".w1", {dim, 2 * dim}, rng, -0.2, 0.2);
    d.b1 = nn::zeros_param(prefix + ".b1", {2 * dim});
    d.w2 = nn::uniform_param(prefix + ".w2", {2 * dim, 1}, rng, -0.2, 0.2);
    d.b2 = nn::zeros_param(prefix + ".b2", {1});
    return d;
  }

  ad::Tensor logit(ad::Tape& t, nn::Binding& bind, ad::Tensor x, bool frozen = false) {
    auto p = [&](nn::Param& q) { return frozen ? bind.frozen(q) : bind.use(q); };
    ad::Tensor h = t.relu(t.add(t.matmul(x, p(w1)), p(b1)));
    return t.add(t.matmul(h, p(w2)), p(b2));
  }

  std::vector<nn::Param*> params() { return {&w1, &b1, &w2, &b2}; }
};

struct StyleDecoder {
  nn::LstmParams lstm;   // input [embed; code]
  nn::Param w_out, b_out;  // projection on [hidden; code]
};

struct EmbedModelState {
  EmbedConfig cfg;
  int vocab_size = 0;
  nn::Param embedding;
  nn::BiLstmParams encoder;
  nn::Param w_c, b_c, w_s, b_s;
  std::vector<StyleDecoder> decoders;  // one per style
  nn::Param w_cls, b_cls;
  std::vector<Discriminator> style_discs;  // per style, for 3+4 jointly
  Discriminator pooled_disc;               // for the marginal-KL-only ablation
  int64_t disc_step_count = 0;
  int64_t gen_step_count = 0;

  static EmbedModelState init(int vocab_size, const EmbedConfig& cfg) {
    cfg.toggles.validate();
    std::mt19937_64 rng = nn::make_rng(cfg.seed, 601);
    EmbedModelState m;
    m.cfg = cfg;
    m.vocab_size = vocab_size;
    m.embedding = nn::uniform_param("emb.embedding", {vocab_size, cfg.embed_dim}, rng);
    m.encoder = nn::make_bilstm("emb.enc", cfg.embed_dim, cfg.enc_hidden, rng);
    m.w_c = nn::uniform_param("emb.w_c", {2 * cfg.enc_hidden, cfg.d_c}, rng);
    m.b_c = nn::zeros_param("emb.b_c", {cfg.d_c});
    m.w_s = nn::uniform_param("emb.w_s", {2 * cfg.enc_hidden, cfg.d_s}, rng);
    m.b_s = nn::zeros_param("emb.b_s", {cfg.d_s});
    for (int y = 0; y < cfg.num_styles; ++y) {
      StyleDecoder dec;
      std::string prefix = "emb.dec" + std::to_string(y);
      dec.lstm = nn::make_lstm(prefix + ".lstm", cfg.embed_dim + cfg.d_c, cfg.dec_hidden, rng);
      dec.w_out = nn::uniform_param(prefix + ".w_out", {cfg.dec_hidden + cfg.d_c, vocab_size}, rng);
      dec.b_out = nn::zeros_param(prefix + ".b_out", {vocab_size});
      m.decoders.push_back(std::move(dec));
    }
    m.w_cls = nn::uniform_param("emb.w_cls", {cfg.d_s, cfg.num_styles}, rng);
    m.b_cls = nn::zeros_param("emb.b_cls", {cfg.num_styles});
    for (int y = 0; y < cfg.num_styles; ++y)
      m.style_discs.push_back(Discriminator::make("emb.disc" + std::to_string(y), cfg.d_c, rng));
    m.pooled_disc = Discriminator::make("emb.disc_pooled", cfg.d_c, rng);
    return m;
  }

  std::vector<nn::Param*> generator_params() {
    std::vector<nn::Param*> out = {&embedding, &encoder.fwd.w, &encoder.fwd.b,
                                   &encoder.bwd.w, &encoder.bwd.b, &w_c, &b_c, &w_s, &b_s,
                                   &w_cls, &b_cls};
    for (StyleDecoder& d : decoders) {
      out.push_back(&d.lstm.w);
      out.push_back(&d.lstm.b);
      out.push_back(&d.w_out);
      out.push_back(&d.b_out);
    }
    return out;
  }
  std::vector<nn::Param*> disc_params() {
    std::vector<nn::Param*> out;
    for (Discriminator& d : style_discs)
      for (nn::Param* p : d.params()) out.push_back(p);
    for (nn::Param* p : pooled_disc.params()) out.push_back(p);
    return out;
  }
  std::vector<nn::Param*> all_params() {
    std::vector<nn::Param*> out = generator_params();
    for (nn::Param* p : disc_params()) out.push_back(p);
    return out;
  }
  void save(const std::string& path) { nn::save_checkpoint(path, all_params()); }
  void load(const std::string& path) { nn::load_checkpoint(path, all_params()); }
};

struct Codes {
  ad::Tensor c;
  ad::Tensor s;
};

// Degenerate posteriors: one BiLSTM pass, two linear heads on the concat of
// the final hidden states of both directions.
inline Codes encode_codes(ad::Tape& t, nn::Binding& bind, EmbedModelState& m,
                          const std::vector<int>& content_ids) {
  if (content_ids.empty()) throw ValueError("encode_codes on empty sentence");
  ad::Tensor emb = t.embed_lookup(bind.use(m.embedding), content_ids);
  nn::BiLstmOut enc = nn::bilstm_run(t, bind, emb, m.encoder);
  Codes codes;
  codes.c = nn::linear(t, enc.final_concat, bind.use(m.w_c), bind.use(m.b_c));
  codes.s = nn::linear(t, enc.final_concat, bind.use(m.w_s), bind.use(m.b_s));
  return codes;
}

// Teacher-forced per-step vocabulary logits. Step t consumes
// [embed(x_{t-1}); c] with x_0 = BOS; the projection sees [h_t; c].
inline ad::Tensor decode_logits(ad::Tape& t, nn::Binding& bind, EmbedModelState& m, int style,
                                ad::Tensor code, const std::vector<int>& target_ids) {
  if (style < 0 || style >= m.cfg.num_styles) throw ValueError("style index out of range");
  StyleDecoder& dec = m.decoders[style];
  std::vector<int> inputs = {data::kBos};
  inputs.insert(inputs.end(), target_ids.begin(), target_ids.end() - 1);
  ad::Tensor emb = t.embed_lookup(bind.use(m.embedding), inputs);
  ad::Tensor w = bind.use(dec.lstm.w), b = bind.use(dec.lstm.b);
  ad::Tensor w_out = bind.use(dec.w_out), b_out = bind.use(dec.b_out);

  nn::LstmState s = nn::lstm_zero_state(t, m.cfg.dec_hidden);
  std::vector<ad::Tensor> step_logits;
  for (size_t i = 0; i < inputs.size(); ++i) {
    ad::Tensor x = t.concat(t.slice(emb, 0, static_cast<int>(i), 1), code, 1);
    s = nn::lstm_step(t, x, s, w, b, m.cfg.dec_hidden);
    ad::Tensor proj_in = t.concat(s.h, code, 1);
    step_logits.push_back(nn::linear(t, proj_in, w_out, b_out));
  }
  ad::Tensor out = step_logits[0];
  for (size_t i = 1; i < step_logits.size(); ++i) out = t.concat(out, step_logits[i], 0);
  return out;
}

// Token-sum cross-entropy of a teacher-forced sequence.
inline ad::Tensor sequence_ce(ad::Tape& t, ad::Tensor logits, const std::vector<int>& target_ids) {
  return t.scale(t.sum(t.pick(t.log_softmax(logits), target_ids)), -1.0);
}

struct Example {
  std::vector<int> content_ids;
  int label = 0;
};

inline std::vector<Example> make_examples(const data::Corpus& corpus, const data::Vocab& vocab,
                                          int max_len) {
  std::vector<Example> out;
  out.reserve(corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i)
    out.push_back({data::encode_content(corpus.sentences[i], vocab, max_len), corpus.labels[i]});
  return out;
}

struct LossBreakdown {
  double total = 0.0;
  double recon = 0.0;
  double cls = 0.0;
  double kl = 0.0;
};

// Total loss on one batch with discriminators frozen. Disabled toggles
// contribute exactly zero to the value and the gradient.
inline ad::Tensor embedding_total_loss(ad::Tape& t, nn::Binding& bind, EmbedModelState& m,
                                       const std::vector<Example>& batch,
                                       const TermToggles& toggles, LossBreakdown* breakdown) {
  toggles.validate();
  if (batch.empty()) throw ValueError("empty batch");
  std::vector<ad::Tensor> recon_terms, cls_terms, kl_terms;
  for (const Example& ex : batch) {
    Codes codes = encode_codes(t, bind, m, ex.content_ids);
    std::vector<int> targets = ex.content_ids;
    targets.push_back(data::kEos);
    recon_terms.push_back(
        sequence_ce(t, decode_logits(t, bind, m, ex.label, codes.c, targets), targets));
    if (toggles.use_cls) {
      ad::Tensor logits = nn::linear(t, codes.s, bind.use(m.w_cls), bind.use(m.b_cls));
      cls_terms.push_back(t.scale(t.pick(t.log_softmax(logits), {ex.label}), -1.0));
    }
    if (toggles.use_marginal_kl) {
      Discriminator& disc = toggles.use_js ? m.style_discs[ex.label] : m.pooled_disc;
      kl_terms.push_back(disc.logit(t, bind, codes.c, /*frozen=*/true));
    }
  }
  double inv = 1.0 / static_cast<double>(batch.size());
  ad::Tensor recon = t.scale(t.add_n(recon_terms), inv);
  ad::Tensor total = recon;
  ad::Tensor cls, kl;
  if (toggles.use_cls) {
    cls = t.scale(t.add_n(cls_terms), toggles.gamma * inv);
    total = t.add(total, cls);
  }
  if (toggles.use_marginal_kl) {
    kl = t.scale(t.add_n(kl_terms), inv);
    total = t.add(total, kl);
  }
  if (breakdown) {
    breakdown->recon = recon.item();
    breakdown->cls = toggles.use_cls ? cls.item() : 0.0;
    breakdown->kl = toggles.use_marginal_kl ? kl.item() : 0.0;
    breakdown->total = total.item();
  }
  return total;
}

struct StepLosses {
  double disc_loss = 0.0;
  LossBreakdown gen;
  double grad_norm = 0.0;
};

namespace detail {

inline void check_finite(double v, const char* term) {
  if (!std::isfinite(v))
    throw DomainError(std::string("non-finite loss in term '") + term + "'");
}

// Frozen-encoder code vectors for one batch, per style.
inline std::vector<std::vector<std::vector<double>>> encode_by_style(
    EmbedModelState& m, const std::vector<Example>& batch) {
  std::vector<std::vector<std::vector<double>>> by_style(m.cfg.num_styles);
  for (const Example& ex : batch) {
    ad::Tape t;
    nn::Binding bind(t);
    Codes codes = encode_codes(t, bind, m, ex.content_ids);
    by_style[ex.label].push_back(codes.c.value());
  }
  return by_style;
}

}  // namespace detail

// One adversarial round: `disc_steps` discriminator updates (real = encoded
// codes, fake = prior draws), then one generator update on the total loss.
inline StepLosses adversarial_train_step(EmbedModelState& m, const std::vector<Example>& batch,
                                         nn::AdamState& gen_adam, nn::AdamState& disc_adam,
                                         std::mt19937_64& rng) {
  const TermToggles& toggles = m.cfg.toggles;
  toggles.validate();
  StepLosses out;

  if (toggles.use_marginal_kl) {
    auto by_style = detail::encode_by_style(m, batch);
    std::normal_distribution<double> prior(0.0, 1.0);
    std::vector<nn::Param*> dparams = m.disc_params();
    for (int step = 0; step < m.cfg.disc_steps; ++step) {
      ad::Tape t;
      nn::Binding bind(t);
      std::vector<ad::Tensor> losses;
      auto disc_pair_loss = [&](Discriminator& disc,
                                const std::vector<std::vector<double>>& codes) {
        int n = static_cast<int>(codes.size());
        std::vector<double> real, fake;
        for (const auto& c : codes) real.insert(real.end(), c.begin(), c.end());
        for (int i = 0; i < n * m.cfg.d_c; ++i) fake.push_back(prior(rng));
        ad::Tensor fr = disc.logit(t, bind, t.leaf({n, m.cfg.d_c}, real));
        ad::Tensor ff = disc.logit(t, bind, t.leaf({n, m.cfg.d_c}, fake));
        // Maximize E_data[log sig(f)] + E_prior[log(1 - sig(f))].
        return t.scale(t.add(t.mean(t.log(t.sigmoid(fr))),
                             t.mean(t.log(t.sub(t.scalar(1.0), t.sigmoid(ff))))),
                       -1.0);
      };
      if (toggles.use_js) {
        for (int y = 0; y < m.cfg.num_styles; ++y)
          if (!by_style[y].empty()) losses.push_back(disc_pair_loss(m.style_discs[y], by_style[y]));
      } else {
        std::vector<std::vector<double>> pooled;
        for (auto& v : by_style) pooled.insert(pooled.end(), v.begin(), v.end());
        if (!pooled.empty()) losses.push_back(disc_pair_loss(m.pooled_disc, pooled));
      }
      if (losses.empty()) break;
      ad::Tensor loss = t.scale(t.add_n(losses), 1.0 / losses.size());
      out.disc_loss = loss.item();
      detail::check_finite(out.disc_loss, "discriminator");
      t.backward(loss);
      bind.collect();
      nn::adam_step(dparams, disc_adam);
      m.disc_step_count += 1;
    }
  }

  ad::Tape t;
  nn::Binding bind(t);
  ad::Tensor loss = embedding_total_loss(t, bind, m, batch, toggles, &out.gen);
  detail::check_finite(out.gen.recon, "reconstruction");
  detail::check_finite(out.gen.cls, "classification");
  detail::check_finite(out.gen.kl, "marginal-kl");
  t.backward(loss);
  bind.collect();
  std::vector<nn::Param*> gparams = m.generator_params();
  out.grad_norm = nn::grad_norm(gparams);
  nn::adam_step(gparams, gen_adam);
  m.gen_step_count += 1;
  return out;
}

// ---------------------------------------------------------------------------
// Decoding

struct DecodeMode {
  int beam_width = 1;  // 1 = greedy
};

namespace detail {

using DecStep = decode::Step;

// One decoder step on raw state values; PAD and BOS are never emitted.
inline DecStep decode_step(EmbedModelState& m, int style, int prev_token,
                           const std::vector<double>& h_prev, const std::vector<double>& c_prev,
                           const std::vector<double>& code) {
  StyleDecoder& dec = m.decoders[style];
  ad::Tape t;
  nn::Binding bind(t);
  ad::Tensor code_t = t.leaf({1, m.cfg.d_c}, code);
  ad::Tensor emb = t.embed_lookup(bind.frozen(m.embedding), {prev_token});
  ad::Tensor x = t.concat(emb, code_t, 1);
  nn::LstmState s{t.leaf({1, m.cfg.dec_hidden}, h_prev), t.leaf({1, m.cfg.dec_hidden}, c_prev)};
  s = nn::lstm_step(t, x, s, bind.frozen(dec.lstm.w), bind.frozen(dec.lstm.b), m.cfg.dec_hidden);
  ad::Tensor logits = nn::linear(t, t.concat(s.h, code_t, 1), bind.frozen(dec.w_out),
                                 bind.frozen(dec.b_out));
  ad::Tensor lp = t.log_softmax(logits);
  DecStep out;
  out.log_probs = lp.value();
  out.log_probs[data::kPad] = -1e30;
  out.log_probs[data::kBos] = -1e30;
  out.h = s.h.value();
  out.c = s.c.value();
  return out;
}

struct Generic1StepFn {
  EmbedModelState* m;
  int style;
  std::vector<double> code;
  DecStep operator()(int prev, const std::vector<double>& h, const std::vector<double>& c) const {
    return decode_step(*m, style, prev, h, c, code);
  }
};

}  // namespace detail

// Decode from p(x | c_phi(x), y_target).
inline std::vector<std::string> transfer_embedding(EmbedModelState& m, const data::Vocab& vocab,
                                                   const std::vector<std::string>& tokens,
                                                   int y_target, DecodeMode mode,
                                                   int max_decode_len) {
  if (y_target < 0 || y_target >= m.cfg.num_styles) throw ValueError("target style out of range");
  std::vector<int> ids = data::encode_content(tokens, vocab, m.cfg.max_len);
  if (ids.empty()) ids.push_back(data::kUnk);
  std::vector<double> code;
  {
    ad::Tape t;
    nn::Binding bind(t);
    code = encode_codes(t, bind, m, ids).c.value();
  }
  detail::Generic1StepFn step{&m, y_target, code};
  std::vector<int> out_ids =
      mode.beam_width <= 1 ? decode::greedy(step, m.cfg.dec_hidden, max_decode_len)
                           : decode::beam(step, m.cfg.dec_hidden, max_decode_len, mode.beam_width);
  return data::decode_ids(out_ids, vocab);
}

inline int default_max_decode_len(int max_train_len) {
  return static_cast<int>(std::ceil(1.5 * max_train_len));
}

// ---------------------------------------------------------------------------
// Latent dumps and linear probes (disentanglement report).

struct ProbeReport {
  double c_train_acc = 0.0, c_test_acc = 0.0;
  double s_train_acc = 0.0, s_test_acc = 0.0;
  double majority = 0.0;
};

namespace detail {

// Plain logistic probe trained with Adam; 80/20 split of the given rows.
inline std::pair<double, double> linear_probe(const std::vector<std::vector<double>>& feats,
                                              const std::vector<int>& labels, int num_classes,
                                              uint64_t seed) {
  int n = static_cast<int>(feats.size());
  int dim = static_cast<int>(feats[0].size());
  std::mt19937_64 rng = nn::make_rng(seed, 701);
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  int train_n = std::max(1, n * 4 / 5);

  nn::Param w = nn::uniform_param("probe.w", {dim, num_classes}, rng);
  nn::Param b = nn::zeros_param("probe.b", {num_classes});
  nn::AdamState adam;
  adam.lr = 5e-2;
  for (int epoch = 0; epoch < 60; ++epoch) {
    ad::Tape t;
    nn::Binding bind(t);
    std::vector<double> x;
    std::vector<int> ys;
    for (int i = 0; i < train_n; ++i) {
      const auto& f = feats[order[i]];
      x.insert(x.end(), f.begin(), f.end());
      ys.push_back(labels[order[i]]);
    }
    ad::Tensor logits = nn::linear(t, t.leaf({train_n, dim}, x), bind.use(w), bind.use(b));
    ad::Tensor loss = t.scale(t.sum(t.pick(t.log_softmax(logits), ys)), -1.0 / train_n);
    t.backward(loss);
    bind.collect();
    nn::adam_step({&w, &b}, adam);
  }

  auto acc_on = [&](int lo, int hi) {
    int hits = 0;
    for (int i = lo; i < hi; ++i) {
      const auto& f = feats[order[i]];
      std::vector<double> best_scores(num_classes, 0.0);
      for (int k = 0; k < num_classes; ++k) {
        double v = b.value[k];
        for (int d = 0; d < dim; ++d) v += f[d] * w.value[d * num_classes + k];
        best_scores[k] = v;
      }
      int pred = static_cast<int>(std::max_element(best_scores.begin(), best_scores.end()) -
                                  best_scores.begin());
      if (pred == labels[order[i]]) ++hits;
    }
    return hi > lo ? 100.0 * hits / (hi - lo) : 0.0;
  };
  return {acc_on(0, train_n), acc_on(train_n, n)};
}

}  // namespace detail

// Writes one CSV row (c..., s..., y) per sentence and fits logistic probes
// predicting the style from each code.
inline ProbeReport dump_latents(EmbedModelState& m, const data::Corpus& corpus,
                                const data::Vocab& vocab, const std::string& csv_path) {
  std::vector<std::vector<double>> cs, ss;
  for (size_t i = 0; i < corpus.size(); ++i) {
    std::vector<int> ids = data::encode_content(corpus.sentences[i], vocab, m.cfg.max_len);
    if (ids.empty()) ids.push_back(data::kUnk);
    ad::Tape t;
    nn::Binding bind(t);
    Codes codes = encode_codes(t, bind, m, ids);
    cs.push_back(codes.c.value());
    ss.push_back(codes.s.value());
  }
  if (!csv_path.empty()) {
    std::ofstream os(csv_path);
    if (!os) throw IoError("cannot write latent csv: " + csv_path);
    for (int d = 0; d < m.cfg.d_c; ++d) os << "c" << d << ",";
    for (int d = 0; d < m.cfg.d_s; ++d) os << "s" << d << ",";
    os << "y\n";
    for (size_t i = 0; i < cs.size(); ++i) {
      for (double v : cs[i]) os << v << ",";
      for (double v : ss[i]) os << v << ",";
      os << corpus.labels[i] << "\n";
    }
  }
  ProbeReport rep;
  rep.majority = 100.0 * corpus.majority_fraction();
  auto [ctr, cte] = detail::linear_probe(cs, corpus.labels, m.cfg.num_styles, m.cfg.seed + 1);
  auto [str_, ste] = detail::linear_probe(ss, corpus.labels, m.cfg.num_styles, m.cfg.seed + 2);
  rep.c_train_acc = ctr;
  rep.c_test_acc = cte;
  rep.s_train_acc = str_;
  rep.s_test_acc = ste;
  return rep;
}

// ---------------------------------------------------------------------------
// Representation-splitting variant: mean-field encoder, one decoder over
// (s, c), marginal discriminators for both codes.

struct RsModelState {
  EmbedConfig cfg;
  int vocab_size = 0;
  nn::Param embedding;
  nn::BiLstmParams encoder;
  nn::Param w_c, b_c, w_s, b_s;
  StyleDecoder dec;  // input [embed; s; c]
  nn::Param w_cls, b_cls;
  Discriminator disc_c, disc_s;
  std::vector<std::vector<double>> mean_style_codes;  // cached per style

  static RsModelState init(int vocab_size, const EmbedConfig& cfg) {
    std::mt19937_64 rng = nn::make_rng(cfg.seed, 602);
    RsModelState m;
    m.cfg = cfg;
    m.vocab_size = vocab_size;
    m.embedding = nn::uniform_param("rs.embedding", {vocab_size, cfg.embed_dim}, rng);
    m.encoder = nn::make_bilstm("rs.enc", cfg.embed_dim, cfg.enc_hidden, rng);
    m.w_c = nn::uniform_param("rs.w_c", {2 * cfg.enc_hidden, cfg.d_c}, rng);
    m.b_c = nn::zeros_param("rs.b_c", {cfg.d_c});
    m.w_s = nn::uniform_param("rs.w_s", {2 * cfg.enc_hidden, cfg.d_s}, rng);
    m.b_s = nn::zeros_param("rs.b_s", {cfg.d_s});
    m.dec.lstm = nn::make_lstm("rs.dec.lstm", cfg.embed_dim + cfg.d_s + cfg.d_c, cfg.dec_hidden, rng);
    m.dec.w_out =
        nn::uniform_param("rs.dec.w_out", {cfg.dec_hidden + cfg.d_s + cfg.d_c, vocab_size}, rng);
    m.dec.b_out = nn::zeros_param("rs.dec.b_out", {vocab_size});
    m.w_cls = nn::uniform_param("rs.w_cls", {cfg.d_s, cfg.num_styles}, rng);
    m.b_cls = nn::zeros_param("rs.b_cls", {cfg.num_styles});
    m.disc_c = Discriminator::make("rs.disc_c", cfg.d_c, rng);
    m.disc_s = Discriminator::make("rs.disc_s", cfg.d_s, rng);
    return m;
  }

  std::vector<nn::Param*> generator_params() {
    return {&embedding, &encoder.fwd.w, &encoder.fwd.b, &encoder.bwd.w, &encoder.bwd.b,
            &w_c, &b_c, &w_s, &b_s, &dec.lstm.w, &dec.lstm.b, &dec.w_out, &dec.b_out,
            &w_cls, &b_cls};
  }
  std::vector<nn::Param*> disc_params() {
    std::vector<nn::Param*> out;
    for (nn::Param* p : disc_c.params()) out.push_back(p);
    for (nn::Param* p : disc_s.params()) out.push_back(p);
    return out;
  }
  std::vector<nn::Param*> all_params() {
    auto out = generator_params();
    for (nn::Param* p : disc_params()) out.push_back(p);
    return out;
  }
  void save(const std::string& path) { nn::save_checkpoint(path, all_params()); }
  void load(const std::string& path) { nn::load_checkpoint(path, all_params()); }
};

inline Codes rs_encode(ad::Tape& t, nn::Binding& bind, RsModelState& m,
                       const std::vector<int>& content_ids) {
  ad::Tensor emb = t.embed_lookup(bind.use(m.embedding), content_ids);
  nn::BiLstmOut enc = nn::bilstm_run(t, bind, emb, m.encoder);
  Codes codes;
  codes.c = nn::linear(t, enc.final_concat, bind.use(m.w_c), bind.use(m.b_c));
  codes.s = nn::linear(t, enc.final_concat, bind.use(m.w_s), bind.use(m.b_s));
  return codes;
}

inline ad::Tensor rs_decode_logits(ad::Tape& t, nn::Binding& bind, RsModelState& m,
                                   ad::Tensor code_sc, const std::vector<int>& target_ids) {
  std::vector<int> inputs = {data::kBos};
  inputs.insert(inputs.end(), target_ids.begin(), target_ids.end() - 1);
  ad::Tensor emb = t.embed_lookup(bind.use(m.embedding), inputs);
  ad::Tensor w = bind.use(m.dec.lstm.w), b = bind.use(m.dec.lstm.b);
  ad::Tensor w_out = bind.use(m.dec.w_out), b_out = bind.use(m.dec.b_out);
  nn::LstmState s = nn::lstm_zero_state(t, m.cfg.dec_hidden);
  std::vector<ad::Tensor> step_logits;
  for (size_t i = 0; i < inputs.size(); ++i) {
    ad::Tensor x = t.concat(t.slice(emb, 0, static_cast<int>(i), 1), code_sc, 1);
    s = nn::lstm_step(t, x, s, w, b, m.cfg.dec_hidden);
    step_logits.push_back(nn::linear(t, t.concat(s.h, code_sc, 1), w_out, b_out));
  }
  ad::Tensor out = step_logits[0];
  for (size_t i = 1; i < step_logits.size(); ++i) out = t.concat(out, step_logits[i], 0);
  return out;
}

// Reconstruction from both codes, marginal KLs of c and s to the prior
// (adversarially estimated), plus gamma-weighted classification on s.
inline ad::Tensor rs_objective(ad::Tape& t, nn::Binding& bind, RsModelState& m,
                               const std::vector<Example>& batch, double gamma,
                               LossBreakdown* breakdown) {
  if (batch.empty()) throw ValueError("empty batch");
  std::vector<ad::Tensor> recon_terms, cls_terms, kl_terms;
  for (const Example& ex : batch) {
    Codes codes = rs_encode(t, bind, m, ex.content_ids);
    ad::Tensor sc = t.concat(codes.s, codes.c, 1);
    std::vector<int> targets = ex.content_ids;
    targets.push_back(data::kEos);
    recon_terms.push_back(sequence_ce(t, rs_decode_logits(t, bind, m, sc, targets), targets));
    kl_terms.push_back(t.add(m.disc_c.logit(t, bind, codes.c, true),
                             m.disc_s.logit(t, bind, codes.s, true)));
    if (gamma > 0) {
      ad::Tensor logits = nn::linear(t, codes.s, bind.use(m.w_cls), bind.use(m.b_cls));
      cls_terms.push_back(t.scale(t.pick(t.log_softmax(logits), {ex.label}), -1.0));
    }
  }
  double inv = 1.0 / static_cast<double>(batch.size());
  ad::Tensor recon = t.scale(t.add_n(recon_terms), inv);
  ad::Tensor kl = t.scale(t.add_n(kl_terms), inv);
  ad::Tensor total = t.add(recon, kl);
  ad::Tensor cls;
  if (gamma > 0) {
    cls = t.scale(t.add_n(cls_terms), gamma * inv);
    total = t.add(total, cls);
  }
  if (breakdown) {
    breakdown->recon = recon.item();
    breakdown->kl = kl.item();
    breakdown->cls = gamma > 0 ? cls.item() : 0.0;
    breakdown->total = total.item();
  }
  return total;
}

inline StepLosses rs_train_step(RsModelState& m, const std::vector<Example>& batch,
                                nn::AdamState& gen_adam, nn::AdamState& disc_adam,
                                std::mt19937_64& rng) {
  StepLosses out;
  // Frozen-encoder codes for the discriminators.
  std::vector<std::vector<double>> cs, ss;
  for (const Example& ex : batch) {
    ad::Tape t;
    nn::Binding bind(t);
    Codes codes = rs_encode(t, bind, m, ex.content_ids);
    cs.push_back(codes.c.value());
    ss.push_back(codes.s.value());
  }
  std::normal_distribution<double> prior(0.0, 1.0);
  std::vector<nn::Param*> dparams = m.disc_params();
  for (int step = 0; step < m.cfg.disc_steps; ++step) {
    ad::Tape t;
    nn::Binding bind(t);
    auto pair_loss = [&](Discriminator& disc, const std::vector<std::vector<double>>& codes,
                         int dim) {
      int n = static_cast<int>(codes.size());
      std::vector<double> real, fake;
      for (const auto& v : codes) real.insert(real.end(), v.begin(), v.end());
      for (int i = 0; i < n * dim; ++i) fake.push_back(prior(rng));
      ad::Tensor fr = disc.logit(t, bind, t.leaf({n, dim}, real));
      ad::Tensor ff = disc.logit(t, bind, t.leaf({n, dim}, fake));
      return t.scale(t.add(t.mean(t.log(t.sigmoid(fr))),
                           t.mean(t.log(t.sub(t.scalar(1.0), t.sigmoid(ff))))),
                     -1.0);
    };
    ad::Tensor loss = t.scale(
        t.add(pair_loss(m.disc_c, cs, m.cfg.d_c), pair_loss(m.disc_s, ss, m.cfg.d_s)), 0.5);
    out.disc_loss = loss.item();
    detail::check_finite(out.disc_loss, "rs-discriminator");
    t.backward(loss);
    bind.collect();
    nn::adam_step(dparams, disc_adam);
  }

  ad::Tape t;
  nn::Binding bind(t);
  ad::Tensor loss = rs_objective(t, bind, m, batch, m.cfg.toggles.gamma, &out.gen);
  detail::check_finite(out.gen.total, "rs-objective");
  t.backward(loss);
  bind.collect();
  auto gparams = m.generator_params();
  out.grad_norm = nn::grad_norm(gparams);
  nn::adam_step(gparams, gen_adam);
  return out;
}

// Average style code over training sentences of each style, cached.
inline void rs_cache_style_codes(RsModelState& m, const std::vector<Example>& train_examples) {
  m.mean_style_codes.assign(m.cfg.num_styles, std::vector<double>(m.cfg.d_s, 0.0));
  std::vector<int> counts(m.cfg.num_styles, 0);
  for (const Example& ex : train_examples) {
    ad::Tape t;
    nn::Binding bind(t);
    Codes codes = rs_encode(t, bind, m, ex.content_ids);
    for (int d = 0; d < m.cfg.d_s; ++d) m.mean_style_codes[ex.label][d] += codes.s.value()[d];
    counts[ex.label]++;
  }
  for (int y = 0; y < m.cfg.num_styles; ++y) {
    if (counts[y] == 0) throw ValueError("no training sentences for style " + std::to_string(y));
    for (double& v : m.mean_style_codes[y]) v /= counts[y];
  }
}

namespace detail {

struct RsStepFn {
  RsModelState* m;
  std::vector<double> code_sc;  // [s; c]
  DecStep operator()(int prev, const std::vector<double>& h, const std::vector<double>& c) const {
    ad::Tape t;
    nn::Binding bind(t);
    int dim = m->cfg.d_s + m->cfg.d_c;
    ad::Tensor sc = t.leaf({1, dim}, code_sc);
    ad::Tensor emb = t.embed_lookup(bind.frozen(m->embedding), {prev});
    nn::LstmState s{t.leaf({1, m->cfg.dec_hidden}, h), t.leaf({1, m->cfg.dec_hidden}, c)};
    s = nn::lstm_step(t, t.concat(emb, sc, 1), s, bind.frozen(m->dec.lstm.w),
                      bind.frozen(m->dec.lstm.b), m->cfg.dec_hidden);
    ad::Tensor logits = nn::linear(t, t.concat(s.h, sc, 1), bind.frozen(m->dec.w_out),
                                   bind.frozen(m->dec.b_out));
    DecStep out;
    out.log_probs = t.log_softmax(logits).value();
    out.log_probs[data::kPad] = -1e30;
    out.log_probs[data::kBos] = -1e30;
    out.h = s.h.value();
    out.c = s.c.value();
    return out;
  }
};

}  // namespace detail

// Decode from (c_phi(x), mean style code of the target style).
inline std::vector<std::string> rs_transfer(RsModelState& m, const data::Vocab& vocab,
                                            const std::vector<std::string>& tokens, int y_target,
                                            DecodeMode mode, int max_decode_len) {
  if (y_target < 0 || y_target >= m.cfg.num_styles) throw ValueError("target style out of range");
  if (m.mean_style_codes.empty())
    throw ValueError("rs_transfer requires cached style codes; call rs_cache_style_codes");
  std::vector<int> ids = data::encode_content(tokens, vocab, m.cfg.max_len);
  if (ids.empty()) ids.push_back(data::kUnk);
  std::vector<double> code_sc = m.mean_style_codes[y_target];
  {
    ad::Tape t;
    nn::Binding bind(t);
    Codes codes = rs_encode(t, bind, m, ids);
    const std::vector<double>& c = codes.c.value();
    code_sc.insert(code_sc.end(), c.begin(), c.end());
  }
  detail::RsStepFn step{&m, code_sc};
  std::vector<int> out_ids =
      mode.beam_width <= 1 ? decode::greedy(step, m.cfg.dec_hidden, max_decode_len)
                           : decode::beam(step, m.cfg.dec_hidden, max_decode_len, mode.beam_width);
  return data::decode_ids(out_ids, vocab);
}

}  // namespace stylet::embed
