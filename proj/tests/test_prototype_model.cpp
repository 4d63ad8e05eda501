#include <catch_amalgamated.hpp>

#include <cmath>
#include <fstream>

#include "model_grad_check.hpp"
#include "stylet/prototype_model.hpp"

using namespace stylet;
using Catch::Approx;

namespace {

proto::ProtoConfig tiny_config() {
  proto::ProtoConfig cfg;
  cfg.embed_dim = 6;
  cfg.masker_hidden = 5;
  cfg.cls_hidden = 5;
  cfg.enc_hidden = 5;
  cfg.dec_hidden = 5;
  cfg.num_styles = 2;
  cfg.max_len = 12;
  cfg.seed = 13;
  return cfg;
}

data::Vocab small_vocab(int extra = 12) {
  data::Vocab v;
  for (const std::string& tok : data::reserved_tokens()) {
    v.token_to_id[tok] = v.size();
    v.id_to_token.push_back(tok);
  }
  for (int i = 0; i < extra; ++i) {
    std::string tok = "v" + std::to_string(i);
    v.token_to_id[tok] = v.size();
    v.id_to_token.push_back(tok);
  }
  return v;
}

}  // namespace

TEST_CASE("mask_forward") {
  proto::ProtoConfig cfg = tiny_config();
  proto::ProtoModelState m = proto::ProtoModelState::init(17, cfg);

  SECTION("saturated head bias gives an all-ones mask") {
    m.b_mask.value[0] = 20.0;
    ad::Tape t;
    nn::Binding bind(t);
    proto::MaskVector mask = proto::mask_forward(t, bind, m, {6, 7, 8, 9});
    REQUIRE(mask.hard == std::vector<int>{1, 1, 1, 1});
  }
  SECTION("logit exactly 0.5 hardens to 0") {
    std::fill(m.w_mask.value.begin(), m.w_mask.value.end(), 0.0);
    m.b_mask.value[0] = 0.0;
    ad::Tape t;
    nn::Binding bind(t);
    proto::MaskVector mask = proto::mask_forward(t, bind, m, {6, 7});
    REQUIRE(mask.soft[0] == 0.5);
    REQUIRE(mask.hard == std::vector<int>{0, 0});
  }
  SECTION("straight-through gradients equal the soft path exactly") {
    std::vector<int> ids = {6, 9, 7};
    std::vector<double> v = {0.4, -1.3, 2.2};
    auto run = [&](bool soft) {
      nn::zero_grads(m.masker_params());
      ad::Tape t;
      nn::Binding bind(t);
      proto::MaskVector mask = proto::mask_forward(t, bind, m, ids, soft);
      ad::Tensor vv = t.leaf({3, 1}, v);
      t.backward(t.sum(t.mul(mask.tensor, vv)));
      bind.collect();
      std::vector<std::vector<double>> grads;
      for (nn::Param* p : m.masker_params()) grads.push_back(p->grad);
      nn::zero_grads(m.masker_params());
      return grads;
    };
    REQUIRE(run(false) == run(true));
  }
}

TEST_CASE("split_prototypes") {
  SECTION("all-ones content mask keeps the sentence") {
    auto [content, style] = proto::split_prototypes({"a", "b"}, {1, 1});
    REQUIRE(content.tokens == std::vector<std::string>{"a", "b"});
    REQUIRE(style.tokens == std::vector<std::string>{"[MASK]", "[MASK]"});
  }
  SECTION("published example splits as expected") {
    auto [content, style] =
        proto::split_prototypes({"i", "like", "this", "movie"}, {1, 0, 1, 1});
    REQUIRE(content.tokens == std::vector<std::string>{"i", "[MASK]", "this", "movie"});
    REQUIRE(style.tokens == std::vector<std::string>{"[MASK]", "like", "[MASK]", "[MASK]"});
  }
  SECTION("no position carries a real token in both prototypes") {
    auto [content, style] = proto::split_prototypes({"x", "y", "z"}, {0, 1, 0});
    for (size_t i = 0; i < 3; ++i)
      REQUIRE((content.origin_mask[i] + style.origin_mask[i]) == 1);
  }
}

TEST_CASE("collapse_mask_runs") {
  SECTION("runs merge to one token") {
    REQUIRE(proto::collapse_mask_runs({"a", "[MASK]", "[MASK]", "b", "[MASK]"}) ==
            std::vector<std::string>{"a", "[MASK]", "b", "[MASK]"});
  }
  SECTION("no masks is the identity") {
    REQUIRE(proto::collapse_mask_runs({"a", "b"}) == std::vector<std::string>{"a", "b"});
  }
  SECTION("all masks collapse to a single token") {
    REQUIRE(proto::collapse_mask_runs({"[MASK]", "[MASK]", "[MASK]"}) ==
            std::vector<std::string>{"[MASK]"});
  }
  SECTION("idempotent") {
    std::vector<std::string> toks = {"[MASK]", "a", "[MASK]", "[MASK]", "b", "[MASK]"};
    auto once = proto::collapse_mask_runs(toks);
    REQUIRE(proto::collapse_mask_runs(once) == once);
  }
}

TEST_CASE("rationale_loss") {
  proto::ProtoConfig cfg = tiny_config();
  proto::ProtoModelState m = proto::ProtoModelState::init(17, cfg);
  std::vector<proto::Example> batch = {{{6, 8, 5}, 0}, {{9, 7, 10, 11}, 1}};

  SECTION("alpha zero leaves pure classification") {
    proto::RationaleBreakdown b;
    ad::Tape t;
    nn::Binding bind(t);
    ad::Tensor loss = proto::rationale_loss(t, bind, m, batch, 1.0, 0.0, &b);
    REQUIRE(b.compact == 0.0);
    REQUIRE(loss.item() == Approx(b.cls));
  }
  SECTION("all-zero style mask has zero compactness term") {
    m.b_mask.value[0] = 20.0;  // all-content masks
    proto::RationaleBreakdown b;
    ad::Tape t;
    nn::Binding bind(t);
    proto::rationale_loss(t, bind, m, batch, 1.0, 0.5, &b);
    REQUIRE(b.compact == Approx(0.0).margin(1e-15));
  }
  SECTION("compactness equals alpha * mean style mask against direct computation") {
    double alpha = 0.37;
    proto::RationaleBreakdown b;
    ad::Tape t;
    nn::Binding bind(t);
    proto::rationale_loss(t, bind, m, {batch[0]}, 1.0, alpha, &b);
    std::vector<int> mask = proto::compute_mask(m, batch[0].content_ids);
    double ones = 0;
    for (int v : mask) ones += 1 - v;
    REQUIRE(std::fabs(b.compact - alpha * ones / mask.size()) <= 1e-12);
  }
  SECTION("both rationale terms pass gradient checks in soft-mask mode") {
    auto check = [&](double gamma, double alpha) {
      auto loss_value = [&] {
        ad::Tape t;
        nn::Binding bind(t);
        return proto::rationale_loss(t, bind, m, batch, gamma, alpha, nullptr, true).item();
      };
      auto backward = [&] {
        ad::Tape t;
        nn::Binding bind(t);
        ad::Tensor loss = proto::rationale_loss(t, bind, m, batch, gamma, alpha, nullptr, true);
        t.backward(loss);
        bind.collect();
      };
      std::vector<nn::Param*> checked = {&m.masker.fwd.w, &m.w_mask, &m.cls_enc.bwd.w, &m.w_cls,
                                         &m.mask_embed};
      return testutil::model_grad_check(loss_value, backward, checked);
    };
    REQUIRE(check(1.0, 1e-9) <= 1e-4);  // classification-dominated
    REQUIRE(check(1.0, 0.8) <= 1e-4);   // with compactness
  }
}

TEST_CASE("infill loss and attention") {
  proto::ProtoConfig cfg = tiny_config();
  proto::ProtoModelState m = proto::ProtoModelState::init(17, cfg);
  data::Vocab vocab = small_vocab();
  std::vector<proto::Example> batch = {{{6, 8, 5}, 0}, {{9, 7}, 1}};
  // Keep prototypes multi-token so attention spans several encoder states.
  m.b_mask.value[0] = 20.0;

  SECTION("gradient reaches the attention parameters") {
    nn::zero_grads(m.all_params());
    ad::Tape t;
    nn::Binding bind(t);
    double value = 0;
    ad::Tensor loss = proto::infill_loss(t, bind, m, batch, vocab, &value);
    REQUIRE(std::isfinite(value));
    t.backward(loss);
    bind.collect();
    double norm = 0;
    for (double g : m.infill[0].w_att.grad) norm += g * g;
    REQUIRE(norm > 0.0);
    nn::zero_grads(m.all_params());
  }
  SECTION("infill loss gradient check") {
    auto loss_value = [&] {
      ad::Tape t;
      nn::Binding bind(t);
      double v;
      proto::infill_loss(t, bind, m, batch, vocab, &v);
      return v;
    };
    auto backward = [&] {
      ad::Tape t;
      nn::Binding bind(t);
      ad::Tensor loss = proto::infill_loss(t, bind, m, batch, vocab, nullptr);
      t.backward(loss);
      bind.collect();
    };
    std::vector<nn::Param*> checked = {&m.infill[0].w_att, &m.infill[0].dec.w, &m.inf_embed,
                                       &m.infill[1].w_out};
    REQUIRE(testutil::model_grad_check(loss_value, backward, checked) <= 1e-4);
  }
}

TEST_CASE("cyclic learning rate") {
  proto::ProtoConfig cfg;
  REQUIRE(cfg.cyclic_base_lr == 1e-4);
  REQUIRE(cfg.cyclic_max_lr == 1e-3);
  REQUIRE(proto::cyclic_lr(0, 1e-4, 1e-3, 100) == Approx(1e-4));
  REQUIRE(proto::cyclic_lr(100, 1e-4, 1e-3, 100) == Approx(1e-3));
  REQUIRE(proto::cyclic_lr(200, 1e-4, 1e-3, 100) == Approx(1e-4));
  REQUIRE(proto::cyclic_lr(150, 1e-4, 1e-3, 100) == Approx(5.5e-4));
}

TEST_CASE("two-step training on a small synthetic corpus", "[slow]") {
  data::SynthSpec spec;
  spec.train_sentences = 300;
  spec.valid_sentences = 40;
  spec.test_sentences = 40;
  spec.len_min = 4;
  spec.len_max = 8;
  spec.content_vocab = 20;
  spec.seed = 7;
  data::SynthData d = data::synth_generate(spec);
  data::Vocab vocab = data::build_vocab(d.train, 1);

  proto::ProtoConfig cfg;
  cfg.embed_dim = 24;
  cfg.masker_hidden = 16;
  cfg.cls_hidden = 16;
  cfg.enc_hidden = 24;
  cfg.dec_hidden = 24;
  cfg.max_len = 14;
  cfg.alpha = 0.5;
  cfg.rat_lr = 2e-3;
  cfg.cyclic_interval = 40;
  cfg.epochs_rationale = 25;
  cfg.epochs_infill = 14;
  cfg.batch_size = 32;
  cfg.seed = 21;

  proto::ProtoModelState m = proto::ProtoModelState::init(vocab.size(), cfg);
  std::vector<proto::Example> examples = embed::make_examples(d.train, vocab, cfg.max_len);

  proto::TwoStepReport report;
  proto::rationale_phase(m, examples, report);
  report.masker_cls_accuracy = proto::masker_classifier_accuracy(m, examples);

  SECTION("masker recalls ground-truth style markers and freezes in step 2") {
    // Recall of ground-truth markers inside the learned style mask.
    int marker_total = 0, marker_hit = 0;
    for (size_t i = 0; i < examples.size(); ++i) {
      std::vector<int> mask = proto::compute_mask(m, examples[i].content_ids);
      for (size_t p = 0; p < mask.size(); ++p) {
        if (d.train_masks[i][p] == 1) {
          ++marker_total;
          if (mask[p] == 0) ++marker_hit;  // style token = content mask 0
        }
      }
    }
    double recall = static_cast<double>(marker_hit) / marker_total;
    REQUIRE(recall >= 0.9);
    REQUIRE(report.masker_cls_accuracy > d.train.majority_fraction());

    // Masker params stay bitwise unchanged through the infill phase.
    std::vector<std::vector<double>> snapshot;
    for (nn::Param* p : m.masker_params()) snapshot.push_back(p->value);
    proto::infill_phase(m, examples, vocab, report);
    std::vector<nn::Param*> mask_params = m.masker_params();
    for (size_t i = 0; i < mask_params.size(); ++i) REQUIRE(mask_params[i]->value == snapshot[i]);

    // Smoothed infill loss decreases across the run.
    REQUIRE(report.infill_losses.front() > report.infill_losses.back());
  }
}

TEST_CASE("transfer pipeline mechanics") {
  proto::ProtoConfig cfg = tiny_config();
  proto::ProtoModelState m = proto::ProtoModelState::init(17, cfg);
  data::Vocab vocab = small_vocab();

  SECTION("identity prototype flagged when the mask finds no style tokens") {
    m.b_mask.value[0] = 20.0;
    proto::TransferResult r =
        proto::transfer_prototype(m, vocab, {"v1", "v2", "v3"}, 1, {1}, 10);
    REQUIRE(r.identity_prototype);
    REQUIRE(r.content_mask == std::vector<int>{1, 1, 1});
  }
  SECTION("beam(1) equals greedy on a fixed step function") {
    // Deterministic fake decoder: the step function is pure in (prev, h).
    auto fake = [&](int prev, const std::vector<double>& h,
                    const std::vector<double>& c) -> decode::Step {
      decode::Step s;
      s.log_probs.assign(10, -5.0);
      s.log_probs[(prev * 3 + 7) % 10] = -0.5;
      s.log_probs[(prev * 5 + 1) % 10] = -1.0;
      s.log_probs[data::kEos] = prev == 8 ? -0.1 : -6.0;
      s.h = h;
      s.c = c;
      for (double& v : s.h) v += 0.1;
      return s;
    };
    REQUIRE(decode::greedy(fake, 3, 12) == decode::beam(fake, 3, 12, 1));
  }
  SECTION("transfer output is deterministic and PAD/BOS free") {
    auto a = proto::transfer_prototype(m, vocab, {"v1", "v2", "v3"}, 0, {2}, 10);
    auto b = proto::transfer_prototype(m, vocab, {"v1", "v2", "v3"}, 0, {2}, 10);
    REQUIRE(a.output == b.output);
    for (const std::string& tok : a.output) {
      REQUIRE(tok != "<pad>");
      REQUIRE(tok != "<bos>");
    }
  }
}

TEST_CASE("prototype jsonl dump") {
  proto::ProtoConfig cfg = tiny_config();
  proto::ProtoModelState m = proto::ProtoModelState::init(17, cfg);
  data::Vocab vocab = small_vocab();
  data::Corpus c;
  c.num_styles = 2;
  c.sentences = {{"v1", "v2"}, {"v3", "v4", "v5"}, {"v0"}};
  c.labels = {0, 1, 0};

  std::string path = "proto_dump_test.jsonl";
  proto::write_prototypes_jsonl(path, m, c, vocab);
  std::ifstream is(path);
  std::string line;
  int rows = 0;
  while (std::getline(is, line)) {
    nlohmann::json j = nlohmann::json::parse(line);
    REQUIRE(j.contains("tokens"));
    REQUIRE(j.contains("content_mask"));
    REQUIRE(j.contains("collapsed"));
    ++rows;
  }
  REQUIRE(rows == 3);
  std::remove(path.c_str());
}
