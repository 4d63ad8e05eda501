#pragma once

// Greedy and beam decoding over a single-step function. Beam scores are
// summed log-probabilities with no length normalization; PAD/BOS filtering
// is the step function's responsibility.

#include <algorithm>
#include <vector>

#include "stylet/data.hpp"

namespace stylet::decode {

struct Step {
  std::vector<double> log_probs;
  std::vector<double> h, c;
};

template <typename StepFn>
std::vector<int> greedy(const StepFn& step_fn, int hidden, int max_len) {
  std::vector<double> h(hidden, 0.0), c(hidden, 0.0);
  std::vector<int> out;
  int prev = data::kBos;
  for (int t = 0; t < max_len; ++t) {
    Step step = step_fn(prev, h, c);
    int best = static_cast<int>(std::max_element(step.log_probs.begin(), step.log_probs.end()) -
                                step.log_probs.begin());
    if (best == data::kEos) break;
    out.push_back(best);
    prev = best;
    h = step.h;
    c = step.c;
  }
  return out;
}

template <typename StepFn>
std::vector<int> beam(const StepFn& step_fn, int hidden, int max_len, int width) {
  struct Candidate {
    std::vector<int> tokens;
    double score = 0.0;
    std::vector<double> h, c;
    int prev = data::kBos;
    bool finished = false;
  };
  std::vector<Candidate> beams(1);
  beams[0].h.assign(hidden, 0.0);
  beams[0].c.assign(hidden, 0.0);

  for (int t = 0; t < max_len; ++t) {
    std::vector<Candidate> cand;
    bool any_open = false;
    for (const Candidate& b : beams) {
      if (b.finished) {
        cand.push_back(b);
        continue;
      }
      any_open = true;
      Step step = step_fn(b.prev, b.h, b.c);
      std::vector<int> order(step.log_probs.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
      int keep = std::min<int>(width, static_cast<int>(order.size()));
      std::partial_sort(order.begin(), order.begin() + keep, order.end(), [&](int a, int bb) {
        if (step.log_probs[a] != step.log_probs[bb])
          return step.log_probs[a] > step.log_probs[bb];
        return a < bb;
      });
      for (int k = 0; k < keep; ++k) {
        int tok = order[k];
        Candidate nb = b;
        nb.score += step.log_probs[tok];
        if (tok == data::kEos) {
          nb.finished = true;
        } else {
          nb.tokens.push_back(tok);
          nb.prev = tok;
          nb.h = step.h;
          nb.c = step.c;
        }
        cand.push_back(std::move(nb));
      }
    }
    if (!any_open) break;
    std::stable_sort(cand.begin(), cand.end(),
                     [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    if (static_cast<int>(cand.size()) > width) cand.resize(width);
    beams = std::move(cand);
  }
  for (const Candidate& b : beams)
    if (b.finished) return b.tokens;
  return beams.empty() ? std::vector<int>{} : beams[0].tokens;
}

}  // namespace stylet::decode
