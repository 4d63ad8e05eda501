#pragma once

// Corpus loading (one sentence per line, one file per style per split),
// vocabulary with reserved ids, batching, and a synthetic style-transfer
// corpus generator with known ground-truth marker masks.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "stylet/errors.hpp"
#include "stylet/nn.hpp"

namespace stylet::data {

constexpr int kPad = 0;
constexpr int kUnk = 1;
constexpr int kBos = 2;
constexpr int kEos = 3;
constexpr int kMask = 4;
constexpr int kNumReserved = 5;

inline const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> toks = {"<pad>", "<unk>", "<bos>", "<eos>", "[MASK]"};
  return toks;
}

struct Corpus {
  std::vector<std::vector<std::string>> sentences;
  std::vector<int> labels;
  std::string split;
  int num_styles = 0;

  size_t size() const { return sentences.size(); }
  int max_sentence_len() const {
    size_t m = 0;
    for (const auto& s : sentences) m = std::max(m, s.size());
    return static_cast<int>(m);
  }
  // Fraction of the most common label, in [0,1].
  double majority_fraction() const {
    std::vector<int> counts(num_styles, 0);
    for (int y : labels) counts[y]++;
    int top = *std::max_element(counts.begin(), counts.end());
    return labels.empty() ? 0.0 : static_cast<double>(top) / labels.size();
  }
};

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> toks;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) toks.push_back(tok);
  return toks;
}

// Loads `<root>/<split>.<style>` files; label = file's style index. Blank
// lines are skipped. Corpus text may not contain reserved tokens.
inline Corpus load_style_corpus(const std::vector<std::string>& paths, const std::string& split) {
  Corpus corpus;
  corpus.split = split;
  corpus.num_styles = static_cast<int>(paths.size());
  for (size_t style = 0; style < paths.size(); ++style) {
    std::ifstream is(paths[style]);
    if (!is) throw IoError("cannot open corpus file: " + paths[style]);
    std::string line;
    size_t loaded = 0;
    while (std::getline(is, line)) {
      std::vector<std::string> toks = split_ws(line);
      if (toks.empty()) continue;
      for (const std::string& tok : toks)
        for (const std::string& res : reserved_tokens())
          if (tok == res)
            throw ValueError("reserved token '" + tok + "' appears in " + paths[style]);
      corpus.sentences.push_back(std::move(toks));
      corpus.labels.push_back(static_cast<int>(style));
      ++loaded;
    }
    if (loaded == 0) throw ValueError("corpus file has no sentences: " + paths[style]);
  }
  return corpus;
}

struct Vocab {
  std::unordered_map<std::string, int> token_to_id;
  std::vector<std::string> id_to_token;

  int size() const { return static_cast<int>(id_to_token.size()); }
  int encode(const std::string& tok) const {
    auto it = token_to_id.find(tok);
    return it == token_to_id.end() ? kUnk : it->second;
  }
  const std::string& decode(int id) const {
    if (id < 0 || id >= size()) throw ValueError("token id out of range");
    return id_to_token[id];
  }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write vocab: " + path);
    for (const std::string& tok : id_to_token) os << tok << "\n";
  }
  static Vocab load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read vocab: " + path);
    Vocab v;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      v.token_to_id[line] = static_cast<int>(v.id_to_token.size());
      v.id_to_token.push_back(line);
    }
    for (int i = 0; i < kNumReserved; ++i)
      if (v.id_to_token.size() <= static_cast<size_t>(i) ||
          v.id_to_token[i] != reserved_tokens()[i])
        throw IoError("vocab file missing reserved tokens: " + path);
    return v;
  }
};

// Frequency-ordered ids after the reserved block; ties break lexicographically.
inline Vocab build_vocab(const Corpus& corpus, int min_freq = 1) {
  if (min_freq < 1) throw ValueError("min_freq must be >= 1");
  std::map<std::string, int> freq;
  for (const auto& sent : corpus.sentences)
    for (const std::string& tok : sent) freq[tok]++;

  std::vector<std::pair<std::string, int>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocab v;
  for (const std::string& tok : reserved_tokens()) {
    v.token_to_id[tok] = static_cast<int>(v.id_to_token.size());
    v.id_to_token.push_back(tok);
  }
  for (const auto& [tok, count] : items) {
    if (count < min_freq) continue;
    v.token_to_id[tok] = static_cast<int>(v.id_to_token.size());
    v.id_to_token.push_back(tok);
  }
  return v;
}

// One unpadded encoded sentence: BOS + ids + EOS, truncated to max_len.
inline std::vector<int> encode_sentence(const std::vector<std::string>& tokens, const Vocab& vocab,
                                        int max_len) {
  int keep = std::min<int>(static_cast<int>(tokens.size()), max_len - 2);
  std::vector<int> ids;
  ids.reserve(keep + 2);
  ids.push_back(kBos);
  for (int i = 0; i < keep; ++i) ids.push_back(vocab.encode(tokens[i]));
  ids.push_back(kEos);
  return ids;
}

// Content token ids only (no BOS/EOS), clipped to max_len - 2 so decoder
// targets line up with batch_encode truncation.
inline std::vector<int> encode_content(const std::vector<std::string>& tokens, const Vocab& vocab,
                                       int max_len) {
  int keep = std::min<int>(static_cast<int>(tokens.size()), max_len - 2);
  std::vector<int> ids;
  ids.reserve(keep);
  for (int i = 0; i < keep; ++i) ids.push_back(vocab.encode(tokens[i]));
  return ids;
}

inline std::vector<std::string> decode_ids(const std::vector<int>& ids, const Vocab& vocab) {
  std::vector<std::string> toks;
  for (int id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    toks.push_back(vocab.decode(id));
  }
  return toks;
}

struct EncodedBatch {
  int rows = 0;
  int max_len = 0;
  std::vector<int> ids;      // rows * max_len, row-major, PAD-filled
  std::vector<int> lengths;  // per row, excludes PAD
  std::vector<int> labels;
};

inline EncodedBatch batch_encode(const Corpus& corpus, const std::vector<int>& indices,
                                 const Vocab& vocab, int max_len) {
  if (indices.empty()) throw ValueError("batch_encode on empty slice");
  EncodedBatch batch;
  batch.rows = static_cast<int>(indices.size());
  batch.max_len = max_len;
  batch.ids.assign(static_cast<size_t>(batch.rows) * max_len, kPad);
  for (int r = 0; r < batch.rows; ++r) {
    int idx = indices[r];
    std::vector<int> row = encode_sentence(corpus.sentences[idx], vocab, max_len);
    std::copy(row.begin(), row.end(), batch.ids.begin() + static_cast<size_t>(r) * max_len);
    batch.lengths.push_back(static_cast<int>(row.size()));
    batch.labels.push_back(corpus.labels[idx]);
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Synthetic corpus with ground-truth style markers.

struct SynthSpec {
  int content_vocab = 50;
  int markers_per_style = 5;
  int num_styles = 2;
  int len_min = 5;
  int len_max = 12;
  double marker_rate = 0.2;        // Bernoulli rate per content slot
  double no_marker_fraction = 0.0; // fraction of sentences with zero markers
  int train_sentences = 2000;
  int valid_sentences = 500;
  int test_sentences = 500;
  uint64_t seed = 42;
};

inline std::string synth_content_token(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "w%02d", i);
  return buf;
}
inline std::string synth_marker_token(int style, int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "s%d_%d", style, i);
  return buf;
}

struct SynthData {
  Corpus train, valid, test;
  std::vector<std::vector<int>> train_masks, valid_masks, test_masks;  // 1 = marker
  // References for valid/test: markers swapped index-wise into the other
  // style (two-style corpora only).
  std::vector<std::vector<std::string>> valid_references, test_references;
};

namespace detail {

struct SynthSentence {
  std::vector<std::string> tokens;
  std::vector<int> mask;
  std::vector<int> marker_idx;  // per position, marker index or -1
};

inline SynthSentence synth_sentence(const SynthSpec& spec, int style, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len_dist(spec.len_min, spec.len_max);
  std::uniform_int_distribution<int> content_dist(0, spec.content_vocab - 1);
  std::uniform_int_distribution<int> marker_dist(0, spec.markers_per_style - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  int len = len_dist(rng);
  SynthSentence s;
  for (int i = 0; i < len; ++i) {
    s.tokens.push_back(synth_content_token(content_dist(rng)));
    s.mask.push_back(0);
    s.marker_idx.push_back(-1);
  }
  int markers = 0;
  if (unit(rng) >= spec.no_marker_fraction && spec.marker_rate > 0.0) {
    for (int i = 0; i < len; ++i)
      if (unit(rng) < spec.marker_rate) ++markers;
    markers = std::max(1, markers);
  }
  for (int k = 0; k < markers; ++k) {
    int pos = std::uniform_int_distribution<int>(0, static_cast<int>(s.tokens.size()))(rng);
    int idx = marker_dist(rng);
    s.tokens.insert(s.tokens.begin() + pos, synth_marker_token(style, idx));
    s.mask.insert(s.mask.begin() + pos, 1);
    s.marker_idx.insert(s.marker_idx.begin() + pos, idx);
  }
  return s;
}

}  // namespace detail

inline SynthData synth_generate(const SynthSpec& spec) {
  if (spec.num_styles < 1 || spec.markers_per_style < 1 || spec.content_vocab < 1)
    throw ValueError("synth spec must have positive sizes");
  if (spec.marker_rate < 0 || spec.marker_rate > 1 || spec.no_marker_fraction < 0 ||
      spec.no_marker_fraction > 1)
    throw ValueError("synth rates must lie in [0,1]");

  SynthData out;
  struct SplitDef {
    const char* name;
    int count;
    Corpus* corpus;
    std::vector<std::vector<int>>* masks;
    std::vector<std::vector<std::string>>* refs;
  };
  SplitDef splits[] = {
      {"train", spec.train_sentences, &out.train, &out.train_masks, nullptr},
      {"valid", spec.valid_sentences, &out.valid, &out.valid_masks, &out.valid_references},
      {"test", spec.test_sentences, &out.test, &out.test_masks, &out.test_references},
  };
  for (size_t si = 0; si < 3; ++si) {
    SplitDef& def = splits[si];
    def.corpus->split = def.name;
    def.corpus->num_styles = spec.num_styles;
    for (int style = 0; style < spec.num_styles; ++style) {
      std::mt19937_64 rng = nn::make_rng(spec.seed, 100 + si, style);
      int per_style = def.count / spec.num_styles;
      for (int i = 0; i < per_style; ++i) {
        detail::SynthSentence s = detail::synth_sentence(spec, style, rng);
        def.corpus->sentences.push_back(s.tokens);
        def.corpus->labels.push_back(style);
        def.masks->push_back(s.mask);
        if (def.refs && spec.num_styles == 2) {
          std::vector<std::string> ref = s.tokens;
          for (size_t p = 0; p < ref.size(); ++p)
            if (s.mask[p] == 1) ref[p] = synth_marker_token(1 - style, s.marker_idx[p]);
          def.refs->push_back(std::move(ref));
        }
      }
    }
  }
  return out;
}

// Ground-truth masks as JSON lines: {"tokens": [...], "mask": [...]}.
inline void write_masks_jsonl(const std::string& path, const Corpus& corpus,
                              const std::vector<std::vector<int>>& masks) {
  if (corpus.size() != masks.size()) throw ValueError("mask count must match corpus size");
  std::ofstream os(path);
  if (!os) throw IoError("cannot write masks: " + path);
  for (size_t i = 0; i < masks.size(); ++i) {
    nlohmann::json j;
    j["tokens"] = corpus.sentences[i];
    j["mask"] = masks[i];
    os << j.dump() << "\n";
  }
}

inline void write_corpus_files(const std::string& root, const Corpus& corpus) {
  std::filesystem::create_directories(root);
  std::vector<std::ofstream> files;
  for (int y = 0; y < corpus.num_styles; ++y) {
    files.emplace_back(root + "/" + corpus.split + "." + std::to_string(y));
    if (!files.back()) throw IoError("cannot write corpus split under " + root);
  }
  for (size_t i = 0; i < corpus.size(); ++i) {
    std::ofstream& os = files[corpus.labels[i]];
    for (size_t t = 0; t < corpus.sentences[i].size(); ++t)
      os << (t ? " " : "") << corpus.sentences[i][t];
    os << "\n";
  }
}

// Epoch-shuffled minibatch index lists.
inline std::vector<std::vector<int>> shuffled_batches(size_t n, int batch_size,
                                                      std::mt19937_64& rng) {
  std::vector<int> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> batches;
  for (size_t start = 0; start < n; start += batch_size) {
    size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

// Sentence indices of one style, in corpus order.
inline std::vector<int> style_indices(const Corpus& corpus, int style) {
  std::vector<int> out;
  for (size_t i = 0; i < corpus.size(); ++i)
    if (corpus.labels[i] == style) out.push_back(static_cast<int>(i));
  return out;
}

}  // namespace stylet::data
