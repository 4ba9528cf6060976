#include "lab/model.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "lab/rng.hpp"

namespace lab::model {

namespace {

// What a parameter is determines its init and its weight-decay treatment.
enum class ParamKind { embedding, proj_weight, bias, ln_gain, ln_bias };

// Single source of truth for the parameter plan: build(), the census helpers
// and the checkpoint layout all enumerate the same list in the same order.
void for_each_param(const ModelConfig& cfg,
                    const std::function<void(const std::string&, int, int, ParamKind)>& fn) {
  fn("tok_emb", cfg.vocab_size, cfg.d_model, ParamKind::embedding);
  fn("pos_emb", cfg.context, cfg.d_model, ParamKind::embedding);
  for (size_t i = 0; i < cfg.layers.size(); ++i) {
    const LayerSpec& l = cfg.layers[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    const int width = l.heads * l.d_head;
    fn(pre + "attn.wq", cfg.d_model, width, ParamKind::proj_weight);
    fn(pre + "attn.wk", cfg.d_model, width, ParamKind::proj_weight);
    fn(pre + "attn.wv", cfg.d_model, width, ParamKind::proj_weight);
    fn(pre + "attn.wo", width, cfg.d_model, ParamKind::proj_weight);
    if (l.mechanism == attn::Mechanism::sd) {
      fn(pre + "attn.wd", cfg.d_model, l.heads, ParamKind::proj_weight);
      fn(pre + "attn.bd", 1, l.heads, ParamKind::bias);
    }
    if (l.layer_norm) {
      fn(pre + "ln1.g", 1, cfg.d_model, ParamKind::ln_gain);
      fn(pre + "ln1.b", 1, cfg.d_model, ParamKind::ln_bias);
      fn(pre + "ln2.g", 1, cfg.d_model, ParamKind::ln_gain);
      fn(pre + "ln2.b", 1, cfg.d_model, ParamKind::ln_bias);
    }
    fn(pre + "ffn.w1", cfg.d_model, cfg.ffn_mult * cfg.d_model, ParamKind::proj_weight);
    fn(pre + "ffn.b1", 1, cfg.ffn_mult * cfg.d_model, ParamKind::bias);
    fn(pre + "ffn.w2", cfg.ffn_mult * cfg.d_model, cfg.d_model, ParamKind::proj_weight);
    fn(pre + "ffn.b2", 1, cfg.d_model, ParamKind::bias);
  }
  bool any_ln = false;
  for (const auto& l : cfg.layers) any_ln = any_ln || l.layer_norm;
  if (any_ln) {
    fn("final_ln.g", 1, cfg.d_model, ParamKind::ln_gain);
    fn("final_ln.b", 1, cfg.d_model, ParamKind::ln_bias);
  }
  if (!cfg.tie_embeddings) {
    fn("head_w", cfg.vocab_size, cfg.d_model, ParamKind::proj_weight);
  }
}

}  // namespace

void validate(const ModelConfig& cfg) {
  std::string problems;
  auto bad = [&](const std::string& msg) {
    if (!problems.empty()) problems += "; ";
    problems += msg;
  };
  if (cfg.vocab_size < 1) bad("vocab_size must be >= 1");
  if (cfg.d_model < 1) bad("d_model must be >= 1");
  if (cfg.context < 2) bad("context must be >= 2");
  if (cfg.ffn_mult < 1) bad("ffn_mult must be >= 1");
  if (cfg.sd_epsilon < 0.0f) bad("sd_epsilon must be >= 0");
  if (cfg.layers.empty()) bad("layers must be non-empty");
  for (size_t i = 0; i < cfg.layers.size(); ++i) {
    const LayerSpec& l = cfg.layers[i];
    const std::string pre = "layers[" + std::to_string(i) + "].";
    if (l.heads < 1) bad(pre + "heads must be >= 1");
    if (l.d_head < 1) bad(pre + "d_head must be >= 1");
    if (l.heads >= 1 && l.d_head >= 1 &&
        static_cast<long>(l.heads) * l.d_head > 4L * cfg.d_model) {
      bad(pre + "heads*d_head exceeds 4*d_model");
    }
  }
  if (!problems.empty()) throw ConfigError("invalid model config: " + problems);
}

Model build(const ModelConfig& cfg, uint64_t seed) {
  validate(cfg);
  Model m;
  m.config = cfg;
  m.config.seed = seed;
  Rng rng(seed);

  auto make_param = [&](const std::string& name, int r, int c, ParamKind kind) {
    Tensor t = Tensor::zeros(r, c, true);
    switch (kind) {
      case ParamKind::embedding:
      case ParamKind::proj_weight:
        for (auto& x : t.values()) x = static_cast<float>(rng.normal() * 0.02);
        break;
      case ParamKind::ln_gain:
        for (auto& x : t.values()) x = 1.0f;
        break;
      case ParamKind::bias:
      case ParamKind::ln_bias:
        break;  // zeros
    }
    m.params.push_back({name, t, kind == ParamKind::proj_weight});
    return t;
  };

  m.layers.resize(cfg.layers.size());
  size_t layer_idx = 0;
  for_each_param(cfg, [&](const std::string& name, int r, int c, ParamKind kind) {
    Tensor t = make_param(name, r, c, kind);
    if (name == "tok_emb") {
      m.tok_emb = t;
      return;
    }
    if (name == "pos_emb") {
      m.pos_emb = t;
      return;
    }
    if (name == "head_w") {
      m.head_w = t;
      return;
    }
    if (name == "final_ln.g") {
      m.final_ln_g = t;
      m.final_layer_norm = true;
      return;
    }
    if (name == "final_ln.b") {
      m.final_ln_b = t;
      return;
    }
    // layers.<i>.<field>
    const size_t dot = name.find('.', 7);
    layer_idx = std::stoul(name.substr(7, dot - 7));
    Model::Layer& L = m.layers[layer_idx];
    const std::string field = name.substr(dot + 1);
    if (field == "attn.wq") L.attn.wq = t;
    else if (field == "attn.wk") L.attn.wk = t;
    else if (field == "attn.wv") L.attn.wv = t;
    else if (field == "attn.wo") L.attn.wo = t;
    else if (field == "attn.wd") L.attn.wd = t;
    else if (field == "attn.bd") L.attn.bd = t;
    else if (field == "ln1.g") L.ln1_g = t;
    else if (field == "ln1.b") L.ln1_b = t;
    else if (field == "ln2.g") L.ln2_g = t;
    else if (field == "ln2.b") L.ln2_b = t;
    else if (field == "ffn.w1") L.ffn_w1 = t;
    else if (field == "ffn.b1") L.ffn_b1 = t;
    else if (field == "ffn.w2") L.ffn_w2 = t;
    else if (field == "ffn.b2") L.ffn_b2 = t;
  });
  for (size_t i = 0; i < cfg.layers.size(); ++i) {
    m.layers[i].attn.mech = cfg.layers[i].mechanism;
    m.layers[i].attn.heads = cfg.layers[i].heads;
    m.layers[i].attn.d_head = cfg.layers[i].d_head;
    m.layers[i].attn.epsilon = cfg.sd_epsilon;
  }
  return m;
}

Tensor Model::forward(Tape& tape, const std::vector<int>& tokens,
                      const attn::AttnIntercept* hooks) const {
  const int n = static_cast<int>(tokens.size());
  if (n < 1 || n > config.context) {
    throw std::invalid_argument("forward: window length " + std::to_string(n) +
                                " outside [1, " + std::to_string(config.context) + "]");
  }
  std::vector<int> pos(n);
  std::iota(pos.begin(), pos.end(), 0);
  Tensor x = tape.add(tape.embedding(tok_emb, tokens), tape.embedding(pos_emb, pos));
  for (size_t i = 0; i < layers.size(); ++i) {
    const Layer& L = layers[i];
    const bool ln = config.layers[i].layer_norm;
    Tensor a_in = ln ? tape.layer_norm(x, L.ln1_g, L.ln1_b) : x;
    Tensor att = attn::attention_layer_forward(tape, a_in, L.attn, static_cast<int>(i), hooks);
    x = tape.add(x, att);
    Tensor f_in = ln ? tape.layer_norm(x, L.ln2_g, L.ln2_b) : x;
    Tensor h = tape.gelu(tape.matmul_bias(f_in, L.ffn_w1, L.ffn_b1));
    Tensor f = tape.matmul_bias(h, L.ffn_w2, L.ffn_b2);
    x = tape.add(x, f);
  }
  if (final_layer_norm) x = tape.layer_norm(x, final_ln_g, final_ln_b);
  return tape.matmul_nt(x, config.tie_embeddings ? tok_emb : head_w);
}

Tensor Model::loss(Tape& tape, const std::vector<int>& window,
                   const attn::AttnIntercept* hooks) const {
  if (window.size() < 2) {
    throw std::invalid_argument("loss: window needs at least 2 tokens");
  }
  std::vector<int> inputs(window.begin(), window.end() - 1);
  std::vector<int> targets(window.begin() + 1, window.end());
  Tensor logits = forward(tape, inputs, hooks);
  return tape.cross_entropy_mean(logits, targets);
}

void Model::zero_grad() {
  for (auto& p : params) p.tensor.zero_grad();
}

double forward_loss(const Model& m, const std::vector<std::vector<int>>& windows) {
  if (windows.empty()) throw std::invalid_argument("forward_loss: no windows");
  double total = 0.0;
  for (const auto& w : windows) {
    Tape tape(false);
    total += m.loss(tape, w).item();
  }
  return total / static_cast<double>(windows.size());
}

double perplexity(const Model& m, std::span<const uint8_t> corpus, int stride,
                  const attn::AttnIntercept* hooks) {
  const int n = m.config.context;
  if (stride < 1 || stride > n) {
    throw std::invalid_argument("perplexity: stride " + std::to_string(stride) +
                                " outside [1, context=" + std::to_string(n) + "]");
  }
  const long mlen = static_cast<long>(corpus.size());
  if (mlen < 2) throw std::invalid_argument("perplexity: corpus needs at least 2 tokens");

  // Window plan: starts on the stride grid, truncated at the corpus end;
  // each window scores the predictions not covered by an earlier window.
  struct Win {
    long start;
    long score_from;  // first scored target index (global)
  };
  std::vector<Win> wins;
  long next_unscored = 1;
  for (long s = 0; s <= mlen - 2 && next_unscored <= mlen - 1; s += stride) {
    const long wlen = std::min<long>(n, mlen - 1 - s);
    const long from = std::max(next_unscored, s + 1);
    if (from <= s + wlen) {
      wins.push_back({s, from});
      next_unscored = s + wlen + 1;
    }
  }

  std::vector<double> nll(wins.size(), 0.0);
  std::vector<long> counts(wins.size(), 0);
#pragma omp parallel for schedule(dynamic)
  for (size_t wi = 0; wi < wins.size(); ++wi) {
    const auto [s, from] = wins[wi];
    const long wlen = std::min<long>(n, mlen - 1 - s);
    std::vector<int> inputs(corpus.begin() + s, corpus.begin() + s + wlen);
    Tape tape(false);
    Tensor logits = m.forward(tape, inputs, hooks);
    const int vocab = logits.cols();
    std::vector<float> ex(vocab);
    double acc = 0.0;
    long cnt = 0;
    for (long t = from; t <= s + wlen; ++t) {
      const int row = static_cast<int>(t - 1 - s);
      const float* lrow = logits.data() + static_cast<size_t>(row) * vocab;
      float mx = lrow[0];
      for (int j = 1; j < vocab; ++j) mx = std::max(mx, lrow[j]);
      float* exp_row = ex.data();
#pragma omp simd
      for (int j = 0; j < vocab; ++j) exp_row[j] = expf(lrow[j] - mx);
      double lse = 0.0;
      for (int j = 0; j < vocab; ++j) lse += exp_row[j];
      acc += std::log(lse) + mx - lrow[corpus[t]];
      ++cnt;
    }
    nll[wi] = acc;
    counts[wi] = cnt;
  }
  double total = 0.0;
  long scored = 0;
  for (size_t i = 0; i < wins.size(); ++i) {
    total += nll[i];
    scored += counts[i];
  }
  if (scored == 0) throw NumericalError("perplexity: no scored tokens");
  return std::exp(total / static_cast<double>(scored));
}

std::vector<ParamShape> parameter_shapes(const ModelConfig& cfg) {
  std::vector<ParamShape> out;
  for_each_param(cfg, [&](const std::string& name, int r, int c, ParamKind) {
    out.push_back({name, r, c});
  });
  return out;
}

long long attention_weight_param_count(const ModelConfig& cfg) {
  long long total = 0;
  for_each_param(cfg, [&](const std::string& name, int r, int c, ParamKind) {
    const bool is_proj = name.find("attn.wq") != std::string::npos ||
                         name.find("attn.wk") != std::string::npos ||
                         name.find("attn.wv") != std::string::npos ||
                         name.find("attn.wo") != std::string::npos;
    if (is_proj) total += static_cast<long long>(r) * c;
  });
  return total;
}

long long damping_param_count(const ModelConfig& cfg) {
  long long total = 0;
  for_each_param(cfg, [&](const std::string& name, int r, int c, ParamKind) {
    if (name.find("attn.wd") != std::string::npos || name.find("attn.bd") != std::string::npos) {
      total += static_cast<long long>(r) * c;
    }
  });
  return total;
}

long long total_param_count(const ModelConfig& cfg) {
  long long total = 0;
  for_each_param(cfg, [&](const std::string&, int r, int c, ParamKind) {
    total += static_cast<long long>(r) * c;
  });
  return total;
}

}  // namespace lab::model
