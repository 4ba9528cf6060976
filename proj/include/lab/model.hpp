#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lab/attention.hpp"
#include "lab/tensor.hpp"

namespace lab::model {

// Thrown on invalid configuration documents; the CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LayerSpec {
  attn::Mechanism mechanism = attn::Mechanism::standard;
  int heads = 4;
  int d_head = 32;
  bool layer_norm = true;
};

struct ModelConfig {
  int vocab_size = 256;
  int d_model = 128;
  int context = 256;
  int ffn_mult = 4;
  bool tie_embeddings = true;
  float sd_epsilon = 0.05f;
  std::vector<LayerSpec> layers;
  uint64_t seed = 1;
};

void validate(const ModelConfig& cfg);  // throws ConfigError enumerating bad fields

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool weight_decay = false;
};

struct Model {
  ModelConfig config;
  Tensor tok_emb;  // vocab x d_model
  Tensor pos_emb;  // context x d_model
  Tensor head_w;   // vocab x d_model, only when embeddings are untied
  struct Layer {
    attn::LayerParams attn;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  };
  std::vector<Layer> layers;
  bool final_layer_norm = false;  // present iff any layer normalizes
  Tensor final_ln_g, final_ln_b;
  std::vector<NamedParam> params;

  // Logits for a token window (length <= context).
  Tensor forward(Tape& tape, const std::vector<int>& tokens,
                 const attn::AttnIntercept* hooks = nullptr) const;
  // Mean next-token cross entropy over a window of W+1 tokens (W inputs).
  Tensor loss(Tape& tape, const std::vector<int>& window,
              const attn::AttnIntercept* hooks = nullptr) const;
  void zero_grad();
};

Model build(const ModelConfig& cfg, uint64_t seed);

// Mean of per-sequence losses, forward only.
double forward_loss(const Model& m, const std::vector<std::vector<int>>& windows);

// Overlapping-stride perplexity over a byte corpus: windows of context
// length start on the stride grid (truncated at the corpus end); the first
// window scores every prediction, later windows only the positions not
// already scored (the final `stride` of a full window).
// PPL = exp(total NLL / scored tokens).
double perplexity(const Model& m, std::span<const uint8_t> corpus, int stride,
                  const attn::AttnIntercept* hooks = nullptr);

// Parameter census helpers, enumerated from the same shape plan build() uses.
struct ParamShape {
  std::string name;
  int rows = 0;
  int cols = 0;
};
std::vector<ParamShape> parameter_shapes(const ModelConfig& cfg);
long long attention_weight_param_count(const ModelConfig& cfg);  // wq+wk+wv+wo weights only
long long damping_param_count(const ModelConfig& cfg);           // wd + bd
long long total_param_count(const ModelConfig& cfg);

}  // namespace lab::model
