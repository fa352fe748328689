#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "biss/corpus.hpp"
#include "biss/tensor.hpp"

namespace biss {

enum class Mode { kTrain, kEval };

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 2;
    int d_ff = 256;
    double dropout_rate = 0.1;
    int max_len = 26;
    int vocab_size = 0;
    bool tie_embeddings = false;

    void validate() const;
};

struct LayerNormWeights {
    Tensor gain, bias;
};

struct AttentionWeights {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FeedForwardWeights {
    Tensor w1, b1, w2, b2;
};

struct EncoderLayerWeights {
    LayerNormWeights ln_attn;
    AttentionWeights attn;
    LayerNormWeights ln_ff;
    FeedForwardWeights ff;
};

struct DecoderLayerWeights {
    LayerNormWeights ln_self;
    AttentionWeights self_attn;
    LayerNormWeights ln_cross;
    AttentionWeights cross_attn;
    LayerNormWeights ln_ff;
    FeedForwardWeights ff;
};

struct ModelParams {
    Tensor tok_embed;  // vocab_size x d_model, shared decoder embedding (SLI2 table)
    std::vector<EncoderLayerWeights> encoder;
    std::vector<DecoderLayerWeights> decoder;
    LayerNormWeights enc_final;
    LayerNormWeights dec_final;
    Tensor out_w, out_b;  // unused when tie_embeddings (out_b still applies)

    static ModelParams init(const ModelConfig& config, std::mt19937_64& rng);

    // Stable name -> tensor listing; ordering defines checkpoint and
    // optimizer-state layout.
    std::vector<std::pair<std::string, Tensor>> named() const;
    std::vector<Tensor> tensors() const;
    bool all_finite() const;
};

// rng is required in train mode (dropout); ignored in eval mode.
Tensor encode(const Batch& batch, const ModelParams& params, const ModelConfig& config,
              Mode mode, std::mt19937_64* rng = nullptr);

// tgt_input is B x tgt_len, BOS-prefixed; returns logits [B, tgt_len, vocab].
Tensor decode(const std::vector<int>& tgt_input, int tgt_len, const Tensor& memory,
              const std::vector<bool>& src_pad, const ModelParams& params,
              const ModelConfig& config, Mode mode, std::mt19937_64* rng = nullptr);

// Autoregressive argmax decoding; stops at EOS or max_len tokens. Returned
// sequences exclude BOS and EOS. Evaluation only.
std::vector<TokenSeq> greedy_generate(const Batch& batch, const ModelParams& params,
                                      const ModelConfig& config, int max_len);

}  // namespace biss
