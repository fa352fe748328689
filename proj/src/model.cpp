#include "biss/model.hpp"

#include <algorithm>
#include <cmath>

#include "biss/errors.hpp"

namespace biss {

namespace {

constexpr double kMaskedOut = -1e9;

Tensor normal_init(Shape shape, std::mt19937_64& rng) {
    return Tensor::randn(std::move(shape), rng, 0.02, true);
}

LayerNormWeights make_ln(int d) {
    return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

AttentionWeights make_attn(int d, std::mt19937_64& rng) {
    return {normal_init({d, d}, rng), Tensor::zeros({d}, true),
            normal_init({d, d}, rng), Tensor::zeros({d}, true),
            normal_init({d, d}, rng), Tensor::zeros({d}, true),
            normal_init({d, d}, rng), Tensor::zeros({d}, true)};
}

FeedForwardWeights make_ff(int d, int d_ff, std::mt19937_64& rng) {
    return {normal_init({d, d_ff}, rng), Tensor::zeros({d_ff}, true),
            normal_init({d_ff, d}, rng), Tensor::zeros({d}, true)};
}

// Sinusoidal positions replicated across the batch, no gradient.
Tensor positional_encoding(int batch, int len, int d) {
    std::vector<double> pe(static_cast<std::size_t>(len) * d);
    for (int pos = 0; pos < len; ++pos) {
        for (int j = 0; j < d; ++j) {
            const double angle = pos / std::pow(10000.0, 2.0 * (j / 2) / d);
            pe[static_cast<std::size_t>(pos) * d + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    std::vector<double> out(static_cast<std::size_t>(batch) * len * d);
    for (int b = 0; b < batch; ++b) {
        std::copy(pe.begin(), pe.end(), out.begin() + static_cast<std::ptrdiff_t>(b) * len * d);
    }
    return Tensor({batch, len, d}, std::move(out));
}

// Additive attention bias [B*H, Tq, Tk]; blocked(b, i, j) marks key j
// invisible to query i in batch row b.
template <typename Blocked>
Tensor attention_bias(int batch, int heads, int tq, int tk, Blocked blocked) {
    std::vector<double> bias(static_cast<std::size_t>(batch) * heads * tq * tk, 0.0);
    for (int b = 0; b < batch; ++b) {
        for (int i = 0; i < tq; ++i) {
            for (int j = 0; j < tk; ++j) {
                if (!blocked(b, i, j)) continue;
                for (int h = 0; h < heads; ++h) {
                    bias[((static_cast<std::size_t>(b) * heads + h) * tq + i) * tk + j] = kMaskedOut;
                }
            }
        }
    }
    return Tensor({batch * heads, tq, tk}, std::move(bias));
}

struct Ctx {
    const ModelConfig& cfg;
    Mode mode;
    std::mt19937_64* rng;

    Tensor drop(const Tensor& x) const {
        if (mode != Mode::kTrain || cfg.dropout_rate == 0.0) return x;
        return dropout(x, cfg.dropout_rate, *rng, true);
    }
};

Tensor linear(const Tensor& x2d, const Tensor& w, const Tensor& b) {
    return add(matmul(x2d, w), b);
}

Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in,
                            const AttentionWeights& w, const Tensor& mask_bias,
                            const Ctx& ctx) {
    const int b = q_in.dim(0), tq = q_in.dim(1), tk = kv_in.dim(1);
    const int d = ctx.cfg.d_model, h = ctx.cfg.n_heads, dh = d / h;
    auto heads = [&](const Tensor& inp, const Tensor& weight, const Tensor& bias, int t) {
        Tensor p = linear(reshape(inp, {b * t, d}), weight, bias);
        return reshape(permute(reshape(p, {b, t, h, dh}), {0, 2, 1, 3}), {b * h, t, dh});
    };
    Tensor q = heads(q_in, w.wq, w.bq, tq);
    Tensor k = heads(kv_in, w.wk, w.bk, tk);
    Tensor v = heads(kv_in, w.wv, w.bv, tk);
    Tensor scores = scale(bmm(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
    scores = add(scores, mask_bias);
    Tensor attn = ctx.drop(softmax(scores, -1));
    Tensor mixed = bmm(attn, v);
    mixed = reshape(permute(reshape(mixed, {b, h, tq, dh}), {0, 2, 1, 3}), {b * tq, d});
    return reshape(linear(mixed, w.wo, w.bo), {b, tq, d});
}

Tensor feed_forward(const Tensor& x, const FeedForwardWeights& w, const Ctx& ctx) {
    const int b = x.dim(0), t = x.dim(1), d = x.dim(2);
    Tensor h = relu(linear(reshape(x, {b * t, d}), w.w1, w.b1));
    h = ctx.drop(h);
    return reshape(linear(h, w.w2, w.b2), {b, t, d});
}

Tensor embed_and_position(const std::vector<int>& ids, int batch, int len,
                          const ModelParams& p, const Ctx& ctx) {
    Tensor x = embedding_lookup(p.tok_embed, ids, {batch, len});
    x = scale(x, std::sqrt(static_cast<double>(ctx.cfg.d_model)));
    x = add(x, positional_encoding(batch, len, ctx.cfg.d_model));
    return ctx.drop(x);
}

}  // namespace

void ModelConfig::validate() const {
    if (d_model <= 0 || n_heads <= 0 || n_layers <= 0 || d_ff <= 0) {
        throw ConfigError("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (max_len < 2) throw ConfigError("max_len must be >= 2");
    if (vocab_size < 5) throw ConfigError("vocab_size must be >= 5 (reserved ids plus content)");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout_rate must be in [0,1)");
}

ModelParams ModelParams::init(const ModelConfig& config, std::mt19937_64& rng) {
    config.validate();
    ModelParams p;
    p.tok_embed = normal_init({config.vocab_size, config.d_model}, rng);
    for (int l = 0; l < config.n_layers; ++l) {
        p.encoder.push_back({make_ln(config.d_model), make_attn(config.d_model, rng),
                             make_ln(config.d_model), make_ff(config.d_model, config.d_ff, rng)});
        p.decoder.push_back({make_ln(config.d_model), make_attn(config.d_model, rng),
                             make_ln(config.d_model), make_attn(config.d_model, rng),
                             make_ln(config.d_model), make_ff(config.d_model, config.d_ff, rng)});
    }
    p.enc_final = make_ln(config.d_model);
    p.dec_final = make_ln(config.d_model);
    if (!config.tie_embeddings) p.out_w = normal_init({config.d_model, config.vocab_size}, rng);
    p.out_b = Tensor::zeros({config.vocab_size}, true);
    return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_embed", tok_embed);
    auto add_ln = [&](const std::string& name, const LayerNormWeights& ln) {
        out.emplace_back(name + ".gain", ln.gain);
        out.emplace_back(name + ".bias", ln.bias);
    };
    auto add_attn = [&](const std::string& name, const AttentionWeights& a) {
        out.emplace_back(name + ".wq", a.wq);
        out.emplace_back(name + ".bq", a.bq);
        out.emplace_back(name + ".wk", a.wk);
        out.emplace_back(name + ".bk", a.bk);
        out.emplace_back(name + ".wv", a.wv);
        out.emplace_back(name + ".bv", a.bv);
        out.emplace_back(name + ".wo", a.wo);
        out.emplace_back(name + ".bo", a.bo);
    };
    auto add_ff = [&](const std::string& name, const FeedForwardWeights& f) {
        out.emplace_back(name + ".w1", f.w1);
        out.emplace_back(name + ".b1", f.b1);
        out.emplace_back(name + ".w2", f.w2);
        out.emplace_back(name + ".b2", f.b2);
    };
    for (std::size_t l = 0; l < encoder.size(); ++l) {
        const std::string base = "enc" + std::to_string(l);
        add_ln(base + ".ln_attn", encoder[l].ln_attn);
        add_attn(base + ".attn", encoder[l].attn);
        add_ln(base + ".ln_ff", encoder[l].ln_ff);
        add_ff(base + ".ff", encoder[l].ff);
    }
    for (std::size_t l = 0; l < decoder.size(); ++l) {
        const std::string base = "dec" + std::to_string(l);
        add_ln(base + ".ln_self", decoder[l].ln_self);
        add_attn(base + ".self_attn", decoder[l].self_attn);
        add_ln(base + ".ln_cross", decoder[l].ln_cross);
        add_attn(base + ".cross_attn", decoder[l].cross_attn);
        add_ln(base + ".ln_ff", decoder[l].ln_ff);
        add_ff(base + ".ff", decoder[l].ff);
    }
    add_ln("enc_final", enc_final);
    add_ln("dec_final", dec_final);
    if (out_w.defined()) out.emplace_back("out_w", out_w);
    out.emplace_back("out_b", out_b);
    return out;
}

std::vector<Tensor> ModelParams::tensors() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
}

bool ModelParams::all_finite() const {
    for (const Tensor& t : tensors()) {
        if (!t.all_finite()) return false;
    }
    return true;
}

Tensor encode(const Batch& batch, const ModelParams& params, const ModelConfig& config,
              Mode mode, std::mt19937_64* rng) {
    config.validate();
    if (batch.src_len > config.max_len) {
        throw DataError("source length " + std::to_string(batch.src_len) + " exceeds max_len " +
                        std::to_string(config.max_len));
    }
    if (mode == Mode::kTrain && config.dropout_rate > 0.0 && rng == nullptr) {
        throw ConfigError("train-mode encode requires a dropout generator");
    }
    const Ctx ctx{config, mode, rng};
    const int b = batch.batch_size, s = batch.src_len;
    Tensor x = embed_and_position(batch.context, b, s, params, ctx);
    Tensor pad_bias = attention_bias(b, config.n_heads, s, s, [&](int bi, int, int j) {
        return batch.context_pad[static_cast<std::size_t>(bi) * s + j];
    });
    for (const EncoderLayerWeights& layer : params.encoder) {
        Tensor h = layer_norm(x, layer.ln_attn.gain, layer.ln_attn.bias);
        x = add(x, ctx.drop(multi_head_attention(h, h, layer.attn, pad_bias, ctx)));
        h = layer_norm(x, layer.ln_ff.gain, layer.ln_ff.bias);
        x = add(x, ctx.drop(feed_forward(h, layer.ff, ctx)));
    }
    return layer_norm(x, params.enc_final.gain, params.enc_final.bias);
}

Tensor decode(const std::vector<int>& tgt_input, int tgt_len, const Tensor& memory,
              const std::vector<bool>& src_pad, const ModelParams& params,
              const ModelConfig& config, Mode mode, std::mt19937_64* rng) {
    config.validate();
    if (tgt_len > config.max_len) {
        throw DataError("target length " + std::to_string(tgt_len) + " exceeds max_len " +
                        std::to_string(config.max_len));
    }
    if (mode == Mode::kTrain && config.dropout_rate > 0.0 && rng == nullptr) {
        throw ConfigError("train-mode decode requires a dropout generator");
    }
    const int b = memory.dim(0), s = memory.dim(1);
    if (static_cast<int>(tgt_input.size()) != b * tgt_len) {
        throw std::invalid_argument("tgt_input length does not match batch x tgt_len");
    }
    for (int r = 0; r < b; ++r) {
        if (tgt_input[static_cast<std::size_t>(r) * tgt_len] != Vocab::kBos) {
            throw DataError("decoder input row " + std::to_string(r) + " does not start with BOS");
        }
    }
    const Ctx ctx{config, mode, rng};
    Tensor x = embed_and_position(tgt_input, b, tgt_len, params, ctx);
    Tensor causal_bias = attention_bias(b, config.n_heads, tgt_len, tgt_len,
                                        [](int, int i, int j) { return j > i; });
    Tensor cross_bias = attention_bias(b, config.n_heads, tgt_len, s, [&](int bi, int, int j) {
        return src_pad[static_cast<std::size_t>(bi) * s + j];
    });
    for (const DecoderLayerWeights& layer : params.decoder) {
        Tensor h = layer_norm(x, layer.ln_self.gain, layer.ln_self.bias);
        x = add(x, ctx.drop(multi_head_attention(h, h, layer.self_attn, causal_bias, ctx)));
        h = layer_norm(x, layer.ln_cross.gain, layer.ln_cross.bias);
        x = add(x, ctx.drop(multi_head_attention(h, memory, layer.cross_attn, cross_bias, ctx)));
        h = layer_norm(x, layer.ln_ff.gain, layer.ln_ff.bias);
        x = add(x, ctx.drop(feed_forward(h, layer.ff, ctx)));
    }
    x = layer_norm(x, params.dec_final.gain, params.dec_final.bias);
    Tensor flat = reshape(x, {b * tgt_len, config.d_model});
    Tensor logits = config.tie_embeddings
                        ? add(matmul(flat, permute(params.tok_embed, {1, 0})), params.out_b)
                        : add(matmul(flat, params.out_w), params.out_b);
    return reshape(logits, {b, tgt_len, config.vocab_size});
}

std::vector<TokenSeq> greedy_generate(const Batch& batch, const ModelParams& params,
                                      const ModelConfig& config, int max_len) {
    const int b = batch.batch_size;
    const int limit = std::min(max_len, config.max_len);
    Tensor memory = encode(batch, params, config, Mode::kEval);
    std::vector<std::vector<int>> rows(static_cast<std::size_t>(b), std::vector<int>{Vocab::kBos});
    std::vector<bool> done(static_cast<std::size_t>(b), false);
    for (int step = 0; step < limit; ++step) {
        const int t = step + 1;
        std::vector<int> tgt(static_cast<std::size_t>(b) * t, Vocab::kEos);
        for (int r = 0; r < b; ++r) {
            for (int j = 0; j < t && j < static_cast<int>(rows[static_cast<std::size_t>(r)].size()); ++j) {
                tgt[static_cast<std::size_t>(r) * t + j] = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(j)];
            }
        }
        Tensor logits = decode(tgt, t, memory, batch.context_pad, params, config, Mode::kEval);
        const int v = config.vocab_size;
        bool all_done = true;
        for (int r = 0; r < b; ++r) {
            if (done[static_cast<std::size_t>(r)]) continue;
            const double* row = logits.data().data() +
                                (static_cast<std::ptrdiff_t>(r) * t + (t - 1)) * v;
            const int next = static_cast<int>(std::max_element(row, row + v) - row);
            if (next == Vocab::kEos) {
                done[static_cast<std::size_t>(r)] = true;
            } else {
                rows[static_cast<std::size_t>(r)].push_back(next);
                if (static_cast<int>(rows[static_cast<std::size_t>(r)].size()) - 1 < limit) all_done = false;
            }
        }
        if (all_done) break;
        bool any_active = false;
        for (int r = 0; r < b; ++r) any_active = any_active || !done[static_cast<std::size_t>(r)];
        if (!any_active) break;
    }
    std::vector<TokenSeq> out;
    out.reserve(static_cast<std::size_t>(b));
    for (auto& row : rows) out.emplace_back(row.begin() + 1, row.end());
    return out;
}

}  // namespace biss
