#include "biss/sampling.hpp"

#include <algorithm>
#include <cmath>

#include "biss/errors.hpp"
#include "biss/metrics.hpp"
#include "biss/rng.hpp"

namespace biss {

namespace {

void check_smooth(const SmoothFn& smooth) {
    if (const auto* s = std::get_if<SigmoidSmooth>(&smooth)) {
        if (s->k < 1.0) throw ConfigError("sigmoid smooth requires k >= 1");
        if (s->b <= 0.0) throw ConfigError("sigmoid smooth requires b > 0");
    }
}

void check_schedule(const DecaySchedule& schedule) {
    if (const auto* e = std::get_if<ExponentialDecay>(&schedule)) {
        if (e->k <= 0.0 || e->k > 1.0) throw ConfigError("exponential decay requires k in (0,1]");
    } else if (const auto* s = std::get_if<SigmoidDecay>(&schedule)) {
        if (s->k < 1.0) throw ConfigError("sigmoidal decay requires k >= 1");
    }
}

MixDecision make_all_gold(const Batch& batch) {
    MixDecision mix;
    mix.source.assign(batch.decoder_input.size(), TokenSource::kGold);
    mix.fused_p.assign(batch.decoder_input.size(), 0.0);
    mix.sentence_score.assign(static_cast<std::size_t>(batch.batch_size), 1.0);
    mix.mixed_input = batch.decoder_input;
    return mix;
}

int random_content_token(std::mt19937_64& rng, int vocab_size) {
    std::uniform_int_distribution<int> dist(Vocab::kReserved, vocab_size - 1);
    return dist(rng);
}

// Visits decoder-input positions t >= 1 whose gold token is not padding.
// fn(input index, target index, row rng) decides the replacement.
template <typename Fn>
MixDecision mix_positions(const Batch& batch, const RowRngFactory& make_row_rng, Fn fn) {
    MixDecision mix = make_all_gold(batch);
    const int t_len = batch.tgt_len;
    for (int r = 0; r < batch.batch_size; ++r) {
        std::mt19937_64 rng = make_row_rng(r);
        for (int t = 1; t < t_len; ++t) {
            const std::size_t in_idx = static_cast<std::size_t>(r) * t_len + t;
            const std::size_t tgt_idx = in_idx - 1;  // token at input t was predicted at t-1
            if (batch.response_pad[tgt_idx]) continue;
            fn(mix, in_idx, tgt_idx, rng);
        }
    }
    return mix;
}

}  // namespace

void validate_strategy(const StrategyConfig& strategy) {
    if (const auto* d = std::get_if<DecaySS>(&strategy)) {
        check_schedule(d->schedule);
    } else if (const auto* c = std::get_if<ConfidenceAware>(&strategy)) {
        if (c->t_golden < 0.0 || c->t_rand > 1.0 || c->t_golden > c->t_rand) {
            throw ConfigError("confidence thresholds must satisfy 0 <= t_golden <= t_rand <= 1");
        }
    } else if (const auto* a = std::get_if<AdaptiveBridge>(&strategy)) {
        if (a->tau <= 0.0) throw ConfigError("adaptive bridge tau must be positive");
    } else if (const auto* b = std::get_if<Bilevel>(&strategy)) {
        if (b->m <= 0.0) throw ConfigError("SLI scaling m must be positive");
        if (b->alpha <= 0.0 || b->alpha > 1.0) throw ConfigError("alpha must be in (0,1]");
        if (b->rand_guard_prob < 0.0 || b->rand_guard_prob > 1.0) {
            throw ConfigError("rand_guard_prob must be in [0,1]");
        }
        check_smooth(b->smooth);
    }
}

double decay_value(const DecaySchedule& schedule, long step) {
    if (step < 0) throw std::invalid_argument("step index must be >= 0");
    check_schedule(schedule);
    double f = 0.0;
    if (const auto* l = std::get_if<LinearDecay>(&schedule)) {
        f = std::max(l->eps, l->k * static_cast<double>(step) + l->b);
    } else if (const auto* e = std::get_if<ExponentialDecay>(&schedule)) {
        f = std::pow(e->k, static_cast<double>(step));
    } else {
        const double k = std::get<SigmoidDecay>(schedule).k;
        f = k / (k + std::exp(static_cast<double>(step) / k));
    }
    return std::clamp(f, 0.0, 1.0);
}

double fuse_and_smooth(double sentence_score, double word_prob, const SmoothFn& smooth) {
    const double x = sentence_score * word_prob;
    if (std::holds_alternative<ClampSmooth>(smooth)) {
        return std::max(std::min(x, 1.0), 0.0);
    }
    if (const auto* s = std::get_if<SigmoidSmooth>(&smooth)) {
        return 1.0 / (1.0 + std::exp(-s->k * (x - s->b)));
    }
    return std::get<ConstantSmooth>(smooth).value;
}

MixDecision bilevel_mix(const Batch& batch, const std::vector<int>& preds,
                        const std::vector<double>& probs,
                        const std::vector<double>& fused_p,
                        double alpha, double rand_guard_prob, int vocab_size,
                        const RowRngFactory& make_row_rng) {
    if (alpha <= 0.0) throw ConfigError("alpha must be positive");
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    MixDecision mix = mix_positions(batch, make_row_rng,
        [&](MixDecision& m, std::size_t in_idx, std::size_t tgt_idx, std::mt19937_64& rng) {
            const double p = fused_p[tgt_idx];
            m.fused_p[in_idx] = p;
            const double u = unif(rng);
            if (u < p) {
                m.source[in_idx] = TokenSource::kPred;
                m.mixed_input[in_idx] = preds[tgt_idx];
            }
            // Degeneration guard: over-confident positions get a random word.
            if (probs[tgt_idx] >= alpha) {
                if (rand_guard_prob >= 1.0 || unif(rng) < rand_guard_prob) {
                    m.source[in_idx] = TokenSource::kRand;
                    m.mixed_input[in_idx] = random_content_token(rng, vocab_size);
                }
            }
        });
    return mix;
}

MixDecision confidence_aware_mix(const Batch& batch, const std::vector<int>& preds,
                                 const std::vector<double>& probs,
                                 const ConfidenceAware& config, int vocab_size,
                                 const RowRngFactory& make_row_rng) {
    if (config.t_golden > config.t_rand) throw ConfigError("t_golden must be <= t_rand");
    return mix_positions(batch, make_row_rng,
        [&](MixDecision& m, std::size_t in_idx, std::size_t tgt_idx, std::mt19937_64& rng) {
            const double p = probs[tgt_idx];
            m.fused_p[in_idx] = p;
            if (p < config.t_golden) return;  // GOLD
            if (p < config.t_rand) {
                m.source[in_idx] = TokenSource::kPred;
                m.mixed_input[in_idx] = preds[tgt_idx];
            } else {
                m.source[in_idx] = TokenSource::kRand;
                m.mixed_input[in_idx] = random_content_token(rng, vocab_size);
            }
        });
}

MixDecision adaptive_bridge_mix(const Batch& batch, const std::vector<int>& preds,
                                const Tensor& embed_table, int epoch,
                                const AdaptiveBridge& config,
                                const RowRngFactory& make_row_rng) {
    if (config.tau <= 0.0) throw ConfigError("adaptive bridge tau must be positive");
    if (epoch < 0) throw std::invalid_argument("epoch must be >= 0");
    const double accept_p =
        1.0 / (1.0 + std::exp(-(static_cast<double>(epoch) - config.w) / config.tau));
    const int d = embed_table.dim(1);
    auto cosine = [&](int a, int b) {
        const double* va = embed_table.data().data() + static_cast<std::ptrdiff_t>(a) * d;
        const double* vb = embed_table.data().data() + static_cast<std::ptrdiff_t>(b) * d;
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int j = 0; j < d; ++j) {
            dot += va[j] * vb[j];
            na += va[j] * va[j];
            nb += vb[j] * vb[j];
        }
        if (na == 0.0 || nb == 0.0) return 0.0;
        return dot / (std::sqrt(na) * std::sqrt(nb));
    };
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    return mix_positions(batch, make_row_rng,
        [&](MixDecision& m, std::size_t in_idx, std::size_t tgt_idx, std::mt19937_64& rng) {
            const int gold = batch.decoder_input[in_idx];
            const int pred = preds[tgt_idx];
            if (cosine(pred, gold) <= config.beta) return;  // GOLD
            m.fused_p[in_idx] = accept_p;
            if (unif(rng) < accept_p) {
                m.source[in_idx] = TokenSource::kPred;
                m.mixed_input[in_idx] = pred;
            }
        });
}

MixDecision decay_mix(const Batch& batch, const std::vector<int>& preds,
                      double p_model, const RowRngFactory& make_row_rng) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    return mix_positions(batch, make_row_rng,
        [&](MixDecision& m, std::size_t in_idx, std::size_t tgt_idx, std::mt19937_64& rng) {
            m.fused_p[in_idx] = p_model;
            if (unif(rng) < p_model) {
                m.source[in_idx] = TokenSource::kPred;
                m.mixed_input[in_idx] = preds[tgt_idx];
            }
        });
}

namespace {

struct FirstPass {
    std::vector<int> preds;      // B x T argmax tokens
    std::vector<double> probs;   // B x T softmax probability of the argmax
};

FirstPass teacher_forced_predictions(const Batch& batch, const ModelParams& params,
                                     const ModelConfig& config) {
    TapePause no_grad;  // pass 1 never contributes gradients
    Tensor memory = encode(batch, params, config, Mode::kEval);
    Tensor logits = decode(batch.decoder_input, batch.tgt_len, memory, batch.context_pad,
                           params, config, Mode::kEval);
    const int v = config.vocab_size;
    const std::size_t positions = static_cast<std::size_t>(batch.batch_size) * batch.tgt_len;
    FirstPass fp;
    fp.preds.resize(positions);
    fp.probs.resize(positions);
    for (std::size_t i = 0; i < positions; ++i) {
        const double* row = logits.data().data() + static_cast<std::ptrdiff_t>(i) * v;
        const int arg = static_cast<int>(std::max_element(row, row + v) - row);
        double mx = row[arg];
        double z = 0.0;
        for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        fp.preds[i] = arg;
        fp.probs[i] = 1.0 / z;  // exp(row[arg]-mx) == 1
    }
    return fp;
}

// Sentence score per batch row from the pass-1 argmax sequence, computed on
// the gold non-pad positions (padding masked out of the comparison).
std::vector<double> sentence_scores(const Batch& batch, const FirstPass& fp,
                                    const Bilevel& cfg, const Tensor& embed_table) {
    std::vector<double> scores(static_cast<std::size_t>(batch.batch_size), 1.0);
    if (cfg.sli == SliKind::kNone) return scores;
    for (int r = 0; r < batch.batch_size; ++r) {
        TokenSeq gold, pred;
        for (int t = 0; t < batch.tgt_len; ++t) {
            const std::size_t i = static_cast<std::size_t>(r) * batch.tgt_len + t;
            if (batch.response_pad[i]) continue;
            gold.push_back(batch.response[i]);
            pred.push_back(fp.preds[i]);
        }
        double s = 0.0;
        if (cfg.sli == SliKind::kBleu) {
            s = gold.empty() ? 0.0 : sli_bleu(pred, gold, cfg.m);
        } else {
            try {
                s = sli_cosine(pred, gold, embed_table, cfg.m);
            } catch (const DataError&) {
                s = 0.0;  // degenerate sentence falls back toward ground truth
            }
        }
        scores[static_cast<std::size_t>(r)] = s;
    }
    return scores;
}

}  // namespace

Tensor two_pass_training_step(const Batch& batch, const ModelParams& params,
                              const ModelConfig& config, const StrategyConfig& strategy,
                              const StepContext& step, std::mt19937_64& dropout_rng,
                              MixDecision* mix_out) {
    validate_strategy(strategy);
    RowRngFactory make_row_rng = [&](int row) {
        return make_rng(step.global_seed, RngStream::kStrategy,
                        static_cast<std::uint64_t>(step.epoch),
                        static_cast<std::uint64_t>(step.batch_index),
                        static_cast<std::uint64_t>(row));
    };

    MixDecision mix;
    if (std::holds_alternative<TeacherForcing>(strategy)) {
        mix = make_all_gold(batch);
    } else {
        const FirstPass fp = teacher_forced_predictions(batch, params, config);
        if (const auto* d = std::get_if<DecaySS>(&strategy)) {
            const double p_model = 1.0 - decay_value(d->schedule, step.global_step);
            mix = decay_mix(batch, fp.preds, p_model, make_row_rng);
        } else if (const auto* c = std::get_if<ConfidenceAware>(&strategy)) {
            mix = confidence_aware_mix(batch, fp.preds, fp.probs, *c, config.vocab_size, make_row_rng);
        } else if (const auto* a = std::get_if<AdaptiveBridge>(&strategy)) {
            mix = adaptive_bridge_mix(batch, fp.preds, params.tok_embed, step.epoch, *a, make_row_rng);
        } else {
            const Bilevel& b = std::get<Bilevel>(strategy);
            mix.sentence_score = sentence_scores(batch, fp, b, params.tok_embed);
            std::vector<double> fused(fp.probs.size(), 0.0);
            for (std::size_t i = 0; i < fused.size(); ++i) {
                const std::size_t row = i / static_cast<std::size_t>(batch.tgt_len);
                fused[i] = fuse_and_smooth(mix.sentence_score[row], fp.probs[i], b.smooth);
            }
            MixDecision bm = bilevel_mix(batch, fp.preds, fp.probs, fused, b.alpha,
                                         b.rand_guard_prob, config.vocab_size, make_row_rng);
            bm.sentence_score = mix.sentence_score;
            mix = std::move(bm);
        }
    }

    // Pass 2: gradient-recorded decode on the mixed inputs; targets stay gold.
    Tensor memory = encode(batch, params, config, Mode::kTrain, &dropout_rng);
    Tensor logits = decode(mix.mixed_input, batch.tgt_len, memory, batch.context_pad,
                           params, config, Mode::kTrain, &dropout_rng);
    Tensor loss = cross_entropy(reshape(logits, {batch.batch_size * batch.tgt_len, config.vocab_size}),
                                batch.response, batch.response_pad);
    if (mix_out) *mix_out = std::move(mix);
    return loss;
}

}  // namespace biss
