#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <variant>
#include <vector>

#include "biss/corpus.hpp"
#include "biss/model.hpp"
#include "biss/tensor.hpp"

namespace biss {

struct TeacherForcing {};

struct LinearDecay {
    double eps = 0.1;
    double k = -0.001;
    double b = 1.0;
};
struct ExponentialDecay {
    double k = 0.999;  // must lie in (0,1]
};
struct SigmoidDecay {
    double k = 100.0;  // must be >= 1
};
using DecaySchedule = std::variant<LinearDecay, ExponentialDecay, SigmoidDecay>;

// Classic scheduled sampling: keep gold with probability f(step).
struct DecaySS {
    DecaySchedule schedule = LinearDecay{};
};

struct ConfidenceAware {
    double t_golden = 0.7;
    double t_rand = 0.95;
};

struct AdaptiveBridge {
    double beta = 0.75;
    int w = 15;        // epoch at which the acceptance probability crosses 0.5
    double tau = 3.0;  // logistic temperature, default w/5
};

struct ClampSmooth {};
struct SigmoidSmooth {
    double k = 10.0;
    double b = 0.6;
};
// Fixed output regardless of S*P; boundary/debug configuration.
struct ConstantSmooth {
    double value = 0.0;
};
using SmoothFn = std::variant<ClampSmooth, SigmoidSmooth, ConstantSmooth>;

enum class SliKind { kNone, kBleu, kCosine };

struct Bilevel {
    SliKind sli = SliKind::kBleu;
    double m = 0.8;
    SmoothFn smooth = SigmoidSmooth{};
    double alpha = 0.95;
    double rand_guard_prob = 1.0;  // 1.0 = apply the guard deterministically
};

using StrategyConfig = std::variant<TeacherForcing, DecaySS, ConfidenceAware,
                                    AdaptiveBridge, Bilevel>;

void validate_strategy(const StrategyConfig& strategy);

enum class TokenSource : std::uint8_t { kGold, kPred, kRand };

struct MixDecision {
    std::vector<TokenSource> source;     // B x T, decoder-input positions
    std::vector<double> fused_p;         // B x T, 0 at BOS/PAD
    std::vector<double> sentence_score;  // B
    std::vector<int> mixed_input;        // B x T decoder input after mixing
};

using RowRngFactory = std::function<std::mt19937_64(int row)>;

// Teacher-forcing probability f(i) for training step i; clamped to [0,1].
double decay_value(const DecaySchedule& schedule, long step);

// p = f(S * P) with the configured smooth function.
double fuse_and_smooth(double sentence_score, double word_prob, const SmoothFn& smooth);

// Eq-style bilevel mixing: per non-pad position t >= 1, take the prediction
// with probability fused_p, then override with a random non-special token
// when the word confidence reaches alpha.
MixDecision bilevel_mix(const Batch& batch, const std::vector<int>& preds,
                        const std::vector<double>& probs,
                        const std::vector<double>& fused_p,
                        double alpha, double rand_guard_prob, int vocab_size,
                        const RowRngFactory& make_row_rng);

// Deterministic three-way bucket by confidence.
MixDecision confidence_aware_mix(const Batch& batch, const std::vector<int>& preds,
                                 const std::vector<double>& probs,
                                 const ConfidenceAware& config, int vocab_size,
                                 const RowRngFactory& make_row_rng);

MixDecision adaptive_bridge_mix(const Batch& batch, const std::vector<int>& preds,
                                const Tensor& embed_table, int epoch,
                                const AdaptiveBridge& config,
                                const RowRngFactory& make_row_rng);

// Uniform per-position prediction sampling at probability p_model = 1 - f(i).
MixDecision decay_mix(const Batch& batch, const std::vector<int>& preds,
                      double p_model, const RowRngFactory& make_row_rng);

struct StepContext {
    std::uint64_t global_seed = 0;
    int epoch = 0;
    int batch_index = 0;
    long global_step = 0;
};

// Pass 1: teacher-forced decode without gradients, extracting the argmax
// tokens, their probabilities and the sentence score. Pass 2: gradient-
// recorded decode on the mixed inputs against the unchanged gold targets.
Tensor two_pass_training_step(const Batch& batch, const ModelParams& params,
                              const ModelConfig& config, const StrategyConfig& strategy,
                              const StepContext& step, std::mt19937_64& dropout_rng,
                              MixDecision* mix_out = nullptr);

}  // namespace biss
