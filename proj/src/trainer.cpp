#include "biss/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "biss/errors.hpp"
#include "biss/metrics.hpp"
#include "biss/rng.hpp"

namespace biss {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    model.validate();
    validate_strategy(strategy);
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (optimizer.learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
    if (optimizer.warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
    if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
}

AdamOptimizer::AdamOptimizer(OptimizerConfig config, const std::vector<Tensor>& params)
    : cfg_(config) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Tensor& p : params) {
        m_.emplace_back(p.data().size(), 0.0);
        v_.emplace_back(p.data().size(), 0.0);
    }
}

void AdamOptimizer::step(const std::vector<Tensor>& params) {
    if (params.size() != m_.size()) throw std::invalid_argument("optimizer/parameter count mismatch");
    ++t_;
    double lr = cfg_.learning_rate;
    if (cfg_.warmup_steps > 0 && t_ < cfg_.warmup_steps) {
        lr *= static_cast<double>(t_) / cfg_.warmup_steps;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (!params[p].has_grad()) continue;
        const std::vector<double>& g = params[p].grad();
        std::vector<double>& data = const_cast<Tensor&>(params[p]).data();
        std::vector<double>& m = m_[p];
        std::vector<double>& v = v_[p];
        for (std::size_t i = 0; i < data.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            data[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
        }
    }
}

void AdamOptimizer::restore(std::vector<std::vector<double>> m,
                            std::vector<std::vector<double>> v, long t) {
    if (m.size() != m_.size() || v.size() != v_.size()) {
        throw DataError("optimizer state in checkpoint does not match model");
    }
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
}

namespace {

TokenSeq strip_specials(const TokenSeq& seq) {
    TokenSeq out;
    for (int id : seq) {
        if (id == Vocab::kPad || id == Vocab::kBos) continue;
        if (id == Vocab::kEos) break;
        out.push_back(id);
    }
    return out;
}

double max_abs_grad(const std::vector<Tensor>& params) {
    double mx = 0.0;
    for (const Tensor& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) mx = std::max(mx, std::abs(g));
    }
    return mx;
}

}  // namespace

MetricsRow evaluate(const ModelParams& params, const ModelConfig& config,
                    const std::vector<DialoguePair>& pairs, int batch_size) {
    if (pairs.empty()) throw DataError("evaluation set is empty");
    std::vector<TokenSeq> candidates, references;
    double loss_sum = 0.0;
    long loss_batches = 0;
    const auto batches = make_batches(pairs, batch_size, 0, /*shuffle=*/false);
    for (const Batch& b : batches) {
        const auto generated = greedy_generate(b, params, config, config.max_len);
        for (int r = 0; r < b.batch_size; ++r) {
            TokenSeq ref;
            for (int t = 0; t < b.tgt_len; ++t) {
                const std::size_t i = static_cast<std::size_t>(r) * b.tgt_len + t;
                if (!b.response_pad[i]) ref.push_back(b.response[i]);
            }
            references.push_back(strip_specials(ref));
            candidates.push_back(strip_specials(generated[static_cast<std::size_t>(r)]));
        }
        // Teacher-forced eval loss alongside the generation metrics.
        Tensor memory = encode(b, params, config, Mode::kEval);
        Tensor logits = decode(b.decoder_input, b.tgt_len, memory, b.context_pad,
                               params, config, Mode::kEval);
        loss_sum += cross_entropy(reshape(logits, {b.batch_size * b.tgt_len, config.vocab_size}),
                                  b.response, b.response_pad)
                        .item();
        ++loss_batches;
    }
    MetricsRow row;
    row.loss = loss_sum / static_cast<double>(loss_batches);
    const BleuReport bleu = corpus_bleu(candidates, references);
    for (int n = 0; n < 4; ++n) row.bleu[static_cast<std::size_t>(n)] = 100.0 * bleu.bleu[static_cast<std::size_t>(n)];
    for (int n = 1; n <= 3; ++n) row.distinct[static_cast<std::size_t>(n - 1)] = 100.0 * distinct_n(candidates, n);
    return row;
}

TrainResult train_on_pairs(const TrainConfig& config, const Vocab& vocab,
                           const std::vector<DialoguePair>& train_pairs,
                           const std::vector<DialoguePair>& valid_pairs,
                           const std::string& resume_path, const std::string& run_label) {
    config.validate();
    if (train_pairs.empty()) throw DataError("training set is empty");
    if (vocab.size() != config.model.vocab_size) {
        throw ConfigError("model vocab_size " + std::to_string(config.model.vocab_size) +
                          " does not match vocab of size " + std::to_string(vocab.size()));
    }

    auto init_rng = make_rng(config.seed, RngStream::kInit);
    ModelParams params = ModelParams::init(config.model, init_rng);
    AdamOptimizer adam(config.optimizer, params.tensors());

    int start_epoch = 0, start_batch = 0;
    long global_step = 0;
    if (!resume_path.empty()) {
        const Checkpoint ckpt = load_checkpoint(resume_path);
        if (ckpt.vocab_hash != vocab.hash()) {
            throw DataError("checkpoint vocab hash does not match the supplied vocabulary");
        }
        params = params_from_checkpoint(ckpt);
        adam.restore(ckpt.adam_m, ckpt.adam_v, ckpt.adam_t);
        start_epoch = ckpt.epoch;
        start_batch = ckpt.batch_index;
        global_step = ckpt.global_step;
    }

    fs::create_directories(config.out_dir);
    const auto param_tensors = params.tensors();

    TrainResult result;
    auto make_checkpoint = [&](int epoch, int batch_index) {
        Checkpoint ckpt;
        ckpt.model = config.model;
        ckpt.seed = config.seed;
        ckpt.epoch = epoch;
        ckpt.batch_index = batch_index;
        ckpt.global_step = global_step;
        ckpt.vocab_hash = vocab.hash();
        ckpt.params = params.named();
        ckpt.adam_m = adam.first_moments();
        ckpt.adam_v = adam.second_moments();
        ckpt.adam_t = adam.steps_taken();
        return ckpt;
    };
    auto record_metrics = [&](const std::string& label) {
        if (valid_pairs.empty()) return;
        MetricsRow row = evaluate(params, config.model, valid_pairs, config.batch_size);
        row.label = label;
        row.step = global_step;
        result.metrics.push_back(row);
    };

    Tape tape;
    for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
        // Data order depends on (seed, epoch) only, never on the strategy.
        const auto batches = make_batches(train_pairs, config.batch_size,
                                          derive_seed(config.seed, RngStream::kDataOrder,
                                                      static_cast<std::uint64_t>(epoch)));
        for (int bi = (epoch == start_epoch ? start_batch : 0);
             bi < static_cast<int>(batches.size()); ++bi) {
            const Batch& batch = batches[static_cast<std::size_t>(bi)];
            auto dropout_rng = make_rng(config.seed, RngStream::kDropout,
                                        static_cast<std::uint64_t>(epoch),
                                        static_cast<std::uint64_t>(bi));
            StepContext step{config.seed, epoch, bi, global_step};
            tape.reset();
            Tensor loss;
            {
                TapeScope scope(tape);
                loss = two_pass_training_step(batch, params, config.model, config.strategy,
                                              step, dropout_rng);
            }
            const double loss_value = loss.item();
            if (!std::isfinite(loss_value)) {
                std::ostringstream os;
                os << "non-finite loss at step " << global_step << " (epoch " << epoch
                   << ", batch " << bi << "), max |grad| " << max_abs_grad(param_tensors);
                throw NumericError(os.str());
            }
            tape.backward(loss);
            adam.step(param_tensors);
            for (const Tensor& p : param_tensors) const_cast<Tensor&>(p).zero_grad();
            ++global_step;
            result.loss_trace.emplace_back(global_step, loss_value);
            if (config.eval_every > 0 && global_step % config.eval_every == 0) {
                record_metrics(run_label);
                save_checkpoint((fs::path(config.out_dir) /
                                 ("step_" + std::to_string(global_step) + ".ckpt")).string(),
                                make_checkpoint(epoch, bi + 1));
            }
        }
    }

    record_metrics(run_label);
    const std::string final_path = (fs::path(config.out_dir) / "final.ckpt").string();
    save_checkpoint(final_path, make_checkpoint(config.epochs, 0));

    // Loss trace as CSV for inspection and determinism checks.
    std::ofstream trace(fs::path(config.out_dir) / "loss.csv");
    trace << "step,loss\n" << std::setprecision(17);
    for (const auto& [s, l] : result.loss_trace) trace << s << "," << l << "\n";

    result.final_checkpoint = final_path;
    result.params = params;
    result.global_step = global_step;
    return result;
}

TrainResult train(const TrainConfig& config, const std::string& resume_path) {
    if (config.train_corpus.empty()) throw ConfigError("train_corpus path is required");
    const auto dialogues = load_dialogues(config.train_corpus, config.delimiter);
    int skipped = 0;
    const auto raw_pairs = split_dialogues(dialogues, &skipped);
    if (raw_pairs.empty()) throw DataError("no context/response pairs in " + config.train_corpus);

    fs::create_directories(config.out_dir);
    const std::string vocab_path = (fs::path(config.out_dir) / "vocab.txt").string();
    Vocab vocab;
    if (!resume_path.empty() && fs::exists(vocab_path)) {
        vocab = Vocab::load(vocab_path);
    } else {
        vocab = build_vocab(raw_pairs, config.min_freq, config.max_vocab);
        vocab.save(vocab_path);
    }

    TrainConfig effective = config;
    effective.model.vocab_size = vocab.size();
    const auto train_pairs = encode_pairs(raw_pairs, vocab, effective.model.max_len);

    std::vector<DialoguePair> valid_pairs;
    if (!config.valid_corpus.empty()) {
        const auto valid_raw = split_dialogues(load_dialogues(config.valid_corpus, config.delimiter));
        valid_pairs = encode_pairs(valid_raw, vocab, effective.model.max_len);
    }

    TrainResult result = train_on_pairs(effective, vocab, train_pairs, valid_pairs, resume_path);
    if (!result.metrics.empty()) {
        std::ofstream csv(fs::path(config.out_dir) / "metrics.csv");
        csv << metrics_csv(result.metrics);
        std::ofstream table(fs::path(config.out_dir) / "metrics.txt");
        table << metrics_table(result.metrics);
    }
    return result;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
    std::ostringstream os;
    os << "label,step,loss,bleu1,bleu2,bleu3,bleu4,distinct1,distinct2,distinct3\n";
    os << std::setprecision(10);
    for (const MetricsRow& r : rows) {
        os << r.label << "," << r.step << "," << r.loss;
        for (double b : r.bleu) os << "," << b;
        for (double d : r.distinct) os << "," << d;
        os << "\n";
    }
    return os.str();
}

std::string metrics_table(const std::vector<MetricsRow>& rows) {
    std::ostringstream os;
    std::size_t label_w = 5;
    for (const MetricsRow& r : rows) label_w = std::max(label_w, r.label.size());
    os << std::left << std::setw(static_cast<int>(label_w + 2)) << "Model";
    for (const char* h : {"BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "Dist-1", "Dist-2", "Dist-3"}) {
        os << std::right << std::setw(9) << h;
    }
    os << "\n";
    os << std::fixed << std::setprecision(2);
    for (const MetricsRow& r : rows) {
        os << std::left << std::setw(static_cast<int>(label_w + 2)) << r.label;
        for (double b : r.bleu) os << std::right << std::setw(9) << b;
        for (double d : r.distinct) os << std::right << std::setw(9) << d;
        os << "\n";
    }
    return os.str();
}

std::vector<MetricsRow> ablate(const TrainConfig& base,
                               const std::vector<std::pair<std::string, StrategyConfig>>& variants) {
    if (variants.size() < 2) throw ConfigError("ablation requires at least 2 variants");
    std::vector<MetricsRow> rows;
    for (const auto& [label, strategy] : variants) {
        TrainConfig cfg = base;
        cfg.strategy = strategy;
        cfg.out_dir = (fs::path(base.out_dir) / label).string();
        TrainResult res = train(cfg);
        MetricsRow row;
        if (!res.metrics.empty()) {
            row = res.metrics.back();
        } else {
            row.loss = res.loss_trace.empty() ? 0.0 : res.loss_trace.back().second;
            row.step = res.global_step;
        }
        row.label = label;
        rows.push_back(row);
    }
    return rows;
}

StrategyConfig strategy_by_name(const std::string& name) {
    if (name == "teacher_forcing" || name == "transformer") return TeacherForcing{};
    if (name == "decay_linear") return DecaySS{LinearDecay{}};
    if (name == "decay_exponential") return DecaySS{ExponentialDecay{}};
    if (name == "decay_sigmoid") return DecaySS{SigmoidDecay{}};
    if (name == "confidence_aware") return ConfidenceAware{0.7, 0.95};
    if (name == "adaptive_bridge") return AdaptiveBridge{0.75, 15, 3.0};
    if (name == "bilevel_none") return Bilevel{SliKind::kNone, 1.0, SigmoidSmooth{10.0, 0.6}, 0.95, 1.0};
    if (name == "bilevel_bleu") return Bilevel{SliKind::kBleu, 0.8, SigmoidSmooth{10.0, 0.6}, 0.95, 1.0};
    if (name == "bilevel_cosine") return Bilevel{SliKind::kCosine, 0.6, SigmoidSmooth{10.0, 0.6}, 0.95, 1.0};
    if (name == "bilevel_f1") return Bilevel{SliKind::kBleu, 0.9, ClampSmooth{}, 0.95, 1.0};
    throw ConfigError("unknown strategy name: " + name);
}

std::string generate_response(const ModelParams& params, const ModelConfig& config,
                              const Vocab& vocab, const std::string& prompt) {
    const auto tokens = tokenize(prompt);
    if (tokens.empty()) throw DataError("prompt is empty after tokenization");
    DialoguePair pair;
    pair.context = encode_tokens(tokens, vocab);
    if (static_cast<int>(pair.context.size()) > config.max_len) {
        pair.context.resize(static_cast<std::size_t>(config.max_len));
    }
    pair.response = {Vocab::kEos};  // placeholder; only the context is used
    const auto batches = make_batches({pair}, 1, 0, /*shuffle=*/false);
    const auto generated = greedy_generate(batches[0], params, config, config.max_len);
    return decode_tokens(generated[0], vocab);
}

}  // namespace biss
