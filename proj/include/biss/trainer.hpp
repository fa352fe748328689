#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "biss/corpus.hpp"
#include "biss/model.hpp"
#include "biss/sampling.hpp"
#include "biss/tensor.hpp"

namespace biss {

struct OptimizerConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double epsilon = 1e-9;
    int warmup_steps = 400;
};

struct TrainConfig {
    ModelConfig model;
    StrategyConfig strategy = TeacherForcing{};
    OptimizerConfig optimizer;
    int epochs = 30;
    int batch_size = 32;
    std::uint64_t seed = 1;
    std::string train_corpus;
    std::string valid_corpus;
    std::string delimiter = "__eou__";
    int min_freq = 1;
    int max_vocab = 0;  // 0 = unlimited
    int eval_every = 0;  // steps between mid-run evaluations; 0 = per run end only
    std::string out_dir = "out";

    void validate() const;
};

// Adam with linear learning-rate warmup. Moment buffers follow the stable
// parameter ordering of ModelParams::named().
class AdamOptimizer {
public:
    AdamOptimizer(OptimizerConfig config, const std::vector<Tensor>& params);

    void step(const std::vector<Tensor>& params);
    long steps_taken() const { return t_; }

    // Checkpoint plumbing.
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }
    void restore(std::vector<std::vector<double>> m, std::vector<std::vector<double>> v, long t);

private:
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

struct Checkpoint {
    std::uint32_t version = 1;
    ModelConfig model;
    std::uint64_t seed = 0;
    int epoch = 0;        // next epoch to run
    int batch_index = 0;  // next batch within that epoch
    long global_step = 0;
    std::uint64_t vocab_hash = 0;
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<std::vector<double>> adam_m, adam_v;
    long adam_t = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);
ModelParams params_from_checkpoint(const Checkpoint& ckpt);

struct MetricsRow {
    std::string label;
    long step = 0;
    double loss = 0.0;
    std::array<double, 4> bleu{};      // x100
    std::array<double, 3> distinct{};  // x100
};

std::string metrics_csv(const std::vector<MetricsRow>& rows);
std::string metrics_table(const std::vector<MetricsRow>& rows);

struct TrainResult {
    std::string final_checkpoint;
    std::vector<std::pair<long, double>> loss_trace;  // (step, loss)
    std::vector<MetricsRow> metrics;
    ModelParams params;
    long global_step = 0;
};

// In-memory training core; corpus ingestion happens in train().
TrainResult train_on_pairs(const TrainConfig& config, const Vocab& vocab,
                           const std::vector<DialoguePair>& train_pairs,
                           const std::vector<DialoguePair>& valid_pairs,
                           const std::string& resume_path = "",
                           const std::string& run_label = "run");

// File-backed entry point: loads corpora, builds or loads the vocab, trains,
// and writes loss/metrics/checkpoints under config.out_dir.
TrainResult train(const TrainConfig& config, const std::string& resume_path = "");

MetricsRow evaluate(const ModelParams& params, const ModelConfig& config,
                    const std::vector<DialoguePair>& pairs, int batch_size);

// Trains every variant from the same seed and data order; returns one row per
// variant in input order.
std::vector<MetricsRow> ablate(const TrainConfig& base,
                               const std::vector<std::pair<std::string, StrategyConfig>>& variants);

// Named strategies as used by --strategy and the ablation runner.
StrategyConfig strategy_by_name(const std::string& name);

std::string generate_response(const ModelParams& params, const ModelConfig& config,
                              const Vocab& vocab, const std::string& prompt);

}  // namespace biss
