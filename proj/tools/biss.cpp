#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "biss/errors.hpp"
#include "biss/trainer.hpp"

namespace {

using nlohmann::json;

biss::StrategyConfig parse_strategy(const json& j) {
    using namespace biss;
    if (j.is_string()) return strategy_by_name(j.get<std::string>());
    if (!j.contains("name")) throw ConfigError("strategy object needs a \"name\" field");
    StrategyConfig s = strategy_by_name(j["name"].get<std::string>());
    if (auto* d = std::get_if<DecaySS>(&s)) {
        if (auto* l = std::get_if<LinearDecay>(&d->schedule)) {
            l->eps = j.value("eps", l->eps);
            l->k = j.value("k", l->k);
            l->b = j.value("b", l->b);
        } else if (auto* e = std::get_if<ExponentialDecay>(&d->schedule)) {
            e->k = j.value("k", e->k);
        } else if (auto* g = std::get_if<SigmoidDecay>(&d->schedule)) {
            g->k = j.value("k", g->k);
        }
    } else if (auto* c = std::get_if<ConfidenceAware>(&s)) {
        c->t_golden = j.value("t_golden", c->t_golden);
        c->t_rand = j.value("t_rand", c->t_rand);
    } else if (auto* a = std::get_if<AdaptiveBridge>(&s)) {
        a->beta = j.value("beta", a->beta);
        a->w = j.value("w", a->w);
        a->tau = j.value("tau", a->tau);
    } else if (auto* b = std::get_if<Bilevel>(&s)) {
        b->m = j.value("m", b->m);
        b->alpha = j.value("alpha", b->alpha);
        b->rand_guard_prob = j.value("rand_guard_prob", b->rand_guard_prob);
        if (j.contains("smooth")) {
            const std::string smooth = j["smooth"].get<std::string>();
            if (smooth == "clamp") {
                b->smooth = ClampSmooth{};
            } else if (smooth == "sigmoid") {
                b->smooth = SigmoidSmooth{j.value("smooth_k", 10.0), j.value("smooth_b", 0.6)};
            } else {
                throw ConfigError("unknown smooth function: " + smooth);
            }
        }
    }
    validate_strategy(s);
    return s;
}

biss::TrainConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw biss::ConfigError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw biss::ConfigError(std::string("bad config JSON: ") + e.what());
    }
    biss::TrainConfig cfg;
    if (j.contains("model")) {
        const json& m = j["model"];
        cfg.model.d_model = m.value("d_model", cfg.model.d_model);
        cfg.model.n_heads = m.value("n_heads", cfg.model.n_heads);
        cfg.model.n_layers = m.value("n_layers", cfg.model.n_layers);
        cfg.model.d_ff = m.value("d_ff", cfg.model.d_ff);
        cfg.model.dropout_rate = m.value("dropout_rate", cfg.model.dropout_rate);
        cfg.model.max_len = m.value("max_len", cfg.model.max_len);
        cfg.model.tie_embeddings = m.value("tie_embeddings", cfg.model.tie_embeddings);
    }
    if (j.contains("strategy")) cfg.strategy = parse_strategy(j["strategy"]);
    if (j.contains("optimizer")) {
        const json& o = j["optimizer"];
        cfg.optimizer.learning_rate = o.value("learning_rate", cfg.optimizer.learning_rate);
        cfg.optimizer.beta1 = o.value("beta1", cfg.optimizer.beta1);
        cfg.optimizer.beta2 = o.value("beta2", cfg.optimizer.beta2);
        cfg.optimizer.epsilon = o.value("epsilon", cfg.optimizer.epsilon);
        cfg.optimizer.warmup_steps = o.value("warmup_steps", cfg.optimizer.warmup_steps);
    }
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.train_corpus = j.value("train_corpus", cfg.train_corpus);
    cfg.valid_corpus = j.value("valid_corpus", cfg.valid_corpus);
    cfg.delimiter = j.value("delimiter", cfg.delimiter);
    cfg.min_freq = j.value("min_freq", cfg.min_freq);
    cfg.max_vocab = j.value("max_vocab", cfg.max_vocab);
    cfg.eval_every = j.value("eval_every", cfg.eval_every);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    return cfg;
}

struct CommonOpts {
    std::string config_path;
    std::string strategy_name;
    std::string corpus;
    std::string valid;
    std::string out_dir;
    std::string resume;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int epochs = 0;
};

biss::TrainConfig resolve_train_config(const CommonOpts& o) {
    biss::TrainConfig cfg = o.config_path.empty() ? biss::TrainConfig{} : parse_config_file(o.config_path);
    if (!o.strategy_name.empty()) cfg.strategy = biss::strategy_by_name(o.strategy_name);
    if (!o.corpus.empty()) cfg.train_corpus = o.corpus;
    if (!o.valid.empty()) cfg.valid_corpus = o.valid;
    if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
    if (o.seed_set) cfg.seed = o.seed;
    if (o.epochs > 0) cfg.epochs = o.epochs;
    return cfg;
}

std::pair<biss::ModelParams, biss::Checkpoint> load_model(const std::string& ckpt_path) {
    biss::Checkpoint ckpt = biss::load_checkpoint(ckpt_path);
    biss::ModelParams params = biss::params_from_checkpoint(ckpt);
    return {std::move(params), std::move(ckpt)};
}

int run(int argc, char** argv) {
    CLI::App app{"Scheduled-sampling training laboratory for seq2seq dialogue models"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string ckpt_path, vocab_path, prompt, variants_arg;
    int eval_batch_size = 32;
    bool full_dump = false;

    // BISS_DETERMINISTIC=1 requests 64-bit single-threaded execution; this
    // build always runs that way, so the variable is accepted as-is.
    const char* deterministic = std::getenv("BISS_DETERMINISTIC");
    (void)deterministic;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", opts.config_path, "JSON config file");
        cmd->add_option("--seed", opts.seed, "random seed")->each([&](const std::string&) { opts.seed_set = true; });
        cmd->add_option("--strategy", opts.strategy_name, "strategy name override");
        cmd->add_option("--corpus", opts.corpus, "training corpus path");
        cmd->add_option("--valid", opts.valid, "validation corpus path");
        cmd->add_option("--out-dir", opts.out_dir, "output directory");
        cmd->add_option("--epochs", opts.epochs, "epoch count override");
    };

    CLI::App* train_cmd = app.add_subcommand("train", "train a model");
    add_common(train_cmd);
    train_cmd->add_option("--resume", opts.resume, "checkpoint to resume from");

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a corpus");
    eval_cmd->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
    eval_cmd->add_option("--vocab", vocab_path, "vocab file")->required();
    eval_cmd->add_option("--corpus", opts.corpus, "evaluation corpus")->required();
    eval_cmd->add_option("--batch-size", eval_batch_size, "evaluation batch size");

    CLI::App* gen_cmd = app.add_subcommand("generate", "greedy-decode a response for a prompt");
    gen_cmd->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
    gen_cmd->add_option("--vocab", vocab_path, "vocab file")->required();
    gen_cmd->add_option("--prompt", prompt, "input text")->required();

    CLI::App* ablate_cmd = app.add_subcommand("ablate", "train and compare strategy variants");
    add_common(ablate_cmd);
    ablate_cmd->add_option("--variants", variants_arg,
                           "comma-separated strategy names (default: full variant set)");

    CLI::App* inspect_cmd = app.add_subcommand("inspect-checkpoint", "print a checkpoint manifest");
    inspect_cmd->add_option("checkpoint", ckpt_path, "checkpoint path")->required();
    inspect_cmd->add_flag("--full", full_dump, "dump parameter values as text");

    CLI11_PARSE(app, argc, argv);

    if (train_cmd->parsed()) {
        biss::TrainConfig cfg = resolve_train_config(opts);
        biss::TrainResult res = biss::train(cfg, opts.resume);
        std::cout << "trained " << res.global_step << " steps; final checkpoint: "
                  << res.final_checkpoint << "\n";
        if (!res.metrics.empty()) std::cout << biss::metrics_table(res.metrics);
        return 0;
    }
    if (eval_cmd->parsed()) {
        auto [params, ckpt] = load_model(ckpt_path);
        biss::Vocab vocab = biss::Vocab::load(vocab_path);
        if (vocab.hash() != ckpt.vocab_hash) {
            throw biss::DataError("vocab file does not match the checkpoint's vocabulary");
        }
        const auto raw = biss::split_dialogues(biss::load_dialogues(opts.corpus));
        const auto pairs = biss::encode_pairs(raw, vocab, ckpt.model.max_len);
        biss::MetricsRow row = biss::evaluate(params, ckpt.model, pairs, eval_batch_size);
        row.label = "eval";
        row.step = ckpt.global_step;
        std::cout << biss::metrics_table({row});
        return 0;
    }
    if (gen_cmd->parsed()) {
        auto [params, ckpt] = load_model(ckpt_path);
        biss::Vocab vocab = biss::Vocab::load(vocab_path);
        if (vocab.hash() != ckpt.vocab_hash) {
            throw biss::DataError("vocab file does not match the checkpoint's vocabulary");
        }
        std::cout << biss::generate_response(params, ckpt.model, vocab, prompt) << "\n";
        return 0;
    }
    if (ablate_cmd->parsed()) {
        biss::TrainConfig cfg = resolve_train_config(opts);
        std::vector<std::pair<std::string, biss::StrategyConfig>> variants;
        if (variants_arg.empty()) {
            for (const char* name : {"teacher_forcing", "decay_linear", "confidence_aware",
                                     "adaptive_bridge", "bilevel_none", "bilevel_bleu",
                                     "bilevel_cosine", "bilevel_f1"}) {
                variants.emplace_back(name, biss::strategy_by_name(name));
            }
        } else {
            std::stringstream ss(variants_arg);
            std::string name;
            while (std::getline(ss, name, ',')) {
                if (!name.empty()) variants.emplace_back(name, biss::strategy_by_name(name));
            }
        }
        const auto rows = biss::ablate(cfg, variants);
        const std::string table = biss::metrics_table(rows);
        std::cout << table;
        std::filesystem::create_directories(cfg.out_dir);
        std::ofstream(std::filesystem::path(cfg.out_dir) / "ablation.csv") << biss::metrics_csv(rows);
        std::ofstream(std::filesystem::path(cfg.out_dir) / "ablation.txt") << table;
        return 0;
    }
    if (inspect_cmd->parsed()) {
        const biss::Checkpoint ckpt = biss::load_checkpoint(ckpt_path);
        std::cout << "version " << ckpt.version << "\n"
                  << "model d_model=" << ckpt.model.d_model << " n_heads=" << ckpt.model.n_heads
                  << " n_layers=" << ckpt.model.n_layers << " d_ff=" << ckpt.model.d_ff
                  << " max_len=" << ckpt.model.max_len << " vocab=" << ckpt.model.vocab_size
                  << " dropout=" << ckpt.model.dropout_rate
                  << " tied=" << (ckpt.model.tie_embeddings ? "yes" : "no") << "\n"
                  << "seed " << ckpt.seed << ", epoch " << ckpt.epoch << ", batch "
                  << ckpt.batch_index << ", step " << ckpt.global_step << "\n"
                  << "vocab hash " << std::hex << ckpt.vocab_hash << std::dec << "\n"
                  << "adam t " << ckpt.adam_t << "\n";
        std::int64_t total = 0;
        for (const auto& [name, t] : ckpt.params) {
            std::cout << "  " << name << " " << biss::shape_str(t.shape()) << "\n";
            total += t.size();
            if (full_dump) {
                std::cout << std::setprecision(17);
                for (double v : t.data()) std::cout << "    " << v << "\n";
            }
        }
        std::cout << "total parameters: " << total << "\n";
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const biss::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const biss::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const biss::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
