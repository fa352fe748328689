#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "biss/errors.hpp"
#include "biss/trainer.hpp"
#include "synthetic.hpp"

using namespace biss;
using biss::testing::SyntheticSpec;
using biss::testing::noisy_copy_pairs;

namespace fs = std::filesystem;

namespace {

struct Fixture {
    Vocab vocab;
    std::vector<DialoguePair> train_pairs;
    std::vector<DialoguePair> valid_pairs;
    TrainConfig config;
};

Fixture make_fixture(std::uint64_t seed = 1, int n_pairs = 48) {
    SyntheticSpec spec;
    spec.n_pairs = n_pairs;
    spec.vocab_words = 12;
    spec.pair_alphabet = 4;
    spec.min_len = 3;
    spec.max_len = 6;
    spec.seed = 100;

    Fixture f;
    const auto raw = noisy_copy_pairs(spec);
    f.vocab = build_vocab(raw);
    f.train_pairs = encode_pairs(raw, f.vocab, 12);

    SyntheticSpec valid = spec;
    valid.n_pairs = 16;
    valid.seed = 200;
    f.valid_pairs = encode_pairs(noisy_copy_pairs(valid), f.vocab, 12);

    f.config.model.d_model = 16;
    f.config.model.n_heads = 2;
    f.config.model.n_layers = 1;
    f.config.model.d_ff = 32;
    f.config.model.dropout_rate = 0.1;
    f.config.model.max_len = 12;
    f.config.model.vocab_size = f.vocab.size();
    f.config.epochs = 2;
    f.config.batch_size = 8;
    f.config.seed = seed;
    f.config.optimizer.warmup_steps = 10;
    f.config.out_dir = (fs::temp_directory_path() / ("biss_trainer_" + std::to_string(seed))).string();
    return f;
}

}  // namespace

TEST_CASE("adam warmup scales the first update") {
    Tensor x({2}, {1.0, -2.0}, /*requires_grad=*/true);
    OptimizerConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.warmup_steps = 2;
    AdamOptimizer adam(cfg, {x});

    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum(mul(x, x)));
    }
    adam.step({x});
    // First Adam update is lr_eff * sign(grad) up to epsilon; warmup halves lr.
    CHECK(x.data()[0] == doctest::Approx(1.0 - 0.05).epsilon(1e-6));
    CHECK(x.data()[1] == doctest::Approx(-2.0 + 0.05).epsilon(1e-6));
    CHECK(adam.steps_taken() == 1);

    CHECK_THROWS_AS(adam.step({x, x}), std::invalid_argument);
}

TEST_CASE("training is bitwise deterministic in the seed") {
    Fixture f = make_fixture(7);
    f.config.epochs = 1;
    const TrainResult a = train_on_pairs(f.config, f.vocab, f.train_pairs, {});
    const TrainResult b = train_on_pairs(f.config, f.vocab, f.train_pairs, {});
    CHECK(a.loss_trace == b.loss_trace);

    f.config.seed = 8;
    const TrainResult c = train_on_pairs(f.config, f.vocab, f.train_pairs, {});
    CHECK(a.loss_trace != c.loss_trace);
    fs::remove_all(f.config.out_dir);
}

TEST_CASE("checkpoint round trip") {
    Fixture f = make_fixture(9);
    f.config.epochs = 1;
    const TrainResult res = train_on_pairs(f.config, f.vocab, f.train_pairs, {});
    const Checkpoint ckpt = load_checkpoint(res.final_checkpoint);

    CHECK(ckpt.version == 1);
    CHECK(ckpt.seed == f.config.seed);
    CHECK(ckpt.epoch == f.config.epochs);
    CHECK(ckpt.batch_index == 0);
    CHECK(ckpt.global_step == res.global_step);
    CHECK(ckpt.vocab_hash == f.vocab.hash());
    CHECK(ckpt.model.d_model == f.config.model.d_model);
    CHECK(ckpt.model.vocab_size == f.config.model.vocab_size);

    const auto trained = res.params.named();
    REQUIRE(ckpt.params.size() == trained.size());
    for (std::size_t i = 0; i < trained.size(); ++i) {
        CHECK(ckpt.params[i].first == trained[i].first);
        CHECK(ckpt.params[i].second.data() == trained[i].second.data());  // bitwise
    }

    const ModelParams restored = params_from_checkpoint(ckpt);
    const auto restored_named = restored.named();
    for (std::size_t i = 0; i < trained.size(); ++i) {
        CHECK(restored_named[i].second.data() == trained[i].second.data());
    }

    CHECK_THROWS_AS(load_checkpoint("/nonexistent/final.ckpt"), DataError);

    // Corrupt the magic and reload.
    const std::string bad = (fs::path(f.config.out_dir) / "bad.ckpt").string();
    fs::copy_file(res.final_checkpoint, bad);
    {
        std::ofstream out(bad, std::ios::binary | std::ios::in);
        out.seekp(0);
        out.write("XXXX", 4);
    }
    CHECK_THROWS_AS(load_checkpoint(bad), DataError);
    fs::remove_all(f.config.out_dir);
}

TEST_CASE("resume reproduces the uninterrupted run bitwise") {
    Fixture full = make_fixture(11);
    full.config.epochs = 2;
    full.config.out_dir += "_full";
    const TrainResult whole = train_on_pairs(full.config, full.vocab, full.train_pairs, {});

    Fixture part = make_fixture(11);
    part.config.epochs = 1;
    part.config.out_dir += "_part";
    const TrainResult first = train_on_pairs(part.config, part.vocab, part.train_pairs, {});

    part.config.epochs = 2;
    const TrainResult second = train_on_pairs(part.config, part.vocab, part.train_pairs, {},
                                              first.final_checkpoint);

    std::vector<std::pair<long, double>> stitched = first.loss_trace;
    stitched.insert(stitched.end(), second.loss_trace.begin(), second.loss_trace.end());
    CHECK(stitched == whole.loss_trace);

    // Resuming against a different vocabulary is rejected.
    Vocab other = build_vocab({{"completely different", "tokens here"}});
    TrainConfig cfg = part.config;
    cfg.model.vocab_size = other.size();
    CHECK_THROWS_AS(train_on_pairs(cfg, other, part.train_pairs, {}, first.final_checkpoint),
                    DataError);

    fs::remove_all(full.config.out_dir);
    fs::remove_all(part.config.out_dir);
}

TEST_CASE("loss decreases on the copy task") {
    Fixture f = make_fixture(13, /*n_pairs=*/64);
    f.config.epochs = 15;
    f.config.optimizer.learning_rate = 3e-3;
    const TrainResult res = train_on_pairs(f.config, f.vocab, f.train_pairs, {});
    REQUIRE(res.loss_trace.size() >= 20);
    auto avg = [&](std::size_t from, std::size_t to) {
        double s = 0.0;
        for (std::size_t i = from; i < to; ++i) s += res.loss_trace[i].second;
        return s / static_cast<double>(to - from);
    };
    const double head = avg(0, 5);
    const double tail = avg(res.loss_trace.size() - 5, res.loss_trace.size());
    CHECK(tail < head * 0.8);
    fs::remove_all(f.config.out_dir);
}

TEST_CASE("evaluate produces sane metric ranges") {
    Fixture f = make_fixture(15);
    f.config.epochs = 1;
    const TrainResult res = train_on_pairs(f.config, f.vocab, f.train_pairs, f.valid_pairs);
    REQUIRE(res.metrics.size() == 1);
    const MetricsRow& row = res.metrics.back();
    CHECK(row.loss > 0.0);
    for (double b : row.bleu) {
        CHECK(b >= 0.0);
        CHECK(b <= 100.0);
    }
    for (double d : row.distinct) {
        CHECK(d >= 0.0);
        CHECK(d <= 100.0);
    }
    CHECK_THROWS_AS(evaluate(res.params, f.config.model, {}, 8), DataError);
    fs::remove_all(f.config.out_dir);
}

TEST_CASE("eval_every writes step checkpoints and metric rows") {
    Fixture f = make_fixture(17);
    f.config.epochs = 1;
    f.config.eval_every = 3;
    const TrainResult res = train_on_pairs(f.config, f.vocab, f.train_pairs, f.valid_pairs);
    CHECK(fs::exists(fs::path(f.config.out_dir) / "step_3.ckpt"));
    CHECK(fs::exists(fs::path(f.config.out_dir) / "final.ckpt"));
    CHECK(fs::exists(fs::path(f.config.out_dir) / "loss.csv"));
    CHECK(res.metrics.size() >= 2);
    fs::remove_all(f.config.out_dir);
}

TEST_CASE("metrics formatting") {
    MetricsRow r1{"teacher_forcing", 100, 3.5, {10.0, 5.0, 2.5, 1.0}, {40.0, 60.0, 70.0}};
    MetricsRow r2{"bilevel_bleu", 100, 3.1, {12.0, 6.0, 3.0, 1.5}, {42.0, 62.0, 72.0}};
    const std::string csv = metrics_csv({r1, r2});
    CHECK(csv.find("label,step,loss,bleu1,bleu2,bleu3,bleu4,distinct1,distinct2,distinct3") == 0);
    CHECK(csv.find("teacher_forcing,100,3.5,10,5,2.5,1,40,60,70") != std::string::npos);

    const std::string table = metrics_table({r1, r2});
    CHECK(table.find("Model") != std::string::npos);
    CHECK(table.find("BLEU-2") != std::string::npos);
    CHECK(table.find("bilevel_bleu") != std::string::npos);
    CHECK(table.find("12.00") != std::string::npos);
}

TEST_CASE("strategy_by_name") {
    CHECK(std::holds_alternative<TeacherForcing>(strategy_by_name("teacher_forcing")));
    CHECK(std::holds_alternative<TeacherForcing>(strategy_by_name("transformer")));
    CHECK(std::holds_alternative<DecaySS>(strategy_by_name("decay_linear")));
    CHECK(std::holds_alternative<DecaySS>(strategy_by_name("decay_exponential")));
    CHECK(std::holds_alternative<DecaySS>(strategy_by_name("decay_sigmoid")));
    CHECK(std::holds_alternative<ConfidenceAware>(strategy_by_name("confidence_aware")));
    CHECK(std::holds_alternative<AdaptiveBridge>(strategy_by_name("adaptive_bridge")));
    for (const char* name : {"bilevel_none", "bilevel_bleu", "bilevel_cosine", "bilevel_f1"}) {
        CHECK(std::holds_alternative<Bilevel>(strategy_by_name(name)));
    }
    CHECK(std::get<Bilevel>(strategy_by_name("bilevel_cosine")).sli == SliKind::kCosine);
    CHECK(std::get<Bilevel>(strategy_by_name("bilevel_cosine")).m == doctest::Approx(0.6));
    CHECK_THROWS_AS(strategy_by_name("unheard_of"), ConfigError);
}

TEST_CASE("generate_response round trips through the vocab") {
    Fixture f = make_fixture(19);
    f.config.epochs = 1;
    const TrainResult res = train_on_pairs(f.config, f.vocab, f.train_pairs, {});
    const std::string reply = generate_response(res.params, f.config.model, f.vocab, "w0 w1 w2");
    // Possibly empty (immediate EOS), but never specials and always known words.
    CHECK(reply.find("<bos>") == std::string::npos);
    CHECK(reply.find("<eos>") == std::string::npos);
    CHECK(reply.find("<pad>") == std::string::npos);
    CHECK_THROWS_AS(generate_response(res.params, f.config.model, f.vocab, "   "), DataError);
    fs::remove_all(f.config.out_dir);
}

TEST_CASE("config validation errors") {
    Fixture f = make_fixture(21);
    f.config.epochs = 0;
    CHECK_THROWS_AS(f.config.validate(), ConfigError);
    f = make_fixture(21);
    f.config.optimizer.learning_rate = 0.0;
    CHECK_THROWS_AS(f.config.validate(), ConfigError);
    f = make_fixture(21);
    f.config.model.vocab_size = f.vocab.size() + 3;
    CHECK_THROWS_AS(train_on_pairs(f.config, f.vocab, f.train_pairs, {}), ConfigError);
    CHECK_THROWS_AS(train_on_pairs(make_fixture(21).config, f.vocab, {}, {}), DataError);
}
