#include <doctest.h>

#include <random>

#include "biss/errors.hpp"
#include "biss/model.hpp"
#include "biss/tensor.hpp"
#include "gradcheck.hpp"

using namespace biss;
using biss::testing::gradcheck_max_rel_err;

namespace {

ModelConfig small_config(int vocab = 20, int d_model = 16, bool tie = false) {
    ModelConfig c;
    c.d_model = d_model;
    c.n_heads = 2;
    c.n_layers = 2;
    c.d_ff = d_model * 2;
    c.dropout_rate = 0.1;
    c.max_len = 12;
    c.vocab_size = vocab;
    c.tie_embeddings = tie;
    return c;
}

Batch random_batch(const ModelConfig& config, int batch_size, int src_len, int tgt_len,
                   std::uint64_t seed, int pad_tail_rows = 0) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> tok(Vocab::kReserved, config.vocab_size - 1);
    Batch b;
    b.batch_size = batch_size;
    b.src_len = src_len;
    b.tgt_len = tgt_len;
    for (int r = 0; r < batch_size; ++r) {
        // The last `pad_tail_rows` rows get a padded tail in both streams.
        const int src_real = (r >= batch_size - pad_tail_rows) ? src_len - 1 : src_len;
        const int tgt_real = (r >= batch_size - pad_tail_rows) ? tgt_len - 1 : tgt_len;
        for (int t = 0; t < src_len; ++t) {
            const bool pad = t >= src_real;
            b.context.push_back(pad ? Vocab::kPad : tok(rng));
            b.context_pad.push_back(pad);
        }
        b.decoder_input.push_back(Vocab::kBos);
        std::vector<int> gold;
        for (int t = 0; t < tgt_len; ++t) {
            const bool pad = t >= tgt_real;
            gold.push_back(pad ? Vocab::kPad : tok(rng));
            b.response_pad.push_back(pad);
        }
        if (!gold.empty()) gold[static_cast<std::size_t>(tgt_real) - 1] = Vocab::kEos;
        for (int t = 0; t + 1 < tgt_len; ++t) b.decoder_input.push_back(gold[static_cast<std::size_t>(t)]);
        b.response.insert(b.response.end(), gold.begin(), gold.end());
    }
    return b;
}

std::vector<double> eval_logits(const Batch& batch, const ModelParams& params,
                                const ModelConfig& config) {
    Tensor memory = encode(batch, params, config, Mode::kEval);
    Tensor logits = decode(batch.decoder_input, batch.tgt_len, memory, batch.context_pad,
                           params, config, Mode::kEval);
    return logits.data();
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig bad = small_config();
    bad.d_model = 15;  // not divisible by heads
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = small_config();
    bad.vocab_size = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = small_config();
    bad.dropout_rate = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_NOTHROW(small_config().validate());
}

TEST_CASE("encode/decode output shapes") {
    for (bool tie : {false, true}) {
        ModelConfig config = small_config(50, 16, tie);
        std::mt19937_64 rng(3);
        ModelParams params = ModelParams::init(config, rng);
        CHECK(params.all_finite());

        Batch b = random_batch(config, 2, 5, 7, 10);
        Tensor memory = encode(b, params, config, Mode::kEval);
        CHECK(memory.shape() == Shape{2, 5, 16});
        Tensor logits = decode(b.decoder_input, b.tgt_len, memory, b.context_pad,
                               params, config, Mode::kEval);
        CHECK(logits.shape() == Shape{2, 7, 50});
        CHECK(logits.all_finite());

        Batch single = random_batch(config, 1, 4, 4, 11);
        CHECK(decode(single.decoder_input, single.tgt_len,
                     encode(single, params, config, Mode::kEval), single.context_pad,
                     params, config, Mode::kEval)
                  .shape() == Shape{1, 4, 50});
    }
}

TEST_CASE("decoder input must start rows with BOS") {
    ModelConfig config = small_config();
    std::mt19937_64 rng(4);
    ModelParams params = ModelParams::init(config, rng);
    Batch b = random_batch(config, 2, 4, 4, 12);
    Tensor memory = encode(b, params, config, Mode::kEval);
    auto corrupted = b.decoder_input;
    corrupted[static_cast<std::size_t>(b.tgt_len)] = Vocab::kEos;  // row 1, position 0
    CHECK_THROWS_AS(decode(corrupted, b.tgt_len, memory, b.context_pad, params, config,
                           Mode::kEval),
                    DataError);
}

TEST_CASE("causality: future decoder tokens cannot affect earlier logits") {
    ModelConfig config = small_config(30);
    std::mt19937_64 rng(5);
    ModelParams params = ModelParams::init(config, rng);
    std::mt19937_64 case_rng(77);
    std::uniform_int_distribution<int> tok(Vocab::kReserved, config.vocab_size - 1);

    for (int trial = 0; trial < 100; ++trial) {
        Batch b = random_batch(config, 2, 4, 6, 1000 + static_cast<std::uint64_t>(trial));
        const auto base = eval_logits(b, params, config);

        // Perturb one decoder-input position strictly after `t_keep`.
        std::uniform_int_distribution<int> pos(1, b.tgt_len - 1);
        const int row = trial % 2;
        const int t_change = pos(case_rng);
        Batch mutated = b;
        auto& cell = mutated.decoder_input[static_cast<std::size_t>(row) * b.tgt_len + t_change];
        const int old = cell;
        do { cell = tok(case_rng); } while (cell == old);
        const auto changed = eval_logits(mutated, params, config);

        const std::size_t v = static_cast<std::size_t>(config.vocab_size);
        const std::size_t row_base = static_cast<std::size_t>(row) * b.tgt_len * v;
        bool prefix_equal = true;
        for (int t = 0; t < t_change; ++t) {
            for (std::size_t k = 0; k < v; ++k) {
                if (base[row_base + static_cast<std::size_t>(t) * v + k] !=
                    changed[row_base + static_cast<std::size_t>(t) * v + k]) {
                    prefix_equal = false;
                }
            }
        }
        CHECK(prefix_equal);

        // The other row is untouched entirely.
        const std::size_t other_base = static_cast<std::size_t>(1 - row) * b.tgt_len * v;
        bool other_equal = true;
        for (std::size_t k = 0; k < static_cast<std::size_t>(b.tgt_len) * v; ++k) {
            if (base[other_base + k] != changed[other_base + k]) other_equal = false;
        }
        CHECK(other_equal);
    }
}

TEST_CASE("padded source positions cannot affect logits") {
    ModelConfig config = small_config(30);
    std::mt19937_64 rng(6);
    ModelParams params = ModelParams::init(config, rng);

    for (int trial = 0; trial < 20; ++trial) {
        Batch b = random_batch(config, 2, 5, 5, 2000 + static_cast<std::uint64_t>(trial),
                               /*pad_tail_rows=*/2);
        const auto base = eval_logits(b, params, config);

        // Swap the PAD token id at a masked source slot for a real word.
        Batch mutated = b;
        for (std::size_t i = 0; i < mutated.context.size(); ++i) {
            if (mutated.context_pad[i]) mutated.context[i] = Vocab::kReserved + (trial % 7);
        }
        CHECK(eval_logits(mutated, params, config) == base);
    }
}

TEST_CASE("batch permutation equivariance in eval mode") {
    ModelConfig config = small_config(25);
    std::mt19937_64 rng(8);
    ModelParams params = ModelParams::init(config, rng);
    Batch b = random_batch(config, 3, 4, 5, 3000);

    Batch swapped = b;  // exchange rows 0 and 2 everywhere
    auto swap_rows = [&](auto& flat, int len) {
        for (int t = 0; t < len; ++t) std::swap(flat[static_cast<std::size_t>(t)],
                                                flat[static_cast<std::size_t>(2 * len + t)]);
    };
    swap_rows(swapped.context, b.src_len);
    swap_rows(swapped.context_pad, b.src_len);
    swap_rows(swapped.decoder_input, b.tgt_len);
    swap_rows(swapped.response, b.tgt_len);
    swap_rows(swapped.response_pad, b.tgt_len);

    const auto base = eval_logits(b, params, config);
    const auto perm = eval_logits(swapped, params, config);
    const std::size_t row = static_cast<std::size_t>(b.tgt_len) * config.vocab_size;
    for (std::size_t k = 0; k < row; ++k) {
        CHECK(base[k] == perm[2 * row + k]);
        CHECK(base[2 * row + k] == perm[k]);
        CHECK(base[row + k] == perm[row + k]);
    }
}

TEST_CASE("eval mode is deterministic, train mode uses dropout") {
    ModelConfig config = small_config();
    std::mt19937_64 rng(9);
    ModelParams params = ModelParams::init(config, rng);
    Batch b = random_batch(config, 2, 4, 4, 4000);

    CHECK(eval_logits(b, params, config) == eval_logits(b, params, config));

    std::mt19937_64 d1(21), d2(21), d3(22);
    const auto t1 = encode(b, params, config, Mode::kTrain, &d1).data();
    const auto t2 = encode(b, params, config, Mode::kTrain, &d2).data();
    const auto t3 = encode(b, params, config, Mode::kTrain, &d3).data();
    CHECK(t1 == t2);
    CHECK(t1 != t3);

    CHECK_THROWS_AS(encode(b, params, config, Mode::kTrain, nullptr), ConfigError);
}

TEST_CASE("full model gradient vs finite differences") {
    // Tiny but complete encoder-decoder: every parameter tensor checked.
    ModelConfig config;
    config.d_model = 8;
    config.n_heads = 2;
    config.n_layers = 1;
    config.d_ff = 16;
    config.dropout_rate = 0.0;
    config.max_len = 8;
    config.vocab_size = 9;

    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(7000 + seed);
        ModelParams params = ModelParams::init(config, rng);
        Batch b = random_batch(config, 2, 3, 4, 7100 + seed, /*pad_tail_rows=*/1);

        auto forward = [&] {
            Tensor memory = encode(b, params, config, Mode::kEval);
            Tensor logits = decode(b.decoder_input, b.tgt_len, memory, b.context_pad,
                                   params, config, Mode::kEval);
            Tensor flat = reshape(logits, {b.batch_size * b.tgt_len, config.vocab_size});
            return cross_entropy(flat, b.response, b.response_pad);
        };
        const double err = gradcheck_max_rel_err(params.tensors(), forward);
        CHECK(err < 1e-3);
    }
}

TEST_CASE("tied embeddings reuse the token table for output logits") {
    ModelConfig config = small_config(18, 16, /*tie=*/true);
    config.dropout_rate = 0.0;
    std::mt19937_64 rng(11);
    ModelParams params = ModelParams::init(config, rng);
    // Tied model exposes no separate projection matrix.
    for (const auto& [name, tensor] : params.named()) CHECK(name != "out_w");

    Batch b = random_batch(config, 1, 3, 3, 5000);
    auto forward = [&] {
        Tensor memory = encode(b, params, config, Mode::kEval);
        Tensor logits = decode(b.decoder_input, b.tgt_len, memory, b.context_pad,
                               params, config, Mode::kEval);
        Tensor flat = reshape(logits, {b.batch_size * b.tgt_len, config.vocab_size});
        return cross_entropy(flat, b.response, b.response_pad);
    };
    CHECK(gradcheck_max_rel_err(params.tensors(), forward) < 1e-3);
}

TEST_CASE("greedy generation honours max_len and determinism") {
    ModelConfig config = small_config(30);
    std::mt19937_64 rng(12);
    ModelParams params = ModelParams::init(config, rng);
    Batch b = random_batch(config, 3, 5, 5, 6000);

    const auto out1 = greedy_generate(b, params, config, /*max_len=*/6);
    const auto out2 = greedy_generate(b, params, config, 6);
    CHECK(out1 == out2);
    REQUIRE(out1.size() == 3);
    for (const auto& seq : out1) {
        CHECK(seq.size() <= 6);
        for (int t : seq) {
            CHECK(t != Vocab::kBos);
            CHECK(t != Vocab::kEos);
            CHECK(t >= 0);
            CHECK(t < config.vocab_size);
        }
    }
}
