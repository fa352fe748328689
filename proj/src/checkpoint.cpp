#include <cstring>
#include <fstream>

#include "biss/errors.hpp"
#include "biss/trainer.hpp"

namespace biss {

namespace {

// Versioned binary checkpoint: magic, header, named parameter manifest with
// 64-bit values (bit-exact resume), then Adam moment buffers.
constexpr char kMagic[8] = {'B', 'I', 'S', 'S', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("truncated checkpoint file");
    return v;
}

void put_string(std::ofstream& out, const std::string& s) {
    put(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::ifstream& in) {
    const auto n = get<std::uint32_t>(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw DataError("truncated checkpoint file");
    return s;
}

void put_doubles(std::ofstream& out, const std::vector<double>& v) {
    put(out, static_cast<std::uint64_t>(v.size()));
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> get_doubles(std::ifstream& in) {
    const auto n = get<std::uint64_t>(in);
    std::vector<double> v(static_cast<std::size_t>(n));
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw DataError("truncated checkpoint file");
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write(kMagic, sizeof(kMagic));
    put(out, ckpt.version);
    put(out, static_cast<std::int32_t>(ckpt.model.d_model));
    put(out, static_cast<std::int32_t>(ckpt.model.n_heads));
    put(out, static_cast<std::int32_t>(ckpt.model.n_layers));
    put(out, static_cast<std::int32_t>(ckpt.model.d_ff));
    put(out, ckpt.model.dropout_rate);
    put(out, static_cast<std::int32_t>(ckpt.model.max_len));
    put(out, static_cast<std::int32_t>(ckpt.model.vocab_size));
    put(out, static_cast<std::uint8_t>(ckpt.model.tie_embeddings ? 1 : 0));
    put(out, ckpt.seed);
    put(out, static_cast<std::int32_t>(ckpt.epoch));
    put(out, static_cast<std::int32_t>(ckpt.batch_index));
    put(out, static_cast<std::int64_t>(ckpt.global_step));
    put(out, ckpt.vocab_hash);
    put(out, static_cast<std::uint32_t>(ckpt.params.size()));
    for (const auto& [name, tensor] : ckpt.params) {
        put_string(out, name);
        put(out, static_cast<std::uint32_t>(tensor.shape().size()));
        for (int d : tensor.shape()) put(out, static_cast<std::int32_t>(d));
        put_doubles(out, tensor.data());
    }
    put(out, static_cast<std::uint8_t>(ckpt.adam_m.empty() ? 0 : 1));
    if (!ckpt.adam_m.empty()) {
        put(out, static_cast<std::int64_t>(ckpt.adam_t));
        for (const auto& m : ckpt.adam_m) put_doubles(out, m);
        for (const auto& v : ckpt.adam_v) put_doubles(out, v);
    }
    if (!out) throw DataError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw DataError("not a checkpoint file: " + path);
    }
    Checkpoint ckpt;
    ckpt.version = get<std::uint32_t>(in);
    if (ckpt.version != 1) throw DataError("unsupported checkpoint version " + std::to_string(ckpt.version));
    ckpt.model.d_model = get<std::int32_t>(in);
    ckpt.model.n_heads = get<std::int32_t>(in);
    ckpt.model.n_layers = get<std::int32_t>(in);
    ckpt.model.d_ff = get<std::int32_t>(in);
    ckpt.model.dropout_rate = get<double>(in);
    ckpt.model.max_len = get<std::int32_t>(in);
    ckpt.model.vocab_size = get<std::int32_t>(in);
    ckpt.model.tie_embeddings = get<std::uint8_t>(in) != 0;
    ckpt.seed = get<std::uint64_t>(in);
    ckpt.epoch = get<std::int32_t>(in);
    ckpt.batch_index = get<std::int32_t>(in);
    ckpt.global_step = get<std::int64_t>(in);
    ckpt.vocab_hash = get<std::uint64_t>(in);
    const auto n_params = get<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < n_params; ++i) {
        const std::string name = get_string(in);
        const auto ndim = get<std::uint32_t>(in);
        Shape shape(ndim);
        for (auto& d : shape) d = get<std::int32_t>(in);
        std::vector<double> data = get_doubles(in);
        ckpt.params.emplace_back(name, Tensor(std::move(shape), std::move(data), true));
    }
    if (get<std::uint8_t>(in) != 0) {
        ckpt.adam_t = get<std::int64_t>(in);
        ckpt.adam_m.reserve(n_params);
        ckpt.adam_v.reserve(n_params);
        for (std::uint32_t i = 0; i < n_params; ++i) ckpt.adam_m.push_back(get_doubles(in));
        for (std::uint32_t i = 0; i < n_params; ++i) ckpt.adam_v.push_back(get_doubles(in));
    }
    return ckpt;
}

ModelParams params_from_checkpoint(const Checkpoint& ckpt) {
    std::mt19937_64 rng(0);
    ModelParams p = ModelParams::init(ckpt.model, rng);
    auto named = p.named();
    if (named.size() != ckpt.params.size()) {
        throw DataError("checkpoint parameter count does not match model config");
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
        if (named[i].first != ckpt.params[i].first ||
            named[i].second.shape() != ckpt.params[i].second.shape()) {
            throw DataError("checkpoint parameter mismatch at " + ckpt.params[i].first);
        }
        named[i].second.data() = ckpt.params[i].second.data();
    }
    return p;
}

}  // namespace biss
