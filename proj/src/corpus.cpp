#include "biss/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "biss/errors.hpp"
#include "biss/rng.hpp"

namespace biss {

namespace {
const std::vector<std::string> kSpecials = {"<pad>", "<bos>", "<eos>", "<unk>"};
}

Vocab::Vocab() : id2tok_(kSpecials) {
    for (int i = 0; i < kReserved; ++i) tok2id_[id2tok_[static_cast<std::size_t>(i)]] = i;
}

int Vocab::id(const std::string& token) const {
    auto it = tok2id_.find(token);
    return it == tok2id_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("vocab id " + std::to_string(id) + " out of range");
    return id2tok_[static_cast<std::size_t>(id)];
}

void Vocab::add(const std::string& token) {
    if (std::find(kSpecials.begin(), kSpecials.end(), token) != kSpecials.end()) {
        throw DataError("corpus token collides with reserved symbol: " + token);
    }
    if (tok2id_.count(token)) return;
    tok2id_[token] = size();
    id2tok_.push_back(token);
}

std::uint64_t Vocab::hash() const {
    // FNV-1a over tokens joined by newlines
    std::uint64_t h = 1469598103934665603ULL;
    for (const std::string& t : id2tok_) {
        for (char c : t) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ULL;
        }
        h ^= static_cast<unsigned char>('\n');
        h *= 1099511628211ULL;
    }
    return h;
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocab file: " + path);
    for (int i = kReserved; i < size(); ++i) out << id2tok_[static_cast<std::size_t>(i)] << "\n";
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read vocab file: " + path);
    Vocab v;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) v.add(line);
    }
    return v;
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> tokens;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) {
            tokens.push_back(word);
            word.clear();
        }
    };
    for (char ch : text) {
        const unsigned char c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            flush();
        } else if (std::ispunct(c)) {
            flush();
            tokens.emplace_back(1, static_cast<char>(c));
        } else {
            word.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return tokens;
}

std::vector<std::pair<std::string, std::string>> split_dialogues(
    const std::vector<std::vector<std::string>>& dialogues, int* skipped) {
    std::vector<std::pair<std::string, std::string>> pairs;
    int skip_count = 0;
    for (const auto& turns : dialogues) {
        if (turns.size() < 2) {
            ++skip_count;
            continue;
        }
        for (std::size_t i = 0; i + 1 < turns.size(); ++i) {
            pairs.emplace_back(turns[i], turns[i + 1]);
        }
    }
    if (skipped) *skipped = skip_count;
    return pairs;
}

Vocab build_vocab(const std::vector<std::pair<std::string, std::string>>& pairs,
                  int min_freq, int max_size) {
    if (pairs.empty()) throw DataError("cannot build vocab from an empty corpus");
    std::unordered_map<std::string, std::pair<long, long>> stats;  // token -> (count, first index)
    long order = 0;
    auto count = [&](const std::string& text) {
        for (const std::string& tok : tokenize(text)) {
            auto it = stats.find(tok);
            if (it == stats.end()) {
                stats.emplace(tok, std::make_pair(1L, order));
            } else {
                ++it->second.first;
            }
            ++order;
        }
    };
    for (const auto& [ctx, resp] : pairs) {
        count(ctx);
        count(resp);
    }
    std::vector<std::pair<std::string, std::pair<long, long>>> items(stats.begin(), stats.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second.first != b.second.first) return a.second.first > b.second.first;
        return a.second.second < b.second.second;
    });
    Vocab v;
    const int limit = max_size > 0 ? std::max(0, max_size - Vocab::kReserved)
                                   : static_cast<int>(items.size());
    int kept = 0;
    for (const auto& [tok, st] : items) {
        if (kept >= limit) break;
        if (st.first < min_freq) break;  // sorted by frequency, nothing later qualifies
        v.add(tok);
        ++kept;
    }
    return v;
}

TokenSeq encode_tokens(const std::vector<std::string>& tokens, const Vocab& vocab) {
    TokenSeq ids;
    ids.reserve(tokens.size());
    for (const std::string& t : tokens) ids.push_back(vocab.id(t));
    return ids;
}

std::string decode_tokens(const TokenSeq& ids, const Vocab& vocab) {
    std::string out;
    for (int id : ids) {
        if (id == Vocab::kPad || id == Vocab::kBos || id == Vocab::kEos) continue;
        if (!out.empty()) out.push_back(' ');
        out += vocab.token(id);
    }
    return out;
}

std::vector<DialoguePair> encode_pairs(
    const std::vector<std::pair<std::string, std::string>>& pairs,
    const Vocab& vocab, int max_len) {
    if (max_len < 2) throw ConfigError("max_len must be >= 2");
    std::vector<DialoguePair> out;
    out.reserve(pairs.size());
    for (const auto& [ctx, resp] : pairs) {
        DialoguePair p;
        p.context = encode_tokens(tokenize(ctx), vocab);
        if (static_cast<int>(p.context.size()) > max_len) p.context.resize(static_cast<std::size_t>(max_len));
        p.response = encode_tokens(tokenize(resp), vocab);
        if (static_cast<int>(p.response.size()) > max_len - 1) p.response.resize(static_cast<std::size_t>(max_len - 1));
        if (p.context.empty() || p.response.empty()) continue;  // degenerate after tokenization
        p.response.push_back(Vocab::kEos);
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<Batch> make_batches(const std::vector<DialoguePair>& pairs,
                                int batch_size, std::uint64_t seed, bool shuffle) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    if (shuffle) {
        auto rng = make_rng(seed, RngStream::kDataOrder);
        std::shuffle(order.begin(), order.end(), rng);
    }
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
        Batch b;
        b.batch_size = static_cast<int>(end - start);
        for (std::size_t i = start; i < end; ++i) {
            b.src_len = std::max(b.src_len, static_cast<int>(pairs[order[i]].context.size()));
            b.tgt_len = std::max(b.tgt_len, static_cast<int>(pairs[order[i]].response.size()));
        }
        b.context.assign(static_cast<std::size_t>(b.batch_size) * b.src_len, Vocab::kPad);
        b.response.assign(static_cast<std::size_t>(b.batch_size) * b.tgt_len, Vocab::kPad);
        b.decoder_input.assign(static_cast<std::size_t>(b.batch_size) * b.tgt_len, Vocab::kPad);
        b.context_pad.assign(b.context.size(), true);
        b.response_pad.assign(b.response.size(), true);
        for (std::size_t i = start; i < end; ++i) {
            const DialoguePair& p = pairs[order[i]];
            const int row = static_cast<int>(i - start);
            for (std::size_t j = 0; j < p.context.size(); ++j) {
                const std::size_t at = static_cast<std::size_t>(row) * b.src_len + j;
                b.context[at] = p.context[j];
                b.context_pad[at] = false;
            }
            for (std::size_t j = 0; j < p.response.size(); ++j) {
                const std::size_t at = static_cast<std::size_t>(row) * b.tgt_len + j;
                b.response[at] = p.response[j];
                b.response_pad[at] = false;
                b.decoder_input[at] = j == 0 ? Vocab::kBos : p.response[j - 1];
            }
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

std::vector<std::vector<std::string>> load_dialogues(const std::string& path,
                                                     const std::string& delimiter) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file: " + path);
    std::vector<std::vector<std::string>> dialogues;
    std::string line;
    auto trim = [](std::string s) {
        const char* ws = " \t\r\n";
        const auto b = s.find_first_not_of(ws);
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(ws);
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        const std::string t = trim(line);
        if (t.empty()) continue;
        std::vector<std::string> turns;
        if (t.front() == '{') {
            nlohmann::json obj;
            try {
                obj = nlohmann::json::parse(t);
            } catch (const nlohmann::json::parse_error& e) {
                throw DataError("bad JSON line in " + path + ": " + e.what());
            }
            if (!obj.contains("utterances") || !obj["utterances"].is_array()) {
                throw DataError("JSON line missing \"utterances\" array in " + path);
            }
            for (const auto& u : obj["utterances"]) {
                const std::string s = trim(u.get<std::string>());
                if (!s.empty()) turns.push_back(s);
            }
        } else {
            std::size_t pos = 0;
            while (pos <= t.size()) {
                const std::size_t next = t.find(delimiter, pos);
                const std::string u = trim(t.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
                if (!u.empty()) turns.push_back(u);
                if (next == std::string::npos) break;
                pos = next + delimiter.size();
            }
        }
        if (!turns.empty()) dialogues.push_back(std::move(turns));
    }
    return dialogues;
}

}  // namespace biss
