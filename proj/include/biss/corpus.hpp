#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace biss {

using TokenSeq = std::vector<int>;

// Token <-> id mapping with reserved specials at ids 0..3.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kReserved = 4;

    Vocab();

    int id(const std::string& token) const;  // UNK for unseen tokens
    const std::string& token(int id) const;
    int size() const { return static_cast<int>(id2tok_.size()); }
    std::uint64_t hash() const;

    void save(const std::string& path) const;
    static Vocab load(const std::string& path);

    // Appends a corpus token; reserved names are rejected.
    void add(const std::string& token);

private:
    std::vector<std::string> id2tok_;
    std::unordered_map<std::string, int> tok2id_;
};

struct DialoguePair {
    TokenSeq context;
    TokenSeq response;  // ends with EOS
};

struct Batch {
    int batch_size = 0;
    int src_len = 0;
    int tgt_len = 0;
    std::vector<int> context;        // B x S, row-major
    std::vector<int> response;       // B x T, gold targets
    std::vector<int> decoder_input;  // B x T: BOS, y_1 .. y_{T-1}
    std::vector<bool> context_pad;   // true at PAD
    std::vector<bool> response_pad;
};

// Lowercase, whitespace-split, punctuation peeled into standalone tokens.
std::vector<std::string> tokenize(const std::string& text);

// (u_1..u_n) -> [(u_1,u_2), ..., (u_{n-1},u_n)]. Dialogues with fewer than
// two utterances are skipped and counted.
std::vector<std::pair<std::string, std::string>> split_dialogues(
    const std::vector<std::vector<std::string>>& dialogues, int* skipped = nullptr);

// Frequency desc, first-occurrence asc; max_size counts reserved ids too
// (0 = unlimited).
Vocab build_vocab(const std::vector<std::pair<std::string, std::string>>& pairs,
                  int min_freq = 1, int max_size = 0);

TokenSeq encode_tokens(const std::vector<std::string>& tokens, const Vocab& vocab);
std::string decode_tokens(const TokenSeq& ids, const Vocab& vocab);

// Context truncated to max_len; response truncated to max_len-1 then EOS.
std::vector<DialoguePair> encode_pairs(
    const std::vector<std::pair<std::string, std::string>>& pairs,
    const Vocab& vocab, int max_len);

// Shuffle order is a pure function of seed; shuffle=false keeps input order.
std::vector<Batch> make_batches(const std::vector<DialoguePair>& pairs,
                                int batch_size, std::uint64_t seed,
                                bool shuffle = true);

// One dialogue per line with utterances separated by `delimiter`, or
// JSON-lines objects with an "utterances" array (detected per line).
std::vector<std::vector<std::string>> load_dialogues(
    const std::string& path, const std::string& delimiter = "__eou__");

}  // namespace biss
