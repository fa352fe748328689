#include "biss/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "biss/errors.hpp"

namespace biss {

namespace {

std::map<std::vector<int>, long> ngram_counts(const TokenSeq& seq, int n) {
    std::map<std::vector<int>, long> counts;
    if (static_cast<int>(seq.size()) >= n) {
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= seq.size(); ++i) {
            std::vector<int> gram(seq.begin() + static_cast<std::ptrdiff_t>(i),
                                  seq.begin() + static_cast<std::ptrdiff_t>(i) + n);
            ++counts[gram];
        }
    }
    return counts;
}

// clipped matches and candidate n-gram total
std::pair<long, long> clipped_matches(const TokenSeq& cand, const TokenSeq& ref, int n) {
    const auto cc = ngram_counts(cand, n);
    const auto rc = ngram_counts(ref, n);
    long matches = 0, total = 0;
    for (const auto& [gram, count] : cc) {
        total += count;
        auto it = rc.find(gram);
        if (it != rc.end()) matches += std::min(count, it->second);
    }
    return {matches, total};
}

double brevity_penalty(double ref_len, double cand_len) {
    if (cand_len <= 0.0) return 0.0;
    return std::exp(std::min(0.0, 1.0 - ref_len / cand_len));
}

}  // namespace

double sentence_bleu_i(const TokenSeq& candidate, const TokenSeq& reference, int i) {
    if (i < 1 || i > 4) throw std::invalid_argument("bleu order must be in 1..4, got " + std::to_string(i));
    const auto [matches, total] = clipped_matches(candidate, reference, i);
    if (total == 0 || matches == 0) return 0.0;
    const double precision = static_cast<double>(matches) / static_cast<double>(total);
    return precision * brevity_penalty(static_cast<double>(reference.size()),
                                       static_cast<double>(candidate.size()));
}

double sli_bleu(const TokenSeq& y_star, const TokenSeq& y, double m) {
    if (m <= 0.0) throw ConfigError("SLI scaling m must be positive");
    double s = 0.0;
    for (int i = 1; i <= 4; ++i) s += sentence_bleu_i(y_star, y, i);
    return s / m;
}

std::vector<double> sentence_embedding(const TokenSeq& seq, const Tensor& embed_table) {
    if (seq.empty()) throw DataError("empty sentence");
    const int v = embed_table.dim(0), d = embed_table.dim(1);
    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (int id : seq) {
        if (id < 0 || id >= v) throw std::out_of_range("token id " + std::to_string(id) + " outside embedding table");
        const double* row = embed_table.data().data() + static_cast<std::ptrdiff_t>(id) * d;
        for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += row[j];
    }
    for (double& x : mean) x /= static_cast<double>(seq.size());
    return mean;
}

double sli_cosine(const TokenSeq& y_star, const TokenSeq& y, const Tensor& embed_table, double m) {
    if (m <= 0.0) throw ConfigError("SLI scaling m must be positive");
    const auto a = sentence_embedding(y_star, embed_table);
    const auto b = sentence_embedding(y, embed_table);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        dot += a[j] * b[j];
        na += a[j] * a[j];
        nb += b[j] * b[j];
    }
    if (na == 0.0 || nb == 0.0) throw DataError("degenerate embedding: zero-norm sentence vector");
    return dot / (m * std::sqrt(na) * std::sqrt(nb));
}

BleuReport corpus_bleu(const std::vector<TokenSeq>& candidates,
                       const std::vector<TokenSeq>& references) {
    if (candidates.size() != references.size()) {
        throw std::invalid_argument("corpus_bleu requires equal-length candidate/reference lists");
    }
    if (candidates.empty()) throw DataError("corpus_bleu on an empty corpus");
    std::array<long, 4> matches{}, totals{};
    double cand_len = 0.0, ref_len = 0.0;
    for (std::size_t s = 0; s < candidates.size(); ++s) {
        cand_len += static_cast<double>(candidates[s].size());
        ref_len += static_cast<double>(references[s].size());
        for (int n = 1; n <= 4; ++n) {
            const auto [m, t] = clipped_matches(candidates[s], references[s], n);
            matches[static_cast<std::size_t>(n - 1)] += m;
            totals[static_cast<std::size_t>(n - 1)] += t;
        }
    }
    BleuReport report;
    const double bp = brevity_penalty(ref_len, cand_len);
    for (int n = 1; n <= 4; ++n) {
        const std::size_t k = static_cast<std::size_t>(n - 1);
        report.precision[k] = totals[k] > 0 ? static_cast<double>(matches[k]) / static_cast<double>(totals[k]) : 0.0;
        double log_sum = 0.0;
        bool zero = false;
        for (int i = 1; i <= n; ++i) {
            const double p = report.precision[static_cast<std::size_t>(i - 1)];
            if (p <= 0.0) {
                zero = true;
                break;
            }
            log_sum += std::log(p);
        }
        report.bleu[k] = zero ? 0.0 : bp * std::exp(log_sum / n);
    }
    return report;
}

double distinct_n(const std::vector<TokenSeq>& candidates, int n) {
    if (n < 1) throw std::invalid_argument("distinct order must be >= 1");
    std::set<std::vector<int>> unique;
    long total = 0;
    for (const TokenSeq& seq : candidates) {
        if (static_cast<int>(seq.size()) < n) continue;
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= seq.size(); ++i) {
            unique.insert(std::vector<int>(seq.begin() + static_cast<std::ptrdiff_t>(i),
                                           seq.begin() + static_cast<std::ptrdiff_t>(i) + n));
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(unique.size()) / static_cast<double>(total);
}

}  // namespace biss
