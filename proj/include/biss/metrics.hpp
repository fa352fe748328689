#pragma once

#include <array>
#include <vector>

#include "biss/corpus.hpp"
#include "biss/tensor.hpp"

namespace biss {

struct BleuReport {
    std::array<double, 4> bleu{};       // cumulative BLEU-1..4, in [0,1]
    std::array<double, 4> precision{};  // bare clipped n-gram precisions
};

// Clipped i-gram precision times brevity penalty, no zero-count smoothing.
// Callers strip PAD (and any other special tokens) beforehand.
double sentence_bleu_i(const TokenSeq& candidate, const TokenSeq& reference, int i);

// (sum over i=1..4 of bleu-i) / m, taken literally.
double sli_bleu(const TokenSeq& y_star, const TokenSeq& y, double m);

// Mean of per-token embedding rows; throws DataError on an empty sequence.
std::vector<double> sentence_embedding(const TokenSeq& seq, const Tensor& embed_table);

// cosine(embed(Y*), embed(Y)) / m; throws DataError on a zero-norm embedding.
double sli_cosine(const TokenSeq& y_star, const TokenSeq& y, const Tensor& embed_table, double m);

BleuReport corpus_bleu(const std::vector<TokenSeq>& candidates,
                       const std::vector<TokenSeq>& references);

// Unique n-grams / total n-grams over the whole candidate corpus.
double distinct_n(const std::vector<TokenSeq>& candidates, int n);

}  // namespace biss
