#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ebt/autodiff/grad.hpp"

namespace ebt::tasks {

enum class CorpusKind { Copy, Ngram, Dyck };

std::string to_string(CorpusKind kind);
CorpusKind corpus_kind_from_string(const std::string& name);

constexpr std::int64_t kMaxVocab = 64;
constexpr std::int64_t kMaxLength = 64;

struct DyckOptions {
    std::int64_t bracket_types = 2;  // k; open i -> 2i, close i -> 2i+1
    std::int64_t max_depth = 4;      // d
};

/// First-order Markov chain over V symbols. The transition table is fixed by
/// its own seed so every split shares the same chain.
struct NgramChain {
    std::int64_t vocab_size = 0;
    std::vector<double> initial;      // [V]
    std::vector<double> transitions;  // [V, V], row = previous symbol

    static NgramChain make(std::int64_t vocab_size, std::uint64_t chain_seed);
    double p(std::int64_t prev, std::int64_t next) const { return transitions[prev * vocab_size + next]; }
};

struct ToyCorpus {
    CorpusKind kind = CorpusKind::Copy;
    std::int64_t vocab_size = 0;
    std::int64_t length = 0;
    std::uint64_t seed = 0;
    std::vector<std::vector<std::int64_t>> sequences;

    std::int64_t size() const { return static_cast<std::int64_t>(sequences.size()); }
};

struct CorpusOptions {
    DyckOptions dyck;
    std::uint64_t chain_seed = 1234;  // ngram transition table
};

/// Generates `count` sequences of length S over V symbols.
ToyCorpus gen_corpus(CorpusKind kind, std::int64_t vocab_size, std::int64_t length, std::int64_t count,
                     std::uint64_t seed, const CorpusOptions& options = {});

struct Splits {
    ToyCorpus train;
    ToyCorpus validation;
};

/// Train and validation drawn from derived seeds; validation never repeats a
/// training sequence.
Splits make_splits(CorpusKind kind, std::int64_t vocab_size, std::int64_t length, std::int64_t train_count,
                   std::int64_t validation_count, std::uint64_t seed, const CorpusOptions& options = {});

/// Next-symbol training pairs: context = seq[0..S-2], targets = seq[1..S-1].
struct TokenBatch {
    std::int64_t batch = 0;
    std::int64_t length = 0;  // S - 1
    std::vector<std::int64_t> context;
    std::vector<std::int64_t> targets;
    std::vector<double> weights;  // 1 for positions that count toward the task metric
};

/// Which target positions are predictable from context. For copy only the
/// repeated second half is; every target counts for the other kinds.
std::vector<double> target_weights(CorpusKind kind, std::int64_t length);

TokenBatch make_batch(const ToyCorpus& corpus, const std::vector<std::int64_t>& rows);
/// Rows `[begin, begin+count)` modulo the corpus size.
TokenBatch make_batch(const ToyCorpus& corpus, std::int64_t begin, std::int64_t count);

bool is_balanced_dyck(const std::vector<std::int64_t>& seq, const DyckOptions& options);

/// One sequence per line, symbol ids separated by single spaces.
void write_corpus(const std::string& path, const ToyCorpus& corpus);
std::vector<std::vector<std::int64_t>> read_corpus(const std::string& path);

/// Sums of random sinusoids, [count, length, features], standardized to zero
/// mean and unit variance over the whole set.
Tensor gen_sinusoids(std::int64_t count, std::int64_t length, std::int64_t features, std::uint64_t seed);

}  // namespace ebt::tasks
