#include "ebt/tasks/corpus.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "ebt/errors.hpp"

namespace ebt::tasks {

std::string to_string(CorpusKind kind) {
    switch (kind) {
        case CorpusKind::Copy: return "copy";
        case CorpusKind::Ngram: return "ngram";
        case CorpusKind::Dyck: return "dyck";
    }
    return "?";
}

CorpusKind corpus_kind_from_string(const std::string& name) {
    if (name == "copy") return CorpusKind::Copy;
    if (name == "ngram") return CorpusKind::Ngram;
    if (name == "dyck") return CorpusKind::Dyck;
    throw ConfigError("unknown task kind '" + name + "' (copy|ngram|dyck)");
}

NgramChain NgramChain::make(std::int64_t vocab_size, std::uint64_t chain_seed) {
    EBT_REQUIRE(vocab_size >= 2, "ngram chain needs at least two symbols");
    NgramChain c;
    c.vocab_size = vocab_size;
    Rng rng(chain_seed);
    const auto normalized = [&](std::size_t n) {
        // Log-normal weights give a few dominant successors per row.
        std::vector<double> w(n);
        double total = 0.0;
        for (auto& x : w) total += (x = std::exp(2.0 * rng.normal()));
        for (auto& x : w) x /= total;
        return w;
    };
    c.initial = normalized(static_cast<std::size_t>(vocab_size));
    for (std::int64_t r = 0; r < vocab_size; ++r) {
        const auto row = normalized(static_cast<std::size_t>(vocab_size));
        c.transitions.insert(c.transitions.end(), row.begin(), row.end());
    }
    return c;
}

namespace {

std::int64_t sample_from(const double* p, std::int64_t n, Rng& rng) {
    double u = rng.uniform();
    for (std::int64_t i = 0; i < n; ++i) {
        u -= p[i];
        if (u < 0.0) return i;
    }
    return n - 1;
}

std::vector<std::int64_t> gen_copy(std::int64_t v, std::int64_t s, Rng& rng) {
    std::vector<std::int64_t> seq(static_cast<std::size_t>(s));
    for (std::int64_t i = 0; i < s / 2; ++i) seq[i] = seq[i + s / 2] = rng.uniform_int(0, v - 1);
    return seq;
}

std::vector<std::int64_t> gen_ngram(const NgramChain& chain, std::int64_t s, Rng& rng) {
    std::vector<std::int64_t> seq(static_cast<std::size_t>(s));
    seq[0] = sample_from(chain.initial.data(), chain.vocab_size, rng);
    for (std::int64_t i = 1; i < s; ++i) {
        seq[i] = sample_from(&chain.transitions[seq[i - 1] * chain.vocab_size], chain.vocab_size, rng);
    }
    return seq;
}

std::vector<std::int64_t> gen_dyck(const DyckOptions& o, std::int64_t s, Rng& rng) {
    std::vector<std::int64_t> seq;
    std::vector<std::int64_t> stack;
    for (std::int64_t i = 0; i < s; ++i) {
        const auto remaining = s - i;
        const auto depth = static_cast<std::int64_t>(stack.size());
        bool open;
        if (depth == 0) open = true;
        else if (depth >= remaining || depth >= o.max_depth) open = false;
        else open = rng.uniform() < 0.5;
        if (open) {
            const auto type = rng.uniform_int(0, o.bracket_types - 1);
            stack.push_back(type);
            seq.push_back(2 * type);
        } else {
            seq.push_back(2 * stack.back() + 1);
            stack.pop_back();
        }
    }
    return seq;
}

}  // namespace

bool is_balanced_dyck(const std::vector<std::int64_t>& seq, const DyckOptions& options) {
    std::vector<std::int64_t> stack;
    for (auto sym : seq) {
        if (sym < 0 || sym >= 2 * options.bracket_types) return false;
        if (sym % 2 == 0) {
            stack.push_back(sym / 2);
            if (static_cast<std::int64_t>(stack.size()) > options.max_depth) return false;
        } else {
            if (stack.empty() || stack.back() != sym / 2) return false;
            stack.pop_back();
        }
    }
    return stack.empty();
}

ToyCorpus gen_corpus(CorpusKind kind, std::int64_t vocab_size, std::int64_t length, std::int64_t count,
                     std::uint64_t seed, const CorpusOptions& options) {
    EBT_REQUIRE(vocab_size >= 2 && vocab_size <= kMaxVocab, "vocab_size must be in [2, 64]");
    EBT_REQUIRE(length >= 2 && length <= kMaxLength, "sequence length must be in [2, 64]");
    EBT_REQUIRE(count >= 0, "count must be non-negative");
    if (kind == CorpusKind::Copy) EBT_REQUIRE(length % 2 == 0, "copy task needs an even length");
    if (kind == CorpusKind::Dyck) {
        EBT_REQUIRE(length % 2 == 0, "dyck strings need an even length");
        EBT_REQUIRE(options.dyck.bracket_types >= 1 && 2 * options.dyck.bracket_types <= vocab_size,
                    "dyck needs 2 * bracket_types <= vocab_size");
        EBT_REQUIRE(options.dyck.max_depth >= 1, "dyck max_depth must be >= 1");
    }
    ToyCorpus c{kind, vocab_size, length, seed, {}};
    Rng rng(seed);
    const auto chain = kind == CorpusKind::Ngram ? NgramChain::make(vocab_size, options.chain_seed) : NgramChain{};
    c.sequences.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
        switch (kind) {
            case CorpusKind::Copy: c.sequences.push_back(gen_copy(vocab_size, length, rng)); break;
            case CorpusKind::Ngram: c.sequences.push_back(gen_ngram(chain, length, rng)); break;
            case CorpusKind::Dyck: c.sequences.push_back(gen_dyck(options.dyck, length, rng)); break;
        }
    }
    return c;
}

Splits make_splits(CorpusKind kind, std::int64_t vocab_size, std::int64_t length, std::int64_t train_count,
                   std::int64_t validation_count, std::uint64_t seed, const CorpusOptions& options) {
    Splits s;
    s.train = gen_corpus(kind, vocab_size, length, train_count, derive_seed(seed, 1), options);
    const std::set<std::vector<std::int64_t>> seen(s.train.sequences.begin(), s.train.sequences.end());
    s.validation = gen_corpus(kind, vocab_size, length, 0, derive_seed(seed, 2), options);
    // Draw in rounds until enough unseen sequences exist; bounded so tiny
    // sequence spaces fail loudly instead of spinning.
    for (std::uint64_t round = 0; s.validation.size() < validation_count; ++round) {
        EBT_REQUIRE(round < 64, "cannot find enough validation sequences disjoint from training");
        const auto more = gen_corpus(kind, vocab_size, length, validation_count, derive_seed(seed, 2 + round * 7919),
                                     options);
        for (const auto& seq : more.sequences) {
            if (s.validation.size() == validation_count) break;
            if (!seen.count(seq)) s.validation.sequences.push_back(seq);
        }
    }
    return s;
}

std::vector<double> target_weights(CorpusKind kind, std::int64_t length) {
    std::vector<double> w(static_cast<std::size_t>(length - 1), 1.0);
    if (kind == CorpusKind::Copy) {
        // target j is sequence element j + 1
        for (std::int64_t j = 0; j + 1 < length / 2; ++j) w[j] = 0.0;
    }
    return w;
}

TokenBatch make_batch(const ToyCorpus& corpus, const std::vector<std::int64_t>& rows) {
    EBT_REQUIRE(!rows.empty(), "batch needs at least one row");
    TokenBatch b;
    b.batch = static_cast<std::int64_t>(rows.size());
    b.length = corpus.length - 1;
    const auto w = target_weights(corpus.kind, corpus.length);
    for (auto r : rows) {
        EBT_REQUIRE(r >= 0 && r < corpus.size(), "batch row out of range");
        const auto& seq = corpus.sequences[static_cast<std::size_t>(r)];
        b.context.insert(b.context.end(), seq.begin(), seq.end() - 1);
        b.targets.insert(b.targets.end(), seq.begin() + 1, seq.end());
        b.weights.insert(b.weights.end(), w.begin(), w.end());
    }
    return b;
}

TokenBatch make_batch(const ToyCorpus& corpus, std::int64_t begin, std::int64_t count) {
    EBT_REQUIRE(corpus.size() > 0, "empty corpus");
    std::vector<std::int64_t> rows(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) rows[i] = (begin + i) % corpus.size();
    return make_batch(corpus, rows);
}

void write_corpus(const std::string& path, const ToyCorpus& corpus) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write corpus '" + path + "'");
    for (const auto& seq : corpus.sequences) {
        for (std::size_t i = 0; i < seq.size(); ++i) out << (i ? " " : "") << seq[i];
        out << '\n';
    }
}

std::vector<std::vector<std::int64_t>> read_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open corpus '" + path + "'");
    std::vector<std::vector<std::int64_t>> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::vector<std::int64_t> seq;
        std::int64_t v;
        while (ls >> v) seq.push_back(v);
        if (!ls.eof()) throw ConfigError("corpus '" + path + "': non-numeric symbol on line " +
                                         std::to_string(out.size() + 1));
        out.push_back(std::move(seq));
    }
    return out;
}

Tensor gen_sinusoids(std::int64_t count, std::int64_t length, std::int64_t features, std::uint64_t seed) {
    EBT_REQUIRE(count > 0 && length > 0 && features > 0, "sinusoid dimensions must be positive");
    Rng rng(seed);
    std::vector<double> v(static_cast<std::size_t>(count * length * features));
    constexpr int kComponents = 3;
    for (std::int64_t n = 0; n < count; ++n) {
        for (std::int64_t f = 0; f < features; ++f) {
            double amp[kComponents], freq[kComponents], phase[kComponents];
            for (int c = 0; c < kComponents; ++c) {
                amp[c] = rng.uniform(0.2, 1.0);
                freq[c] = rng.uniform(0.05, 0.5);
                phase[c] = rng.uniform(0.0, 2.0 * M_PI);
            }
            for (std::int64_t t = 0; t < length; ++t) {
                double x = 0.0;
                for (int c = 0; c < kComponents; ++c) x += amp[c] * std::sin(freq[c] * static_cast<double>(t) + phase[c]);
                v[(n * length + t) * features + f] = x;
            }
        }
    }
    double mean = 0.0, sq = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    for (double x : v) sq += (x - mean) * (x - mean);
    const double sd = std::sqrt(sq / static_cast<double>(v.size()));
    for (auto& x : v) x = (x - mean) / sd;
    return Tensor::from_data({count, length, features}, std::move(v));
}

}  // namespace ebt::tasks
