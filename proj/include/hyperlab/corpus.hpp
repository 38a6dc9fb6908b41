#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hyperlab {

// Hidden-state regular grammar used as the surrogate corpus. Each state emits
// one token (several states share a token, so disambiguation needs context)
// and hops to one of `branch` successor states with fixed probabilities.
// Sequences regenerate bit-identically from the seed.
struct GrammarConfig {
    int states = 24;
    int vocab = 64;
    int branch = 3;
    std::vector<double> branch_probs = {0.70, 0.20, 0.10};
    // Fraction of states whose emission collides with another state's token.
    double collision_rate = 0.34;
};

struct SyntheticCorpus {
    std::vector<std::vector<int>> sequences;
    uint64_t grammar_seed = 0;
    int vocab = 0;

    static SyntheticCorpus generate(uint64_t seed, int num_sequences, int seq_len,
                                    const GrammarConfig& grammar = {});

    void save(const std::string& path) const;  // one space-separated sequence per line
    static SyntheticCorpus load(const std::string& path);

    // Add-one-smoothed unigram distribution over [0, vocab).
    std::vector<double> unigram_probs() const;
};

// Prompt files share the corpus wire format.
std::vector<std::vector<int>> load_token_lines(const std::string& path);
void save_token_lines(const std::string& path, const std::vector<std::vector<int>>& lines);

}  // namespace hyperlab
