#include "hyperlab/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "hyperlab/errors.hpp"
#include "hyperlab/rng.hpp"

namespace hyperlab {

SyntheticCorpus SyntheticCorpus::generate(uint64_t seed, int num_sequences, int seq_len,
                                          const GrammarConfig& g) {
    if (num_sequences <= 0 || seq_len <= 1) throw InputError("corpus: need sequences of length >= 2");
    if (static_cast<int>(g.branch_probs.size()) != g.branch)
        throw ConfigError("corpus: branch_probs size must equal branch");
    if (g.vocab < 2 || g.states < 2) throw ConfigError("corpus: degenerate grammar");

    Rng grammar_rng = Rng(seed).stream("grammar");

    // Emission map: a prefix of states gets unique tokens, the tail reuses
    // earlier states' tokens (the collisions that force contextual prediction).
    int unique = std::max(1, static_cast<int>(g.states * (1.0 - g.collision_rate)));
    unique = std::min(unique, std::min(g.states, g.vocab));
    std::vector<int> emission(static_cast<size_t>(g.states));
    std::vector<int> pool(static_cast<size_t>(g.vocab));
    for (int i = 0; i < g.vocab; ++i) pool[static_cast<size_t>(i)] = i;
    for (int i = g.vocab - 1; i > 0; --i)
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(grammar_rng.uniform_int(i + 1))]);
    for (int s = 0; s < g.states; ++s)
        emission[static_cast<size_t>(s)] =
            s < unique ? pool[static_cast<size_t>(s)] : pool[static_cast<size_t>(grammar_rng.uniform_int(unique))];

    // Successor states, distinct per state.
    std::vector<std::vector<int>> succ(static_cast<size_t>(g.states));
    for (int s = 0; s < g.states; ++s) {
        std::vector<int>& row = succ[static_cast<size_t>(s)];
        while (static_cast<int>(row.size()) < g.branch) {
            int cand = grammar_rng.uniform_int(g.states);
            if (std::find(row.begin(), row.end(), cand) == row.end()) row.push_back(cand);
        }
    }

    SyntheticCorpus corpus;
    corpus.grammar_seed = seed;
    corpus.vocab = g.vocab;
    corpus.sequences.reserve(static_cast<size_t>(num_sequences));
    for (int i = 0; i < num_sequences; ++i) {
        Rng walk = Rng(seed).stream("walk").stream(static_cast<uint64_t>(i));
        int state = walk.uniform_int(g.states);
        std::vector<int> seq;
        seq.reserve(static_cast<size_t>(seq_len));
        for (int t = 0; t < seq_len; ++t) {
            seq.push_back(emission[static_cast<size_t>(state)]);
            state = succ[static_cast<size_t>(state)][static_cast<size_t>(walk.categorical(g.branch_probs))];
        }
        corpus.sequences.push_back(std::move(seq));
    }
    return corpus;
}

void SyntheticCorpus::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write corpus " + path);
    out << "# vocab " << vocab << " seed " << grammar_seed << "\n";
    for (const auto& seq : sequences) {
        for (size_t i = 0; i < seq.size(); ++i) out << (i ? " " : "") << seq[i];
        out << "\n";
    }
}

SyntheticCorpus SyntheticCorpus::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("cannot open corpus " + path);
    SyntheticCorpus corpus;
    std::string line;
    int max_tok = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream hdr(line.substr(1));
            std::string key;
            while (hdr >> key) {
                if (key == "vocab") hdr >> corpus.vocab;
                if (key == "seed") hdr >> corpus.grammar_seed;
            }
            continue;
        }
        std::istringstream ss(line);
        std::vector<int> seq;
        int tok;
        while (ss >> tok) {
            if (tok < 0) throw InputError("corpus: negative token id");
            seq.push_back(tok);
            max_tok = std::max(max_tok, tok);
        }
        if (!seq.empty()) corpus.sequences.push_back(std::move(seq));
    }
    if (corpus.vocab == 0) corpus.vocab = max_tok + 1;
    return corpus;
}

std::vector<double> SyntheticCorpus::unigram_probs() const {
    if (vocab <= 0) throw InputError("corpus: vocab unknown");
    std::vector<double> counts(static_cast<size_t>(vocab), 1.0);  // add-one smoothing
    double total = static_cast<double>(vocab);
    for (const auto& seq : sequences)
        for (int t : seq) {
            counts[static_cast<size_t>(t)] += 1.0;
            total += 1.0;
        }
    for (auto& c : counts) c /= total;
    return counts;
}

std::vector<std::vector<int>> load_token_lines(const std::string& path) {
    return SyntheticCorpus::load(path).sequences;
}

void save_token_lines(const std::string& path, const std::vector<std::vector<int>>& lines) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    for (const auto& seq : lines) {
        for (size_t i = 0; i < seq.size(); ++i) out << (i ? " " : "") << seq[i];
        out << "\n";
    }
}

}  // namespace hyperlab
