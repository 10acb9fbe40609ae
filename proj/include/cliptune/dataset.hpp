#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace cliptune {

enum class Split { train, dev, test };

const char* split_name(Split s);

struct Sample {
    std::vector<uint32_t> tokens;
    uint32_t label = 0;
};

// Immutable after construction; labels always < num_classes.
struct FewShotDataset {
    std::vector<Sample> samples;
    std::size_t num_classes = 0;
    Split split = Split::test;
    std::string provenance;  // generator seed or source path

    std::size_t size() const { return samples.size(); }
    void validate() const;

    // Content hash (hex SHA-1 over labels and token ids), recorded in run
    // metadata so a run names exactly the data it saw.
    std::string fingerprint() const;
};

// Draws k train + k dev samples per class without replacement, disjoint by
// construction, deterministic per seed.
std::pair<FewShotDataset, FewShotDataset> sample_few_shot(const FewShotDataset& full,
                                                          std::size_t k, uint64_t seed);

// Class-conditional token distributions over a toy vocabulary. Each class owns
// a contiguous block of token ids; separability is the probability that a
// token is drawn from the class block rather than uniformly from all content
// ids, so 0 makes every class distribution identical.
FewShotDataset gen_synthetic_task(std::size_t num_classes, std::size_t samples_per_class,
                                  std::size_t vocab_size, std::size_t seq_len, uint64_t seed,
                                  double separability = 1.0);

using Vocab = std::map<std::string, uint32_t>;

// One token per line, ids assigned from 2 upward (0 and 1 are reserved).
Vocab load_vocab(const std::string& path);

// Rows are "text<TAB>label"; whitespace tokenization, out-of-vocabulary
// tokens map to the reserved unknown id. Labels are indexed by first
// appearance unless a label map is supplied.
FewShotDataset load_tsv(const std::string& path, const Vocab& vocab,
                        const std::map<std::string, uint32_t>* label_map = nullptr);

}  // namespace cliptune
