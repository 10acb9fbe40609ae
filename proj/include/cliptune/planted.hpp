#pragma once

#include <cstdint>
#include <utility>

#include "cliptune/dataset.hpp"
#include "cliptune/model.hpp"
#include "cliptune/prompting.hpp"
#include "cliptune/rng.hpp"

namespace cliptune {

// A frozen model paired with the intrinsic vector that provably solves its
// companion dataset. Serves as an independent oracle for end-to-end tuning
// tests: the optimum is known in closed form before any search runs.
struct PlantedOracle {
    FrozenModel model;
    IntrinsicVector optimal_intrinsic;  // z*
    double attainable_accuracy = 1.0;
};

struct PlantedParams {
    std::size_t samples_per_class = 32;
    std::size_t seq_len = 16;  // content tokens per sample
};

// Requires config.heads == config.num_classes and an embedding wide enough
// for the reserved coordinate slots. The construction:
//   - every class owns a block of vocabulary ids whose embeddings carry a
//     +/- key pair read only by that class's attention head;
//   - prompt rows are the only positions whose values feed the payload
//     channel, so each head's output is (payload) x (attention mass kept on
//     prompt rows);
//   - tokens of class y outscore prompt rows exactly in head y, draining its
//     prompt mass, and the classifier reads the negated per-head payload, so
//     once the prompt carries positive payload the true class ranks first.
// z* is the minimum-norm intrinsic vector placing that payload through the
// caller's projection (per-row payload pairs plus zero mean key leakage);
// it is verified on the returned dataset before returning, against a zeros
// base prompt. With zero payload (z = 0) every logit is exactly zero, so
// prediction is constant and accuracy is exactly chance on the balanced set.
std::pair<PlantedOracle, FewShotDataset> build_planted_oracle(const ModelConfig& config,
                                                              std::size_t d,
                                                              const Projection& projection,
                                                              RngStream& rng,
                                                              const PlantedParams& params = {});

// A config sized for the construction (heads = num_classes, slim encoder).
ModelConfig planted_model_config(std::size_t num_classes, std::size_t emb_dim,
                                 std::size_t layers, std::size_t vocab_size,
                                 std::size_t max_seq);

}  // namespace cliptune
