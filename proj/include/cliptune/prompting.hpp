#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cliptune/matrix.hpp"

namespace cliptune {

class FrozenModel;

// Soft prompt: prompt_len virtual-token embeddings, one per row.
struct PromptEmbedding {
    MatF values;  // prompt_len x emb_dim

    std::size_t prompt_len() const { return values.rows(); }
    std::size_t emb_dim() const { return values.cols(); }
};

// Low-dimensional search vector; the only state the optimizer moves.
struct IntrinsicVector {
    std::vector<double> values;

    std::size_t dim() const { return values.size(); }
};

// Frozen random affine map from intrinsic space to the flattened prompt
// delta. Regenerable from (d, D, seed, scale).
struct Projection {
    std::size_t d = 0;
    std::size_t D = 0;  // prompt_len * emb_dim
    uint64_t seed = 0;
    double scale = 1.0;
    MatF matrix;  // d x D

    // Folded view: column t*emb_dim+e of `matrix` averaged over t.
    // Maps z to the delta of the mean prompt row.
    MatD folded(std::size_t prompt_len, std::size_t emb_dim) const;
};

// Entries i.i.d. normal(0, scale^2 / d), so z with unit-variance entries
// produces prompt-delta entries with variance scale^2.
Projection init_projection(std::size_t d, std::size_t D, uint64_t seed, double scale = 1.0);

// P = P0 + reshape(z * W)
PromptEmbedding compose_prompt(const PromptEmbedding& p0, const IntrinsicVector& z,
                               const Projection& w);

enum class PromptInit { random_tokens, zeros, file };

PromptInit prompt_init_from_name(const std::string& name);
const char* prompt_init_name(PromptInit s);

// random_tokens copies prompt_len uniformly chosen embedding-table rows,
// zeros returns the zero matrix, file loads a previously saved prompt.
PromptEmbedding init_prompt(PromptInit strategy, const FrozenModel& model,
                            std::size_t prompt_len, uint64_t seed,
                            const std::string& path = "");

// Prompt file: magic "PFPT", version u16, prompt_len u32, emb_dim u32,
// little-endian float32 payload. Round-trip is bit-exact.
void save_prompt(const PromptEmbedding& prompt, const std::string& path);
PromptEmbedding load_prompt(const std::string& path);

}  // namespace cliptune
