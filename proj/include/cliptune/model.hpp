#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cliptune/clipping.hpp"
#include "cliptune/matrix.hpp"
#include "cliptune/prompting.hpp"

namespace cliptune {

// Reserved token ids. Every input sequence is embedded as
// [prompt rows; CLS; tokens], and the classifier reads the final CLS state.
constexpr uint32_t kClsTokenId = 0;
constexpr uint32_t kUnkTokenId = 1;
constexpr std::size_t kNumReservedTokens = 2;

struct ModelConfig {
    std::size_t vocab_size = 1000;
    std::size_t emb_dim = 64;
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t ffn_dim = 256;
    std::size_t max_seq = 128;
    std::size_t num_classes = 2;
    // Enabled clipping positions; defaults to every canonical dropout site.
    std::vector<std::string> dropout_sites;

    void validate() const;
    static std::vector<std::string> all_dropout_sites(std::size_t layers);
};

// Immutable encoder weights plus the CLS classification head. The only way
// to obtain one is through a builder or load_weights, and nothing mutates it
// afterwards.
class FrozenModel {
public:
    FrozenModel(ModelConfig config, std::map<std::string, MatF> tensors);

    const ModelConfig& config() const { return config_; }
    const std::string& fingerprint() const { return fingerprint_; }
    const MatF& tensor(const std::string& name) const;
    const std::map<std::string, MatF>& tensors() const { return tensors_; }

    std::vector<uint8_t> serialize() const;

private:
    ModelConfig config_;
    std::map<std::string, MatF> tensors_;
    std::string fingerprint_;
};

struct ForwardResult {
    std::vector<float> cls_embedding;
    std::vector<float> logits;
};

// Embeds [prompt; CLS; tokens], runs the pre-layernorm encoder with
// apply_clip inserted at every enabled dropout site, and returns the final
// CLS embedding together with the head logits.
ForwardResult forward(const FrozenModel& model, const PromptEmbedding& prompt,
                      const std::vector<uint32_t>& token_ids, const ClipSpec& clip);

// Per-sequence forward over a batch; sequences are independent.
std::vector<ForwardResult> forward_batch(const FrozenModel& model, const PromptEmbedding& prompt,
                                         const std::vector<std::vector<uint32_t>>& batch,
                                         const ClipSpec& clip);

// Random frozen encoder for experiments that do not need a planted optimum.
FrozenModel build_toy_model(const ModelConfig& config, uint64_t seed);

// Weights file: magic "PFWT", version u16, config block, named float32
// tensors, SHA-1 fingerprint trailer. Round-trip is bit-exact and the
// fingerprint is verified on load.
void save_weights(const FrozenModel& model, const std::string& path);
FrozenModel load_weights(const std::string& path);

}  // namespace cliptune
