#include "cliptune/clipping.hpp"

#include <stdexcept>

#include "cliptune/rng.hpp"
#include "cliptune/sha1.hpp"

namespace cliptune {

const char* clip_mode_name(ClipMode mode) {
    switch (mode) {
        case ClipMode::off: return "off";
        case ClipMode::static_: return "static";
        case ClipMode::dynamic: return "dynamic";
    }
    return "?";
}

ClipMode clip_mode_from_name(const std::string& name) {
    if (name == "off") return ClipMode::off;
    if (name == "static") return ClipMode::static_;
    if (name == "dynamic") return ClipMode::dynamic;
    throw std::invalid_argument("unknown clip mode '" + name + "'");
}

uint64_t seed_from_string(const std::string& s) {
    const auto digest = Sha1::hash(s);
    uint64_t seed = 0;
    for (int i = 0; i < 8; ++i) seed = (seed << 8) | digest[i];
    return seed;
}

uint64_t derive_seed(const std::string& subnetwork_tag, const std::string& layer_path) {
    if (subnetwork_tag.empty()) throw std::invalid_argument("derive_seed: empty subnetwork tag");
    if (layer_path.empty()) throw std::invalid_argument("derive_seed: empty layer path");
    return seed_from_string(subnetwork_tag + ":" + layer_path);
}

ClipMask generate_mask(uint64_t seed, const std::vector<std::size_t>& shape, double p_clip) {
    if (!(p_clip >= 0.0 && p_clip < 1.0)) {
        throw std::invalid_argument("generate_mask: p_clip " + std::to_string(p_clip) +
                                    " outside [0, 1)");
    }
    std::size_t total = 1;
    for (std::size_t d : shape) total *= d;

    ClipMask mask;
    mask.shape = shape;
    mask.bits.resize(total);
    RngStream rng(seed);
    for (std::size_t i = 0; i < total; ++i) {
        mask.bits[i] = rng.next_uniform() < p_clip ? 0 : 1;
    }
    return mask;
}

std::vector<float> apply_clip(const std::vector<float>& units, const ClipMask& mask,
                              double p_clip) {
    if (units.size() != mask.size()) {
        throw std::invalid_argument("apply_clip: " + std::to_string(units.size()) +
                                    " units vs mask of " + std::to_string(mask.size()));
    }
    std::vector<float> out = units;
    apply_clip_inplace(out.data(), out.size(), mask, p_clip);
    return out;
}

void apply_clip_inplace(float* units, std::size_t n, const ClipMask& mask, double p_clip) {
    if (n != mask.size()) {
        throw std::invalid_argument("apply_clip: " + std::to_string(n) + " units vs mask of " +
                                    std::to_string(mask.size()));
    }
    if (!(p_clip < 1.0)) throw std::invalid_argument("apply_clip: p_clip must be < 1");
    const float scale = static_cast<float>(1.0 / (1.0 - p_clip));
    for (std::size_t i = 0; i < n; ++i) {
        units[i] = mask.bits[i] ? units[i] * scale : 0.0f;
    }
}

}  // namespace cliptune
