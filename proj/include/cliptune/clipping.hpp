#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cliptune {

// How a forward pass treats the clipping sites.
//   off      bypass every site
//   static_  masks derived from (subnetwork_tag, layer_path, shape); identical
//            across calls, processes and machines
//   dynamic  same machinery, but the caller supplies a fresh tag per pass
enum class ClipMode { off, static_, dynamic };

// Identity of one thinned subnetwork. Only the tag string is ever persisted;
// masks are regenerated from it on demand.
struct ClipSpec {
    std::string subnetwork_tag;
    double p_clip = 0.1;
    ClipMode mode = ClipMode::static_;
};

struct ClipMask {
    std::vector<std::size_t> shape;
    std::vector<uint8_t> bits;  // flattened row-major, entries 0 or 1

    std::size_t size() const { return bits.size(); }
};

const char* clip_mode_name(ClipMode mode);
ClipMode clip_mode_from_name(const std::string& name);

// First 8 bytes, big-endian, of SHA-1(tag + ":" + layer_path).
uint64_t derive_seed(const std::string& subnetwork_tag, const std::string& layer_path);

// Seed interpretation of an arbitrary string (same truncation rule).
uint64_t seed_from_string(const std::string& s);

// Each bit is 0 with probability p_clip, drawn from RngStream(seed) in
// row-major scan order, one uniform deviate per bit.
ClipMask generate_mask(uint64_t seed, const std::vector<std::size_t>& shape, double p_clip);

// Inverted-dropout rescaling: out_i = units_i * mask_i / (1 - p_clip).
std::vector<float> apply_clip(const std::vector<float>& units, const ClipMask& mask,
                              double p_clip);

// In-place variant used inside forward passes.
void apply_clip_inplace(float* units, std::size_t n, const ClipMask& mask, double p_clip);

}  // namespace cliptune
