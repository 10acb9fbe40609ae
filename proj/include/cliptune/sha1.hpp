#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

namespace cliptune {

// Incremental SHA-1 (FIPS 180-1). Used for subnetwork seed derivation and
// for content fingerprints of serialized files.
class Sha1 {
public:
    Sha1();

    void update(const void* data, std::size_t len);
    void update(const std::string& s) { update(s.data(), s.size()); }

    // Finalizes and returns the 20-byte digest. The object must not be
    // updated afterwards.
    std::array<uint8_t, 20> digest();

    static std::array<uint8_t, 20> hash(const void* data, std::size_t len);
    static std::array<uint8_t, 20> hash(const std::string& s) { return hash(s.data(), s.size()); }

    static std::string hex(const std::array<uint8_t, 20>& digest);

private:
    void process_block(const uint8_t* block);

    uint32_t h_[5];
    uint64_t total_bytes_ = 0;
    uint8_t buffer_[64];
    std::size_t buffer_len_ = 0;
    bool finalized_ = false;
};

}  // namespace cliptune
