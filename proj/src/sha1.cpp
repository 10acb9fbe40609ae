#include "cliptune/sha1.hpp"

#include <cstring>
#include <stdexcept>

namespace cliptune {

namespace {

inline uint32_t rotl32(uint32_t x, int k) {
    return (x << k) | (x >> (32 - k));
}

}  // namespace

Sha1::Sha1() {
    h_[0] = 0x67452301u;
    h_[1] = 0xEFCDAB89u;
    h_[2] = 0x98BADCFEu;
    h_[3] = 0x10325476u;
    h_[4] = 0xC3D2E1F0u;
}

void Sha1::process_block(const uint8_t* block) {
    uint32_t w[80];
    for (int i = 0; i < 16; ++i) {
        w[i] = (uint32_t(block[i * 4]) << 24) | (uint32_t(block[i * 4 + 1]) << 16) |
               (uint32_t(block[i * 4 + 2]) << 8) | uint32_t(block[i * 4 + 3]);
    }
    for (int i = 16; i < 80; ++i) {
        w[i] = rotl32(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
    }

    uint32_t a = h_[0], b = h_[1], c = h_[2], d = h_[3], e = h_[4];
    for (int i = 0; i < 80; ++i) {
        uint32_t f, k;
        if (i < 20) {
            f = (b & c) | ((~b) & d);
            k = 0x5A827999u;
        } else if (i < 40) {
            f = b ^ c ^ d;
            k = 0x6ED9EBA1u;
        } else if (i < 60) {
            f = (b & c) | (b & d) | (c & d);
            k = 0x8F1BBCDCu;
        } else {
            f = b ^ c ^ d;
            k = 0xCA62C1D6u;
        }
        const uint32_t tmp = rotl32(a, 5) + f + e + k + w[i];
        e = d;
        d = c;
        c = rotl32(b, 30);
        b = a;
        a = tmp;
    }
    h_[0] += a;
    h_[1] += b;
    h_[2] += c;
    h_[3] += d;
    h_[4] += e;
}

void Sha1::update(const void* data, std::size_t len) {
    if (finalized_) throw std::logic_error("Sha1: update after digest");
    const uint8_t* p = static_cast<const uint8_t*>(data);
    total_bytes_ += len;
    while (len > 0) {
        const std::size_t take = std::min(len, sizeof(buffer_) - buffer_len_);
        std::memcpy(buffer_ + buffer_len_, p, take);
        buffer_len_ += take;
        p += take;
        len -= take;
        if (buffer_len_ == sizeof(buffer_)) {
            process_block(buffer_);
            buffer_len_ = 0;
        }
    }
}

std::array<uint8_t, 20> Sha1::digest() {
    if (finalized_) throw std::logic_error("Sha1: digest called twice");
    finalized_ = true;

    const uint64_t bit_len = total_bytes_ * 8;
    const uint8_t pad = 0x80;
    // Append 0x80, then zeros, then the 64-bit big-endian bit length.
    finalized_ = false;
    update(&pad, 1);
    const uint8_t zero = 0;
    while (buffer_len_ != 56) update(&zero, 1);
    uint8_t len_bytes[8];
    for (int i = 0; i < 8; ++i) len_bytes[i] = uint8_t(bit_len >> (56 - 8 * i));
    update(len_bytes, 8);
    finalized_ = true;

    std::array<uint8_t, 20> out;
    for (int i = 0; i < 5; ++i) {
        out[i * 4] = uint8_t(h_[i] >> 24);
        out[i * 4 + 1] = uint8_t(h_[i] >> 16);
        out[i * 4 + 2] = uint8_t(h_[i] >> 8);
        out[i * 4 + 3] = uint8_t(h_[i]);
    }
    return out;
}

std::array<uint8_t, 20> Sha1::hash(const void* data, std::size_t len) {
    Sha1 h;
    h.update(data, len);
    return h.digest();
}

std::string Sha1::hex(const std::array<uint8_t, 20>& digest) {
    static const char* hexdig = "0123456789abcdef";
    std::string out;
    out.reserve(40);
    for (uint8_t b : digest) {
        out.push_back(hexdig[b >> 4]);
        out.push_back(hexdig[b & 0xF]);
    }
    return out;
}

}  // namespace cliptune
