#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qdiff/numerics.hpp"
#include "qdiff/tensor.hpp"

namespace qdiff {

// Checkpoint file, version 1:
//   8-byte magic "QDIFFCK1"
//   u64 little-endian header length
//   JSON header: format version, model config, parameter names + shapes,
//   quantization state (per-layer assignment, frozen scales, observer state)
//   raw little-endian f32 parameter data, concatenated in header order.

constexpr char kCheckpointMagic[9] = "QDIFFCK1";

struct NamedTensor {
    std::string name;
    Tensor value;
};

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void write_checkpoint_blob(std::ostream& os, const nlohmann::json& header,
                                  const std::vector<const Tensor*>& tensors) {
    const std::string h = header.dump();
    os.write(kCheckpointMagic, 8);
    const uint64_t len = h.size();
    os.write(reinterpret_cast<const char*>(&len), 8);
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const Tensor* t : tensors) {
        os.write(reinterpret_cast<const char*>(t->ptr()), static_cast<std::streamsize>(t->numel() * 4));
    }
    if (!os) throw CheckpointError("checkpoint: write failed");
}

inline nlohmann::json read_checkpoint_header(std::istream& is) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw CheckpointError("checkpoint: bad magic (not a checkpoint file or unsupported version)");
    }
    uint64_t len = 0;
    is.read(reinterpret_cast<char*>(&len), 8);
    if (!is || len > (1ull << 32)) throw CheckpointError("checkpoint: corrupt header length");
    std::string h(len, '\0');
    is.read(h.data(), static_cast<std::streamsize>(len));
    if (!is) throw CheckpointError("checkpoint: truncated header");
    nlohmann::json j = nlohmann::json::parse(h, nullptr, false);
    if (j.is_discarded()) throw CheckpointError("checkpoint: header is not valid JSON");
    return j;
}

inline Tensor read_tensor_data(std::istream& is, std::vector<int> shape) {
    Tensor t(std::move(shape));
    is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * 4));
    if (!is) throw CheckpointError("checkpoint: truncated tensor data");
    return t;
}

// ---- SHA-256 ----------------------------------------------------------------
// Used to assert teacher immutability across QAT and end-to-end reproducibility.

class Sha256 {
public:
    Sha256() { reset(); }

    void reset() {
        state_ = {0x6a09e667u, 0xbb67ae85u, 0x3c6ef372u, 0xa54ff53au,
                  0x510e527fu, 0x9b05688cu, 0x1f83d9abu, 0x5be0cd19u};
        total_ = 0;
        buffer_len_ = 0;
    }

    void update(const void* data, size_t len) {
        const uint8_t* p = static_cast<const uint8_t*>(data);
        total_ += len;
        while (len > 0) {
            const size_t take = std::min(len, sizeof(buffer_) - buffer_len_);
            std::memcpy(buffer_ + buffer_len_, p, take);
            buffer_len_ += take;
            p += take;
            len -= take;
            if (buffer_len_ == sizeof(buffer_)) {
                process(buffer_);
                buffer_len_ = 0;
            }
        }
    }

    std::string hex_digest() {
        const uint64_t bits = total_ * 8;
        uint8_t pad[72] = {0x80};
        const size_t pad_len = 1 + (119 - (total_ % 64)) % 64;
        update(pad, pad_len);
        uint8_t len_be[8];
        for (int i = 0; i < 8; ++i) len_be[i] = static_cast<uint8_t>(bits >> (56 - 8 * i));
        update(len_be, 8);
        static const char* hexd = "0123456789abcdef";
        std::string out(64, '0');
        for (int i = 0; i < 8; ++i) {
            for (int b = 0; b < 4; ++b) {
                const uint8_t byte = static_cast<uint8_t>(state_[static_cast<size_t>(i)] >> (24 - 8 * b));
                out[static_cast<size_t>(i * 8 + b * 2)] = hexd[byte >> 4];
                out[static_cast<size_t>(i * 8 + b * 2 + 1)] = hexd[byte & 0xF];
            }
        }
        reset();
        return out;
    }

private:
    static uint32_t rotr(uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

    void process(const uint8_t* chunk) {
        static const uint32_t k[64] = {
            0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4, 0xab1c5ed5,
            0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174,
            0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
            0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967,
            0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85,
            0xa2bfe8a1, 0xa81a664b, 0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
            0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
            0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};
        uint32_t w[64];
        for (int i = 0; i < 16; ++i) {
            w[i] = (static_cast<uint32_t>(chunk[4 * i]) << 24) | (static_cast<uint32_t>(chunk[4 * i + 1]) << 16) |
                   (static_cast<uint32_t>(chunk[4 * i + 2]) << 8) | chunk[4 * i + 3];
        }
        for (int i = 16; i < 64; ++i) {
            const uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
            const uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16] + s0 + w[i - 7] + s1;
        }
        uint32_t a = state_[0], b = state_[1], c = state_[2], d = state_[3];
        uint32_t e = state_[4], f = state_[5], g = state_[6], h = state_[7];
        for (int i = 0; i < 64; ++i) {
            const uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
            const uint32_t ch = (e & f) ^ (~e & g);
            const uint32_t t1 = h + s1 + ch + k[i] + w[i];
            const uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
            const uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
            const uint32_t t2 = s0 + maj;
            h = g;
            g = f;
            f = e;
            e = d + t1;
            d = c;
            c = b;
            b = a;
            a = t1 + t2;
        }
        state_[0] += a;
        state_[1] += b;
        state_[2] += c;
        state_[3] += d;
        state_[4] += e;
        state_[5] += f;
        state_[6] += g;
        state_[7] += h;
    }

    std::array<uint32_t, 8> state_;
    uint64_t total_ = 0;
    uint8_t buffer_[64];
    size_t buffer_len_ = 0;
};

inline std::string sha256_hex(const void* data, size_t len) {
    Sha256 h;
    h.update(data, len);
    return h.hex_digest();
}

}  // namespace qdiff
