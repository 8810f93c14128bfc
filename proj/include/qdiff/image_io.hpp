#pragma once

#include <algorithm>
#include <fstream>
#include <string>

#include "qdiff/tensor.hpp"

namespace qdiff {

// 8-bit binary PGM; pixel range [-1,1] maps to [0,255].
inline void write_pgm(const std::string& path, const float* img, int h, int w) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("image: cannot write " + path);
    os << "P5\n" << w << " " << h << "\n255\n";
    for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) {
        const float v = std::clamp((img[i] + 1.0f) * 0.5f, 0.0f, 1.0f);
        const unsigned char byte = static_cast<unsigned char>(v * 255.0f + 0.5f);
        os.put(static_cast<char>(byte));
    }
}

}  // namespace qdiff
