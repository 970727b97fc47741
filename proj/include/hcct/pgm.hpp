#pragma once

#include <filesystem>
#include <vector>

namespace hcct {

// Binary PGM (P5, maxval 255). Values are clamped to [0, 1] and quantized
// round-half-up.
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<float>& values);

} // namespace hcct
