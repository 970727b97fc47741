#pragma once

#include <fstream>
#include <sstream>

#include "fd_check.hpp"

namespace hcct::testing {

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

} // namespace hcct::testing
