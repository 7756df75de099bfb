#pragma once

#include <filesystem>
#include <ostream>
#include <string>

namespace pdelab::cli {

/// Exit codes: 0 success (and --help), 1 runtime failure, 2 usage error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

}  // namespace pdelab::cli
