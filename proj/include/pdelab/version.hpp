#pragma once

namespace pdelab {

inline constexpr const char* kToolName = "pdelab";
inline constexpr const char* kVersion = "0.3.0";

}  // namespace pdelab
