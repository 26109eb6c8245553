#pragma once

namespace ach {

inline constexpr const char* kToolName = "ach";
inline constexpr const char* kVersion = "0.1.0";

}  // namespace ach
