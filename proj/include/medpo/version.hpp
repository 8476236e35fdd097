#pragma once

namespace medpo {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace medpo
