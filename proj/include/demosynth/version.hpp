#pragma once

namespace demosynth {
inline constexpr const char* kVersion = "0.1.0";
}
