#pragma once

#include <random>

namespace kiest {

// Every seeded stream in the library uses this engine.
using Rng = std::mt19937_64;

}  // namespace kiest
