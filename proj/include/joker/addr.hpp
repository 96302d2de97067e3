#pragma once

#include <cstdint>
#include <string>

namespace joker {

// Physical byte address as seen from the debug port. 64-bit so LPAE-style
// layouts fit even though the target ISA is 32-bit.
using PhysAddr = std::uint64_t;

// Kernel virtual address on the 32-bit target.
using VirtAddr = std::uint32_t;

std::string hex32(std::uint32_t value);
std::string hex64(std::uint64_t value);

} // namespace joker
