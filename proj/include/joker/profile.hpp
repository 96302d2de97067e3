#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "joker/addr.hpp"
#include "joker/mem_image.hpp"

namespace joker {

// Field offsets inside the target kernel's task_struct, per kernel build.
struct TaskOffsets {
    std::uint32_t pid = 0;
    std::uint32_t comm = 0;
    std::uint32_t comm_len = 16;
    std::uint32_t state = 0;
    std::uint32_t state_size = 4; // 4 or 8; state is read signed either way
    std::uint32_t flags = 0;
    std::uint32_t tasks_next = 0;
    std::uint32_t tasks_prev = 0;
};

// Parameters of the forge-style slab model: where the page-descriptor array
// lives, which PFN window to scan, and which cache name marks task pages.
struct SlabParams {
    PhysAddr mem_map_phys = 0;
    std::uint32_t page_desc_size = 32;
    std::uint64_t pfn_start = 0;
    std::uint64_t pfn_end = 0;
    std::string cache_name = "task_struct";
};

// Transient-task filter constants (the halt-race indicators).
struct FilterParams {
    std::uint32_t shutdown_mask = 0x3;
    std::uint32_t shutdown_value = 0x2;
    std::string swapper_name = "swapper";
};

// Everything the detectors need to know about one kernel build: symbol
// addresses, struct offsets, the syscall name order, translation constants,
// and filter tuning. Authored by an analyst or emitted by the forge; the
// values come from kallsyms-style symbol lists on a clean device.
struct KernelProfile {
    TranslationConstants translation;

    VirtAddr sys_call_table_virt = 0;
    std::uint32_t syscall_count = 0;
    VirtAddr vector_swi_virt = 0;
    std::uint32_t swi_handler_len = 512;
    VirtAddr init_task_virt = 0;

    TaskOffsets task_offsets;
    std::uint32_t task_struct_size = 0;

    std::vector<std::string> syscall_names; // index == syscall number

    SlabParams slab;
    FilterParams filter;

    void validate() const; // throws ValidationError with the offending key
};

// Line-oriented `[section]` / `key = value` text; [syscalls] is an ordered
// one-name-per-line list. Grammar documented in the README.
KernelProfile load_profile(std::istream& in);
KernelProfile load_profile_file(const std::string& path);
std::string save_profile(const KernelProfile& p);

// Name for a syscall number; RangeError past the table end.
const std::string& syscall_name(const KernelProfile& p, std::uint32_t index);

// Extracts the table order from `#define __NR_<name> (<base>+<n>)` lines
// (ARM EABI convention) or plain `#define __NR_<name> <n>`. Gaps become
// "sys_ni_syscall"; the same index defined twice with different names is a
// parse error.
std::vector<std::string> parse_unistd(std::istream& in);

} // namespace joker
