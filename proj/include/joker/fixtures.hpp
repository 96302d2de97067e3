#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "joker/addr.hpp"
#include "joker/mem_image.hpp"
#include "joker/profile.hpp"

namespace joker {

// One task in the forged kernel's process roster.
struct RosterEntry {
    std::int32_t pid = 0;
    std::string comm;
    std::int64_t state = 0;
    std::uint32_t flags = 0;
};

// Parameters for the rootkit sample injections; defaults reproduce the
// published sample behaviour (four libc-interposition style hook addresses,
// the 0xC02864C8 fake table, a hidden "printer" task).
struct SampleParams {
    std::vector<std::pair<std::uint32_t, VirtAddr>> syscall_hooks = {
        {3, 0xBF034078}, // read
        {4, 0xBF034000}, // write
        {5, 0xBF034028}, // open
        {6, 0xBF034050}, // close
    };
    VirtAddr evt_new_handler = 0xBF0A0000;
    VirtAddr swi_new_handler = 0xC0050000; // where the handler copy lands
    VirtAddr fake_table = 0xC02864C8;
    std::string hide_victim = "printer";
    std::string race_victim = "sh";
};

// Complete description of the toy kernel the forge lays out: translation
// constants, symbol placement, the software-interrupt handler code template,
// the process roster, and the slab geometry. Equal specs forge byte-identical
// images.
struct FixtureSpec {
    TranslationConstants translation;

    VirtAddr sys_call_table_virt = 0;
    VirtAddr vector_swi_virt = 0;

    // Table order; addr 0 entries are not special-cased (they forge as-is).
    std::vector<std::pair<std::string, VirtAddr>> syscalls;

    // 32-bit code words laid down at vector_swi; must contain one pc-relative
    // add that reaches the slot where the forge plants the table address, and
    // one NOP (the code-hook sample repurposes both).
    std::vector<std::uint32_t> vector_swi_code;

    std::vector<RosterEntry> roster; // roster[0] is the list anchor (swapper)

    std::uint32_t objects_per_page = 8;
    std::uint32_t alloc_bitmap = 0x3F; // set bit = occupied slot, in roster order
    std::uint64_t seed = 0;            // drives the stale bytes in free slots

    SampleParams samples;
};

// The published toy kernel: linear map at 0xC0000000->0x40000000, vector_swi
// at 0xC003D140, the 32-entry syscall table right behind the handler window,
// a six-task roster and one task_struct slab page.
FixtureSpec default_fixture_spec();

// Text overrides over default_fixture_spec(); grammar in the README.
FixtureSpec load_fixture_spec(std::istream& in);
FixtureSpec load_fixture_spec_file(const std::string& path);

struct ForgedKernel {
    MemoryImage image;
    KernelProfile profile;
};

// Lays out the clean toy kernel and the profile describing it. Throws
// SpecError when the spec is inconsistent (duplicate pids, roster that does
// not fit the slab geometry, code template without the needed slots...).
ForgedKernel build_clean_image(const FixtureSpec& spec);

// A byte range some injector rewrote, for the forge manifest.
struct ByteRange {
    PhysAddr base = 0;
    std::uint64_t length = 0;
    std::string note;
};

// The injectors. Each returns a mutated copy of the image and appends the
// exact byte ranges it touched to *touched (when given); everything outside
// those ranges is byte-identical to the input.

// Sample 1: overwrite syscall-table entries with hook addresses.
MemoryImage inject_syscall_hook(const MemoryImage& image, const KernelProfile& profile,
                                const std::vector<std::pair<std::uint32_t, VirtAddr>>& hooks,
                                std::vector<ByteRange>* touched = nullptr);

// Sample 2: plant new_handler at EVT+0x424 and retarget the vector load at
// +0x8 from the +0x420 literal to +0x424.
MemoryImage inject_evt_branch_hook(const MemoryImage& image, const KernelProfile& profile,
                                   VirtAddr new_handler,
                                   std::vector<ByteRange>* touched = nullptr);

// Sample 3: copy the handler code to new_handler's location, give the copy a
// malicious twist (its NOP slot), and swing the EVT+0x420 pointer to it.
MemoryImage inject_swi_pointer_hook(const MemoryImage& image, const KernelProfile& profile,
                                    VirtAddr new_handler,
                                    std::vector<ByteRange>* touched = nullptr);

// Sample 4: inside the handler, park fake_table in the NOP slot and turn the
// table-pointer add into a pc-relative load of that slot.
MemoryImage inject_swi_code_hook(const MemoryImage& image, const KernelProfile& profile,
                                 VirtAddr fake_table,
                                 std::vector<ByteRange>* touched = nullptr);

// Sample 5: splice the named task out of the process list; its struct and
// slab slot stay intact.
MemoryImage hide_task(const MemoryImage& image, const KernelProfile& profile,
                      const std::string& comm, std::vector<ByteRange>* touched = nullptr);

// Halt-race shape: unlink the victim mid-teardown and stamp one of the three
// transient signatures (pid 0 / negative state / shutdown flag bits), chosen
// by seed % 3. The cross-view filter must absorb every variant.
MemoryImage inject_halt_race(const MemoryImage& image, const KernelProfile& profile,
                             const std::string& victim, std::uint64_t seed,
                             std::vector<ByteRange>* touched = nullptr);

// Clean process lifecycle steps, the way a running kernel would take them —
// the simulated device's mutator is built from these. spawn_task allocates a
// free task_struct slab slot and links the task at the list tail; exit_task
// unlinks the named task and frees its slot (stale bytes stay behind).
MemoryImage spawn_task(const MemoryImage& image, const KernelProfile& profile, std::int32_t pid,
                       const std::string& comm);
MemoryImage exit_task(const MemoryImage& image, const KernelProfile& profile,
                      const std::string& comm);

enum class SampleId {
    Clean,
    SyscallHook,    // 1
    EvtHook,        // 2
    SwiPointerHook, // 3
    SwiCodeHook,    // 4
    HiddenTask,     // 5
    HaltRace,       // race
};

// CLI spelling {clean|1|2|3|4|5|race} -> id; nullopt when unrecognized.
std::optional<SampleId> parse_sample_id(const std::string& word);
std::string sample_name(SampleId id);

struct ForgeOutput {
    SampleId sample = SampleId::Clean;
    MemoryImage image;
    KernelProfile profile;
    std::vector<ByteRange> injected; // empty for clean
};

// build_clean_image + the selected injection with the spec's sample
// parameters (halt-race uses the spec seed for its variant).
ForgeOutput forge_sample(const FixtureSpec& spec, SampleId sample);

} // namespace joker
