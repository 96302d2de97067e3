#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "joker/addr.hpp"
#include "joker/errors.hpp"
#include "joker/mem_image.hpp"
#include "joker/profile.hpp"

namespace joker {

// One rewritten syscall-table entry.
struct SyscallHookFinding {
    std::uint32_t index = 0;
    std::string name;
    VirtAddr original = 0;
    VirtAddr current = 0;
};

// One changed word among the eight architectural exception vectors. Targets
// are present when the word decodes to something pc-relative.
struct EvtFinding {
    std::uint32_t slot_offset = 0; // 0x0 .. 0x1C
    std::uint32_t original_word = 0;
    std::uint32_t current_word = 0;
    std::optional<VirtAddr> original_target;
    std::optional<VirtAddr> current_target;
};

enum class SwiFindingKind {
    PointerChanged, // the literal-pool handler pointer (or its companion slot)
    CodeChanged,    // a word inside the handler body
};

struct SwiFinding {
    SwiFindingKind kind = SwiFindingKind::CodeChanged;
    std::uint32_t offset = 0; // from the EVT base (pointer) or handler base (code)
    std::uint32_t original_word = 0;
    std::uint32_t current_word = 0;
    std::string annotation; // disassembly of both sides
    // Set when a pc-relative add of the table pointer became a literal load
    // of the same register: the table-redirect pattern.
    bool table_pointer_redirect = false;
};

enum class Provenance { ListWalk, CacheScan };

// One task_struct as reconstructed from memory, from either view.
struct TaskRecord {
    PhysAddr addr = 0; // physical address of the struct: the cross-view key
    std::int32_t pid = 0;
    std::string comm;
    std::int64_t state = 0;
    std::uint32_t flags = 0;
    Provenance provenance = Provenance::ListWalk;
    std::optional<std::uint32_t> cache_slot; // slab slot index (CacheScan only)
};

// The process list walk went somewhere it cannot have been meant to go: a
// pointer left mapped memory or closed a cycle that skips the anchor. The
// records gathered before the break ride along.
class CorruptListError : public Error {
public:
    CorruptListError(const std::string& msg, std::vector<TaskRecord> partial)
        : Error(msg), partial(std::move(partial)) {}
    std::vector<TaskRecord> partial;
};

struct CrossViewReport {
    std::vector<TaskRecord> hidden;             // in cache, not in list, not transient
    std::vector<TaskRecord> filtered_transient; // in cache, not in list, mid-teardown shape
    std::uint64_t missing_from_cache_count = 0; // in list, not in cache
};

// A spot the cache scan could not read; the scan continues past it.
struct ScanGap {
    std::uint64_t pfn = 0;
    PhysAddr addr = 0;
    std::string reason;
};

struct CacheScanResult {
    std::vector<TaskRecord> tasks;
    std::vector<ScanGap> gaps;
};

// Raw bytes around a finding, from both images where both sides exist.
struct Evidence {
    std::string detector;
    PhysAddr base = 0;
    std::vector<std::uint8_t> baseline;
    std::vector<std::uint8_t> current;
};

enum class DetectorId { SyscallTable, Evt, SwiPointer, SwiCode, CrossView };

std::string detector_name(DetectorId id);

struct SkippedDetector {
    DetectorId id = DetectorId::SyscallTable;
    std::string reason;
};

enum class Verdict { Clean, RootkitAlert };

// Everything one detection run produced. The verdict is RootkitAlert exactly
// when some finding list is non-empty (filtered transients and scan gaps do
// not count; skipped detectors surface separately).
struct DetectionReport {
    std::vector<SyscallHookFinding> syscall_findings;
    std::vector<EvtFinding> evt_findings;
    std::optional<SwiFinding> swi_pointer_finding;
    std::vector<SwiFinding> swi_code_findings;

    std::vector<TaskRecord> list_tasks;  // current image's walk (partial if corrupt)
    std::vector<TaskRecord> cache_tasks; // current image's cache scan
    std::vector<ScanGap> scan_gaps;
    std::optional<CrossViewReport> cross_view;

    std::vector<SkippedDetector> skipped;
    std::vector<Evidence> evidence;
    Verdict verdict = Verdict::Clean;

    bool has_findings() const;
};

// The extraction / comparison primitives. Every one exists in two forms: the
// core over MemorySource (stored image or live halted target behave the
// same) and a MemoryImage convenience wrapper.

// Little-endian words of the syscall table, index-aligned with the profile's
// name list.
std::vector<VirtAddr> extract_syscall_table(const MemorySource& mem, const KernelProfile& profile);
std::vector<VirtAddr> extract_syscall_table(const MemoryImage& image, const KernelProfile& profile);

// One finding per table index whose word differs between the images.
std::vector<SyscallHookFinding> check_syscall_table(const MemorySource& baseline,
                                                    const MemorySource& current,
                                                    const KernelProfile& profile);
std::vector<SyscallHookFinding> check_syscall_table(const MemoryImage& baseline,
                                                    const MemoryImage& current,
                                                    const KernelProfile& profile);

// Compares the eight architectural vector words at evt_phys. The literal pool
// behind them belongs to check_swi_pointer.
std::vector<EvtFinding> check_evt(const MemorySource& baseline, const MemorySource& current,
                                  const KernelProfile& profile);
std::vector<EvtFinding> check_evt(const MemoryImage& baseline, const MemoryImage& current,
                                  const KernelProfile& profile);

// Compares the handler pointer at evt_phys+0x420 and its companion slot at
// +0x424. At most one finding; a changed 0x420 takes precedence.
std::optional<SwiFinding> check_swi_pointer(const MemorySource& baseline,
                                            const MemorySource& current,
                                            const KernelProfile& profile);
std::optional<SwiFinding> check_swi_pointer(const MemoryImage& baseline,
                                            const MemoryImage& current,
                                            const KernelProfile& profile);

// Word-diff of the handler body with disassembly annotations.
std::vector<SwiFinding> check_swi_code(const MemorySource& baseline, const MemorySource& current,
                                       const KernelProfile& profile);
std::vector<SwiFinding> check_swi_code(const MemoryImage& baseline, const MemoryImage& current,
                                       const KernelProfile& profile);

// Follows tasks_next circularly from init_task. Throws CorruptListError
// (partial walk attached) when a pointer leaves mapped memory, a cycle skips
// the anchor, or max_steps runs out.
std::vector<TaskRecord> walk_task_list(const MemorySource& mem, const KernelProfile& profile,
                                       std::uint64_t max_steps);
std::vector<TaskRecord> walk_task_list(const MemoryImage& image, const KernelProfile& profile);

// Scans every PFN's page descriptor for task_struct slab pages and extracts
// the allocated slots. Unreadable descriptors or slots become gaps, not
// failures. Needs the cache-name table directly behind the descriptor array.
CacheScanResult scan_cache_tasks(const MemorySource& mem, const KernelProfile& profile);
CacheScanResult scan_cache_tasks(const MemoryImage& image, const KernelProfile& profile);

// The three mid-teardown shapes a halt can catch: reclaimed pid 0 on a
// non-swapper comm, negative state, or the shutdown flag pattern.
bool is_transient(const TaskRecord& t, const KernelProfile& profile);

// Set comparison of the two views, keyed by physical address, with the
// transient filter applied to cache-only records.
CrossViewReport cross_view(const std::vector<TaskRecord>& list_tasks,
                           const std::vector<TaskRecord>& cache_tasks,
                           const KernelProfile& profile);

// The full ordered flow: syscall table, EVT, SWI pointer, SWI code, then the
// cross-view (list walk + cache scan). A detector whose reads fail is marked
// Skipped with the reason; the rest still run.
DetectionReport run_detection_flow(const MemoryImage& baseline, const MemorySource& current,
                                   const KernelProfile& profile);
DetectionReport run_detection_flow(const MemoryImage& baseline, const MemoryImage& current,
                                   const KernelProfile& profile);

} // namespace joker
