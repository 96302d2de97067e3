#include "joker/detectors.hpp"

#include <algorithm>
#include <set>

#include "joker/arm_codec.hpp"

namespace joker {

namespace {

constexpr VirtAddr kHighVectorsVirt = 0xFFFF0000;
constexpr std::uint32_t kSwiPointerOff = 0x420;
constexpr std::uint32_t kSwiCompanionOff = 0x424;
// Walk bound when the source cannot say how much memory it maps (live
// targets); generous next to any plausible process count.
constexpr std::uint64_t kDefaultWalkCap = 65536;

PhysAddr lin(const KernelProfile& profile, VirtAddr v) {
    return virt_to_phys_linear(profile.translation, v);
}

std::uint32_t get32(const std::vector<std::uint8_t>& buf, std::size_t off) {
    return static_cast<std::uint32_t>(buf[off]) | (static_cast<std::uint32_t>(buf[off + 1]) << 8) |
           (static_cast<std::uint32_t>(buf[off + 2]) << 16) |
           (static_cast<std::uint32_t>(buf[off + 3]) << 24);
}

std::string trimmed_comm(const std::vector<std::uint8_t>& raw) {
    std::size_t n = 0;
    while (n < raw.size() && raw[n] != 0)
        ++n;
    return std::string(reinterpret_cast<const char*>(raw.data()), n);
}

std::optional<VirtAddr> pc_relative_target(std::uint32_t word, VirtAddr fetch) {
    arm::Instruction insn = arm::decode(word, fetch);
    switch (insn.kind) {
    case arm::Kind::LdrLiteral:
    case arm::Kind::AddPcImm:
    case arm::Kind::Branch:
        return arm::literal_target(insn);
    default:
        return std::nullopt;
    }
}

std::string word_annotation(std::uint32_t before, std::uint32_t after, VirtAddr fetch) {
    return arm::disassemble_line(arm::decode(before, fetch)) + " -> " +
           arm::disassemble_line(arm::decode(after, fetch));
}

TaskRecord read_task(const MemorySource& mem, const KernelProfile& profile, PhysAddr base,
                     Provenance provenance) {
    const TaskOffsets& to = profile.task_offsets;
    TaskRecord t;
    t.addr = base;
    t.provenance = provenance;
    t.pid = static_cast<std::int32_t>(mem.read_word32(base + to.pid));
    t.flags = mem.read_word32(base + to.flags);
    if (to.state_size == 8) {
        auto raw = mem.read(base + to.state, 8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i)
            v = (v << 8) | raw[std::size_t(i)];
        t.state = static_cast<std::int64_t>(v);
    } else {
        t.state = static_cast<std::int32_t>(mem.read_word32(base + to.state));
    }
    t.comm = trimmed_comm(mem.read(base + to.comm, to.comm_len));
    return t;
}

} // namespace

std::string detector_name(DetectorId id) {
    switch (id) {
    case DetectorId::SyscallTable: return "syscall-table";
    case DetectorId::Evt: return "evt";
    case DetectorId::SwiPointer: return "swi-pointer";
    case DetectorId::SwiCode: return "swi-code";
    case DetectorId::CrossView: return "cross-view";
    }
    return "unknown";
}

bool DetectionReport::has_findings() const {
    return !syscall_findings.empty() || !evt_findings.empty() || swi_pointer_finding.has_value() ||
           !swi_code_findings.empty() || (cross_view && !cross_view->hidden.empty());
}

std::vector<VirtAddr> extract_syscall_table(const MemorySource& mem,
                                            const KernelProfile& profile) {
    std::vector<VirtAddr> entries(profile.syscall_count);
    if (profile.syscall_count == 0)
        return entries;
    const auto raw =
        mem.read(lin(profile, profile.sys_call_table_virt), std::uint64_t(profile.syscall_count) * 4);
    for (std::uint32_t i = 0; i < profile.syscall_count; ++i)
        entries[i] = get32(raw, std::size_t(i) * 4);
    return entries;
}

std::vector<VirtAddr> extract_syscall_table(const MemoryImage& image,
                                            const KernelProfile& profile) {
    return extract_syscall_table(ImageSource(image), profile);
}

std::vector<SyscallHookFinding> check_syscall_table(const MemorySource& baseline,
                                                    const MemorySource& current,
                                                    const KernelProfile& profile) {
    if (profile.syscall_count != profile.syscall_names.size())
        throw ConfigError("profile table length " + std::to_string(profile.syscall_count) +
                          " does not match its name list (" +
                          std::to_string(profile.syscall_names.size()) + ")");
    const auto before = extract_syscall_table(baseline, profile);
    const auto after = extract_syscall_table(current, profile);
    std::vector<SyscallHookFinding> findings;
    for (std::uint32_t i = 0; i < profile.syscall_count; ++i)
        if (before[i] != after[i])
            findings.push_back({i, syscall_name(profile, i), before[i], after[i]});
    return findings;
}

std::vector<SyscallHookFinding> check_syscall_table(const MemoryImage& baseline,
                                                    const MemoryImage& current,
                                                    const KernelProfile& profile) {
    return check_syscall_table(ImageSource(baseline), ImageSource(current), profile);
}

std::vector<EvtFinding> check_evt(const MemorySource& baseline, const MemorySource& current,
                                  const KernelProfile& profile) {
    const PhysAddr evt = profile.translation.evt_phys;
    const auto before = baseline.read(evt, 0x20);
    const auto after = current.read(evt, 0x20);
    std::vector<EvtFinding> findings;
    for (std::uint32_t off = 0; off < 0x20; off += 4) {
        const std::uint32_t wb = get32(before, off);
        const std::uint32_t wc = get32(after, off);
        if (wb == wc)
            continue;
        EvtFinding f;
        f.slot_offset = off;
        f.original_word = wb;
        f.current_word = wc;
        f.original_target = pc_relative_target(wb, kHighVectorsVirt + off);
        f.current_target = pc_relative_target(wc, kHighVectorsVirt + off);
        findings.push_back(std::move(f));
    }
    return findings;
}

std::vector<EvtFinding> check_evt(const MemoryImage& baseline, const MemoryImage& current,
                                  const KernelProfile& profile) {
    return check_evt(ImageSource(baseline), ImageSource(current), profile);
}

std::optional<SwiFinding> check_swi_pointer(const MemorySource& baseline,
                                            const MemorySource& current,
                                            const KernelProfile& profile) {
    const PhysAddr evt = profile.translation.evt_phys;
    for (std::uint32_t off : {kSwiPointerOff, kSwiCompanionOff}) {
        const std::uint32_t wb = baseline.read_word32(evt + off);
        const std::uint32_t wc = current.read_word32(evt + off);
        if (wb == wc)
            continue;
        SwiFinding f;
        f.kind = SwiFindingKind::PointerChanged;
        f.offset = off;
        f.original_word = wb;
        f.current_word = wc;
        f.annotation = (off == kSwiPointerOff ? std::string("handler pointer ")
                                              : std::string("companion slot ")) +
                       hex32(wb) + " -> " + hex32(wc);
        return f;
    }
    return std::nullopt;
}

std::optional<SwiFinding> check_swi_pointer(const MemoryImage& baseline,
                                            const MemoryImage& current,
                                            const KernelProfile& profile) {
    return check_swi_pointer(ImageSource(baseline), ImageSource(current), profile);
}

std::vector<SwiFinding> check_swi_code(const MemorySource& baseline, const MemorySource& current,
                                       const KernelProfile& profile) {
    const PhysAddr base = lin(profile, profile.vector_swi_virt);
    const auto before = baseline.read(base, profile.swi_handler_len);
    const auto after = current.read(base, profile.swi_handler_len);
    std::vector<SwiFinding> findings;
    for (std::uint32_t off = 0; off + 4 <= profile.swi_handler_len; off += 4) {
        const std::uint32_t wb = get32(before, off);
        const std::uint32_t wc = get32(after, off);
        if (wb == wc)
            continue;
        SwiFinding f;
        f.kind = SwiFindingKind::CodeChanged;
        f.offset = off;
        f.original_word = wb;
        f.current_word = wc;
        f.annotation = word_annotation(wb, wc, profile.vector_swi_virt + off);
        const arm::Instruction ib = arm::decode(wb, 0);
        const arm::Instruction ic = arm::decode(wc, 0);
        f.table_pointer_redirect = ib.kind == arm::Kind::AddPcImm &&
                                   ic.kind == arm::Kind::LdrLiteral && ib.rd == ic.rd;
        findings.push_back(std::move(f));
    }
    return findings;
}

std::vector<SwiFinding> check_swi_code(const MemoryImage& baseline, const MemoryImage& current,
                                       const KernelProfile& profile) {
    return check_swi_code(ImageSource(baseline), ImageSource(current), profile);
}

std::vector<TaskRecord> walk_task_list(const MemorySource& mem, const KernelProfile& profile,
                                       std::uint64_t max_steps) {
    const TaskOffsets& to = profile.task_offsets;
    std::vector<TaskRecord> records;
    std::set<VirtAddr> visited;
    VirtAddr cur = profile.init_task_virt;
    for (;;) {
        if (records.size() >= max_steps)
            throw CorruptListError("task list exceeds the mapped-memory step bound (" +
                                       std::to_string(max_steps) + ")",
                                   std::move(records));
        visited.insert(cur);
        VirtAddr next;
        try {
            const PhysAddr base = lin(profile, cur);
            records.push_back(read_task(mem, profile, base, Provenance::ListWalk));
            next = mem.read_word32(base + to.tasks_next) - to.tasks_next;
        } catch (const Error& e) {
            throw CorruptListError("task list left mapped memory at " + hex32(cur) + ": " +
                                       e.what(),
                                   std::move(records));
        }
        if (next == profile.init_task_virt)
            return records;
        if (visited.count(next))
            throw CorruptListError("task list closes a cycle at " + hex32(next) +
                                       " that skips the anchor",
                                   std::move(records));
        cur = next;
    }
}

std::vector<TaskRecord> walk_task_list(const MemoryImage& image, const KernelProfile& profile) {
    const std::uint64_t cap = image.total_bytes() / profile.task_struct_size + 1;
    return walk_task_list(ImageSource(image), profile, cap);
}

CacheScanResult scan_cache_tasks(const MemorySource& mem, const KernelProfile& profile) {
    const SlabParams& slab = profile.slab;
    const std::uint64_t pfn_count = slab.pfn_end - slab.pfn_start;

    // Cache-name table: u32 count then 32-byte names, directly behind the
    // page-descriptor array.
    const PhysAddr names_base = slab.mem_map_phys + pfn_count * slab.page_desc_size;
    const std::uint32_t name_count = mem.read_word32(names_base);
    if (name_count > 1024)
        throw ValidationError("cache-name table claims " + std::to_string(name_count) +
                              " entries; refusing to scan garbage");
    std::optional<std::uint32_t> wanted_id;
    for (std::uint32_t i = 0; i < name_count; ++i) {
        if (trimmed_comm(mem.read(names_base + 4 + std::uint64_t(i) * 32, 32)) ==
            slab.cache_name) {
            wanted_id = i;
            break;
        }
    }
    CacheScanResult result;
    if (!wanted_id)
        return result; // no cache of that name: nothing can match

    for (std::uint64_t pfn = slab.pfn_start; pfn < slab.pfn_end; ++pfn) {
        const PhysAddr desc = slab.mem_map_phys + (pfn - slab.pfn_start) * slab.page_desc_size;
        std::uint32_t flags, cache_id, object_count, bitmap, first_off;
        try {
            const auto raw = mem.read(desc, 20);
            flags = get32(raw, 0);
            cache_id = get32(raw, 4);
            object_count = get32(raw, 8);
            bitmap = get32(raw, 12);
            first_off = get32(raw, 16);
        } catch (const Error& e) {
            result.gaps.push_back({pfn, desc, std::string("page descriptor unreadable: ") +
                                                  e.what()});
            continue;
        }
        if ((flags & 1) == 0 || cache_id != *wanted_id)
            continue;
        const PhysAddr page = pfn * profile.translation.page_size;
        for (std::uint32_t b = 0; b < object_count && b < 32; ++b) {
            if ((bitmap & (1u << b)) == 0)
                continue;
            const std::uint64_t end =
                std::uint64_t(first_off) + (std::uint64_t(b) + 1) * profile.task_struct_size;
            const PhysAddr obj = page + first_off + std::uint64_t(b) * profile.task_struct_size;
            if (end > profile.translation.page_size) {
                result.gaps.push_back({pfn, obj, "slot extends past its slab page"});
                continue;
            }
            try {
                TaskRecord t = read_task(mem, profile, obj, Provenance::CacheScan);
                t.cache_slot = b;
                result.tasks.push_back(std::move(t));
            } catch (const Error& e) {
                result.gaps.push_back({pfn, obj, std::string("object unreadable: ") + e.what()});
            }
        }
    }
    return result;
}

CacheScanResult scan_cache_tasks(const MemoryImage& image, const KernelProfile& profile) {
    return scan_cache_tasks(ImageSource(image), profile);
}

bool is_transient(const TaskRecord& t, const KernelProfile& profile) {
    if (t.pid == 0 && t.comm != profile.filter.swapper_name)
        return true;
    if (t.state < 0)
        return true;
    return (t.flags & profile.filter.shutdown_mask) == profile.filter.shutdown_value;
}

CrossViewReport cross_view(const std::vector<TaskRecord>& list_tasks,
                           const std::vector<TaskRecord>& cache_tasks,
                           const KernelProfile& profile) {
    std::set<PhysAddr> list_addrs, cache_addrs;
    for (const TaskRecord& t : list_tasks)
        if (!list_addrs.insert(t.addr).second)
            throw DataIntegrityError("task_struct at " + hex64(t.addr) +
                                     " appears twice in the list walk");
    for (const TaskRecord& t : cache_tasks)
        if (!cache_addrs.insert(t.addr).second)
            throw DataIntegrityError("task_struct at " + hex64(t.addr) +
                                     " appears twice in the cache scan");
    CrossViewReport report;
    for (const TaskRecord& t : cache_tasks) {
        if (list_addrs.count(t.addr))
            continue;
        (is_transient(t, profile) ? report.filtered_transient : report.hidden).push_back(t);
    }
    for (const TaskRecord& t : list_tasks)
        if (!cache_addrs.count(t.addr))
            ++report.missing_from_cache_count;
    return report;
}

namespace {

// Bytes around a finding, same window from both sources: 16 bytes of margin
// each side when mapped, the bare range otherwise; a side that cannot be
// read at all stays empty.
void add_evidence(DetectionReport& r, const std::string& detector, const MemorySource& baseline,
                  const MemorySource& current, PhysAddr at, std::uint64_t len) {
    PhysAddr start = at >= 16 ? at - 16 : at;
    std::uint64_t wlen = at >= 16 ? len + 32 : len;
    Evidence e;
    e.detector = detector;
    std::size_t attempt = 0;
    for (;;) {
        try {
            e.current = current.read(start, wlen);
            break;
        } catch (const Error&) {
            if (attempt++ > 0)
                break;
            start = at;
            wlen = len;
        }
    }
    e.base = start;
    try {
        e.baseline = baseline.read(start, wlen);
    } catch (const Error&) {
    }
    r.evidence.push_back(std::move(e));
}

} // namespace

DetectionReport run_detection_flow(const MemoryImage& baseline, const MemorySource& current,
                                   const KernelProfile& profile) {
    profile.validate();
    ImageSource bsrc(baseline);
    DetectionReport r;

    const PhysAddr evt = profile.translation.evt_phys;
    const PhysAddr table = lin(profile, profile.sys_call_table_virt);
    const PhysAddr handler = lin(profile, profile.vector_swi_virt);

    try {
        r.syscall_findings = check_syscall_table(bsrc, current, profile);
        for (const SyscallHookFinding& f : r.syscall_findings)
            add_evidence(r, detector_name(DetectorId::SyscallTable), bsrc, current,
                         table + std::uint64_t(f.index) * 4, 4);
    } catch (const Error& e) {
        r.skipped.push_back({DetectorId::SyscallTable, e.what()});
    }

    try {
        r.evt_findings = check_evt(bsrc, current, profile);
        for (const EvtFinding& f : r.evt_findings)
            add_evidence(r, detector_name(DetectorId::Evt), bsrc, current, evt + f.slot_offset, 4);
    } catch (const Error& e) {
        r.skipped.push_back({DetectorId::Evt, e.what()});
    }

    try {
        r.swi_pointer_finding = check_swi_pointer(bsrc, current, profile);
        if (r.swi_pointer_finding)
            add_evidence(r, detector_name(DetectorId::SwiPointer), bsrc, current,
                         evt + r.swi_pointer_finding->offset, 4);
    } catch (const Error& e) {
        r.skipped.push_back({DetectorId::SwiPointer, e.what()});
    }

    try {
        r.swi_code_findings = check_swi_code(bsrc, current, profile);
        for (const SwiFinding& f : r.swi_code_findings)
            add_evidence(r, detector_name(DetectorId::SwiCode), bsrc, current, handler + f.offset,
                         4);
    } catch (const Error& e) {
        r.skipped.push_back({DetectorId::SwiCode, e.what()});
    }

    try {
        r.list_tasks = walk_task_list(current, profile, kDefaultWalkCap);
        CacheScanResult scan = scan_cache_tasks(current, profile);
        r.cache_tasks = std::move(scan.tasks);
        r.scan_gaps = std::move(scan.gaps);
        r.cross_view = cross_view(r.list_tasks, r.cache_tasks, profile);
        for (const TaskRecord& t : r.cross_view->hidden) {
            Evidence e;
            e.detector = detector_name(DetectorId::CrossView);
            e.base = t.addr;
            try {
                e.current = current.read(t.addr, profile.task_struct_size);
            } catch (const Error&) {
            }
            r.evidence.push_back(std::move(e));
        }
    } catch (const CorruptListError& e) {
        r.list_tasks = e.partial;
        r.skipped.push_back({DetectorId::CrossView, e.what()});
    } catch (const Error& e) {
        r.skipped.push_back({DetectorId::CrossView, e.what()});
    }

    r.verdict = r.has_findings() ? Verdict::RootkitAlert : Verdict::Clean;
    return r;
}

DetectionReport run_detection_flow(const MemoryImage& baseline, const MemoryImage& current,
                                   const KernelProfile& profile) {
    return run_detection_flow(baseline, ImageSource(current), profile);
}

} // namespace joker
