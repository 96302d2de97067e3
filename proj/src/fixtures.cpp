#include "joker/fixtures.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "joker/arm_codec.hpp"
#include "joker/errors.hpp"

namespace joker {

namespace {

// Fixed interior layout of the forged main segment, relative to phys_offset.
constexpr std::uint64_t kMainLen = 0x80000;
constexpr std::uint64_t kL2Off = 0x3C00;   // coarse table for the high-vectors page
constexpr std::uint64_t kL1Off = 0x4000;   // 16 KiB translation table (the TTBR)
constexpr std::uint64_t kSlabOff = 0x60000;
constexpr std::uint64_t kMemMapOff = 0x70000;
constexpr std::uint64_t kEvtLen = 0x1000;
constexpr std::uint32_t kTaskSize = 256;
constexpr std::uint32_t kFirstObjectOff = 0x40;
constexpr VirtAddr kHighVectorsVirt = 0xFFFF0000;

// Word the handler-copy sample parks in its copy's NOP slot: an address-sized
// payload in module space, standing in for the malicious redirection.
constexpr std::uint32_t kCopyPayloadWord = 0xBF0A00C4;

// Architectural EVT words of the clean toy kernel: reset SVC, five branches,
// and the ldr pc, [pc, #1040] at +0x8 that indirects through the +0x420
// literal.
constexpr std::uint32_t kEvtVectors[8] = {
    0xEF9F0000, // svc (reset stub)
    0xEA0000DD, // undef -> b +0x380
    0xE59FF410, // swi  -> ldr pc, [pc, #1040]
    0xEA0000BB, // pabt -> b +0x300
    0xEA00009A, // dabt -> b +0x280
    0xEA000089, // reserved
    0xEA000070, // irq
    0xEA00005F, // fiq
};

void put32(std::vector<std::uint8_t>& buf, std::uint64_t off, std::uint32_t v) {
    buf[off] = static_cast<std::uint8_t>(v);
    buf[off + 1] = static_cast<std::uint8_t>(v >> 8);
    buf[off + 2] = static_cast<std::uint8_t>(v >> 16);
    buf[off + 3] = static_cast<std::uint8_t>(v >> 24);
}

std::uint32_t get32(const std::vector<std::uint8_t>& buf, std::uint64_t off) {
    return static_cast<std::uint32_t>(buf[off]) | (static_cast<std::uint32_t>(buf[off + 1]) << 8) |
           (static_cast<std::uint32_t>(buf[off + 2]) << 16) |
           (static_cast<std::uint32_t>(buf[off + 3]) << 24);
}

void put_name(std::vector<std::uint8_t>& buf, std::uint64_t off, const std::string& name,
              std::size_t field_len) {
    std::size_t n = std::min(name.size(), field_len - 1);
    std::memcpy(buf.data() + off, name.data(), n);
}

// Slot indices occupied by the roster, in roster order: the k-th roster entry
// takes the k-th set bit of the allocation bitmap.
std::vector<unsigned> occupied_slots(std::uint32_t bitmap) {
    std::vector<unsigned> slots;
    for (unsigned b = 0; b < 32; ++b)
        if (bitmap & (1u << b))
            slots.push_back(b);
    return slots;
}

void validate_spec(const FixtureSpec& spec) {
    spec.translation.validate();
    if (spec.roster.empty())
        throw SpecError("roster must contain at least the list anchor");
    const RosterEntry& anchor = spec.roster.front();
    if (anchor.pid != 0 || anchor.comm != "swapper" || anchor.state != 0 || anchor.flags != 0)
        throw SpecError("roster[0] must be the idle anchor (pid 0, comm \"swapper\", "
                        "state 0, flags 0)");
    std::set<std::int32_t> pids;
    for (const RosterEntry& r : spec.roster) {
        if (!pids.insert(r.pid).second)
            throw SpecError("duplicate pid " + std::to_string(r.pid) + " in roster");
        if (r.comm.empty() || r.comm.size() > 15)
            throw SpecError("roster comm '" + r.comm + "' must be 1..15 characters");
    }
    if (spec.objects_per_page == 0 || spec.objects_per_page > 32)
        throw SpecError("objects_per_page must be in 1..32");
    if (kFirstObjectOff + std::uint64_t(spec.objects_per_page) * kTaskSize >
        spec.translation.page_size)
        throw SpecError("roster too large for slab geometry: " +
                        std::to_string(spec.objects_per_page) +
                        " objects do not fit one slab page");
    const auto slots = occupied_slots(spec.alloc_bitmap);
    if (spec.roster.size() > slots.size())
        throw SpecError("roster too large for slab geometry: " +
                        std::to_string(spec.roster.size()) + " tasks, " +
                        std::to_string(slots.size()) + " allocated slots");
    if (spec.roster.size() < slots.size())
        throw SpecError("allocation bitmap marks " + std::to_string(slots.size()) +
                        " slots occupied but the roster has only " +
                        std::to_string(spec.roster.size()) + " tasks");
    if (!slots.empty() && slots.back() >= spec.objects_per_page)
        throw SpecError("allocation bitmap uses slot " + std::to_string(slots.back()) +
                        " beyond objects_per_page " + std::to_string(spec.objects_per_page));
    if (spec.vector_swi_code.empty())
        throw SpecError("vector_swi code template is empty");

    const PhysAddr main_base = spec.translation.phys_offset;
    auto in_main = [&](VirtAddr v, std::uint64_t len) {
        if (v < spec.translation.page_offset)
            return false;
        const std::uint64_t off = std::uint64_t(v) - spec.translation.page_offset;
        return off + len <= kMainLen;
    };
    const std::uint64_t code_len = spec.vector_swi_code.size() * 4;
    if (!in_main(spec.vector_swi_virt, code_len))
        throw SpecError("vector_swi window falls outside the forged main segment");
    if (!in_main(spec.sys_call_table_virt, spec.syscalls.size() * 4))
        throw SpecError("syscall table falls outside the forged main segment");
    const std::uint64_t code_a = spec.vector_swi_virt, code_b = code_a + code_len;
    const std::uint64_t tab_a = spec.sys_call_table_virt,
                        tab_b = tab_a + spec.syscalls.size() * 4;
    if (code_a < tab_b && tab_a < code_b)
        throw SpecError("vector_swi window overlaps the syscall table");
    if (spec.translation.evt_phys < main_base + kMainLen &&
        spec.translation.evt_phys + kEvtLen > main_base)
        throw SpecError("evt_phys overlaps the forged main segment");
    if (spec.translation.evt_phys < main_base)
        throw SpecError("evt_phys must sit above the forged main segment");
    // The whole forged span gets a linear alias; it must fit below the
    // high-vectors section or the L1 fill would clobber the coarse entry.
    const std::uint64_t span = spec.translation.evt_phys + kEvtLen - main_base;
    if (std::uint64_t(spec.translation.page_offset) + span > kHighVectorsVirt)
        throw SpecError("forged span does not fit the linear map below the high vectors");
}

std::vector<std::uint32_t> default_swi_template() {
    std::vector<std::uint32_t> w(128, 0xE1A00000); // mov r0, r0 filler
    // Save-state prologue, as on a real entry path (never decoded past the
    // slots the samples touch).
    const std::uint32_t prologue[16] = {
        0xE24DD088, 0xE88D1FFF, 0xE28D803C, 0xE9486000, //
        0xE14F8000, 0xE58DE03C, 0xE58D8040, 0xE58D0044, //
        0xE3A0B000, 0xE3180020, 0x13A0A000, 0x051EA004, //
        0xE59FC0A8, 0xE59CC000, 0xEE01CF10, 0xF1080080, //
    };
    std::copy(std::begin(prologue), std::end(prologue), w.begin());
    w[0x100 / 4] = 0xE1A096AD; // lsr r9, sp, #13
    w[0x104 / 4] = 0xE1A09689; // lsl r9, r9, #13
    w[0x108 / 4] = 0xE28F8094; // add r8, pc, #148  (table-pointer load)
    w[0x10C / 4] = 0xE599C000; // ldr r12, [r9]
    w[0x190 / 4] = 0xE320F000; // nop (the slot rootkits repurpose)
    // +0x1A4 stays filler here; the forge plants the table address where the
    // add above points.
    return w;
}

std::vector<std::pair<std::string, VirtAddr>> default_syscalls() {
    const VirtAddr ni = 0xC02E499C;
    return {
        {"restart_syscall", 0xC02D6844},
        {"exit", 0xC02C9F9C},
        {"fork", 0xC0286AB0},
        {"read", 0xC0365554},
        {"write", 0xC03652EC},
        {"open", 0xC0362F4C},
        {"close", 0xC0362B60},
        {"sys_ni_syscall", ni},
        {"creat", 0xC0362F7C},
        {"link", 0xC0371C50},
        {"unlink", 0xC0371514},
        {"execve", 0xC0286AC0},
        {"chdir", 0xC0363A2C},
        {"sys_ni_syscall", ni},
        {"mknod", 0xC0371964},
        {"chmod", 0xC03638F4},
        {"lchown", 0xC02F93EC},
        {"sys_ni_syscall", ni},
        {"sys_ni_syscall", ni},
        {"lseek", 0xC0364324},
        {"getpid", 0xC02D5D7C},
        {"mount", 0xC037FF9C},
        {"sys_ni_syscall", ni},
        {"setuid", 0xC02F930C},
        {"getuid", 0xC02F8FFC},
        {"sys_ni_syscall", ni},
        {"ptrace", 0xC02D1E48},
        {"sys_ni_syscall", ni},
        {"sys_ni_syscall", ni},
        {"pause", 0xC02D76B0},
        {"sys_ni_syscall", ni},
        {"sys_ni_syscall", ni},
    };
}

} // namespace

FixtureSpec default_fixture_spec() {
    FixtureSpec spec;
    spec.translation.page_offset = 0xC0000000;
    spec.translation.phys_offset = 0x40000000;
    spec.translation.page_size = 4096;
    spec.translation.evt_phys = 0x40100000;
    spec.sys_call_table_virt = 0xC003D340;
    spec.vector_swi_virt = 0xC003D140;
    spec.syscalls = default_syscalls();
    spec.vector_swi_code = default_swi_template();
    spec.roster = {
        {0, "swapper", 0, 0x00000000},
        {1, "init", 0, 0x00400100},
        {2, "kthreadd", 0, 0x00208040},
        {42, "sh", 0, 0x00400100},
        {3129, "printer", 0, 0x00400140},
        {3130, "MalApp", 0, 0x00400100},
    };
    spec.objects_per_page = 8;
    spec.alloc_bitmap = 0x3F;
    spec.seed = 0x4A6F4B4552ULL;
    return spec;
}

ForgedKernel build_clean_image(const FixtureSpec& spec) {
    validate_spec(spec);
    const TranslationConstants& tc = spec.translation;
    const PhysAddr main_base = tc.phys_offset;
    auto lin_off = [&](VirtAddr v) { return std::uint64_t(v) - tc.page_offset; };

    std::vector<std::uint8_t> ram(kMainLen, 0);
    std::vector<std::uint8_t> evt(kEvtLen, 0);

    // Syscall table.
    const std::uint64_t table_off = lin_off(spec.sys_call_table_virt);
    for (std::size_t i = 0; i < spec.syscalls.size(); ++i)
        put32(ram, table_off + 4 * i, spec.syscalls[i].second);

    // Handler code, then the table address planted where the pc-relative add
    // points (keeps the template and the table placement decoupled).
    const std::uint64_t code_off = lin_off(spec.vector_swi_virt);
    const std::uint64_t code_len = spec.vector_swi_code.size() * 4;
    for (std::size_t i = 0; i < spec.vector_swi_code.size(); ++i)
        put32(ram, code_off + 4 * i, spec.vector_swi_code[i]);
    bool planted = false;
    for (std::size_t i = 0; i < spec.vector_swi_code.size() && !planted; ++i) {
        arm::Instruction insn = arm::decode(spec.vector_swi_code[i], static_cast<VirtAddr>(4 * i));
        if (insn.kind != arm::Kind::AddPcImm)
            continue;
        const VirtAddr t = arm::literal_target(insn);
        if (t % 4 != 0 || t + 4 > code_len)
            throw SpecError("vector_swi template's table-pointer add reaches outside the window");
        put32(ram, code_off + t, spec.sys_call_table_virt);
        planted = true;
    }
    if (!planted)
        throw SpecError("vector_swi template has no pc-relative add to seed the table pointer");

    // Translation tables: one section per 1 MiB of the linear span, plus a
    // coarse second level mapping the high-vectors page onto the EVT page.
    const PhysAddr phys_end = std::max<PhysAddr>(main_base + kMainLen, tc.evt_phys + kEvtLen);
    const std::uint64_t virt_begin = tc.page_offset;
    const std::uint64_t virt_end = virt_begin + (phys_end - tc.phys_offset);
    for (std::uint64_t sec = virt_begin >> 20; sec < ((virt_end - 1) >> 20) + 1; ++sec) {
        const PhysAddr sec_phys = tc.phys_offset + ((sec << 20) - virt_begin);
        put32(ram, kL1Off + 4 * sec, static_cast<std::uint32_t>(sec_phys) | 0x40E);
    }
    put32(ram, kL1Off + 4 * (kHighVectorsVirt >> 20),
          static_cast<std::uint32_t>(main_base + kL2Off) | 0x01);
    put32(ram, kL2Off + 4 * ((kHighVectorsVirt >> 12) & 0xFF),
          static_cast<std::uint32_t>(tc.evt_phys) | 0x1E);

    // Build the profile early: task layout constants live here.
    KernelProfile profile;
    profile.translation = tc;
    profile.translation.ttbr_phys = main_base + kL1Off;
    profile.sys_call_table_virt = spec.sys_call_table_virt;
    profile.syscall_count = static_cast<std::uint32_t>(spec.syscalls.size());
    profile.vector_swi_virt = spec.vector_swi_virt;
    profile.swi_handler_len = static_cast<std::uint32_t>(code_len);
    profile.task_offsets.state = 0x0;
    profile.task_offsets.flags = 0x4;
    profile.task_offsets.pid = 0x10;
    profile.task_offsets.tasks_next = 0x18;
    profile.task_offsets.tasks_prev = 0x1C;
    profile.task_offsets.comm = 0x20;
    profile.task_offsets.comm_len = 16;
    profile.task_offsets.state_size = 4;
    profile.task_struct_size = kTaskSize;
    for (const auto& [name, addr] : spec.syscalls) {
        (void)addr;
        profile.syscall_names.push_back(name);
    }
    profile.slab.mem_map_phys = main_base + kMemMapOff;
    profile.slab.page_desc_size = 32;
    profile.slab.pfn_start = main_base / tc.page_size;
    profile.slab.pfn_end = profile.slab.pfn_start + kMainLen / tc.page_size;

    // Task slab page: roster entries packed into the occupied slots, linked
    // as a circular doubly linked list in roster order; free slots keep
    // seeded stale bytes, the way recycled slab memory would.
    const auto slots = occupied_slots(spec.alloc_bitmap);
    const TaskOffsets& to = profile.task_offsets;
    std::vector<VirtAddr> task_virt(spec.roster.size());
    for (std::size_t j = 0; j < spec.roster.size(); ++j)
        task_virt[j] = static_cast<VirtAddr>(tc.page_offset + kSlabOff + kFirstObjectOff +
                                             std::uint64_t(slots[j]) * kTaskSize);
    for (std::size_t j = 0; j < spec.roster.size(); ++j) {
        const RosterEntry& r = spec.roster[j];
        const std::uint64_t base = lin_off(task_virt[j]);
        const std::size_t next = (j + 1) % spec.roster.size();
        const std::size_t prev = (j + spec.roster.size() - 1) % spec.roster.size();
        put32(ram, base + to.state, static_cast<std::uint32_t>(static_cast<std::int32_t>(r.state)));
        put32(ram, base + to.flags, r.flags);
        put32(ram, base + to.pid, static_cast<std::uint32_t>(r.pid));
        put32(ram, base + to.tasks_next, task_virt[next] + to.tasks_next);
        put32(ram, base + to.tasks_prev, task_virt[prev] + to.tasks_next);
        put_name(ram, base + to.comm, r.comm, to.comm_len);
    }
    std::mt19937_64 rng(spec.seed);
    for (unsigned b = 0; b < spec.objects_per_page; ++b) {
        if (spec.alloc_bitmap & (1u << b))
            continue;
        const std::uint64_t base = kSlabOff + kFirstObjectOff + std::uint64_t(b) * kTaskSize;
        for (std::uint32_t i = 0; i < kTaskSize; ++i)
            ram[base + i] = static_cast<std::uint8_t>(rng());
    }
    profile.init_task_virt = task_virt[0];

    // Page descriptors: the task slab page, a decoy slab of another cache two
    // pages up, zeros (non-slab) everywhere else. The cache-name table sits
    // directly behind the descriptor array.
    const std::uint64_t slab_desc = kMemMapOff + (kSlabOff / tc.page_size) * 32;
    put32(ram, slab_desc + 0x00, 1); // flags: slab
    put32(ram, slab_desc + 0x04, 1); // cache_id -> "task_struct"
    put32(ram, slab_desc + 0x08, spec.objects_per_page);
    put32(ram, slab_desc + 0x0C, spec.alloc_bitmap);
    put32(ram, slab_desc + 0x10, kFirstObjectOff);
    const std::uint64_t decoy_desc = slab_desc + 2 * 32;
    put32(ram, decoy_desc + 0x00, 1);
    put32(ram, decoy_desc + 0x04, 0); // cache_id -> "kmalloc-64"
    put32(ram, decoy_desc + 0x08, 16);
    put32(ram, decoy_desc + 0x0C, 0xFFFF);
    put32(ram, decoy_desc + 0x10, 0);
    const std::uint64_t names_off =
        kMemMapOff + (profile.slab.pfn_end - profile.slab.pfn_start) * 32;
    const char* cache_names[3] = {"kmalloc-64", "task_struct", "vm_area_struct"};
    put32(ram, names_off, 3);
    for (std::size_t i = 0; i < 3; ++i)
        put_name(ram, names_off + 4 + 32 * i, cache_names[i], 32);

    // EVT page: the eight architectural vectors and the handler-pointer
    // literal at +0x420 (+0x424 spare, the second sample's landing slot).
    for (std::size_t i = 0; i < 8; ++i)
        put32(evt, 4 * i, kEvtVectors[i]);
    put32(evt, 0x420, spec.vector_swi_virt);
    put32(evt, 0x424, 0);

    std::vector<Segment> segments;
    segments.push_back({main_base, std::move(ram), "kernel"});
    segments.push_back({tc.evt_phys, std::move(evt), "evt"});

    ForgedKernel out{MemoryImage(std::move(segments)), std::move(profile)};
    out.profile.validate();
    return out;
}

namespace {

// Copy-on-write editor over an image's segments; every write must land inside
// one existing segment.
class ImagePatcher {
public:
    explicit ImagePatcher(const MemoryImage& image) : segments_(image.segments()) {}

    void put32(PhysAddr at, std::uint32_t word) {
        Segment& s = find(at, 4);
        joker::put32(s.data, at - s.base, word); // qualified: the member name hides the helper
    }

    void put_bytes(PhysAddr at, const std::vector<std::uint8_t>& bytes) {
        Segment& s = find(at, bytes.size());
        std::copy(bytes.begin(), bytes.end(), s.data.begin() + (at - s.base));
    }

    std::uint32_t get32(PhysAddr at) {
        Segment& s = find(at, 4);
        return joker::get32(s.data, at - s.base);
    }

    MemoryImage build() { return MemoryImage(std::move(segments_)); }

private:
    Segment& find(PhysAddr at, std::uint64_t len) {
        for (Segment& s : segments_)
            if (at >= s.base && at + len <= s.base + s.data.size())
                return s;
        throw InjectionError("injection target " + hex64(at) + "+" + std::to_string(len) +
                             " is not mapped by the image");
    }

    std::vector<Segment> segments_;
};

void note_range(std::vector<ByteRange>* touched, PhysAddr base, std::uint64_t len,
                std::string note) {
    if (touched)
        touched->push_back({base, len, std::move(note)});
}

PhysAddr lin(const KernelProfile& profile, VirtAddr v) {
    return virt_to_phys_linear(profile.translation, v);
}

// Minimal list iteration for the injectors: enough to locate a victim and its
// splice points without pulling in the detector-side walker.
struct RawTask {
    VirtAddr base = 0;
    VirtAddr next_value = 0; // stored &next->tasks
    VirtAddr prev_value = 0; // stored &prev->tasks
};

RawTask find_victim(const MemoryImage& image, const KernelProfile& profile,
                    const std::string& comm, const char* role) {
    const TaskOffsets& to = profile.task_offsets;
    VirtAddr cur = profile.init_task_virt;
    std::set<VirtAddr> visited;
    while (visited.insert(cur).second) {
        const PhysAddr base = lin(profile, cur);
        auto raw = image.read_bytes(base + to.comm, to.comm_len);
        std::string name(reinterpret_cast<const char*>(raw.data()),
                         strnlen(reinterpret_cast<const char*>(raw.data()), raw.size()));
        const VirtAddr next_value = image.read_word32(base + to.tasks_next);
        if (name == comm) {
            if (cur == profile.init_task_virt)
                throw InjectionError(std::string("cannot use the list anchor as the ") + role);
            return {cur, next_value, image.read_word32(base + to.tasks_prev)};
        }
        cur = next_value - to.tasks_next;
        if (cur == profile.init_task_virt)
            break;
    }
    throw InjectionError("no task named '" + comm + "' in the task list");
}

void splice_out(ImagePatcher& patcher, const KernelProfile& profile, const RawTask& victim,
                std::vector<ByteRange>* touched) {
    const TaskOffsets& to = profile.task_offsets;
    const VirtAddr prev_base = victim.prev_value - to.tasks_next;
    const VirtAddr next_base = victim.next_value - to.tasks_next;
    patcher.put32(lin(profile, prev_base + to.tasks_next), victim.next_value);
    patcher.put32(lin(profile, next_base + to.tasks_prev), victim.prev_value);
    note_range(touched, lin(profile, prev_base + to.tasks_next), 4, "predecessor next pointer");
    note_range(touched, lin(profile, next_base + to.tasks_prev), 4, "successor prev pointer");
}

} // namespace

MemoryImage inject_syscall_hook(const MemoryImage& image, const KernelProfile& profile,
                                const std::vector<std::pair<std::uint32_t, VirtAddr>>& hooks,
                                std::vector<ByteRange>* touched) {
    ImagePatcher patcher(image);
    const PhysAddr table = lin(profile, profile.sys_call_table_virt);
    for (const auto& [index, addr] : hooks) {
        if (index >= profile.syscall_count)
            throw RangeError("hook index " + std::to_string(index) +
                             " outside the syscall table (count " +
                             std::to_string(profile.syscall_count) + ")");
        patcher.put32(table + 4 * std::uint64_t(index), addr);
        note_range(touched, table + 4 * std::uint64_t(index), 4,
                   "syscall table entry " + std::to_string(index) + " (" +
                       syscall_name(profile, index) + ")");
    }
    return patcher.build();
}

MemoryImage inject_evt_branch_hook(const MemoryImage& image, const KernelProfile& profile,
                                   VirtAddr new_handler, std::vector<ByteRange>* touched) {
    ImagePatcher patcher(image);
    const PhysAddr evt = profile.translation.evt_phys;
    // ldr pc, [pc, #imm] fetched at +0x8 reaches +0x424 with imm = 0x414.
    patcher.put32(evt + 0x8, arm::encode_ldr_pc_literal(15, 0x424 - 0x10));
    patcher.put32(evt + 0x424, new_handler);
    note_range(touched, evt + 0x8, 4, "swi vector load retargeted");
    note_range(touched, evt + 0x424, 4, "planted handler address");
    return patcher.build();
}

MemoryImage inject_swi_pointer_hook(const MemoryImage& image, const KernelProfile& profile,
                                    VirtAddr new_handler, std::vector<ByteRange>* touched) {
    ImagePatcher patcher(image);
    const PhysAddr src = lin(profile, profile.vector_swi_virt);
    const PhysAddr dest = lin(profile, new_handler);
    const std::uint32_t len = profile.swi_handler_len;
    if (src < dest + len && dest < src + len)
        throw InjectionError("handler copy destination overlaps the original handler");
    std::vector<std::uint8_t> code = image.read_bytes(src, len);
    // Give the copy its malicious twist: repurpose its NOP slot.
    bool twisted = false;
    for (std::uint32_t off = 0; off + 4 <= len && !twisted; off += 4) {
        if (arm::decode(get32(code, off), 0).kind == arm::Kind::Nop) {
            put32(code, off, kCopyPayloadWord);
            twisted = true;
        }
    }
    if (!twisted)
        throw InjectionError("handler has no NOP slot for the copy's payload");
    patcher.put_bytes(dest, code);
    patcher.put32(profile.translation.evt_phys + 0x420, new_handler);
    note_range(touched, dest, len, "handler copy (payload in its NOP slot)");
    note_range(touched, profile.translation.evt_phys + 0x420, 4, "swi handler pointer");
    return patcher.build();
}

MemoryImage inject_swi_code_hook(const MemoryImage& image, const KernelProfile& profile,
                                 VirtAddr fake_table, std::vector<ByteRange>* touched) {
    ImagePatcher patcher(image);
    const PhysAddr base = lin(profile, profile.vector_swi_virt);
    const std::uint32_t len = profile.swi_handler_len;
    const std::vector<std::uint8_t> code = image.read_bytes(base, len);

    std::optional<std::uint32_t> add_off;
    unsigned rd = 0;
    for (std::uint32_t off = 0; off + 4 <= len; off += 4) {
        arm::Instruction insn = arm::decode(get32(code, off), off);
        if (insn.kind == arm::Kind::AddPcImm) {
            add_off = off;
            rd = insn.rd;
            break;
        }
    }
    if (!add_off)
        throw InjectionError("no pc-relative table-pointer add in the handler window");
    std::optional<std::uint32_t> nop_off;
    for (std::uint32_t off = *add_off + 8; off + 4 <= len && off - (*add_off + 8) < 4096;
         off += 4) {
        if (arm::decode(get32(code, off), off).kind == arm::Kind::Nop) {
            nop_off = off;
            break;
        }
    }
    if (!nop_off)
        throw InjectionError("no NOP slot reachable from the table-pointer add");

    patcher.put32(base + *nop_off, fake_table);
    patcher.put32(base + *add_off, arm::encode_ldr_pc_literal(rd, *nop_off - (*add_off + 8)));
    note_range(touched, base + *nop_off, 4, "fake table address in the NOP slot");
    note_range(touched, base + *add_off, 4, "table-pointer add turned into a literal load");
    return patcher.build();
}

MemoryImage hide_task(const MemoryImage& image, const KernelProfile& profile,
                      const std::string& comm, std::vector<ByteRange>* touched) {
    ImagePatcher patcher(image);
    const RawTask victim = find_victim(image, profile, comm, "hide victim");
    splice_out(patcher, profile, victim, touched);
    return patcher.build();
}

MemoryImage inject_halt_race(const MemoryImage& image, const KernelProfile& profile,
                             const std::string& victim, std::uint64_t seed,
                             std::vector<ByteRange>* touched) {
    ImagePatcher patcher(image);
    const RawTask task = find_victim(image, profile, victim, "race victim");
    splice_out(patcher, profile, task, touched);

    const TaskOffsets& to = profile.task_offsets;
    const PhysAddr base = lin(profile, task.base);
    switch (seed % 3) {
    case 0: // reclaimed pid, comm still set
        patcher.put32(base + to.pid, 0);
        note_range(touched, base + to.pid, 4, "transient signature: pid 0");
        break;
    case 1: // negative (exiting) state
        if (to.state_size == 8) {
            patcher.put_bytes(base + to.state, std::vector<std::uint8_t>(8, 0xFF));
            note_range(touched, base + to.state, 8, "transient signature: state -1");
        } else {
            patcher.put32(base + to.state, 0xFFFFFFFF);
            note_range(touched, base + to.state, 4, "transient signature: state -1");
        }
        break;
    default: { // shutdown flag pattern
        const std::uint32_t flags = patcher.get32(base + to.flags);
        patcher.put32(base + to.flags,
                      (flags & ~profile.filter.shutdown_mask) | profile.filter.shutdown_value);
        note_range(touched, base + to.flags, 4, "transient signature: shutdown flags");
        break;
    }
    }
    return patcher.build();
}

namespace {

// Page-descriptor fields the lifecycle mutators need; layout matches the forge.
struct PageDesc {
    PhysAddr addr = 0; // descriptor location
    std::uint32_t object_count = 0;
    std::uint32_t bitmap = 0;
    std::uint32_t first_off = 0;
    PhysAddr page = 0; // slab page this descriptor covers
};

std::uint32_t find_cache_id(const MemoryImage& image, const SlabParams& slab) {
    const std::uint64_t pfn_count = slab.pfn_end - slab.pfn_start;
    const PhysAddr names = slab.mem_map_phys + pfn_count * slab.page_desc_size;
    const std::uint32_t count = image.read_word32(names);
    for (std::uint32_t i = 0; i < count; ++i) {
        auto raw = image.read_bytes(names + 4 + std::uint64_t(i) * 32, 32);
        std::string name(reinterpret_cast<const char*>(raw.data()),
                         strnlen(reinterpret_cast<const char*>(raw.data()), raw.size()));
        if (name == slab.cache_name)
            return i;
    }
    throw InjectionError("no '" + slab.cache_name + "' cache in the page-descriptor name table");
}

std::vector<PageDesc> cache_pages(const MemoryImage& image, const KernelProfile& profile) {
    const SlabParams& slab = profile.slab;
    const std::uint32_t wanted = find_cache_id(image, slab);
    std::vector<PageDesc> out;
    for (std::uint64_t pfn = slab.pfn_start; pfn < slab.pfn_end; ++pfn) {
        const PhysAddr desc = slab.mem_map_phys + (pfn - slab.pfn_start) * slab.page_desc_size;
        if (image.read_word32(desc) % 2 == 0 || image.read_word32(desc + 4) != wanted)
            continue;
        PageDesc d;
        d.addr = desc;
        d.object_count = image.read_word32(desc + 8);
        d.bitmap = image.read_word32(desc + 12);
        d.first_off = image.read_word32(desc + 16);
        d.page = pfn * profile.translation.page_size;
        out.push_back(d);
    }
    return out;
}

} // namespace

MemoryImage spawn_task(const MemoryImage& image, const KernelProfile& profile, std::int32_t pid,
                       const std::string& comm) {
    const TaskOffsets& to = profile.task_offsets;
    if (comm.empty() || comm.size() >= to.comm_len)
        throw InjectionError("task name '" + comm + "' does not fit the comm field");
    for (const PageDesc& d : cache_pages(image, profile)) {
        for (std::uint32_t b = 0; b < d.object_count && b < 32; ++b) {
            if (d.bitmap & (1u << b))
                continue;
            const PhysAddr obj = d.page + d.first_off + std::uint64_t(b) * profile.task_struct_size;
            const auto virt = static_cast<VirtAddr>(profile.translation.page_offset +
                                                    (obj - profile.translation.phys_offset));
            ImagePatcher patcher(image);
            patcher.put32(d.addr + 12, d.bitmap | (1u << b));
            patcher.put_bytes(obj, std::vector<std::uint8_t>(profile.task_struct_size, 0));
            patcher.put32(obj + to.pid, static_cast<std::uint32_t>(pid));
            patcher.put32(obj + to.flags, 0x00400100);
            std::vector<std::uint8_t> name(to.comm_len, 0);
            std::copy(comm.begin(), comm.end(), name.begin());
            patcher.put_bytes(obj + to.comm, name);

            // Link at the list tail, i.e. just before the anchor. Stored link
            // values are always the neighbour's list-head address.
            const VirtAddr anchor = profile.init_task_virt;
            const PhysAddr anchor_phys = lin(profile, anchor);
            const VirtAddr old_tail_head = patcher.get32(anchor_phys + to.tasks_prev);
            const VirtAddr self_head = virt + to.tasks_next;
            patcher.put32(obj + to.tasks_next, anchor + to.tasks_next);
            patcher.put32(obj + to.tasks_prev, old_tail_head);
            patcher.put32(lin(profile, old_tail_head), self_head);
            patcher.put32(anchor_phys + to.tasks_prev, self_head);
            return patcher.build();
        }
    }
    throw InjectionError("no free task_struct slot to spawn into");
}

MemoryImage exit_task(const MemoryImage& image, const KernelProfile& profile,
                      const std::string& comm) {
    ImagePatcher patcher(image);
    const RawTask victim = find_victim(image, profile, comm, "exiting task");
    splice_out(patcher, profile, victim, nullptr);

    const PhysAddr obj = lin(profile, victim.base);
    for (const PageDesc& d : cache_pages(image, profile)) {
        if (obj < d.page + d.first_off || obj >= d.page + profile.translation.page_size)
            continue;
        const std::uint64_t off = obj - d.page - d.first_off;
        const std::uint32_t b = static_cast<std::uint32_t>(off / profile.task_struct_size);
        if (off % profile.task_struct_size != 0 || b >= d.object_count || b >= 32)
            break;
        patcher.put32(d.addr + 12, d.bitmap & ~(1u << b));
        return patcher.build();
    }
    throw InjectionError("task '" + comm + "' does not live in a task_struct slab slot");
}

std::optional<SampleId> parse_sample_id(const std::string& word) {
    if (word == "clean")
        return SampleId::Clean;
    if (word == "1")
        return SampleId::SyscallHook;
    if (word == "2")
        return SampleId::EvtHook;
    if (word == "3")
        return SampleId::SwiPointerHook;
    if (word == "4")
        return SampleId::SwiCodeHook;
    if (word == "5")
        return SampleId::HiddenTask;
    if (word == "race")
        return SampleId::HaltRace;
    return std::nullopt;
}

std::string sample_name(SampleId id) {
    switch (id) {
    case SampleId::Clean: return "clean";
    case SampleId::SyscallHook: return "syscall-hook";
    case SampleId::EvtHook: return "evt-branch-hook";
    case SampleId::SwiPointerHook: return "swi-pointer-hook";
    case SampleId::SwiCodeHook: return "swi-code-hook";
    case SampleId::HiddenTask: return "hidden-task";
    case SampleId::HaltRace: return "halt-race";
    }
    return "unknown";
}

ForgeOutput forge_sample(const FixtureSpec& spec, SampleId sample) {
    ForgedKernel clean = build_clean_image(spec);
    ForgeOutput out;
    out.sample = sample;
    out.profile = std::move(clean.profile);
    switch (sample) {
    case SampleId::Clean:
        out.image = std::move(clean.image);
        break;
    case SampleId::SyscallHook:
        out.image = inject_syscall_hook(clean.image, out.profile, spec.samples.syscall_hooks,
                                        &out.injected);
        break;
    case SampleId::EvtHook:
        out.image =
            inject_evt_branch_hook(clean.image, out.profile, spec.samples.evt_new_handler,
                                   &out.injected);
        break;
    case SampleId::SwiPointerHook:
        out.image =
            inject_swi_pointer_hook(clean.image, out.profile, spec.samples.swi_new_handler,
                                    &out.injected);
        break;
    case SampleId::SwiCodeHook:
        out.image =
            inject_swi_code_hook(clean.image, out.profile, spec.samples.fake_table, &out.injected);
        break;
    case SampleId::HiddenTask:
        out.image = hide_task(clean.image, out.profile, spec.samples.hide_victim, &out.injected);
        break;
    case SampleId::HaltRace:
        out.image = inject_halt_race(clean.image, out.profile, spec.samples.race_victim, spec.seed,
                                     &out.injected);
        break;
    }
    return out;
}

namespace {

std::uint64_t spec_number(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        unsigned long long n;
        if (value.size() > 2 && value[0] == '0' && (value[1] == 'x' || value[1] == 'X'))
            n = std::stoull(value.substr(2), &pos, 16), pos += 2;
        else
            n = std::stoull(value, &pos, 10);
        if (pos != value.size())
            throw ParseError("");
        return n;
    } catch (const std::exception&) {
        throw ParseError("forge spec key '" + key + "' is not a number: '" + value + "'");
    }
}

std::string spec_trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos)
        return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_ws(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> parts;
    std::string w;
    while (in >> w)
        parts.push_back(w);
    return parts;
}

} // namespace

FixtureSpec load_fixture_spec(std::istream& in) {
    FixtureSpec spec = default_fixture_spec();
    bool roster_reset = false, syscalls_reset = false;

    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos)
            line = line.substr(0, hash);
        line = spec_trim(line);
        if (line.empty())
            continue;
        auto fail = [&](const std::string& msg) -> ParseError {
            return ParseError("forge spec line " + std::to_string(lineno) + ": " + msg);
        };
        if (line.front() == '[') {
            if (line.back() != ']')
                throw fail("unterminated section header '" + line + "'");
            section = spec_trim(line.substr(1, line.size() - 2));
            continue;
        }
        // The two list-valued sections take one entry per line.
        if (section == "roster") {
            if (!roster_reset) {
                spec.roster.clear();
                roster_reset = true;
            }
            auto parts = split_ws(line);
            if (parts.size() != 4)
                throw fail("roster entries are 'pid comm state flags'");
            RosterEntry r;
            r.pid = static_cast<std::int32_t>(spec_number("roster pid", parts[0]));
            r.comm = parts[1];
            r.state = static_cast<std::int64_t>(spec_number("roster state", parts[2]));
            r.flags = static_cast<std::uint32_t>(spec_number("roster flags", parts[3]));
            spec.roster.push_back(std::move(r));
            continue;
        }
        if (section == "syscalls") {
            if (!syscalls_reset) {
                spec.syscalls.clear();
                syscalls_reset = true;
            }
            auto parts = split_ws(line);
            if (parts.size() != 2)
                throw fail("syscall entries are 'name address'");
            spec.syscalls.emplace_back(
                parts[0], static_cast<VirtAddr>(spec_number("syscall address", parts[1])));
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw fail("expected 'key = value', got '" + line + "'");
        const std::string key = spec_trim(line.substr(0, eq));
        const std::string value = spec_trim(line.substr(eq + 1));
        const std::string qual = section + "." + key;
        if (qual == "forge.seed")
            spec.seed = spec_number(qual, value);
        else if (qual == "translation.page_offset")
            spec.translation.page_offset = static_cast<VirtAddr>(spec_number(qual, value));
        else if (qual == "translation.phys_offset")
            spec.translation.phys_offset = spec_number(qual, value);
        else if (qual == "translation.page_size")
            spec.translation.page_size = spec_number(qual, value);
        else if (qual == "translation.evt_phys")
            spec.translation.evt_phys = spec_number(qual, value);
        else if (qual == "symbols.sys_call_table")
            spec.sys_call_table_virt = static_cast<VirtAddr>(spec_number(qual, value));
        else if (qual == "symbols.vector_swi")
            spec.vector_swi_virt = static_cast<VirtAddr>(spec_number(qual, value));
        else if (qual == "slab.objects_per_page")
            spec.objects_per_page = static_cast<std::uint32_t>(spec_number(qual, value));
        else if (qual == "slab.alloc_bitmap")
            spec.alloc_bitmap = static_cast<std::uint32_t>(spec_number(qual, value));
        else if (qual == "samples.syscall_hooks") {
            spec.samples.syscall_hooks.clear();
            std::istringstream items(value);
            std::string item;
            while (std::getline(items, item, ',')) {
                item = spec_trim(item);
                std::size_t colon = item.find(':');
                if (colon == std::string::npos)
                    throw fail("syscall_hooks entries are 'index:address'");
                spec.samples.syscall_hooks.emplace_back(
                    static_cast<std::uint32_t>(
                        spec_number("hook index", spec_trim(item.substr(0, colon)))),
                    static_cast<VirtAddr>(
                        spec_number("hook address", spec_trim(item.substr(colon + 1)))));
            }
        } else if (qual == "samples.evt_handler")
            spec.samples.evt_new_handler = static_cast<VirtAddr>(spec_number(qual, value));
        else if (qual == "samples.swi_handler")
            spec.samples.swi_new_handler = static_cast<VirtAddr>(spec_number(qual, value));
        else if (qual == "samples.fake_table")
            spec.samples.fake_table = static_cast<VirtAddr>(spec_number(qual, value));
        else if (qual == "samples.hide_victim")
            spec.samples.hide_victim = value;
        else if (qual == "samples.race_victim")
            spec.samples.race_victim = value;
        else
            throw fail("unknown forge spec key '" + qual + "'");
    }
    return spec;
}

FixtureSpec load_fixture_spec_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw ParseError("cannot open forge spec file: " + path);
    return load_fixture_spec(in);
}

} // namespace joker
