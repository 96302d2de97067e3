#include <doctest.h>

#include <algorithm>
#include <set>
#include <string>

#include "joker/detectors.hpp"
#include "joker/errors.hpp"
#include "joker/fixtures.hpp"
#include "support.hpp"

using namespace joker;

namespace {

MemoryImage poke_word(const MemoryImage& image, PhysAddr at, std::uint32_t word) {
    std::vector<Segment> segs = image.segments();
    for (Segment& s : segs)
        if (at >= s.base && at + 4 <= s.base + s.data.size()) {
            for (int i = 0; i < 4; ++i)
                s.data[at - s.base + i] = static_cast<std::uint8_t>(word >> (8 * i));
            return MemoryImage(std::move(segs));
        }
    throw std::logic_error("poke outside image");
}

VirtAddr to_virt(const KernelProfile& p, PhysAddr a) {
    return static_cast<VirtAddr>(p.translation.page_offset + (a - p.translation.phys_offset));
}

std::set<std::string> comm_set(const std::vector<TaskRecord>& tasks) {
    std::set<std::string> out;
    for (const TaskRecord& t : tasks)
        out.insert(t.comm);
    return out;
}

// Which detectors fire for a given current image, by direct detector calls.
std::set<DetectorId> fired_detectors(const MemoryImage& clean, const MemoryImage& current,
                                     const KernelProfile& p) {
    std::set<DetectorId> fired;
    if (!check_syscall_table(clean, current, p).empty())
        fired.insert(DetectorId::SyscallTable);
    if (!check_evt(clean, current, p).empty())
        fired.insert(DetectorId::Evt);
    if (check_swi_pointer(clean, current, p).has_value())
        fired.insert(DetectorId::SwiPointer);
    if (!check_swi_code(clean, current, p).empty())
        fired.insert(DetectorId::SwiCode);
    const auto cv =
        cross_view(walk_task_list(current, p), scan_cache_tasks(current, p).tasks, p);
    if (!cv.hidden.empty())
        fired.insert(DetectorId::CrossView);
    return fired;
}

} // namespace

TEST_CASE("every comparison detector is silent on identical views, over the whole corpus") {
    const auto& c = support::corpus();
    for (const ForgeOutput* sample : c.all()) {
        CAPTURE(sample_name(sample->sample));
        const MemoryImage& x = sample->image;
        const KernelProfile& p = sample->profile;
        CHECK(check_syscall_table(x, x, p).empty());
        CHECK(check_evt(x, x, p).empty());
        CHECK(!check_swi_pointer(x, x, p).has_value());
        CHECK(check_swi_code(x, x, p).empty());
        // The cross-view needs no baseline: it compares the image against
        // itself, so the unlinked-task sample correctly self-reports even
        // here, and everything else stays quiet.
        const auto cv = cross_view(walk_task_list(x, p), scan_cache_tasks(x, p).tasks, p);
        CHECK(cv.hidden.size() == (sample->sample == SampleId::HiddenTask ? 1 : 0));
        CHECK(cv.missing_from_cache_count == 0);
    }
}

TEST_CASE("syscall-table hooks are reported with the published address pairs") {
    const auto& c = support::corpus();
    const auto findings = check_syscall_table(c.clean.image, c.s1.image, c.clean.profile);
    REQUIRE(findings.size() == 4);

    const struct {
        std::uint32_t index;
        const char* name;
        VirtAddr original;
        VirtAddr current;
    } expected[] = {
        {3, "read", 0xC0365554, 0xBF034078},
        {4, "write", 0xC03652EC, 0xBF034000},
        {5, "open", 0xC0362F4C, 0xBF034028},
        {6, "close", 0xC0362B60, 0xBF034050},
    };
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(findings[i].index == expected[i].index);
        CHECK(findings[i].name == expected[i].name);
        CHECK(findings[i].original == expected[i].original);
        CHECK(findings[i].current == expected[i].current);
    }
}

TEST_CASE("extract_syscall_table returns the forged handler addresses") {
    const auto& c = support::corpus();
    const auto table = extract_syscall_table(c.clean.image, c.clean.profile);
    REQUIRE(table.size() == c.clean.profile.syscall_count);
    CHECK(table[3] == 0xC0365554);
    CHECK(table[6] == 0xC0362B60);
}

TEST_CASE("a mismatched profile is a configuration error, not a finding") {
    const auto& c = support::corpus();
    KernelProfile wrong = c.clean.profile;
    wrong.syscall_names.pop_back(); // count now disagrees with the name list
    CHECK_THROWS_AS(check_syscall_table(c.clean.image, c.s1.image, wrong), ConfigError);
}

TEST_CASE("the vector-table hook is reported with decoded branch targets") {
    const auto& c = support::corpus();
    const auto findings = check_evt(c.clean.image, c.s2.image, c.clean.profile);
    REQUIRE(findings.size() == 1);
    CHECK(findings[0].slot_offset == 0x8);
    CHECK(findings[0].original_word == 0xE59FF410);
    CHECK(findings[0].current_word == 0xE59FF414);
    REQUIRE(findings[0].original_target.has_value());
    REQUIRE(findings[0].current_target.has_value());
    CHECK(*findings[0].original_target == 0xFFFF0420);
    CHECK(*findings[0].current_target == 0xFFFF0424);
}

TEST_CASE("an arbitrary vector slot change decodes both branch targets") {
    const auto& c = support::corpus();
    const PhysAddr evt = c.clean.profile.translation.evt_phys;
    const std::uint32_t original = c.clean.image.read_word32(evt + 0x4);
    const MemoryImage mutated = poke_word(c.clean.image, evt + 0x4, 0xEA000010);
    const auto findings = check_evt(c.clean.image, mutated, c.clean.profile);
    REQUIRE(findings.size() == 1);
    CHECK(findings[0].slot_offset == 0x4);
    CHECK(findings[0].original_word == original);
    REQUIRE(findings[0].original_target.has_value()); // clean slot 1 is a branch
    REQUIRE(findings[0].current_target.has_value());
    CHECK(*findings[0].current_target == 0xFFFF0004 + 8 + (0x10 << 2));
}

TEST_CASE("the handler-pointer hook is caught at slot 0x420") {
    const auto& c = support::corpus();
    const auto finding = check_swi_pointer(c.clean.image, c.s3.image, c.clean.profile);
    REQUIRE(finding.has_value());
    CHECK(finding->kind == SwiFindingKind::PointerChanged);
    CHECK(finding->offset == 0x420);
    CHECK(finding->original_word == 0xC003D140);
    CHECK(finding->current_word == 0xC0050000);
    CHECK(finding->annotation.find("handler pointer") != std::string::npos);
}

TEST_CASE("the vector hook's planted address also trips the pointer check at 0x424") {
    const auto& c = support::corpus();
    const auto finding = check_swi_pointer(c.clean.image, c.s2.image, c.clean.profile);
    REQUIRE(finding.has_value());
    CHECK(finding->offset == 0x424);
    CHECK(finding->original_word == 0);
    CHECK(finding->current_word == c.spec.samples.evt_new_handler);
    CHECK(finding->annotation.find("companion slot") != std::string::npos);
}

TEST_CASE("slot 0x420 takes precedence when both pointer slots changed") {
    const auto& c = support::corpus();
    const PhysAddr evt = c.clean.profile.translation.evt_phys;
    MemoryImage both = poke_word(c.s3.image, evt + 0x424, 0xBF0A0000);
    const auto finding = check_swi_pointer(c.clean.image, both, c.clean.profile);
    REQUIRE(finding.has_value());
    CHECK(finding->offset == 0x420);
}

TEST_CASE("the code hook is reported as two words with a redirect annotation") {
    const auto& c = support::corpus();
    const auto findings = check_swi_code(c.clean.image, c.s4.image, c.clean.profile);
    REQUIRE(findings.size() == 2);
    CHECK(findings[0].kind == SwiFindingKind::CodeChanged);
    CHECK(findings[0].offset == 0x108);
    CHECK(findings[0].original_word == 0xE28F8094);
    CHECK(findings[0].current_word == 0xE59F8080);
    CHECK(findings[0].table_pointer_redirect);
    CHECK(findings[0].annotation.find("add r8, pc, #148") != std::string::npos);
    CHECK(findings[0].annotation.find("ldr r8, [pc, #128]") != std::string::npos);

    CHECK(findings[1].offset == 0x190);
    CHECK(findings[1].original_word == 0xE320F000);
    CHECK(findings[1].current_word == c.spec.samples.fake_table);
    CHECK(!findings[1].table_pointer_redirect);
    CHECK(findings[1].annotation.find("nop") != std::string::npos);

    // The copied-handler sample leaves the original handler untouched.
    CHECK(check_swi_code(c.clean.image, c.s3.image, c.clean.profile).empty());
}

TEST_CASE("the list walk enumerates the roster in link order") {
    const auto& c = support::corpus();
    const auto tasks = walk_task_list(c.clean.image, c.clean.profile);
    REQUIRE(tasks.size() == 6);
    CHECK(tasks[0].pid == 0);
    CHECK(tasks[0].comm == "swapper");
    CHECK(tasks[0].provenance == Provenance::ListWalk);
    CHECK(tasks[1].comm == "init");
    CHECK(tasks[4].comm == "printer");
    CHECK(tasks[4].pid == 3129);
    CHECK(tasks[5].comm == "MalApp");
    for (const TaskRecord& t : tasks)
        CHECK(!t.cache_slot.has_value());
}

TEST_CASE("a cycle that skips the anchor is a corrupt list with partial results") {
    const auto& c = support::corpus();
    const KernelProfile& p = c.clean.profile;
    const auto tasks = walk_task_list(c.clean.image, p);
    const TaskRecord& kthreadd = tasks[2];
    const TaskRecord& last = tasks[5];
    const MemoryImage looped =
        poke_word(c.clean.image, last.addr + p.task_offsets.tasks_next,
                  to_virt(p, kthreadd.addr) + p.task_offsets.tasks_next);
    try {
        walk_task_list(looped, p);
        FAIL("expected CorruptListError");
    } catch (const CorruptListError& e) {
        CHECK(std::string(e.what()).find("cycle") != std::string::npos);
        CHECK(e.partial.size() == 6);
        CHECK(e.partial[5].comm == "MalApp");
    }
}

TEST_CASE("a next pointer into unmapped space is a corrupt list naming the address") {
    const auto& c = support::corpus();
    const KernelProfile& p = c.clean.profile;
    const auto tasks = walk_task_list(c.clean.image, p);
    const MemoryImage wild = poke_word(c.clean.image, tasks[5].addr + p.task_offsets.tasks_next,
                                       0xDEAD0000 + p.task_offsets.tasks_next);
    try {
        walk_task_list(wild, p);
        FAIL("expected CorruptListError");
    } catch (const CorruptListError& e) {
        CHECK(std::string(e.what()).find("left mapped memory") != std::string::npos);
        CHECK(e.partial.size() == 6);
    }
}

TEST_CASE("the walk honors its step bound") {
    const auto& c = support::corpus();
    try {
        walk_task_list(ImageSource(c.clean.image), c.clean.profile, 3);
        FAIL("expected CorruptListError");
    } catch (const CorruptListError& e) {
        CHECK(e.partial.size() == 3);
    }
}

TEST_CASE("the cache scan sees every allocated slot and only those") {
    const auto& c = support::corpus();
    const CacheScanResult result = scan_cache_tasks(c.clean.image, c.clean.profile);
    REQUIRE(result.tasks.size() == 6);
    CHECK(result.gaps.empty());
    std::set<std::uint32_t> slots;
    for (const TaskRecord& t : result.tasks) {
        CHECK(t.provenance == Provenance::CacheScan);
        REQUIRE(t.cache_slot.has_value());
        slots.insert(*t.cache_slot);
        CHECK(*t.cache_slot < 6); // the two free slots (6, 7) stay invisible
    }
    CHECK(slots.size() == 6);
    CHECK(comm_set(result.tasks) ==
          std::set<std::string>{"swapper", "init", "kthreadd", "sh", "printer", "MalApp"});
}

TEST_CASE("slots that overrun their slab page become gaps, not records") {
    const auto& c = support::corpus();
    const KernelProfile& p = c.clean.profile;
    const CacheScanResult clean_scan = scan_cache_tasks(c.clean.image, p);
    const PhysAddr page = clean_scan.tasks[0].addr & ~PhysAddr{0xFFF};
    const std::uint64_t pfn = page / p.translation.page_size;
    const PhysAddr desc = p.slab.mem_map_phys + (pfn - p.slab.pfn_start) * p.slab.page_desc_size;

    // first_object_offset near the page end pushes every slot past it.
    const MemoryImage broken = poke_word(c.clean.image, desc + 16, 4000);
    const CacheScanResult result = scan_cache_tasks(broken, p);
    CHECK(result.tasks.empty());
    REQUIRE(result.gaps.size() == 6);
    CHECK(result.gaps[0].pfn == pfn);
    CHECK(result.gaps[0].reason.find("past its slab page") != std::string::npos);
}

TEST_CASE("a garbage cache-name table is refused loudly") {
    const auto& c = support::corpus();
    const KernelProfile& p = c.clean.profile;
    const std::uint64_t pfn_count = p.slab.pfn_end - p.slab.pfn_start;
    const PhysAddr names = p.slab.mem_map_phys + pfn_count * p.slab.page_desc_size;
    const MemoryImage garbage = poke_word(c.clean.image, names, 5000);
    CHECK_THROWS_AS(scan_cache_tasks(garbage, p), ValidationError);
}

TEST_CASE("an absent cache name yields an empty scan, not an error") {
    const auto& c = support::corpus();
    KernelProfile p = c.clean.profile;
    p.slab.cache_name = "dentry";
    const CacheScanResult result = scan_cache_tasks(c.clean.image, p);
    CHECK(result.tasks.empty());
    CHECK(result.gaps.empty());
}

TEST_CASE("transient teardown shapes are recognized, normal tasks are not") {
    const KernelProfile& p = support::corpus().clean.profile;
    TaskRecord t;
    t.pid = 0;
    t.comm = "dying";
    CHECK(is_transient(t, p));
    t.comm = "swapper";
    CHECK(!is_transient(t, p)); // pid 0 is the idle task's legitimate shape
    t = {};
    t.pid = 77;
    t.comm = "x";
    t.state = -1;
    CHECK(is_transient(t, p));
    t.state = 0;
    t.flags = 0x00400102; // shutdown bits
    CHECK(is_transient(t, p));
    t.flags = 0x00400100;
    CHECK(!is_transient(t, p));
}

TEST_CASE("cross-view flags exactly the hidden tasks, for every hide subset") {
    const auto& c = support::corpus();
    const KernelProfile& p = c.clean.profile;
    const std::vector<std::string> victims = {"init", "kthreadd", "sh", "printer", "MalApp"};
    for (unsigned mask = 1; mask < (1u << victims.size()); ++mask) {
        MemoryImage image = c.clean.image;
        std::set<std::string> hidden_comms;
        for (std::size_t i = 0; i < victims.size(); ++i)
            if (mask & (1u << i)) {
                image = hide_task(image, p, victims[i]);
                hidden_comms.insert(victims[i]);
            }
        const auto cv = cross_view(walk_task_list(image, p), scan_cache_tasks(image, p).tasks, p);
        CHECK(comm_set(cv.hidden) == hidden_comms);
        CHECK(cv.filtered_transient.empty());
        CHECK(cv.missing_from_cache_count == 0);
    }
}

TEST_CASE("the hidden printer task is reported from its cache slot") {
    const auto& c = support::corpus();
    const auto cv = cross_view(walk_task_list(c.s5.image, c.clean.profile),
                               scan_cache_tasks(c.s5.image, c.clean.profile).tasks,
                               c.clean.profile);
    REQUIRE(cv.hidden.size() == 1);
    CHECK(cv.hidden[0].pid == 3129);
    CHECK(cv.hidden[0].comm == "printer");
    REQUIRE(cv.hidden[0].cache_slot.has_value());
    CHECK(*cv.hidden[0].cache_slot == 4);
    CHECK(cv.missing_from_cache_count == 0);
}

TEST_CASE("every halt-race signature variant is filtered, never hidden") {
    const auto& c = support::corpus();
    const KernelProfile& p = c.clean.profile;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        CAPTURE(seed);
        const MemoryImage raced = inject_halt_race(c.clean.image, p, "sh", seed);
        const auto cv = cross_view(walk_task_list(raced, p), scan_cache_tasks(raced, p).tasks, p);
        CHECK(cv.hidden.empty());
        REQUIRE(cv.filtered_transient.size() == 1);
        CHECK(cv.filtered_transient[0].addr != 0);
        CHECK(is_transient(cv.filtered_transient[0], p));
    }
}

TEST_CASE("duplicate records inside one view are a data-integrity failure") {
    const auto& c = support::corpus();
    const auto tasks = walk_task_list(c.clean.image, c.clean.profile);
    auto cache = scan_cache_tasks(c.clean.image, c.clean.profile).tasks;
    auto dup_list = tasks;
    dup_list.push_back(tasks[2]);
    CHECK_THROWS_AS(cross_view(dup_list, cache, c.clean.profile), DataIntegrityError);
    auto dup_cache = cache;
    dup_cache.push_back(cache[0]);
    CHECK_THROWS_AS(cross_view(tasks, dup_cache, c.clean.profile), DataIntegrityError);
    // The same address across the two views is the normal matched case.
    CHECK(cross_view(tasks, cache, c.clean.profile).hidden.empty());
}

TEST_CASE("the five samples fire exactly their own detectors") {
    const auto& c = support::corpus();
    const KernelProfile& p = c.clean.profile;

    using Set = std::set<DetectorId>;
    CHECK(fired_detectors(c.clean.image, c.clean.image, p) == Set{});
    CHECK(fired_detectors(c.clean.image, c.s1.image, p) == Set{DetectorId::SyscallTable});
    // The vector hook plants its handler in the pointer check's companion
    // slot, so that sample legitimately trips two detectors.
    CHECK(fired_detectors(c.clean.image, c.s2.image, p) ==
          Set{DetectorId::Evt, DetectorId::SwiPointer});
    CHECK(fired_detectors(c.clean.image, c.s3.image, p) == Set{DetectorId::SwiPointer});
    CHECK(fired_detectors(c.clean.image, c.s4.image, p) == Set{DetectorId::SwiCode});
    CHECK(fired_detectors(c.clean.image, c.s5.image, p) == Set{DetectorId::CrossView});
    CHECK(fired_detectors(c.clean.image, c.race.image, p) == Set{});
}

TEST_CASE("single-word mutations are located exactly, table and handler alike") {
    const auto& c = support::corpus();
    const KernelProfile& p = c.clean.profile;
    const PhysAddr table = virt_to_phys_linear(p.translation, p.sys_call_table_virt);
    const PhysAddr handler = virt_to_phys_linear(p.translation, p.vector_swi_virt);

    for (std::uint32_t i = 0; i < p.syscall_count; ++i) {
        const PhysAddr at = table + 4 * i;
        const MemoryImage mutated =
            poke_word(c.clean.image, at, c.clean.image.read_word32(at) ^ 0x1);
        const auto findings = check_syscall_table(c.clean.image, mutated, p);
        REQUIRE(findings.size() == 1);
        CHECK(findings[0].index == i);
    }
    for (std::uint64_t off = 0; off < p.swi_handler_len; off += 4) {
        const PhysAddr at = handler + off;
        const MemoryImage mutated =
            poke_word(c.clean.image, at, c.clean.image.read_word32(at) ^ 0x1);
        const auto findings = check_swi_code(c.clean.image, mutated, p);
        REQUIRE(findings.size() == 1);
        CHECK(findings[0].offset == off);
    }
}

TEST_CASE("the full flow composes all detectors and stays ordered") {
    const auto& c = support::corpus();
    const KernelProfile& p = c.clean.profile;

    const DetectionReport clean_report = run_detection_flow(c.clean.image, c.clean.image, p);
    CHECK(clean_report.verdict == Verdict::Clean);
    CHECK(!clean_report.has_findings());
    CHECK(clean_report.skipped.empty());
    REQUIRE(clean_report.cross_view.has_value());
    CHECK(clean_report.cross_view->hidden.empty());
    CHECK(clean_report.list_tasks.size() == 6);
    CHECK(clean_report.cache_tasks.size() == 6);

    // Samples 1 and 5 together: both their detectors fire in one flow.
    const MemoryImage composed = hide_task(
        inject_syscall_hook(c.clean.image, p, c.spec.samples.syscall_hooks), p, "printer");
    const DetectionReport report = run_detection_flow(c.clean.image, composed, p);
    CHECK(report.verdict == Verdict::RootkitAlert);
    CHECK(report.syscall_findings.size() == 4);
    REQUIRE(report.cross_view.has_value());
    REQUIRE(report.cross_view->hidden.size() == 1);
    CHECK(report.cross_view->hidden[0].comm == "printer");
    CHECK(report.evt_findings.empty());
    CHECK(!report.swi_pointer_finding.has_value());
    CHECK(report.swi_code_findings.empty());
    CHECK(!report.evidence.empty());
    for (const Evidence& e : report.evidence) {
        CHECK(!e.current.empty());
        // Hidden-task evidence has no meaningful baseline slot; everything
        // else captures both sides at equal width.
        if (e.detector != "cross-view") {
            CHECK(!e.baseline.empty());
            CHECK(e.baseline.size() == e.current.size());
        }
    }
}

TEST_CASE("a detector whose reads fail is skipped; the rest still run") {
    const auto& c = support::corpus();
    const KernelProfile& p = c.clean.profile;
    // Current view without the vector-table segment: both EVT-based
    // detectors skip, everything else completes.
    std::vector<Segment> only_kernel = {c.clean.image.segments()[0]};
    const MemoryImage gapped(std::move(only_kernel));
    const DetectionReport report = run_detection_flow(c.clean.image, gapped, p);
    CHECK(report.verdict == Verdict::Clean);
    REQUIRE(report.skipped.size() == 2);
    std::set<DetectorId> skipped;
    for (const SkippedDetector& s : report.skipped) {
        skipped.insert(s.id);
        CHECK(!s.reason.empty());
    }
    CHECK(skipped == std::set<DetectorId>{DetectorId::Evt, DetectorId::SwiPointer});
    CHECK(report.syscall_findings.empty());
    REQUIRE(report.cross_view.has_value());
    CHECK(report.list_tasks.size() == 6);
}

TEST_CASE("a corrupt task list downgrades the cross-view to skipped with partial data") {
    const auto& c = support::corpus();
    const KernelProfile& p = c.clean.profile;
    const auto tasks = walk_task_list(c.clean.image, p);
    const MemoryImage wild = poke_word(c.clean.image, tasks[5].addr + p.task_offsets.tasks_next,
                                       0xDEAD0000 + p.task_offsets.tasks_next);
    const DetectionReport report = run_detection_flow(c.clean.image, wild, p);
    CHECK(report.verdict == Verdict::Clean);
    REQUIRE(report.skipped.size() == 1);
    CHECK(report.skipped[0].id == DetectorId::CrossView);
    CHECK(report.list_tasks.size() == 6); // the partial walk is kept
    CHECK(!report.cross_view.has_value());
}
