#include <doctest.h>

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "joker/acquisition.hpp"
#include "joker/cli.hpp"
#include "joker/detectors.hpp"
#include "joker/errors.hpp"
#include "joker/fixtures.hpp"
#include "joker/report.hpp"
#include "support.hpp"

using namespace joker;

namespace {

DetectionReport flow_for(const ForgeOutput& sample) {
    const auto& c = support::corpus();
    return run_detection_flow(c.clean.image, sample.image, c.clean.profile);
}

struct CoutCapture {
    std::ostringstream ss;
    std::streambuf* old;
    CoutCapture() : old(std::cout.rdbuf(ss.rdbuf())) {}
    ~CoutCapture() { std::cout.rdbuf(old); }
    std::string str() const { return ss.str(); }
};

// Keeps JOKER_PROFILE out of every test that doesn't opt in.
struct EnvGuard {
    EnvGuard() { ::unsetenv("JOKER_PROFILE"); }
    ~EnvGuard() { ::unsetenv("JOKER_PROFILE"); }
};

int cli(const std::vector<std::string>& args, std::string* out = nullptr) {
    CoutCapture capture;
    const int rc = run_cli(args);
    if (out)
        *out = capture.str();
    return rc;
}

// Forges one sample into dir and returns the paths we care about.
struct ForgedDir {
    std::string image;
    std::string profile;
    std::string regions;
};

ForgedDir forge_into(support::TempDir& tmp, const std::string& sample, const std::string& name) {
    const std::string dir = tmp.file(name);
    REQUIRE(cli({"forge", "--sample", sample, "--out", dir}) == 0);
    return {dir + "/image.jkmi", dir + "/profile.txt", dir + "/regions.txt"};
}

} // namespace

TEST_CASE("the syscall-hook report matches the published stanza format") {
    const std::string text = render_report(flow_for(support::corpus().s1), ReportFormat::Text);
    CHECK(text ==
          "verdict: ROOTKIT ALERT\n"
          "\n"
          "The address of system call < read > has been changed\n"
          "original address: c0365554\n"
          "new address: bf034078\n"
          "\n"
          "The address of system call < write > has been changed\n"
          "original address: c03652ec\n"
          "new address: bf034000\n"
          "\n"
          "The address of system call < open > has been changed\n"
          "original address: c0362f4c\n"
          "new address: bf034028\n"
          "\n"
          "The address of system call < close > has been changed\n"
          "original address: c0362b60\n"
          "new address: bf034050\n"
          "\n"
          "-----compare cache <-> tasks list (cross-view)-----\n"
          "Number of tasks that appear in list but not in cache: 0\n"
          "Number of tasks that appear in cache but not in list: 0\n");
}

TEST_CASE("the vector-table report decodes the branch retarget") {
    const std::string text = render_report(flow_for(support::corpus().s2), ReportFormat::Text);
    CHECK(text.find("The instruction at offset 0x8 of the exception vector table has been "
                    "changed\n"
                    "original word: e59ff410 -> ffff0420\n"
                    "new word: e59ff414 -> ffff0424\n") != std::string::npos);
    CHECK(text.find("A handler address has been planted at offset 0x424 of the exception "
                    "vector table\n"
                    "original word: 00000000\n"
                    "new word: bf0a0000\n") != std::string::npos);
}

TEST_CASE("the handler-pointer report prints both addresses") {
    const std::string text = render_report(flow_for(support::corpus().s3), ReportFormat::Text);
    CHECK(text.find("The address of the SWI handler has been changed\n"
                    "original address: c003d140\n"
                    "new address: c0050000\n") != std::string::npos);
}

TEST_CASE("the handler-code report disassembles both sides of each word") {
    const std::string text = render_report(flow_for(support::corpus().s4), ReportFormat::Text);
    CHECK(text.find("The instruction at offset 0x108 of the SWI handler has been changed\n"
                    "original word: e28f8094 (add r8, pc, #148)\n"
                    "new word: e59f8080 (ldr r8, [pc, #128])\n"
                    "the system-call table pointer load now reads a planted literal\n") !=
          std::string::npos);
    CHECK(text.find("The instruction at offset 0x190 of the SWI handler has been changed\n"
                    "original word: e320f000 (nop)\n"
                    "new word: c02864c8 (.word 0xc02864c8)\n") != std::string::npos);
}

TEST_CASE("the hidden-task report names the slab slot") {
    const std::string text = render_report(flow_for(support::corpus().s5), ReportFormat::Text);
    CHECK(text ==
          "verdict: ROOTKIT ALERT\n"
          "\n"
          "-----compare cache <-> tasks list (cross-view)-----\n"
          "Task with pid: 3129 , name: printer , file name: section_task_struct#0x4 found in "
          "cache but not in tasks list\n"
          "Number of tasks that appear in list but not in cache: 0\n"
          "Number of tasks that appear in cache but not in list: 1\n");
}

TEST_CASE("a transient-only image reads clean with the filter counter") {
    const std::string text = render_report(flow_for(support::corpus().race), ReportFormat::Text);
    CHECK(text ==
          "verdict: clean\n"
          "\n"
          "-----compare cache <-> tasks list (cross-view)-----\n"
          "Number of tasks that appear in list but not in cache: 0\n"
          "Number of tasks that appear in cache but not in list: 0\n"
          "filtered transient tasks: 1\n");
}

TEST_CASE("verbose reports append the captured evidence windows") {
    const DetectionReport r = flow_for(support::corpus().s1);
    const std::string text = render_report(r, ReportFormat::Text, /*verbose=*/true);
    CHECK(text.find("evidence:\n") != std::string::npos);
    CHECK(text.find("[syscall-table] window at ") != std::string::npos);
    // Non-verbose output omits the block entirely.
    CHECK(render_report(r, ReportFormat::Text).find("evidence:") == std::string::npos);
}

TEST_CASE("skipped detectors are called out with their reason") {
    const auto& c = support::corpus();
    std::vector<Segment> only_kernel = {c.clean.image.segments()[0]};
    const DetectionReport r =
        run_detection_flow(c.clean.image, MemoryImage(std::move(only_kernel)), c.clean.profile);
    const std::string text = render_report(r, ReportFormat::Text);
    CHECK(text.find("skipped evt: ") != std::string::npos);
    CHECK(text.find("skipped swi-pointer: ") != std::string::npos);
}

TEST_CASE("json reports parse and carry the full schema") {
    const auto& c = support::corpus();

    const auto j1 = nlohmann::json::parse(render_report(flow_for(c.s1), ReportFormat::Json));
    CHECK(j1["schema_version"] == 1);
    CHECK(j1["verdict"] == "rootkit_alert");
    REQUIRE(j1["findings"].size() == 4);
    CHECK(j1["findings"][0]["detector"] == "syscall-table");
    CHECK(j1["findings"][0]["index"] == 3);
    CHECK(j1["findings"][0]["name"] == "read");
    CHECK(j1["findings"][0]["original"] == "c0365554");
    CHECK(j1["findings"][0]["current"] == "bf034078");
    CHECK(j1["skipped"].empty());
    CHECK(!j1["evidence"].empty());
    CHECK(j1["cross_view"]["list_task_count"] == 6);
    CHECK(j1["cross_view"]["scan_gaps"].empty());

    const auto j2 = nlohmann::json::parse(render_report(flow_for(c.s2), ReportFormat::Json));
    REQUIRE(j2["findings"].size() == 2);
    CHECK(j2["findings"][0]["detector"] == "evt");
    CHECK(j2["findings"][0]["original_target"] == "ffff0420");
    CHECK(j2["findings"][0]["current_target"] == "ffff0424");
    CHECK(j2["findings"][1]["detector"] == "swi-pointer");
    CHECK(j2["findings"][1]["kind"] == "pointer-changed");

    const auto j4 = nlohmann::json::parse(render_report(flow_for(c.s4), ReportFormat::Json));
    REQUIRE(j4["findings"].size() == 2);
    CHECK(j4["findings"][0]["detector"] == "swi-code");
    CHECK(j4["findings"][0]["table_pointer_redirect"] == true);
    CHECK(j4["findings"][1]["table_pointer_redirect"] == false);

    const auto j5 = nlohmann::json::parse(render_report(flow_for(c.s5), ReportFormat::Json));
    REQUIRE(j5["findings"].size() == 1);
    CHECK(j5["findings"][0]["detector"] == "cross-view");
    CHECK(j5["findings"][0]["kind"] == "hidden-task");
    CHECK(j5["findings"][0]["pid"] == 3129);
    CHECK(j5["findings"][0]["comm"] == "printer");
    CHECK(j5["findings"][0]["cache_slot"] == 4);
    CHECK(j5["cross_view"]["hidden"][0]["pid"] == 3129);
    CHECK(j5["cross_view"]["cache_not_in_list"] == 1);

    const auto jr = nlohmann::json::parse(render_report(flow_for(c.race), ReportFormat::Json));
    CHECK(jr["verdict"] == "clean");
    CHECK(jr["findings"].empty());
    REQUIRE(jr["cross_view"]["filtered_transient"].size() == 1);
}

TEST_CASE("a corrupt walk renders a null cross-view and a skip entry") {
    const auto& c = support::corpus();
    const KernelProfile& p = c.clean.profile;
    const auto tasks = walk_task_list(c.clean.image, p);

    std::vector<Segment> segs = c.clean.image.segments();
    const PhysAddr at = tasks[5].addr + p.task_offsets.tasks_next;
    for (Segment& s : segs)
        if (at >= s.base && at + 4 <= s.base + s.data.size())
            for (int i = 0; i < 4; ++i)
                s.data[at - s.base + i] =
                    static_cast<std::uint8_t>((0xDEAD0000 + p.task_offsets.tasks_next) >> (8 * i));
    const DetectionReport r =
        run_detection_flow(c.clean.image, MemoryImage(std::move(segs)), p);

    const auto j = nlohmann::json::parse(render_report(r, ReportFormat::Json));
    CHECK(j["cross_view"].is_null());
    REQUIRE(j["skipped"].size() == 1);
    CHECK(j["skipped"][0]["detector"] == "cross-view");
    CHECK(exit_code_for(r) == 4);
}

TEST_CASE("exit codes rank alerts over skips over clean") {
    DetectionReport r;
    CHECK(exit_code_for(r) == 0);
    r.skipped.push_back({DetectorId::Evt, "window unreadable"});
    CHECK(exit_code_for(r) == 4);
    r.verdict = Verdict::RootkitAlert;
    CHECK(exit_code_for(r) == 3); // an alert outranks the skip
}

TEST_CASE("the command line drives forge and scan end to end") {
    EnvGuard env;
    support::TempDir tmp;
    const ForgedDir clean = forge_into(tmp, "clean", "clean");
    const ForgedDir s1 = forge_into(tmp, "1", "s1");

    std::string out;
    CHECK(cli({"scan", "--profile", clean.profile, "--baseline", clean.image, "--current",
               s1.image},
              &out) == 3);
    CHECK(out.find("The address of system call < read > has been changed") != std::string::npos);
    CHECK(out.find("original address: c0365554") != std::string::npos);

    CHECK(cli({"scan", "--profile", clean.profile, "--baseline", clean.image, "--current",
               clean.image},
              &out) == 0);
    CHECK(out.find("verdict: clean") != std::string::npos);
}

TEST_CASE("each focused subcommand exits with its own verdict") {
    EnvGuard env;
    support::TempDir tmp;
    const ForgedDir clean = forge_into(tmp, "clean", "clean");
    const ForgedDir s2 = forge_into(tmp, "2", "s2");
    const ForgedDir s4 = forge_into(tmp, "4", "s4");
    const ForgedDir s5 = forge_into(tmp, "5", "s5");

    CHECK(cli({"diff-syscalls", "--profile", clean.profile, "--baseline", clean.image,
               "--current", clean.image}) == 0);
    CHECK(cli({"check-evt", "--profile", clean.profile, "--baseline", clean.image, "--current",
               s2.image}) == 3);
    std::string out;
    CHECK(cli({"check-swi", "--profile", clean.profile, "--baseline", clean.image, "--current",
               s4.image},
              &out) == 3);
    CHECK(out.find("offset 0x108 of the SWI handler") != std::string::npos);
    CHECK(cli({"crossview", "--profile", clean.profile, "--current", s5.image}, &out) == 3);
    CHECK(out.find("pid: 3129") != std::string::npos);

    // The syscall diff alone does not look at the vector table.
    CHECK(cli({"diff-syscalls", "--profile", clean.profile, "--baseline", clean.image,
               "--current", s2.image}) == 0);
}

TEST_CASE("usage problems exit 2 before touching anything") {
    EnvGuard env;
    support::TempDir tmp;
    const ForgedDir clean = forge_into(tmp, "clean", "clean");

    CHECK(cli({"frobnicate"}) == 2);                   // unknown subcommand
    CHECK(cli({}) == 2);                               // no subcommand
    CHECK(cli({"scan", "--current", clean.image}) == 2); // missing --baseline
    CHECK(cli({"scan", "--profile", clean.profile, "--baseline", clean.image}) == 2);
    CHECK(cli({"scan", "--profile", clean.profile, "--baseline", clean.image, "--current",
               clean.image, "--connect", "127.0.0.1:1"}) == 2); // both sources
    CHECK(cli({"scan", "--profile", clean.profile, "--baseline", clean.image, "--current",
               clean.image, "--format", "xml"}) == 2);
    CHECK(cli({"forge", "--sample", "7", "--out", tmp.file("x")}) == 2);
    // No profile anywhere: usage error naming both ways to pass one.
    CHECK(cli({"scan", "--baseline", clean.image, "--current", clean.image}) == 2);
}

TEST_CASE("the profile environment fallback fills in for --profile") {
    EnvGuard env;
    support::TempDir tmp;
    const ForgedDir clean = forge_into(tmp, "clean", "clean");
    ::setenv("JOKER_PROFILE", clean.profile.c_str(), 1);
    CHECK(cli({"scan", "--baseline", clean.image, "--current", clean.image}) == 0);
}

TEST_CASE("missing input files exit 1 with an error message") {
    EnvGuard env;
    support::TempDir tmp;
    const ForgedDir clean = forge_into(tmp, "clean", "clean");
    CHECK(cli({"scan", "--profile", clean.profile, "--baseline", tmp.file("nope.jkmi"),
               "--current", clean.image}) == 1);
    CHECK(cli({"scan", "--profile", tmp.file("nope.txt"), "--baseline", clean.image,
               "--current", clean.image}) == 1);
}

TEST_CASE("scan reads flat blobs when given an explicit base") {
    EnvGuard env;
    support::TempDir tmp;
    const auto& c = support::corpus();
    const ForgedDir clean = forge_into(tmp, "clean", "clean");

    // Flat dump of the main RAM segment only: enough for the syscall diff.
    const Segment& ram = c.s1.image.segments()[0];
    const std::string blob = tmp.file("ram.bin");
    support::write_file(blob, std::string(ram.data.begin(), ram.data.end()));

    CHECK(cli({"diff-syscalls", "--profile", clean.profile, "--baseline", clean.image,
               "--current", blob, "--base", "0x40000000"}) == 3);
}

TEST_CASE("scan writes the report file when asked") {
    EnvGuard env;
    support::TempDir tmp;
    const ForgedDir clean = forge_into(tmp, "clean", "clean");
    const ForgedDir s5 = forge_into(tmp, "5", "s5");
    const std::string report_path = tmp.file("report.json");

    std::string out;
    CHECK(cli({"scan", "--profile", clean.profile, "--baseline", clean.image, "--current",
               s5.image, "--format", "json", "--out", report_path},
              &out) == 3);
    const auto j = nlohmann::json::parse(support::read_file(report_path));
    CHECK(j["verdict"] == "rootkit_alert");
    CHECK(out == support::read_file(report_path)); // stdout and file agree
}

TEST_CASE("forge emits a loadable image, profile, regions, and manifest") {
    EnvGuard env;
    support::TempDir tmp;
    const std::string dir = tmp.file("forged");
    std::string out;
    REQUIRE(cli({"forge", "--sample", "5", "--out", dir}, &out) == 0);
    CHECK(out.find("forged sample 'hidden-task' into ") != std::string::npos);

    const MemoryImage image = load_image_file(dir + "/image.jkmi");
    CHECK(image.total_bytes() == support::corpus().s5.image.total_bytes());
    const KernelProfile profile = load_profile_file(dir + "/profile.txt");
    profile.validate();

    std::istringstream regions(support::read_file(dir + "/regions.txt"));
    const RegionRequest req = parse_regions(regions);
    CHECK(req.regions.size() == image.segments().size());

    const auto manifest = nlohmann::json::parse(support::read_file(dir + "/manifest.json"));
    CHECK(manifest["sample"] == "hidden-task");
    CHECK(!manifest["injected"].empty());

    // The forged pair round-trips through the CLI as a self-consistent world.
    CHECK(cli({"crossview", "--profile", dir + "/profile.txt", "--current",
               dir + "/image.jkmi"}) == 3);
}

TEST_CASE("the command line acquires from and scans a live target") {
    EnvGuard env;
    support::TempDir tmp;
    const ForgedDir clean = forge_into(tmp, "clean", "clean");

    SimDeviceConfig cfg;
    cfg.spec = default_fixture_spec();
    cfg.sample = SampleId::SyscallHook;
    cfg.max_read_chunk = 65536;
    SimServer server(cfg);

    const std::string acquired = tmp.file("acquired.jkmi");
    std::string out;
    REQUIRE(cli({"acquire", "--connect", server.endpoint(), "--regions", clean.regions, "--out",
                 acquired},
                &out) == 0);
    CHECK(out.find("acquired kernel: ") != std::string::npos);
    CHECK(out.find("wrote ") != std::string::npos);

    // The acquisition halted and resumed around the dump.
    TargetSession probe = TargetSession::connect(server.endpoint());
    CHECK(probe.state() == TargetState::Running);

    std::string live_out;
    CHECK(cli({"scan", "--profile", clean.profile, "--baseline", clean.image, "--connect",
               server.endpoint(), "--format", "json"},
              &live_out) == 3);
    std::string offline_out;
    CHECK(cli({"scan", "--profile", clean.profile, "--baseline", clean.image, "--current",
               acquired, "--format", "json"},
              &offline_out) == 3);
    CHECK(live_out == offline_out);
    CHECK(probe.state() == TargetState::Running); // scan resumed what it halted
}
