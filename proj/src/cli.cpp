#include "joker/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <utility>

#include <CLI11.hpp>
#include <json.hpp>

#include "joker/acquisition.hpp"
#include "joker/detectors.hpp"
#include "joker/errors.hpp"
#include "joker/fixtures.hpp"
#include "joker/mem_image.hpp"
#include "joker/profile.hpp"
#include "joker/report.hpp"

namespace joker {

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

// Bad flag combinations discovered after CLI11's own parsing.
struct UsageError {
    std::string message;
};

std::uint64_t parse_hex(const std::string& text, const std::string& what) {
    std::string t = text;
    if (t.size() > 2 && t[0] == '0' && (t[1] == 'x' || t[1] == 'X'))
        t = t.substr(2);
    try {
        std::size_t used = 0;
        const std::uint64_t v = std::stoull(t, &used, 16);
        if (used == t.size() && !t.empty())
            return v;
    } catch (const std::exception&) {
    }
    throw UsageError{"invalid " + what + " '" + text + "' (expected hex)"};
}

ReportFormat parse_format(const std::string& format) {
    if (format == "text")
        return ReportFormat::Text;
    if (format == "json")
        return ReportFormat::Json;
    throw UsageError{"unknown --format '" + format + "' (expected text or json)"};
}

KernelProfile load_profile_or_die(const std::string& flag_value) {
    std::string path = flag_value;
    if (path.empty())
        if (const char* env = std::getenv("JOKER_PROFILE"))
            path = env;
    if (path.empty())
        throw UsageError{"no profile given: pass --profile or set JOKER_PROFILE"};
    return load_profile_file(path);
}

MemoryImage load_side(const std::string& path, const std::string& base_hex) {
    if (!base_hex.empty()) {
        std::ifstream in(path, std::ios::binary);
        if (!in)
            throw ConfigError("cannot open " + path);
        return load_flat_blob(in, parse_hex(base_hex, "--base"));
    }
    return load_image_file(path);
}

// Flags shared by the detection subcommands.
struct DetectOpts {
    std::string profile;
    std::string baseline;
    std::string current;
    std::string connect;
    std::string base_hex;
    std::string format = "text";
    std::string out;
    bool verbose = false;
};

void add_common_flags(CLI::App* cmd, DetectOpts& opts) {
    cmd->add_option("--profile", opts.profile,
                    "Kernel profile path (default: JOKER_PROFILE environment variable)");
    cmd->add_option("--format", opts.format, "Report format: text or json")
        ->check(CLI::IsMember({"text", "json"}));
    cmd->add_option("--out", opts.out, "Also write the report to this file");
    cmd->add_flag("--verbose", opts.verbose, "Include captured evidence windows in the report");
}

void add_current_flags(CLI::App* cmd, DetectOpts& opts) {
    cmd->add_option("--current", opts.current, "Image to examine (JKMI, or flat blob with --base)");
    cmd->add_option("--connect", opts.connect, "Examine a live target at host:port instead");
    cmd->add_option("--base", opts.base_hex, "Load flat memory blobs at this physical base (hex)");
}

// Runs body against the requested current side: a loaded image, or a live
// session halted for the duration (and resumed if the halt was ours).
int with_current_source(const DetectOpts& opts,
                        const std::function<int(const MemorySource&)>& body) {
    if (opts.current.empty() == opts.connect.empty())
        throw UsageError{"exactly one of --current and --connect is required"};
    if (!opts.current.empty()) {
        const MemoryImage image = load_side(opts.current, opts.base_hex);
        return body(ImageSource(image));
    }
    TargetSession session = TargetSession::connect(opts.connect);
    const bool we_halted = session.halt();
    int code = 0;
    try {
        code = body(SessionSource(session));
    } catch (...) {
        if (we_halted)
            session.resume();
        throw;
    }
    if (we_halted)
        session.resume();
    return code;
}

int emit_report(const DetectionReport& report, const DetectOpts& opts) {
    const std::string rendered = render_report(report, parse_format(opts.format), opts.verbose);
    std::cout << rendered;
    if (!opts.out.empty()) {
        std::ofstream out(opts.out, std::ios::binary);
        if (!out)
            throw ConfigError("cannot write report to " + opts.out);
        out << rendered;
    }
    return exit_code_for(report);
}

Verdict verdict_for(const DetectionReport& report) {
    return report.has_findings() ? Verdict::RootkitAlert : Verdict::Clean;
}

int cmd_scan(const DetectOpts& opts) {
    const KernelProfile profile = load_profile_or_die(opts.profile);
    const MemoryImage baseline = load_side(opts.baseline, opts.base_hex);
    return with_current_source(opts, [&](const MemorySource& current) {
        return emit_report(run_detection_flow(baseline, current, profile), opts);
    });
}

int cmd_diff_syscalls(const DetectOpts& opts) {
    const KernelProfile profile = load_profile_or_die(opts.profile);
    const MemoryImage baseline = load_side(opts.baseline, opts.base_hex);
    return with_current_source(opts, [&](const MemorySource& current) {
        DetectionReport report;
        report.syscall_findings = check_syscall_table(ImageSource(baseline), current, profile);
        report.verdict = verdict_for(report);
        return emit_report(report, opts);
    });
}

int cmd_check_evt(const DetectOpts& opts) {
    const KernelProfile profile = load_profile_or_die(opts.profile);
    const MemoryImage baseline = load_side(opts.baseline, opts.base_hex);
    return with_current_source(opts, [&](const MemorySource& current) {
        DetectionReport report;
        report.evt_findings = check_evt(ImageSource(baseline), current, profile);
        report.verdict = verdict_for(report);
        return emit_report(report, opts);
    });
}

int cmd_check_swi(const DetectOpts& opts) {
    const KernelProfile profile = load_profile_or_die(opts.profile);
    const MemoryImage baseline = load_side(opts.baseline, opts.base_hex);
    return with_current_source(opts, [&](const MemorySource& current) {
        DetectionReport report;
        const ImageSource baseline_source(baseline);
        report.swi_pointer_finding = check_swi_pointer(baseline_source, current, profile);
        report.swi_code_findings = check_swi_code(baseline_source, current, profile);
        report.verdict = verdict_for(report);
        return emit_report(report, opts);
    });
}

int cmd_crossview(const DetectOpts& opts) {
    const KernelProfile profile = load_profile_or_die(opts.profile);
    return with_current_source(opts, [&](const MemorySource& current) {
        DetectionReport report;
        try {
            report.list_tasks = walk_task_list(current, profile, 65536);
            const CacheScanResult scan = scan_cache_tasks(current, profile);
            report.cache_tasks = scan.tasks;
            report.scan_gaps = scan.gaps;
            report.cross_view = cross_view(report.list_tasks, report.cache_tasks, profile);
        } catch (const CorruptListError& e) {
            report.list_tasks = e.partial;
            report.skipped.push_back({DetectorId::CrossView, e.what()});
        }
        report.verdict = verdict_for(report);
        return emit_report(report, opts);
    });
}

struct AcquireOpts {
    std::string connect;
    std::string regions;
    std::string out;
};

int cmd_acquire(const AcquireOpts& opts) {
    const RegionRequest request = parse_regions_file(opts.regions);
    request.validate();
    TargetSession session = TargetSession::connect(opts.connect);
    const bool we_halted = session.halt();
    MemoryImage image = [&] {
        try {
            return acquire_regions(session, request);
        } catch (...) {
            if (we_halted)
                session.resume();
            throw;
        }
    }();
    if (we_halted)
        session.resume();
    store_image_file(image, opts.out);
    std::uint64_t total = 0;
    for (const Segment& s : image.segments()) {
        std::cout << "acquired " << s.label << ": " << s.data.size() << " bytes at 0x"
                  << hex64(s.base) << "\n";
        total += s.data.size();
    }
    std::cout << "wrote " << total << " bytes in " << image.segments().size() << " segments to "
              << opts.out << "\n";
    return 0;
}

struct ForgeOpts {
    std::string spec;
    std::string sample = "clean";
    std::string out;
};

int cmd_forge(const ForgeOpts& opts) {
    const std::optional<SampleId> sample = parse_sample_id(opts.sample);
    if (!sample)
        throw UsageError{"unknown --sample '" + opts.sample +
                         "' (expected clean, 1, 2, 3, 4, 5, or race)"};
    const FixtureSpec spec =
        opts.spec.empty() ? default_fixture_spec() : load_fixture_spec_file(opts.spec);
    const ForgeOutput forged = forge_sample(spec, *sample);

    const std::filesystem::path dir(opts.out);
    std::filesystem::create_directories(dir);
    store_image_file(forged.image, (dir / "image.jkmi").string());
    {
        std::ofstream out(dir / "profile.txt", std::ios::binary);
        out << save_profile(forged.profile);
    }
    {
        std::ofstream out(dir / "regions.txt", std::ios::binary);
        for (const Segment& s : forged.image.segments())
            out << s.label << " " << hex64(s.base) << " " << hex64(s.data.size()) << "\n";
    }
    {
        nlohmann::ordered_json manifest;
        manifest["sample"] = sample_name(forged.sample);
        manifest["image"] = "image.jkmi";
        manifest["profile"] = "profile.txt";
        manifest["injected"] = nlohmann::ordered_json::array();
        for (const ByteRange& r : forged.injected)
            manifest["injected"].push_back(
                {{"base", hex64(r.base)}, {"length", r.length}, {"note", r.note}});
        std::ofstream out(dir / "manifest.json", std::ios::binary);
        out << manifest.dump(2) << "\n";
    }
    std::cout << "forged sample '" << sample_name(forged.sample) << "' into " << dir.string()
              << " (" << forged.injected.size() << " injected ranges)\n";
    return 0;
}

struct ServeOpts {
    std::string spec;
    std::string sample = "clean";
    std::string script;
    std::uint64_t seed = 0;
    bool race = false;
    std::uint16_t port = 0;
    std::uint32_t chunk = wire::kDefaultMaxReadChunk;
};

int cmd_serve_sim(const ServeOpts& opts) {
    const std::optional<SampleId> sample = parse_sample_id(opts.sample);
    if (!sample)
        throw UsageError{"unknown --sample '" + opts.sample +
                         "' (expected clean, 1, 2, 3, 4, 5, or race)"};
    SimDeviceConfig config;
    config.spec = opts.spec.empty() ? default_fixture_spec() : load_fixture_spec_file(opts.spec);
    config.sample = *sample;
    config.race_mode = opts.race ? RaceMode::HaltMidUnlink : RaceMode::None;
    config.seed = opts.seed;
    config.max_read_chunk = opts.chunk;
    if (!opts.script.empty()) {
        std::ifstream in(opts.script);
        if (!in)
            throw ConfigError("cannot open script file " + opts.script);
        config.script = parse_mutator_script(in);
    }
    SimServer server(std::move(config), opts.port);
    std::cout << "listening on " << server.endpoint() << std::endl;
    server.wait();
    return 0;
}

} // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Kernel memory forensics over debug-port acquisition: trusted imaging plus "
                 "rootkit detection for ARM32 Linux kernels"};
    app.require_subcommand(1);

    DetectOpts scan_opts;
    CLI::App* scan = app.add_subcommand(
        "scan", "Run every detector against a trusted baseline and a current image or live target");
    scan->add_option("--baseline", scan_opts.baseline, "Trusted baseline image")->required();
    add_current_flags(scan, scan_opts);
    add_common_flags(scan, scan_opts);

    DetectOpts diff_opts;
    CLI::App* diff = app.add_subcommand("diff-syscalls", "Compare system-call table entries");
    diff->add_option("--baseline", diff_opts.baseline, "Trusted baseline image")->required();
    add_current_flags(diff, diff_opts);
    add_common_flags(diff, diff_opts);

    DetectOpts evt_opts;
    CLI::App* evt = app.add_subcommand("check-evt", "Compare exception-vector-table words");
    evt->add_option("--baseline", evt_opts.baseline, "Trusted baseline image")->required();
    add_current_flags(evt, evt_opts);
    add_common_flags(evt, evt_opts);

    DetectOpts swi_opts;
    CLI::App* swi =
        app.add_subcommand("check-swi", "Compare the SWI handler pointer and handler code");
    swi->add_option("--baseline", swi_opts.baseline, "Trusted baseline image")->required();
    add_current_flags(swi, swi_opts);
    add_common_flags(swi, swi_opts);

    DetectOpts cross_opts;
    CLI::App* cross = app.add_subcommand(
        "crossview", "Enumerate tasks via list walk and slab scan and compare the two views");
    add_current_flags(cross, cross_opts);
    add_common_flags(cross, cross_opts);

    AcquireOpts acquire_opts;
    CLI::App* acquire =
        app.add_subcommand("acquire", "Halt a debug target and dump memory regions to a file");
    acquire->add_option("--connect", acquire_opts.connect, "Debug target host:port")->required();
    acquire->add_option("--regions", acquire_opts.regions,
                        "Regions file: one 'label base_hex length_hex' per line")
        ->required();
    acquire->add_option("--out", acquire_opts.out, "Output image path")->required();

    ForgeOpts forge_opts;
    CLI::App* forge = app.add_subcommand(
        "forge", "Synthesize a kernel memory image, its profile, and an injection manifest");
    forge->add_option("--spec", forge_opts.spec, "Forge spec file (default: built-in toy kernel)");
    forge->add_option("--sample", forge_opts.sample, "clean, 1..5, or race")->required();
    forge->add_option("--out", forge_opts.out, "Output directory")->required();

    ServeOpts serve_opts;
    CLI::App* serve =
        app.add_subcommand("serve-sim", "Serve a simulated debug target over TCP");
    serve->add_option("--spec", serve_opts.spec, "Forge spec file (default: built-in toy kernel)");
    serve->add_option("--sample", serve_opts.sample, "Initial memory contents: clean, 1..5, race");
    serve->add_option("--script", serve_opts.script,
                      "Mutator script: 'spawn <pid> <comm>' / 'exit <comm>' lines");
    serve->add_option("--seed", serve_opts.seed, "Seed for halt-race transient signatures");
    serve->add_flag("--race", serve_opts.race, "Freeze halts mid-task-exit (halt-race mode)");
    serve->add_option("--port", serve_opts.port, "TCP port (default: ephemeral)");
    serve->add_option("--chunk", serve_opts.chunk, "Max read chunk the device advertises");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (app.got_subcommand(scan))
            return cmd_scan(scan_opts);
        if (app.got_subcommand(diff))
            return cmd_diff_syscalls(diff_opts);
        if (app.got_subcommand(evt))
            return cmd_check_evt(evt_opts);
        if (app.got_subcommand(swi))
            return cmd_check_swi(swi_opts);
        if (app.got_subcommand(cross))
            return cmd_crossview(cross_opts);
        if (app.got_subcommand(acquire))
            return cmd_acquire(acquire_opts);
        if (app.got_subcommand(forge))
            return cmd_forge(forge_opts);
        if (app.got_subcommand(serve))
            return cmd_serve_sim(serve_opts);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.message << "\n";
        return kExitUsage;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

int run_cli(const std::vector<std::string>& args) {
    std::vector<std::string> argv_storage;
    argv_storage.reserve(args.size() + 1);
    argv_storage.push_back("joker");
    argv_storage.insert(argv_storage.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    argv.reserve(argv_storage.size());
    for (const std::string& a : argv_storage)
        argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

} // namespace joker
