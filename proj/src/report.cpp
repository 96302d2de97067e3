#include "joker/report.hpp"

#include <sstream>

#include <json.hpp>

namespace joker {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string bytes_to_hex(const std::vector<std::uint8_t>& bytes) {
    static const char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size() * 2);
    for (std::uint8_t b : bytes) {
        out.push_back(digits[b >> 4]);
        out.push_back(digits[b & 0xF]);
    }
    return out;
}

ordered_json task_to_json(const TaskRecord& t) {
    ordered_json j;
    j["addr"] = hex64(t.addr);
    j["pid"] = t.pid;
    j["comm"] = t.comm;
    j["state"] = t.state;
    j["flags"] = hex32(t.flags);
    j["provenance"] = t.provenance == Provenance::ListWalk ? "list-walk" : "cache-scan";
    if (t.cache_slot)
        j["cache_slot"] = *t.cache_slot;
    return j;
}

ordered_json report_to_json(const DetectionReport& r) {
    ordered_json doc;
    doc["schema_version"] = 1;
    doc["verdict"] = r.verdict == Verdict::RootkitAlert ? "rootkit_alert" : "clean";

    ordered_json findings = ordered_json::array();
    for (const SyscallHookFinding& f : r.syscall_findings) {
        ordered_json j;
        j["detector"] = detector_name(DetectorId::SyscallTable);
        j["index"] = f.index;
        j["name"] = f.name;
        j["original"] = hex32(f.original);
        j["current"] = hex32(f.current);
        findings.push_back(std::move(j));
    }
    for (const EvtFinding& f : r.evt_findings) {
        ordered_json j;
        j["detector"] = detector_name(DetectorId::Evt);
        j["slot_offset"] = f.slot_offset;
        j["original_word"] = hex32(f.original_word);
        j["current_word"] = hex32(f.current_word);
        j["original_target"] =
            f.original_target ? ordered_json(hex32(*f.original_target)) : ordered_json(nullptr);
        j["current_target"] =
            f.current_target ? ordered_json(hex32(*f.current_target)) : ordered_json(nullptr);
        findings.push_back(std::move(j));
    }
    auto swi_to_json = [](const SwiFinding& f, DetectorId id) {
        ordered_json j;
        j["detector"] = detector_name(id);
        j["kind"] = f.kind == SwiFindingKind::PointerChanged ? "pointer-changed" : "code-changed";
        j["offset"] = f.offset;
        j["original_word"] = hex32(f.original_word);
        j["current_word"] = hex32(f.current_word);
        j["annotation"] = f.annotation;
        if (f.kind == SwiFindingKind::CodeChanged)
            j["table_pointer_redirect"] = f.table_pointer_redirect;
        return j;
    };
    if (r.swi_pointer_finding)
        findings.push_back(swi_to_json(*r.swi_pointer_finding, DetectorId::SwiPointer));
    for (const SwiFinding& f : r.swi_code_findings)
        findings.push_back(swi_to_json(f, DetectorId::SwiCode));
    if (r.cross_view) {
        for (const TaskRecord& t : r.cross_view->hidden) {
            ordered_json j;
            j["detector"] = detector_name(DetectorId::CrossView);
            j["kind"] = "hidden-task";
            j.update(task_to_json(t));
            findings.push_back(std::move(j));
        }
    }
    doc["findings"] = std::move(findings);

    if (r.cross_view) {
        ordered_json cv;
        cv["hidden"] = ordered_json::array();
        for (const TaskRecord& t : r.cross_view->hidden)
            cv["hidden"].push_back(task_to_json(t));
        cv["filtered_transient"] = ordered_json::array();
        for (const TaskRecord& t : r.cross_view->filtered_transient)
            cv["filtered_transient"].push_back(task_to_json(t));
        cv["list_not_in_cache"] = r.cross_view->missing_from_cache_count;
        cv["cache_not_in_list"] = r.cross_view->hidden.size();
        cv["list_task_count"] = r.list_tasks.size();
        cv["cache_task_count"] = r.cache_tasks.size();
        ordered_json gaps = ordered_json::array();
        for (const ScanGap& g : r.scan_gaps) {
            ordered_json j;
            j["pfn"] = g.pfn;
            j["addr"] = hex64(g.addr);
            j["reason"] = g.reason;
            gaps.push_back(std::move(j));
        }
        cv["scan_gaps"] = std::move(gaps);
        doc["cross_view"] = std::move(cv);
    } else {
        doc["cross_view"] = nullptr;
    }

    ordered_json skipped = ordered_json::array();
    for (const SkippedDetector& s : r.skipped) {
        ordered_json j;
        j["detector"] = detector_name(s.id);
        j["reason"] = s.reason;
        skipped.push_back(std::move(j));
    }
    doc["skipped"] = std::move(skipped);

    ordered_json evidence = ordered_json::array();
    for (const Evidence& e : r.evidence) {
        ordered_json j;
        j["detector"] = e.detector;
        j["base"] = hex64(e.base);
        j["baseline"] = bytes_to_hex(e.baseline);
        j["current"] = bytes_to_hex(e.current);
        evidence.push_back(std::move(j));
    }
    doc["evidence"] = std::move(evidence);
    return doc;
}

void render_word_change(std::ostream& out, const std::string& what, std::uint32_t original,
                        std::uint32_t current, const std::string& annotation) {
    out << what << " has been changed\n";
    out << "original word: " << hex32(original);
    std::size_t arrow = annotation.find(" -> ");
    if (arrow != std::string::npos)
        out << " (" << annotation.substr(0, arrow) << ")";
    out << "\n";
    out << "new word: " << hex32(current);
    if (arrow != std::string::npos)
        out << " (" << annotation.substr(arrow + 4) << ")";
    out << "\n";
}

void render_hex_block(std::ostream& out, const std::string& label, PhysAddr base,
                      const std::vector<std::uint8_t>& bytes) {
    out << "  " << label << ":";
    if (bytes.empty()) {
        out << " (unreadable)\n";
        return;
    }
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        if (i % 16 == 0)
            out << "\n    " << hex64(base + i) << " ";
        char buf[4];
        std::snprintf(buf, sizeof buf, " %02x", bytes[i]);
        out << buf;
    }
    out << "\n";
}

std::string render_text(const DetectionReport& r, bool verbose) {
    std::ostringstream out;
    out << "verdict: " << (r.verdict == Verdict::RootkitAlert ? "ROOTKIT ALERT" : "clean")
        << "\n";

    for (const SyscallHookFinding& f : r.syscall_findings) {
        out << "\nThe address of system call < " << f.name << " > has been changed\n";
        out << "original address: " << hex32(f.original) << "\n";
        out << "new address: " << hex32(f.current) << "\n";
    }

    for (const EvtFinding& f : r.evt_findings) {
        out << "\n";
        std::ostringstream what;
        what << "The instruction at offset 0x" << std::hex << f.slot_offset << std::dec
             << " of the exception vector table";
        out << what.str() << " has been changed\n";
        out << "original word: " << hex32(f.original_word);
        if (f.original_target)
            out << " -> " << hex32(*f.original_target);
        out << "\n";
        out << "new word: " << hex32(f.current_word);
        if (f.current_target)
            out << " -> " << hex32(*f.current_target);
        out << "\n";
    }

    if (r.swi_pointer_finding) {
        const SwiFinding& f = *r.swi_pointer_finding;
        out << "\n";
        if (f.offset == 0x420) {
            out << "The address of the SWI handler has been changed\n";
            out << "original address: " << hex32(f.original_word) << "\n";
            out << "new address: " << hex32(f.current_word) << "\n";
        } else {
            out << "A handler address has been planted at offset 0x" << std::hex << f.offset
                << std::dec << " of the exception vector table\n";
            out << "original word: " << hex32(f.original_word) << "\n";
            out << "new word: " << hex32(f.current_word) << "\n";
        }
    }

    for (const SwiFinding& f : r.swi_code_findings) {
        out << "\n";
        std::ostringstream what;
        what << "The instruction at offset 0x" << std::hex << f.offset << std::dec
             << " of the SWI handler";
        render_word_change(out, what.str(), f.original_word, f.current_word, f.annotation);
        if (f.table_pointer_redirect)
            out << "the system-call table pointer load now reads a planted literal\n";
    }

    if (r.cross_view) {
        const CrossViewReport& cv = *r.cross_view;
        out << "\n-----compare cache <-> tasks list (cross-view)-----\n";
        for (const TaskRecord& t : cv.hidden) {
            out << "Task with pid: " << t.pid << " , name: " << t.comm
                << " , file name: section_task_struct#0x" << std::hex
                << (t.cache_slot ? *t.cache_slot : 0) << std::dec
                << " found in cache but not in tasks list\n";
        }
        out << "Number of tasks that appear in list but not in cache: "
            << cv.missing_from_cache_count << "\n";
        out << "Number of tasks that appear in cache but not in list: " << cv.hidden.size()
            << "\n";
        if (!cv.filtered_transient.empty())
            out << "filtered transient tasks: " << cv.filtered_transient.size() << "\n";
    }

    for (const SkippedDetector& s : r.skipped)
        out << "\nskipped " << detector_name(s.id) << ": " << s.reason << "\n";

    if (verbose && !r.evidence.empty()) {
        out << "\nevidence:\n";
        for (const Evidence& e : r.evidence) {
            out << "[" << e.detector << "] window at " << hex64(e.base) << "\n";
            render_hex_block(out, "baseline", e.base, e.baseline);
            render_hex_block(out, "current", e.base, e.current);
        }
    }
    return out.str();
}

} // namespace

std::string render_report(const DetectionReport& r, ReportFormat format, bool verbose) {
    if (format == ReportFormat::Json)
        return report_to_json(r).dump(2) + "\n";
    return render_text(r, verbose);
}

int exit_code_for(const DetectionReport& r) {
    if (r.verdict == Verdict::RootkitAlert)
        return 3;
    if (!r.skipped.empty())
        return 4;
    return 0;
}

} // namespace joker
