#include "joker/profile.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <sstream>

#include "joker/errors.hpp"

namespace joker {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos)
        return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::uint64_t parse_number(const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    if (v.empty())
        throw ParseError("profile key '" + key + "' has an empty value");
    try {
        std::size_t pos = 0;
        unsigned long long n;
        if (v.size() > 2 && v[0] == '0' && (v[1] == 'x' || v[1] == 'X'))
            n = std::stoull(v.substr(2), &pos, 16), pos += 2;
        else
            n = std::stoull(v, &pos, 10);
        if (pos != v.size())
            throw ParseError("");
        return n;
    } catch (const std::exception&) {
        throw ParseError("profile key '" + key + "' is not a number: '" + v + "'");
    }
}

struct RawProfile {
    std::map<std::string, std::string> kv; // "section.key" -> value
    std::vector<std::string> syscalls;
    bool have_syscalls_section = false;
};

RawProfile read_raw(std::istream& in) {
    RawProfile raw;
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos)
            line = line.substr(0, hash);
        line = trim(line);
        if (line.empty())
            continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ParseError("line " + std::to_string(lineno) +
                                 ": unterminated section header '" + line + "'");
            section = trim(line.substr(1, line.size() - 2));
            if (section == "syscalls")
                raw.have_syscalls_section = true;
            continue;
        }
        if (section == "syscalls") {
            raw.syscalls.push_back(line);
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError("line " + std::to_string(lineno) + ": expected 'key = value', got '" +
                             line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty())
            throw ParseError("line " + std::to_string(lineno) + ": key '" + key +
                             "' outside any [section]");
        raw.kv[section + "." + key] = value;
    }
    return raw;
}

class FieldReader {
public:
    explicit FieldReader(const RawProfile& raw) : raw_(raw) {}

    std::uint64_t required(const std::string& key) {
        auto it = raw_.kv.find(key);
        if (it == raw_.kv.end())
            throw ParseError("profile is missing required key '" + key + "'");
        return parse_number(key, it->second);
    }

    std::uint64_t optional(const std::string& key, std::uint64_t def) {
        auto it = raw_.kv.find(key);
        if (it == raw_.kv.end())
            return def;
        return parse_number(key, it->second);
    }

    std::optional<std::uint64_t> maybe(const std::string& key) {
        auto it = raw_.kv.find(key);
        if (it == raw_.kv.end())
            return std::nullopt;
        return parse_number(key, it->second);
    }

    std::string text(const std::string& key, const std::string& def) {
        auto it = raw_.kv.find(key);
        return it == raw_.kv.end() ? def : it->second;
    }

private:
    const RawProfile& raw_;
};

} // namespace

void KernelProfile::validate() const {
    translation.validate();
    if (syscall_count != syscall_names.size())
        throw ValidationError("symbols.syscall_count (" + std::to_string(syscall_count) +
                              ") does not match the [syscalls] list length (" +
                              std::to_string(syscall_names.size()) + ")");
    if (task_struct_size == 0)
        throw ValidationError("task.size must be non-zero");
    const struct { const char* name; std::uint32_t off; } offs[] = {
        {"task.pid", task_offsets.pid},       {"task.comm", task_offsets.comm},
        {"task.state", task_offsets.state},   {"task.flags", task_offsets.flags},
        {"task.tasks_next", task_offsets.tasks_next},
        {"task.tasks_prev", task_offsets.tasks_prev},
    };
    for (const auto& o : offs)
        if (o.off >= task_struct_size)
            throw ValidationError(std::string(o.name) + " offset " + std::to_string(o.off) +
                                  " is outside task.size " + std::to_string(task_struct_size));
    if (task_offsets.comm_len < 1)
        throw ValidationError("task.comm_len must be >= 1");
    if (task_offsets.state_size != 4 && task_offsets.state_size != 8)
        throw ValidationError("task.state_size must be 4 or 8");
    if (slab.pfn_start >= slab.pfn_end)
        throw ValidationError("slab.pfn_start must be below slab.pfn_end");
    if (slab.page_desc_size == 0)
        throw ValidationError("slab.page_desc_size must be non-zero");
}

KernelProfile load_profile(std::istream& in) {
    RawProfile raw = read_raw(in);
    FieldReader f(raw);
    KernelProfile p;

    p.translation.page_offset = static_cast<VirtAddr>(f.required("translation.page_offset"));
    p.translation.phys_offset = f.required("translation.phys_offset");
    p.translation.page_size = f.optional("translation.page_size", 4096);
    p.translation.evt_phys = f.required("translation.evt_phys");
    if (auto ttbr = f.maybe("translation.ttbr_phys"))
        p.translation.ttbr_phys = *ttbr;

    p.sys_call_table_virt = static_cast<VirtAddr>(f.required("symbols.sys_call_table"));
    p.vector_swi_virt = static_cast<VirtAddr>(f.required("symbols.vector_swi"));
    p.swi_handler_len = static_cast<std::uint32_t>(f.optional("symbols.swi_handler_len", 512));
    p.init_task_virt = static_cast<VirtAddr>(f.required("symbols.init_task"));

    p.task_offsets.pid = static_cast<std::uint32_t>(f.required("task.pid"));
    p.task_offsets.comm = static_cast<std::uint32_t>(f.required("task.comm"));
    p.task_offsets.comm_len = static_cast<std::uint32_t>(f.optional("task.comm_len", 16));
    p.task_offsets.state = static_cast<std::uint32_t>(f.required("task.state"));
    p.task_offsets.state_size = static_cast<std::uint32_t>(f.optional("task.state_size", 4));
    p.task_offsets.flags = static_cast<std::uint32_t>(f.required("task.flags"));
    p.task_offsets.tasks_next = static_cast<std::uint32_t>(f.required("task.tasks_next"));
    p.task_offsets.tasks_prev = static_cast<std::uint32_t>(f.required("task.tasks_prev"));
    p.task_struct_size = static_cast<std::uint32_t>(f.required("task.size"));

    p.slab.mem_map_phys = f.required("slab.mem_map");
    p.slab.page_desc_size = static_cast<std::uint32_t>(f.optional("slab.page_desc_size", 32));
    p.slab.pfn_start = f.required("slab.pfn_start");
    p.slab.pfn_end = f.required("slab.pfn_end");
    p.slab.cache_name = f.text("slab.cache_name", "task_struct");

    p.filter.shutdown_mask = static_cast<std::uint32_t>(f.optional("filter.shutdown_mask", 0x3));
    p.filter.shutdown_value = static_cast<std::uint32_t>(f.optional("filter.shutdown_value", 0x2));
    p.filter.swapper_name = f.text("filter.swapper_name", "swapper");

    if (!raw.have_syscalls_section)
        throw ParseError("profile is missing required section [syscalls]");
    p.syscall_names = raw.syscalls;
    p.syscall_count =
        static_cast<std::uint32_t>(f.optional("symbols.syscall_count", p.syscall_names.size()));

    p.validate();
    return p;
}

KernelProfile load_profile_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw ParseError("cannot open profile file: " + path);
    return load_profile(in);
}

std::string save_profile(const KernelProfile& p) {
    std::ostringstream out;
    auto hex = [](std::uint64_t v) { return "0x" + hex64(v); };
    out << "# joker kernel profile\n";
    out << "[translation]\n";
    out << "page_offset = " << hex(p.translation.page_offset) << "\n";
    out << "phys_offset = " << hex(p.translation.phys_offset) << "\n";
    out << "page_size = " << hex(p.translation.page_size) << "\n";
    out << "evt_phys = " << hex(p.translation.evt_phys) << "\n";
    if (p.translation.ttbr_phys)
        out << "ttbr_phys = " << hex(*p.translation.ttbr_phys) << "\n";
    out << "\n[symbols]\n";
    out << "sys_call_table = " << hex(p.sys_call_table_virt) << "\n";
    out << "syscall_count = " << p.syscall_count << "\n";
    out << "vector_swi = " << hex(p.vector_swi_virt) << "\n";
    out << "swi_handler_len = " << hex(p.swi_handler_len) << "\n";
    out << "init_task = " << hex(p.init_task_virt) << "\n";
    out << "\n[task]\n";
    out << "pid = " << hex(p.task_offsets.pid) << "\n";
    out << "comm = " << hex(p.task_offsets.comm) << "\n";
    out << "comm_len = " << p.task_offsets.comm_len << "\n";
    out << "state = " << hex(p.task_offsets.state) << "\n";
    out << "state_size = " << p.task_offsets.state_size << "\n";
    out << "flags = " << hex(p.task_offsets.flags) << "\n";
    out << "tasks_next = " << hex(p.task_offsets.tasks_next) << "\n";
    out << "tasks_prev = " << hex(p.task_offsets.tasks_prev) << "\n";
    out << "size = " << hex(p.task_struct_size) << "\n";
    out << "\n[slab]\n";
    out << "mem_map = " << hex(p.slab.mem_map_phys) << "\n";
    out << "page_desc_size = " << p.slab.page_desc_size << "\n";
    out << "pfn_start = " << hex(p.slab.pfn_start) << "\n";
    out << "pfn_end = " << hex(p.slab.pfn_end) << "\n";
    out << "cache_name = " << p.slab.cache_name << "\n";
    out << "\n[filter]\n";
    out << "shutdown_mask = " << hex(p.filter.shutdown_mask) << "\n";
    out << "shutdown_value = " << hex(p.filter.shutdown_value) << "\n";
    out << "swapper_name = " << p.filter.swapper_name << "\n";
    out << "\n[syscalls]\n";
    for (const std::string& name : p.syscall_names)
        out << name << "\n";
    return out.str();
}

const std::string& syscall_name(const KernelProfile& p, std::uint32_t index) {
    if (index >= p.syscall_names.size())
        throw RangeError("syscall index " + std::to_string(index) + " out of range (count " +
                         std::to_string(p.syscall_names.size()) + ")");
    return p.syscall_names[index];
}

std::vector<std::string> parse_unistd(std::istream& in) {
    // #define __NR_<name> (<base> + <n>)   or   #define __NR_<name> <n>
    static const std::regex def_re(
        R"(^\s*#\s*define\s+__NR_(\w+)\s+(?:\(\s*\w+\s*\+\s*(\d+)\s*\)|(\d+))\s*$)");
    std::vector<std::string> names;
    std::string line;
    std::smatch m;
    while (std::getline(in, line)) {
        if (!std::regex_match(line, m, def_re))
            continue;
        const std::string name = m[1].str();
        if (name == "SYSCALL_BASE" || name.find("BASE") != std::string::npos)
            continue;
        const std::string num = m[2].matched ? m[2].str() : m[3].str();
        const std::size_t index = static_cast<std::size_t>(std::stoull(num));
        if (index >= names.size())
            names.resize(index + 1);
        if (!names[index].empty() && names[index] != name)
            throw ParseError("syscall index " + std::to_string(index) + " defined as both '" +
                             names[index] + "' and '" + name + "'");
        names[index] = name;
    }
    for (std::string& n : names)
        if (n.empty())
            n = "sys_ni_syscall";
    return names;
}

} // namespace joker
