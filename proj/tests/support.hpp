#pragma once

// Shared helpers for the test suites: the forged sample corpus, a byte-diff
// oracle, and temp-file plumbing.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "joker/fixtures.hpp"
#include "joker/mem_image.hpp"

namespace support {

struct Corpus {
    joker::FixtureSpec spec;
    joker::ForgeOutput clean;
    joker::ForgeOutput s1, s2, s3, s4, s5, race;

    std::vector<const joker::ForgeOutput*> all() const {
        return {&clean, &s1, &s2, &s3, &s4, &s5, &race};
    }
    std::vector<const joker::ForgeOutput*> samples() const { return {&s1, &s2, &s3, &s4, &s5}; }
};

inline const Corpus& corpus() {
    static const Corpus c = [] {
        Corpus out;
        out.spec = joker::default_fixture_spec();
        out.clean = joker::forge_sample(out.spec, joker::SampleId::Clean);
        out.s1 = joker::forge_sample(out.spec, joker::SampleId::SyscallHook);
        out.s2 = joker::forge_sample(out.spec, joker::SampleId::EvtHook);
        out.s3 = joker::forge_sample(out.spec, joker::SampleId::SwiPointerHook);
        out.s4 = joker::forge_sample(out.spec, joker::SampleId::SwiCodeHook);
        out.s5 = joker::forge_sample(out.spec, joker::SampleId::HiddenTask);
        out.race = joker::forge_sample(out.spec, joker::SampleId::HaltRace);
        return out;
    }();
    return c;
}

// Physical addresses of every 32-bit word that differs between two images
// with identical segment geometry.
inline std::set<joker::PhysAddr> word_diff(const joker::MemoryImage& a,
                                           const joker::MemoryImage& b) {
    std::set<joker::PhysAddr> out;
    const auto& sa = a.segments();
    const auto& sb = b.segments();
    if (sa.size() != sb.size())
        throw std::logic_error("word_diff: segment counts differ");
    for (std::size_t i = 0; i < sa.size(); ++i) {
        if (sa[i].base != sb[i].base || sa[i].data.size() != sb[i].data.size())
            throw std::logic_error("word_diff: segment geometry differs");
        for (std::size_t off = 0; off + 4 <= sa[i].data.size(); off += 4)
            if (!std::equal(sa[i].data.begin() + off, sa[i].data.begin() + off + 4,
                            sb[i].data.begin() + off))
                out.insert(sa[i].base + off);
    }
    return out;
}

inline bool same_bytes(const joker::MemoryImage& a, const joker::MemoryImage& b) {
    const auto& sa = a.segments();
    const auto& sb = b.segments();
    if (sa.size() != sb.size())
        return false;
    for (std::size_t i = 0; i < sa.size(); ++i)
        if (sa[i].base != sb[i].base || sa[i].data != sb[i].data)
            return false;
    return true;
}

// Expands manifest byte ranges to the word addresses they cover.
inline std::set<joker::PhysAddr> words_in_ranges(const std::vector<joker::ByteRange>& ranges) {
    std::set<joker::PhysAddr> out;
    for (const joker::ByteRange& r : ranges)
        for (joker::PhysAddr a = r.base & ~joker::PhysAddr{3}; a < r.base + r.length; a += 4)
            out.insert(a);
    return out;
}

class TempDir {
public:
    TempDir() {
        auto pattern = std::filesystem::temp_directory_path() / "joker_test_XXXXXX";
        std::string buf = pattern.string();
        if (::mkdtemp(buf.data()) == nullptr)
            throw std::runtime_error("mkdtemp failed");
        path_ = buf;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

} // namespace support
