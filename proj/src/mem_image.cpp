#include "joker/mem_image.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace joker {

std::string hex32(std::uint32_t value) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%08x", value);
    return buf;
}

std::string hex64(std::uint64_t value) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%llx", static_cast<unsigned long long>(value));
    return buf;
}

void TranslationConstants::validate() const {
    if (page_size == 0 || (page_size & (page_size - 1)) != 0)
        throw ValidationError("translation.page_size must be a power of two, got " +
                              std::to_string(page_size));
    if (page_offset % page_size != 0)
        throw ValidationError("translation.page_offset 0x" + hex64(page_offset) +
                              " is not page-aligned");
    if (phys_offset % page_size != 0)
        throw ValidationError("translation.phys_offset 0x" + hex64(phys_offset) +
                              " is not page-aligned");
}

MemoryImage::MemoryImage(std::vector<Segment> segments) : segments_(std::move(segments)) {
    for (const Segment& s : segments_) {
        if (s.data.empty())
            throw ValidationError("segment at 0x" + hex64(s.base) + " is empty");
        if (s.base > std::numeric_limits<std::uint64_t>::max() - s.data.size())
            throw ValidationError("segment at 0x" + hex64(s.base) + " wraps the address space");
    }
    std::sort(segments_.begin(), segments_.end(),
              [](const Segment& a, const Segment& b) { return a.base < b.base; });
    for (std::size_t i = 1; i < segments_.size(); ++i) {
        const Segment& prev = segments_[i - 1];
        const Segment& cur = segments_[i];
        if (prev.base + prev.data.size() > cur.base)
            throw ValidationError("segments overlap: [0x" + hex64(prev.base) + ", 0x" +
                                  hex64(prev.base + prev.data.size()) + ") and [0x" +
                                  hex64(cur.base) + ", ...)");
    }
}

std::uint64_t MemoryImage::total_bytes() const {
    std::uint64_t total = 0;
    for (const Segment& s : segments_)
        total += s.data.size();
    return total;
}

const Segment* MemoryImage::segment_containing(PhysAddr at) const {
    auto it = std::upper_bound(segments_.begin(), segments_.end(), at,
                               [](PhysAddr a, const Segment& s) { return a < s.base; });
    if (it == segments_.begin())
        return nullptr;
    --it;
    if (at >= it->base && at < it->base + it->data.size())
        return &*it;
    return nullptr;
}

std::vector<std::uint8_t> MemoryImage::read_bytes(PhysAddr at, std::uint64_t len) const {
    std::vector<std::uint8_t> out;
    out.reserve(len);
    PhysAddr cursor = at;
    std::uint64_t remaining = len;
    while (remaining > 0) {
        const Segment* seg = segment_containing(cursor);
        if (!seg)
            throw UnmappedError("unmapped physical address 0x" + hex64(cursor) +
                                " (reading " + std::to_string(len) + " bytes at 0x" +
                                hex64(at) + ")",
                                cursor);
        const std::uint64_t off = cursor - seg->base;
        const std::uint64_t take = std::min<std::uint64_t>(remaining, seg->data.size() - off);
        out.insert(out.end(), seg->data.begin() + static_cast<std::ptrdiff_t>(off),
                   seg->data.begin() + static_cast<std::ptrdiff_t>(off + take));
        cursor += take;
        remaining -= take;
    }
    return out;
}

std::uint32_t MemoryImage::read_word32(PhysAddr at) const {
    const std::vector<std::uint8_t> b = read_bytes(at, 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

bool MemoryImage::covers(PhysAddr at, std::uint64_t len) const {
    try {
        (void)read_bytes(at, len);
        return true;
    } catch (const UnmappedError&) {
        return false;
    }
}

std::uint32_t MemorySource::read_word32(PhysAddr at) const {
    const std::vector<std::uint8_t> b = read(at, 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::vector<std::uint8_t> ImageSource::read(PhysAddr at, std::uint64_t len) const {
    return image_->read_bytes(at, len);
}

PhysAddr virt_to_phys_linear(const TranslationConstants& tc, VirtAddr v) {
    if (v < tc.page_offset)
        throw NotLinearMappedError("virtual address 0x" + hex32(v) +
                                   " is below PAGE_OFFSET 0x" + hex32(tc.page_offset) +
                                   "; not in the kernel linear map");
    return tc.phys_offset + static_cast<std::uint64_t>(v - tc.page_offset);
}

namespace {

constexpr std::uint32_t kL1TypeMask = 0x3;
constexpr std::uint32_t kL1Fault = 0x0;
constexpr std::uint32_t kL1Coarse = 0x1;
constexpr std::uint32_t kL1Section = 0x2;
constexpr std::uint32_t kSupersectionBit = 1u << 18;

} // namespace

PhysAddr walk_page_table(const MemorySource& mem, PhysAddr ttbr, VirtAddr v) {
    // L1: 4096 word entries, indexed by VA[31:20].
    const std::uint32_t l1_index = v >> 20;
    const std::uint32_t l1 = mem.read_word32(ttbr + static_cast<std::uint64_t>(l1_index) * 4);
    switch (l1 & kL1TypeMask) {
    case kL1Section:
        if (l1 & kSupersectionBit)
            throw TranslationFaultError("supersection descriptor 0x" + hex32(l1) +
                                        " for va 0x" + hex32(v) + " (unsupported)",
                                        l1, 1);
        return static_cast<PhysAddr>(l1 & 0xFFF00000u) + (v & 0x000FFFFFu);
    case kL1Coarse: {
        // L2: 256 word entries, indexed by VA[19:12].
        const PhysAddr l2_base = l1 & 0xFFFFFC00u;
        const std::uint32_t l2_index = (v >> 12) & 0xFF;
        const std::uint32_t l2 = mem.read_word32(l2_base + static_cast<std::uint64_t>(l2_index) * 4);
        if ((l2 & 0x3) == 0x1)
            throw TranslationFaultError("large-page descriptor 0x" + hex32(l2) + " for va 0x" +
                                        hex32(v) + " (unsupported)",
                                        l2, 2);
        if ((l2 & 0x2) == 0)
            throw TranslationFaultError("invalid L2 descriptor 0x" + hex32(l2) + " for va 0x" +
                                        hex32(v),
                                        l2, 2);
        return static_cast<PhysAddr>(l2 & 0xFFFFF000u) + (v & 0x00000FFFu);
    }
    case kL1Fault:
    default:
        throw TranslationFaultError("invalid L1 descriptor 0x" + hex32(l1) + " for va 0x" +
                                    hex32(v),
                                    l1, 1);
    }
}

PhysAddr walk_page_table(const MemoryImage& image, PhysAddr ttbr, VirtAddr v) {
    ImageSource src(image);
    return walk_page_table(src, ttbr, v);
}

namespace {

constexpr char kMagic[4] = {'J', 'K', 'M', 'I'};
constexpr char kLabelMagic[4] = {'J', 'K', 'L', 'B'};
constexpr std::uint16_t kVersion = 1;

void put_u16(std::ostream& out, std::uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF)};
    out.write(b, 2);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i)
        b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 8);
}

bool get_exact(std::istream& in, void* dst, std::size_t n) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    return static_cast<std::size_t>(in.gcount()) == n;
}

std::uint16_t get_u16(std::istream& in, const char* what) {
    std::uint8_t b[2];
    if (!get_exact(in, b, 2))
        throw FormatError(std::string("truncated container: missing ") + what);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint64_t get_u64(std::istream& in, const char* what) {
    std::uint8_t b[8];
    if (!get_exact(in, b, 8))
        throw FormatError(std::string("truncated container: missing ") + what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

} // namespace

void store_image(const MemoryImage& image, std::ostream& out) {
    out.write(kMagic, 4);
    put_u16(out, kVersion);
    put_u16(out, static_cast<std::uint16_t>(image.segments().size()));
    for (const Segment& s : image.segments()) {
        put_u64(out, s.base);
        put_u64(out, s.data.size());
        out.write(reinterpret_cast<const char*>(s.data.data()),
                  static_cast<std::streamsize>(s.data.size()));
    }
    bool any_label = false;
    for (const Segment& s : image.segments())
        any_label = any_label || !s.label.empty();
    if (any_label) {
        out.write(kLabelMagic, 4);
        put_u16(out, static_cast<std::uint16_t>(image.segments().size()));
        for (const Segment& s : image.segments()) {
            put_u16(out, static_cast<std::uint16_t>(s.label.size()));
            out.write(s.label.data(), static_cast<std::streamsize>(s.label.size()));
        }
    }
    if (!out)
        throw FormatError("write failure while storing image container");
}

MemoryImage load_image(std::istream& in) {
    char magic[4];
    if (!get_exact(in, magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("bad container magic (expected JKMI)");
    const std::uint16_t version = get_u16(in, "version");
    if (version != kVersion)
        throw FormatError("unsupported container version " + std::to_string(version));
    const std::uint16_t count = get_u16(in, "segment count");
    std::vector<Segment> segments;
    segments.reserve(count);
    for (std::uint16_t i = 0; i < count; ++i) {
        Segment s;
        s.base = get_u64(in, "segment base");
        const std::uint64_t len = get_u64(in, "segment length");
        s.data.resize(len);
        if (!get_exact(in, s.data.data(), len))
            throw FormatError("truncated container: segment " + std::to_string(i) +
                              " shorter than its declared length");
        segments.push_back(std::move(s));
    }
    // Optional label trailer.
    char trailer[4];
    if (get_exact(in, trailer, 4) && std::memcmp(trailer, kLabelMagic, 4) == 0) {
        const std::uint16_t n = get_u16(in, "label count");
        for (std::uint16_t i = 0; i < n && i < segments.size(); ++i) {
            const std::uint16_t len = get_u16(in, "label length");
            std::string label(len, '\0');
            if (!get_exact(in, label.data(), len))
                throw FormatError("truncated label trailer");
            segments[i].label = std::move(label);
        }
    }
    return MemoryImage(std::move(segments));
}

MemoryImage load_flat_blob(std::istream& in, PhysAddr base) {
    std::vector<std::uint8_t> data;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        data.insert(data.end(), buf, buf + in.gcount());
    if (data.empty())
        throw FormatError("flat blob is empty");
    Segment s;
    s.base = base;
    s.data = std::move(data);
    s.label = "flat";
    return MemoryImage({std::move(s)});
}

MemoryImage load_image_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError("cannot open image file: " + path);
    return load_image(in);
}

void store_image_file(const MemoryImage& image, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw FormatError("cannot create image file: " + path);
    store_image(image, out);
}

} // namespace joker
