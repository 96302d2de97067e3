#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "joker/addr.hpp"
#include "joker/errors.hpp"

namespace joker {

// Linear-map translation constants plus the EVT / page-table anchors for one
// kernel build. page_offset/phys_offset are the PAGE_OFFSET/PHYS_OFFSET pair
// whose difference is the fixed virt->phys displacement.
struct TranslationConstants {
    VirtAddr page_offset = 0;
    PhysAddr phys_offset = 0;
    std::uint64_t page_size = 4096;
    PhysAddr evt_phys = 0;
    std::optional<PhysAddr> ttbr_phys;

    void validate() const; // throws ValidationError
};

// One contiguous run of physical bytes.
struct Segment {
    PhysAddr base = 0;
    std::vector<std::uint8_t> data;
    std::string label; // optional; survives the JKMI trailer, not the core format
};

// Immutable set of non-overlapping physical segments; the unit of acquisition
// and of analysis. All detector reads go through this (or through a live
// session exposing the same read contract).
class MemoryImage {
public:
    MemoryImage() = default;
    // Takes ownership; sorts by base and rejects empty or overlapping segments.
    explicit MemoryImage(std::vector<Segment> segments);

    const std::vector<Segment>& segments() const { return segments_; }
    std::uint64_t total_bytes() const;

    // Copies out exactly len bytes. A read may stitch across exactly-adjacent
    // segments; any hole inside [at, at+len) raises UnmappedError naming the
    // first missing address.
    std::vector<std::uint8_t> read_bytes(PhysAddr at, std::uint64_t len) const;

    std::uint32_t read_word32(PhysAddr at) const;

    bool covers(PhysAddr at, std::uint64_t len) const;

private:
    const Segment* segment_containing(PhysAddr at) const;

    std::vector<Segment> segments_; // sorted by base, non-overlapping, non-empty
};

// Read-side abstraction shared by stored images and live halted targets, so
// every detector runs unchanged against either.
class MemorySource {
public:
    virtual ~MemorySource() = default;
    virtual std::vector<std::uint8_t> read(PhysAddr at, std::uint64_t len) const = 0;

    std::uint32_t read_word32(PhysAddr at) const;
};

class ImageSource final : public MemorySource {
public:
    explicit ImageSource(const MemoryImage& image) : image_(&image) {}
    std::vector<std::uint8_t> read(PhysAddr at, std::uint64_t len) const override;

private:
    const MemoryImage* image_;
};

// Linear-map translation: phys_offset + (v - page_offset).
// Addresses below page_offset (notably the EVT at 0xFFFF0000) are not in the
// linear map and raise NotLinearMappedError; use walk_page_table or evt_phys.
PhysAddr virt_to_phys_linear(const TranslationConstants& tc, VirtAddr v);

// ARMv7-A short-descriptor walk: L1 1MiB sections and L2 small pages.
// Supersections and large pages raise TranslationFaultError (descriptor kept
// in the error), as do invalid descriptors.
PhysAddr walk_page_table(const MemorySource& mem, PhysAddr ttbr, VirtAddr v);
PhysAddr walk_page_table(const MemoryImage& image, PhysAddr ttbr, VirtAddr v);

// JKMI segmented container. The byte layout is fixed: magic "JKMI", version
// u16=1, segment count u16, then per segment base u64 LE + length u64 LE +
// raw bytes. An optional "JKLB" trailer preserves segment labels.
MemoryImage load_image(std::istream& in);
MemoryImage load_image_file(const std::string& path);
// Flat blob with an explicit base address (the CLI's --base path).
MemoryImage load_flat_blob(std::istream& in, PhysAddr base);
void store_image(const MemoryImage& image, std::ostream& out);
void store_image_file(const MemoryImage& image, const std::string& path);

} // namespace joker
