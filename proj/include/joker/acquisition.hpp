#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "joker/fixtures.hpp"
#include "joker/mem_image.hpp"
#include "joker/profile.hpp"

namespace joker {

// On-chip-debug wire protocol. Every exchange is one request frame followed by
// one response frame over a byte stream (TCP).
//
//   request:  opcode u8, then for READ: base u64 LE, length u32 LE
//   response: status u8, payload length u32 LE, payload bytes
//
// Payloads by status: OK carries the read bytes (READ), a "state changed" flag
// byte (HALT / RESUME), or state u8 + max-read-chunk u32 LE (STATUS); ERR
// carries an ASCII message; NOT_HALTED is empty; UNMAPPED carries the first
// unmapped address as u64 LE.
namespace wire {

enum class Op : std::uint8_t {
    Halt = 0x01,
    Resume = 0x02,
    Read = 0x03,
    Status = 0x04,
};

enum class Status : std::uint8_t {
    Ok = 0x00,
    Err = 0x01,
    NotHalted = 0x02,
    Unmapped = 0x03,
};

inline constexpr std::uint32_t kDefaultMaxReadChunk = 4096;

} // namespace wire

enum class TargetState { Running, Halted };

// Client side of a debug connection. Reads are only legal while the target is
// halted; halting is idempotent and resuming a running target is a warned
// no-op, mirroring how a hardware debug port behaves.
class TargetSession {
public:
    // endpoint is "host:port".
    static TargetSession connect(const std::string& endpoint);
    static TargetSession connect(const std::string& host, std::uint16_t port);

    TargetSession(TargetSession&& other) noexcept;
    TargetSession& operator=(TargetSession&& other) noexcept;
    TargetSession(const TargetSession&) = delete;
    TargetSession& operator=(const TargetSession&) = delete;
    ~TargetSession();

    // Returns true when the target transitioned, false when it already was in
    // the requested state (second halt, or resume of a running target).
    bool halt();
    bool resume();

    TargetState state();
    std::uint32_t max_read_chunk() const { return max_read_chunk_; }

    // Reads length bytes at base, splitting into max_read_chunk()-sized wire
    // requests internally. Throws ProtocolError when the target is running,
    // UnmappedError when the range leaves mapped memory.
    std::vector<std::uint8_t> read_memory(PhysAddr base, std::uint64_t length);

private:
    explicit TargetSession(int fd);
    void send_request(wire::Op op, PhysAddr base = 0, std::uint32_t length = 0);
    std::pair<wire::Status, std::vector<std::uint8_t>> recv_response();

    int fd_ = -1;
    std::uint32_t max_read_chunk_ = wire::kDefaultMaxReadChunk;
};

// MemorySource adapter so the detectors can run against a live halted target
// exactly as they run against a loaded image.
class SessionSource : public MemorySource {
public:
    explicit SessionSource(TargetSession& session) : session_(&session) {}
    std::vector<std::uint8_t> read(PhysAddr at, std::uint64_t len) const override {
        return session_->read_memory(at, len);
    }

private:
    TargetSession* session_;
};

struct Region {
    std::string label;
    PhysAddr base = 0;
    std::uint64_t length = 0;
};

struct RegionRequest {
    std::vector<Region> regions;

    // Every length positive, labels unique, ranges non-overlapping.
    void validate() const;
};

// One region per line: "label base_hex length_hex" (an optional 0x prefix is
// accepted). Blank lines and # comments are ignored.
RegionRequest parse_regions(std::istream& in);
RegionRequest parse_regions_file(const std::string& path);

// Validates the request up front, then reads each region from the halted
// target and returns one labeled segment per region, in request order.
MemoryImage acquire_regions(TargetSession& session, const RegionRequest& request);

// One step of the simulated device's background activity. Events fire one per
// halt, in order, so a command script replays the same world every run.
struct MutatorEvent {
    bool spawn = true; // false: the named task exits
    std::int32_t pid = 0;
    std::string comm;
};

// Script lines: "spawn <pid> <comm>" or "exit <comm>".
std::vector<MutatorEvent> parse_mutator_script(std::istream& in);

enum class RaceMode {
    None,         // halts land between mutator steps
    HaltMidUnlink // halts land inside a task exit: unlinked, still in cache
};

struct SimDeviceConfig {
    FixtureSpec spec;                     // world geometry and roster
    SampleId sample = SampleId::Clean;    // initial memory contents
    std::vector<MutatorEvent> script;     // applied one event per halt
    RaceMode race_mode = RaceMode::None;
    std::uint64_t seed = 0;               // selects transient signatures
    std::uint32_t max_read_chunk = wire::kDefaultMaxReadChunk;
};

// A TCP server simulating one debug-port-attached device. All sessions share
// the device: a HALT from any connection freezes it for all of them, and the
// frozen memory stays bit-stable until a RESUME. Given the same config and the
// same command sequence, every run serves byte-identical memory.
class SimServer {
public:
    // port 0 binds an ephemeral port; port() reports the bound one.
    explicit SimServer(SimDeviceConfig config, std::uint16_t port = 0);
    ~SimServer();
    SimServer(const SimServer&) = delete;
    SimServer& operator=(const SimServer&) = delete;

    std::uint16_t port() const;
    std::string endpoint() const; // "127.0.0.1:<port>"

    void stop();    // idempotent; drops all connections
    void wait();    // blocks until stop() is called (for the CLI server mode)

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace joker
