#include "joker/acquisition.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <utility>

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include "joker/errors.hpp"
#include "wire_io.hpp"

namespace joker {

namespace {

int connect_tcp(const std::string& host, std::uint16_t port) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* result = nullptr;
    const std::string service = std::to_string(port);
    if (const int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &result); rc != 0)
        throw ConnectionError("cannot resolve " + host + ": " + gai_strerror(rc));

    int fd = -1;
    std::string last_error = "no addresses";
    for (addrinfo* ai = result; ai != nullptr; ai = ai->ai_next) {
        fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
        if (fd < 0) {
            last_error = std::strerror(errno);
            continue;
        }
        if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0)
            break;
        last_error = std::strerror(errno);
        ::close(fd);
        fd = -1;
    }
    ::freeaddrinfo(result);
    if (fd < 0)
        throw ConnectionError("cannot connect to " + host + ":" + service + ": " + last_error);
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return fd;
}

} // namespace

TargetSession::TargetSession(int fd) : fd_(fd) {}

TargetSession::TargetSession(TargetSession&& other) noexcept
    : fd_(other.fd_), max_read_chunk_(other.max_read_chunk_) {
    other.fd_ = -1;
}

TargetSession& TargetSession::operator=(TargetSession&& other) noexcept {
    if (this != &other) {
        if (fd_ >= 0)
            ::close(fd_);
        fd_ = other.fd_;
        max_read_chunk_ = other.max_read_chunk_;
        other.fd_ = -1;
    }
    return *this;
}

TargetSession::~TargetSession() {
    if (fd_ >= 0)
        ::close(fd_);
}

TargetSession TargetSession::connect(const std::string& endpoint) {
    const auto colon = endpoint.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == endpoint.size())
        throw ConfigError("endpoint must be host:port, got '" + endpoint + "'");
    const std::string host = endpoint.substr(0, colon);
    const std::string port_text = endpoint.substr(colon + 1);
    unsigned long port = 0;
    try {
        std::size_t used = 0;
        port = std::stoul(port_text, &used);
        if (used != port_text.size() || port == 0 || port > 65535)
            throw std::invalid_argument(port_text);
    } catch (const std::exception&) {
        throw ConfigError("invalid port '" + port_text + "' in endpoint '" + endpoint + "'");
    }
    return connect(host, static_cast<std::uint16_t>(port));
}

TargetSession TargetSession::connect(const std::string& host, std::uint16_t port) {
    TargetSession session(connect_tcp(host, port));
    session.state(); // learn the target's max read chunk up front
    return session;
}

void TargetSession::send_request(wire::Op op, PhysAddr base, std::uint32_t length) {
    std::vector<std::uint8_t> frame;
    frame.push_back(static_cast<std::uint8_t>(op));
    if (op == wire::Op::Read) {
        wire_io::put64(frame, base);
        wire_io::put32(frame, length);
    }
    wire_io::send_all(fd_, frame.data(), frame.size());
}

std::pair<wire::Status, std::vector<std::uint8_t>> TargetSession::recv_response() {
    std::uint8_t head[5];
    wire_io::recv_all(fd_, head, sizeof(head), /*eof_ok=*/false);
    const auto status = static_cast<wire::Status>(head[0]);
    const std::uint32_t len = wire_io::get32(head + 1);
    std::vector<std::uint8_t> payload(len);
    if (len > 0)
        wire_io::recv_all(fd_, payload.data(), len, /*eof_ok=*/false);
    if (status == wire::Status::Err)
        throw ProtocolError("target error: " +
                            std::string(payload.begin(), payload.end()));
    return {status, std::move(payload)};
}

bool TargetSession::halt() {
    send_request(wire::Op::Halt);
    auto [status, payload] = recv_response();
    if (status != wire::Status::Ok || payload.size() != 1)
        throw ProtocolError("unexpected response to halt");
    return payload[0] != 0;
}

bool TargetSession::resume() {
    send_request(wire::Op::Resume);
    auto [status, payload] = recv_response();
    if (status != wire::Status::Ok || payload.size() != 1)
        throw ProtocolError("unexpected response to resume");
    if (payload[0] == 0)
        std::cerr << "warning: resume requested but the target was not halted\n";
    return payload[0] != 0;
}

TargetState TargetSession::state() {
    send_request(wire::Op::Status);
    auto [status, payload] = recv_response();
    if (status != wire::Status::Ok || payload.size() != 5)
        throw ProtocolError("unexpected response to status");
    max_read_chunk_ = wire_io::get32(payload.data() + 1);
    if (max_read_chunk_ == 0)
        throw ProtocolError("target reports a zero max read chunk");
    return payload[0] != 0 ? TargetState::Halted : TargetState::Running;
}

std::vector<std::uint8_t> TargetSession::read_memory(PhysAddr base, std::uint64_t length) {
    std::vector<std::uint8_t> out;
    out.reserve(length);
    std::uint64_t done = 0;
    while (done < length) {
        const auto chunk =
            static_cast<std::uint32_t>(std::min<std::uint64_t>(length - done, max_read_chunk_));
        send_request(wire::Op::Read, base + done, chunk);
        auto [status, payload] = recv_response();
        switch (status) {
        case wire::Status::Ok:
            if (payload.size() != chunk)
                throw ProtocolError("target returned a short read");
            out.insert(out.end(), payload.begin(), payload.end());
            break;
        case wire::Status::NotHalted:
            throw ProtocolError("target is running; halt it before reading memory");
        case wire::Status::Unmapped: {
            if (payload.size() != 8)
                throw ProtocolError("malformed unmapped response");
            const PhysAddr missing = wire_io::get64(payload.data());
            throw UnmappedError("target has no memory at " + hex64(missing) +
                                    " (reading " + hex64(base) + "+" +
                                    std::to_string(length) + ")",
                                missing);
        }
        default:
            throw ProtocolError("unexpected read response status " +
                                std::to_string(static_cast<int>(status)));
        }
        done += chunk;
    }
    return out;
}

void RegionRequest::validate() const {
    if (regions.empty())
        throw ValidationError("region request is empty");
    for (const Region& r : regions) {
        if (r.label.empty())
            throw ValidationError("region at " + hex64(r.base) + " has an empty label");
        if (r.length == 0)
            throw ValidationError("region '" + r.label + "' has zero length");
    }
    for (std::size_t i = 0; i < regions.size(); ++i) {
        for (std::size_t j = i + 1; j < regions.size(); ++j) {
            if (regions[i].label == regions[j].label)
                throw ValidationError("duplicate region label '" + regions[i].label + "'");
            const Region& a = regions[i].base <= regions[j].base ? regions[i] : regions[j];
            const Region& b = regions[i].base <= regions[j].base ? regions[j] : regions[i];
            if (b.base < a.base + a.length)
                throw ValidationError("regions '" + a.label + "' and '" + b.label + "' overlap");
        }
    }
}

namespace {

std::uint64_t parse_hex_field(const std::string& text, const std::string& what, int line_no) {
    std::string t = text;
    if (t.size() > 2 && t[0] == '0' && (t[1] == 'x' || t[1] == 'X'))
        t = t.substr(2);
    try {
        std::size_t used = 0;
        const std::uint64_t v = std::stoull(t, &used, 16);
        if (used != t.size())
            throw std::invalid_argument(t);
        return v;
    } catch (const std::exception&) {
        throw ParseError("regions line " + std::to_string(line_no) + ": bad " + what + " '" +
                         text + "'");
    }
}

} // namespace

RegionRequest parse_regions(std::istream& in) {
    RegionRequest request;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos)
            line.erase(hash);
        std::istringstream fields(line);
        std::string label, base_text, length_text, extra;
        if (!(fields >> label))
            continue;
        if (!(fields >> base_text >> length_text) || fields >> extra)
            throw ParseError("regions line " + std::to_string(line_no) +
                             ": expected 'label base_hex length_hex'");
        request.regions.push_back({label, parse_hex_field(base_text, "base", line_no),
                                   parse_hex_field(length_text, "length", line_no)});
    }
    return request;
}

RegionRequest parse_regions_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open regions file " + path);
    return parse_regions(in);
}

MemoryImage acquire_regions(TargetSession& session, const RegionRequest& request) {
    request.validate();
    std::vector<Segment> segments;
    segments.reserve(request.regions.size());
    for (const Region& r : request.regions)
        segments.push_back({r.base, session.read_memory(r.base, r.length), r.label});
    return MemoryImage(std::move(segments));
}

std::vector<MutatorEvent> parse_mutator_script(std::istream& in) {
    std::vector<MutatorEvent> events;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos)
            line.erase(hash);
        std::istringstream fields(line);
        std::string verb;
        if (!(fields >> verb))
            continue;
        MutatorEvent event;
        std::string extra;
        if (verb == "spawn") {
            event.spawn = true;
            if (!(fields >> event.pid >> event.comm) || fields >> extra)
                throw ParseError("script line " + std::to_string(line_no) +
                                 ": expected 'spawn <pid> <comm>'");
        } else if (verb == "exit") {
            event.spawn = false;
            if (!(fields >> event.comm) || fields >> extra)
                throw ParseError("script line " + std::to_string(line_no) +
                                 ": expected 'exit <comm>'");
        } else {
            throw ParseError("script line " + std::to_string(line_no) + ": unknown verb '" +
                             verb + "'");
        }
        events.push_back(std::move(event));
    }
    return events;
}

} // namespace joker
