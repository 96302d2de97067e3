#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstring>
#include <mutex>
#include <optional>
#include <thread>
#include <utility>

#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include "joker/acquisition.hpp"
#include "joker/errors.hpp"
#include "wire_io.hpp"

namespace joker {

namespace {

// The device proper: one kernel memory space plus the background activity
// that animates it. All mutation happens on Running -> Halted transitions, so
// a halted target is bit-stable no matter how often it is read, and the whole
// evolution is a pure function of the config and the command sequence.
class SimDevice {
public:
    explicit SimDevice(SimDeviceConfig config)
        : cfg_(std::move(config)), base_(initial_image(cfg_, profile_)) {}

    // Returns false when already halted (idempotent halt).
    bool halt() {
        if (halted_)
            return false;
        std::optional<MutatorEvent> event;
        if (script_pos_ < cfg_.script.size())
            event = cfg_.script[script_pos_];
        const std::uint64_t race_seed = cfg_.seed + halt_count_;

        if (cfg_.race_mode == RaceMode::HaltMidUnlink) {
            if (event && !event->spawn) {
                // The halt lands inside this exit: the victim is already off
                // the list but its slab slot is still live, stamped with a
                // teardown signature. The exit completes on resume.
                frozen_ = inject_halt_race(base_, profile_, event->comm, race_seed);
                pending_exit_ = event;
            } else {
                if (event)
                    base_ = spawn_task(base_, profile_, event->pid, event->comm);
                // No scripted exit to interrupt; catch the resident short-lived
                // task mid-teardown instead. It survives the halt, so the
                // durable state is untouched.
                frozen_ = inject_halt_race(base_, profile_, cfg_.spec.samples.race_victim,
                                           race_seed);
            }
        } else {
            if (event)
                base_ = apply_event(*event);
            frozen_ = base_;
        }

        if (event)
            ++script_pos_;
        ++halt_count_;
        halted_ = true;
        return true;
    }

    // Returns false when the device was already running (warned no-op).
    bool resume() {
        if (!halted_)
            return false;
        if (pending_exit_) {
            base_ = exit_task(base_, profile_, pending_exit_->comm);
            pending_exit_.reset();
        }
        frozen_.reset();
        halted_ = false;
        return true;
    }

    struct ReadOutcome {
        wire::Status status = wire::Status::Ok;
        std::vector<std::uint8_t> bytes;
        PhysAddr missing = 0;
    };

    ReadOutcome read(PhysAddr base, std::uint32_t length) {
        ReadOutcome out;
        if (!halted_) {
            out.status = wire::Status::NotHalted;
            return out;
        }
        if (length > cfg_.max_read_chunk)
            throw ProtocolError("read of " + std::to_string(length) +
                                " bytes exceeds the max read chunk of " +
                                std::to_string(cfg_.max_read_chunk));
        try {
            out.bytes = frozen_->read_bytes(base, length);
        } catch (const UnmappedError& e) {
            out.status = wire::Status::Unmapped;
            out.missing = e.first_missing;
        }
        return out;
    }

    bool halted() const { return halted_; }
    std::uint32_t max_read_chunk() const { return cfg_.max_read_chunk; }

private:
    static MemoryImage initial_image(const SimDeviceConfig& cfg, KernelProfile& profile_out) {
        ForgeOutput out = forge_sample(cfg.spec, cfg.sample);
        profile_out = std::move(out.profile);
        return std::move(out.image);
    }

    MemoryImage apply_event(const MutatorEvent& event) {
        if (event.spawn)
            return spawn_task(base_, profile_, event.pid, event.comm);
        return exit_task(base_, profile_, event.comm);
    }

    SimDeviceConfig cfg_;
    KernelProfile profile_; // assigned by initial_image before base_ is built
    MemoryImage base_;
    std::optional<MemoryImage> frozen_;
    std::optional<MutatorEvent> pending_exit_;
    bool halted_ = false;
    std::size_t script_pos_ = 0;
    std::uint64_t halt_count_ = 0;
};

std::vector<std::uint8_t> make_frame(wire::Status status,
                                     const std::vector<std::uint8_t>& payload) {
    std::vector<std::uint8_t> out;
    out.reserve(5 + payload.size());
    out.push_back(static_cast<std::uint8_t>(status));
    wire_io::put32(out, static_cast<std::uint32_t>(payload.size()));
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

std::vector<std::uint8_t> error_frame(const std::string& message) {
    return make_frame(wire::Status::Err,
                      std::vector<std::uint8_t>(message.begin(), message.end()));
}

} // namespace

struct SimServer::Impl {
    explicit Impl(SimDeviceConfig config) : device(std::move(config)) {}

    SimDevice device;
    std::mutex mu; // guards device and conn_fds
    int listen_fd = -1;
    int stop_pipe[2] = {-1, -1};
    std::uint16_t port = 0;
    std::thread accept_thread;
    std::vector<int> conn_fds;
    std::vector<std::thread> conn_threads;
    std::atomic<bool> stopping{false};
    std::mutex stopped_mu;
    std::condition_variable stopped_cv;
    bool stopped = false;

    std::vector<std::uint8_t> handle_command(wire::Op op, int fd) {
        switch (op) {
        case wire::Op::Halt: {
            std::lock_guard<std::mutex> lock(mu);
            const bool changed = device.halt();
            return make_frame(wire::Status::Ok, {static_cast<std::uint8_t>(changed ? 1 : 0)});
        }
        case wire::Op::Resume: {
            std::lock_guard<std::mutex> lock(mu);
            const bool changed = device.resume();
            return make_frame(wire::Status::Ok, {static_cast<std::uint8_t>(changed ? 1 : 0)});
        }
        case wire::Op::Status: {
            std::lock_guard<std::mutex> lock(mu);
            std::vector<std::uint8_t> payload;
            payload.push_back(device.halted() ? 1 : 0);
            wire_io::put32(payload, device.max_read_chunk());
            return make_frame(wire::Status::Ok, payload);
        }
        case wire::Op::Read: {
            std::uint8_t operands[12];
            wire_io::recv_all(fd, operands, sizeof(operands), /*eof_ok=*/false);
            const PhysAddr base = wire_io::get64(operands);
            const std::uint32_t length = wire_io::get32(operands + 8);
            std::lock_guard<std::mutex> lock(mu);
            SimDevice::ReadOutcome outcome = device.read(base, length);
            if (outcome.status == wire::Status::Unmapped) {
                std::vector<std::uint8_t> payload;
                wire_io::put64(payload, outcome.missing);
                return make_frame(wire::Status::Unmapped, payload);
            }
            return make_frame(outcome.status, outcome.bytes);
        }
        }
        return error_frame("unknown opcode");
    }

    void serve_connection(int fd) {
        try {
            for (;;) {
                std::uint8_t op = 0;
                if (!wire_io::recv_all(fd, &op, 1, /*eof_ok=*/true))
                    break;
                std::vector<std::uint8_t> response;
                try {
                    response = handle_command(static_cast<wire::Op>(op), fd);
                } catch (const ConnectionError&) {
                    throw; // transport is gone; no point responding
                } catch (const Error& e) {
                    response = error_frame(e.what());
                }
                wire_io::send_all(fd, response.data(), response.size());
            }
        } catch (const ConnectionError&) {
            // peer vanished mid-frame; just drop the connection
        }
        {
            std::lock_guard<std::mutex> lock(mu);
            conn_fds.erase(std::remove(conn_fds.begin(), conn_fds.end(), fd), conn_fds.end());
        }
        ::close(fd);
    }

    void accept_loop() {
        for (;;) {
            pollfd fds[2] = {{listen_fd, POLLIN, 0}, {stop_pipe[0], POLLIN, 0}};
            if (::poll(fds, 2, -1) < 0) {
                if (errno == EINTR)
                    continue;
                break;
            }
            if (fds[1].revents != 0)
                break;
            if ((fds[0].revents & POLLIN) == 0)
                continue;
            const int fd = ::accept(listen_fd, nullptr, nullptr);
            if (fd < 0)
                continue;
            std::lock_guard<std::mutex> lock(mu);
            if (stopping.load()) {
                ::close(fd);
                break;
            }
            conn_fds.push_back(fd);
            conn_threads.emplace_back(&Impl::serve_connection, this, fd);
        }
    }
};

SimServer::SimServer(SimDeviceConfig config, std::uint16_t port)
    : impl_(std::make_unique<Impl>(std::move(config))) {
    impl_->listen_fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (impl_->listen_fd < 0)
        throw ConnectionError(std::string("cannot create socket: ") + std::strerror(errno));
    const int one = 1;
    ::setsockopt(impl_->listen_fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(impl_->listen_fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0 ||
        ::listen(impl_->listen_fd, 16) < 0)
        throw ConnectionError(std::string("cannot listen on port ") + std::to_string(port) +
                              ": " + std::strerror(errno));

    socklen_t addr_len = sizeof(addr);
    ::getsockname(impl_->listen_fd, reinterpret_cast<sockaddr*>(&addr), &addr_len);
    impl_->port = ntohs(addr.sin_port);

    if (::pipe(impl_->stop_pipe) < 0)
        throw ConnectionError(std::string("cannot create stop pipe: ") + std::strerror(errno));
    impl_->accept_thread = std::thread(&Impl::accept_loop, impl_.get());
}

SimServer::~SimServer() {
    stop();
}

std::uint16_t SimServer::port() const {
    return impl_->port;
}

std::string SimServer::endpoint() const {
    return "127.0.0.1:" + std::to_string(impl_->port);
}

void SimServer::stop() {
    if (impl_->stopping.exchange(true))
        return;
    const std::uint8_t byte = 0;
    (void)!::write(impl_->stop_pipe[1], &byte, 1);
    if (impl_->accept_thread.joinable())
        impl_->accept_thread.join();
    {
        std::lock_guard<std::mutex> lock(impl_->mu);
        for (const int fd : impl_->conn_fds)
            ::shutdown(fd, SHUT_RDWR);
    }
    for (std::thread& t : impl_->conn_threads)
        if (t.joinable())
            t.join();
    ::close(impl_->listen_fd);
    ::close(impl_->stop_pipe[0]);
    ::close(impl_->stop_pipe[1]);
    {
        std::lock_guard<std::mutex> lock(impl_->stopped_mu);
        impl_->stopped = true;
    }
    impl_->stopped_cv.notify_all();
}

void SimServer::wait() {
    std::unique_lock<std::mutex> lock(impl_->stopped_mu);
    impl_->stopped_cv.wait(lock, [this] { return impl_->stopped; });
}

} // namespace joker
