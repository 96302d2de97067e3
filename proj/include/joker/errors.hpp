#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "joker/addr.hpp"

namespace joker {

// Root of the toolkit's error hierarchy. Every failure surfaced to callers
// derives from this so the CLI can render one actionable message instead of
// a raw what() from some library internals.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed container/profile input (bad magic, bad version, syntax).
class FormatError : public Error {
public:
    using Error::Error;
};

// Structurally valid input violating an invariant (overlapping segments,
// inconsistent counts).
class ValidationError : public Error {
public:
    using Error::Error;
};

// A read touched physical memory the image/target does not back.
class UnmappedError : public Error {
public:
    UnmappedError(const std::string& msg, PhysAddr first_missing)
        : Error(msg), first_missing(first_missing) {}
    PhysAddr first_missing;
};

// virt_to_phys_linear asked to translate an address below the linear map.
class NotLinearMappedError : public Error {
public:
    using Error::Error;
};

// Page-table walk hit a faulting or unsupported descriptor.
class TranslationFaultError : public Error {
public:
    TranslationFaultError(const std::string& msg, std::uint32_t descriptor, int level)
        : Error(msg), descriptor(descriptor), level(level) {}
    std::uint32_t descriptor;
    int level;
};

// Profile / unistd.h text could not be parsed.
class ParseError : public Error {
public:
    using Error::Error;
};

// Index outside a declared table.
class RangeError : public Error {
public:
    using Error::Error;
};

// Instruction encoder given an unencodable operand.
class EncodingError : public Error {
public:
    using Error::Error;
};

// literal_target on an instruction kind with no pc-relative target.
class NotPcRelativeError : public Error {
public:
    using Error::Error;
};

// Wire-protocol rule violated (read while running, bad frame, NACK).
class ProtocolError : public Error {
public:
    using Error::Error;
};

// Transport-level failure talking to a target.
class ConnectionError : public Error {
public:
    using Error::Error;
};

// Detector configuration inconsistent with the images at hand.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Duplicate object identity inside one reconstructed view.
class DataIntegrityError : public Error {
public:
    using Error::Error;
};

// Fixture injection could not be applied (victim missing, index out of range).
class InjectionError : public Error {
public:
    using Error::Error;
};

// FixtureSpec itself is unbuildable (roster exceeds slab geometry, ...).
class SpecError : public Error {
public:
    using Error::Error;
};

} // namespace joker
