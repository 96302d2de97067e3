#pragma once

#include <cstdint>
#include <string>

#include "joker/addr.hpp"
#include "joker/errors.hpp"

namespace joker::arm {

// The detectors and forge only ever meet a handful of encodings: the EVT's
// branch/svc/ldr-pc vectors, the SWI handler's table-pointer add, and the NOP
// slot rootkits repurpose. Everything else decodes as Unknown.
enum class Kind {
    LdrLiteral, // LDR rd, [pc, #+/-imm12]
    AddPcImm,   // ADD rd, pc, #imm (rotated immediate)
    Nop,        // 0xE320F000
    Branch,     // B <signed offset24>
    Svc,        // SVC #imm24
    Unknown,
};

struct Instruction {
    std::uint32_t raw = 0;
    VirtAddr fetch_addr = 0;
    Kind kind = Kind::Unknown;
    // LdrLiteral / AddPcImm
    unsigned rd = 0;
    bool add = true;            // LdrLiteral U bit
    std::uint32_t imm = 0;      // imm12 for LdrLiteral, rotated value for AddPcImm
    // Branch / Svc
    std::uint32_t imm24 = 0;    // raw 24-bit field
};

// Classifies one ALways-condition word. Conditional variants decode as
// Unknown; the structures under inspection use unconditional encodings only.
Instruction decode(std::uint32_t word, VirtAddr fetch_addr);

// PC-relative target with the ARM pipeline constant (effective PC =
// fetch_addr + 8). Raises NotPcRelativeError for kinds without one.
VirtAddr literal_target(const Instruction& i);

// ALways-condition LDR rd, [pc, #+/-imm12]. imm12 must fit 12 bits.
std::uint32_t encode_ldr_pc_literal(unsigned rd, std::uint32_t imm12, bool add = true);

// Stable lower-case text, e.g. "ldr pc, [pc, #1040]"; Unknown renders as
// ".word 0x%08x".
std::string disassemble_line(const Instruction& i);

std::string register_name(unsigned r);

} // namespace joker::arm
