#include "joker/arm_codec.hpp"

#include <cstdio>

namespace joker::arm {

namespace {

constexpr std::uint32_t kNopWord = 0xE320F000;

std::uint32_t ror32(std::uint32_t v, unsigned amount) {
    amount &= 31;
    if (amount == 0)
        return v;
    return (v >> amount) | (v << (32 - amount));
}

} // namespace

Instruction decode(std::uint32_t word, VirtAddr fetch_addr) {
    Instruction i;
    i.raw = word;
    i.fetch_addr = fetch_addr;
    i.kind = Kind::Unknown;

    if ((word >> 28) != 0xE)
        return i;

    if (word == kNopWord) {
        i.kind = Kind::Nop;
        return i;
    }
    // LDR rd, [pc, #+/-imm12]: cond 1110, 010 1 U 0 0 1, Rn=1111.
    if ((word & 0x0F7F0000u) == 0x051F0000u) {
        i.kind = Kind::LdrLiteral;
        i.rd = (word >> 12) & 0xF;
        i.add = (word & (1u << 23)) != 0;
        i.imm = word & 0xFFF;
        return i;
    }
    // ADD rd, pc, #imm: cond 1110, 001 0100 S=0, Rn=1111.
    if ((word & 0x0FFF0000u) == 0x028F0000u) {
        i.kind = Kind::AddPcImm;
        i.rd = (word >> 12) & 0xF;
        const unsigned rot = (word >> 8) & 0xF;
        i.imm = ror32(word & 0xFF, 2 * rot);
        return i;
    }
    // B <offset24>: cond 1110, 101 0.
    if ((word & 0x0F000000u) == 0x0A000000u) {
        i.kind = Kind::Branch;
        i.imm24 = word & 0x00FFFFFFu;
        return i;
    }
    // SVC #imm24: cond 1110, 1111.
    if ((word & 0x0F000000u) == 0x0F000000u) {
        i.kind = Kind::Svc;
        i.imm24 = word & 0x00FFFFFFu;
        return i;
    }
    return i;
}

VirtAddr literal_target(const Instruction& i) {
    const VirtAddr pc = i.fetch_addr + 8;
    switch (i.kind) {
    case Kind::LdrLiteral:
        return i.add ? pc + i.imm : pc - i.imm;
    case Kind::AddPcImm:
        return pc + i.imm;
    case Kind::Branch: {
        std::int32_t off = static_cast<std::int32_t>(i.imm24 << 8) >> 8; // sign-extend 24
        return pc + static_cast<VirtAddr>(off << 2);
    }
    default:
        throw NotPcRelativeError("instruction 0x" + hex32(i.raw) +
                                 " has no pc-relative target");
    }
}

std::uint32_t encode_ldr_pc_literal(unsigned rd, std::uint32_t imm12, bool add) {
    if (rd > 15)
        throw EncodingError("register index " + std::to_string(rd) + " out of range");
    if (imm12 >= 4096)
        throw EncodingError("ldr literal offset " + std::to_string(imm12) +
                            " does not fit in 12 bits");
    std::uint32_t word = 0xE51F0000u | (rd << 12) | imm12;
    if (add)
        word |= 1u << 23;
    return word;
}

std::string register_name(unsigned r) {
    switch (r) {
    case 13: return "sp";
    case 14: return "lr";
    case 15: return "pc";
    default: return "r" + std::to_string(r & 0xF);
    }
}

std::string disassemble_line(const Instruction& i) {
    char buf[64];
    switch (i.kind) {
    case Kind::LdrLiteral:
        std::snprintf(buf, sizeof(buf), "ldr %s, [pc, #%s%u]", register_name(i.rd).c_str(),
                      i.add ? "" : "-", i.imm);
        return buf;
    case Kind::AddPcImm:
        std::snprintf(buf, sizeof(buf), "add %s, pc, #%u", register_name(i.rd).c_str(), i.imm);
        return buf;
    case Kind::Nop:
        return "nop";
    case Kind::Branch:
        std::snprintf(buf, sizeof(buf), "b 0x%x", literal_target(i));
        return buf;
    case Kind::Svc:
        std::snprintf(buf, sizeof(buf), "svc 0x%x", i.imm24);
        return buf;
    case Kind::Unknown:
    default:
        std::snprintf(buf, sizeof(buf), ".word 0x%08x", i.raw);
        return buf;
    }
}

} // namespace joker::arm
