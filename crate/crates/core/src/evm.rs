// SPDX-License-Identifier: Apache-2.0

//! Minimal deterministic bytecode machine. Enclave and App "code" is
//! written in this form so memory accesses, syscalls, faults, and
//! adversarial behavior stay scriptable and replayable.
//!
//! The machine has 16 registers, an instruction-indexed `rip`, and
//! byte-addressed 64-bit memory operands evaluated through the caller's
//! page table, mode, and VMPL. There are no privileged instructions: the
//! only way out of a program is a syscall, a trap, or `halt`.

use thiserror::Error;

use crate::mem::{Memory, PtId};
use crate::types::{CpuMode, Vmpl};
use crate::vcpu::Exception;

/// Register index, `r0`..`r15`.
pub type Reg = u8;

/// Ring-0-class leaves the App asks the driver to run via IOCTL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum IoctlLeaf {
    Ecreate,
    Eadd,
    Eextend,
    Einit,
    Eenter,
    Eresume,
    Eremove,
}

impl IoctlLeaf {
    pub fn name(&self) -> &'static str {
        match self {
            IoctlLeaf::Ecreate => "ecreate",
            IoctlLeaf::Eadd => "eadd",
            IoctlLeaf::Eextend => "eextend",
            IoctlLeaf::Einit => "einit",
            IoctlLeaf::Eenter => "eenter",
            IoctlLeaf::Eresume => "eresume",
            IoctlLeaf::Eremove => "eremove",
        }
    }
}

/// Syscall leaves the bytecode can raise. Enclave-internal leaves go to the
/// monitor's dispatcher; `Ioctl` leaves go to the guest driver. The monitor
/// refuses to route `Ioctl` leaves for enclave callers, and the driver
/// refuses enclave-internal leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyscallLeaf {
    Eexit,
    Ereport,
    Egetkey,
    Ioctl(IoctlLeaf),
}

/// Fault kinds a program can raise directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    PageFault,
    RmpFault,
    InvalidOpcode,
    GeneralProtection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instr {
    LoadImm(Reg, u64),
    Load(Reg, u64),
    Store(u64, Reg),
    Add(Reg, Reg),
    Xor(Reg, Reg),
    Jmp(usize),
    Jnz(Reg, usize),
    Syscall(SyscallLeaf),
    TriggerFault(FaultKind),
    Halt,
}

/// An assembled program. Jump targets are validated at construction.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program {
    pub instructions: Vec<Instr>,
    pub entry: usize,
}

impl Program {
    pub fn new(instructions: Vec<Instr>, entry: usize) -> Result<Self, AsmError> {
        let len = instructions.len();
        for (i, instr) in instructions.iter().enumerate() {
            let target = match instr {
                Instr::Jmp(t) | Instr::Jnz(_, t) => Some(*t),
                _ => None,
            };
            if let Some(t) = target {
                if t >= len {
                    return Err(AsmError::JumpOutOfRange { line: i, target: t, len });
                }
            }
        }
        if entry >= len && len > 0 {
            return Err(AsmError::JumpOutOfRange { line: 0, target: entry, len });
        }
        Ok(Program { instructions, entry })
    }
}

/// Effect of executing a single instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    Trap(Exception),
    /// Control wants to leave user code: the leaf plus the first six
    /// argument registers (r0..r5) at the time of the syscall.
    SyscallRequest(SyscallLeaf, [u64; 6]),
    Halted,
}

/// Result of running with a step budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Exited(SyscallLeaf, [u64; 6]),
    Trapped(Exception),
    BudgetExhausted,
    Halted,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvmError {
    #[error("step budget must be at least 1")]
    ZeroBudget,
}

/// Memory seen by a running program. Implementations bind a page table,
/// mode, and VMPL so every access is permission-checked.
pub trait Bus {
    fn load_u64(&mut self, gva: u64) -> Result<u64, Exception>;
    fn store_u64(&mut self, gva: u64, value: u64) -> Result<(), Exception>;
}

/// [`Bus`] over a [`Memory`] with a fixed translation context. Accesses are
/// byte-wise, so misaligned and page-crossing operands behave uniformly.
pub struct MemBus<'a> {
    pub mem: &'a mut Memory,
    pub pt: PtId,
    pub mode: CpuMode,
    pub vmpl: Vmpl,
}

impl Bus for MemBus<'_> {
    fn load_u64(&mut self, gva: u64) -> Result<u64, Exception> {
        let bytes = self
            .mem
            .read_virt(self.pt, gva, 8, self.mode, self.vmpl)
            .map_err(translate_to_exception)?;
        Ok(u64::from_le_bytes(bytes.try_into().expect("8 bytes")))
    }

    fn store_u64(&mut self, gva: u64, value: u64) -> Result<(), Exception> {
        self.mem
            .write_virt(self.pt, gva, &value.to_le_bytes(), self.mode, self.vmpl)
            .map_err(translate_to_exception)
    }
}

pub fn translate_to_exception(fault: crate::mem::TranslateFault) -> Exception {
    match fault {
        crate::mem::TranslateFault::Page(f) => Exception::PageFault(f),
        crate::mem::TranslateFault::Rmp(f) => Exception::RmpFault(f),
    }
}

/// Execute one instruction. Deterministic given (program, registers, rip,
/// memory); `rip` is an instruction index and must be in range.
pub fn step(
    program: &Program,
    regs: &mut [u64; 16],
    rip: &mut u64,
    bus: &mut impl Bus,
) -> StepOutcome {
    let idx = *rip as usize;
    let instr = match program.instructions.get(idx) {
        Some(i) => *i,
        None => {
            // Falling off the program is an execute fault at the bogus index.
            return StepOutcome::Trap(Exception::PageFault(crate::mem::PageFault {
                gva: *rip,
                access: crate::types::Access::Execute,
            }));
        }
    };
    match instr {
        Instr::LoadImm(r, v) => {
            regs[r as usize & 0xf] = v;
            *rip += 1;
            StepOutcome::Continue
        }
        Instr::Load(r, gva) => match bus.load_u64(gva) {
            Ok(v) => {
                regs[r as usize & 0xf] = v;
                *rip += 1;
                StepOutcome::Continue
            }
            Err(e) => StepOutcome::Trap(e),
        },
        Instr::Store(gva, r) => match bus.store_u64(gva, regs[r as usize & 0xf]) {
            Ok(()) => {
                *rip += 1;
                StepOutcome::Continue
            }
            Err(e) => StepOutcome::Trap(e),
        },
        Instr::Add(d, s) => {
            regs[d as usize & 0xf] = regs[d as usize & 0xf].wrapping_add(regs[s as usize & 0xf]);
            *rip += 1;
            StepOutcome::Continue
        }
        Instr::Xor(d, s) => {
            regs[d as usize & 0xf] ^= regs[s as usize & 0xf];
            *rip += 1;
            StepOutcome::Continue
        }
        Instr::Jmp(t) => {
            *rip = t as u64;
            StepOutcome::Continue
        }
        Instr::Jnz(r, t) => {
            if regs[r as usize & 0xf] != 0 {
                *rip = t as u64;
            } else {
                *rip += 1;
            }
            StepOutcome::Continue
        }
        Instr::Syscall(leaf) => {
            *rip += 1;
            let args = [regs[0], regs[1], regs[2], regs[3], regs[4], regs[5]];
            StepOutcome::SyscallRequest(leaf, args)
        }
        Instr::TriggerFault(kind) => {
            let exc = match kind {
                FaultKind::PageFault => Exception::PageFault(crate::mem::PageFault {
                    gva: 0,
                    access: crate::types::Access::Read,
                }),
                FaultKind::RmpFault => Exception::RmpFault(crate::mem::RmpFault {
                    spa: 0,
                    vmpl: 0,
                    access: crate::types::Access::Read,
                }),
                FaultKind::InvalidOpcode => Exception::InvalidOpcode,
                FaultKind::GeneralProtection => Exception::GeneralProtection,
            };
            StepOutcome::Trap(exc)
        }
        Instr::Halt => StepOutcome::Halted,
    }
}

/// Run until a syscall, a trap, a halt, or budget exhaustion. Budget
/// exhaustion models timer preemption; the vcpu layer maps it to a Timer
/// exception.
pub fn run(
    program: &Program,
    regs: &mut [u64; 16],
    rip: &mut u64,
    bus: &mut impl Bus,
    budget: u64,
) -> Result<RunOutcome, EvmError> {
    if budget == 0 {
        return Err(EvmError::ZeroBudget);
    }
    for _ in 0..budget {
        match step(program, regs, rip, bus) {
            StepOutcome::Continue => {}
            StepOutcome::Trap(e) => return Ok(RunOutcome::Trapped(e)),
            StepOutcome::SyscallRequest(leaf, args) => return Ok(RunOutcome::Exited(leaf, args)),
            StepOutcome::Halted => return Ok(RunOutcome::Halted),
        }
    }
    Ok(RunOutcome::BudgetExhausted)
}

// ---- textual assembly ----

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: unknown instruction '{text}'")]
    UnknownInstruction { line: usize, text: String },
    #[error("line {line}: bad operand '{text}'")]
    BadOperand { line: usize, text: String },
    #[error("instruction {line}: jump target {target} out of range (program length {len})")]
    JumpOutOfRange { line: usize, target: usize, len: usize },
}

fn parse_reg(tok: &str, line: usize) -> Result<Reg, AsmError> {
    let bad = || AsmError::BadOperand { line, text: tok.to_string() };
    let n: u8 = tok.strip_prefix('r').ok_or_else(bad)?.parse().map_err(|_| bad())?;
    if n > 15 {
        return Err(bad());
    }
    Ok(n)
}

fn parse_num(tok: &str, line: usize) -> Result<u64, AsmError> {
    let bad = || AsmError::BadOperand { line, text: tok.to_string() };
    if let Some(hex) = tok.strip_prefix("0x") {
        u64::from_str_radix(hex, 16).map_err(|_| bad())
    } else {
        tok.parse().map_err(|_| bad())
    }
}

fn parse_leaf(tok: &str, line: usize) -> Result<SyscallLeaf, AsmError> {
    let leaf = match tok {
        "eexit" => SyscallLeaf::Eexit,
        "ereport" => SyscallLeaf::Ereport,
        "egetkey" => SyscallLeaf::Egetkey,
        "ioctl.ecreate" => SyscallLeaf::Ioctl(IoctlLeaf::Ecreate),
        "ioctl.eadd" => SyscallLeaf::Ioctl(IoctlLeaf::Eadd),
        "ioctl.eextend" => SyscallLeaf::Ioctl(IoctlLeaf::Eextend),
        "ioctl.einit" => SyscallLeaf::Ioctl(IoctlLeaf::Einit),
        "ioctl.eenter" => SyscallLeaf::Ioctl(IoctlLeaf::Eenter),
        "ioctl.eresume" => SyscallLeaf::Ioctl(IoctlLeaf::Eresume),
        "ioctl.eremove" => SyscallLeaf::Ioctl(IoctlLeaf::Eremove),
        _ => return Err(AsmError::UnknownInstruction { line, text: tok.to_string() }),
    };
    Ok(leaf)
}

/// Parse the one-instruction-per-line assembly form. `#` and `;` start
/// comments; an optional `.entry N` directive sets the entry index.
pub fn parse_program(text: &str) -> Result<Program, AsmError> {
    let mut instructions = Vec::new();
    let mut entry = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let code = raw.split(['#', ';']).next().unwrap_or("").trim();
        if code.is_empty() {
            continue;
        }
        let lowered = code.to_ascii_lowercase();
        let mut parts = lowered.split_whitespace();
        let op = parts.next().unwrap();
        let rest: Vec<String> =
            parts.collect::<Vec<_>>().join(" ").split(',').map(|s| s.trim().to_string()).collect();
        let arg = |i: usize| -> Result<&str, AsmError> {
            rest.get(i)
                .map(|s| s.as_str())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| AsmError::BadOperand { line, text: code.to_string() })
        };
        let instr = match op {
            ".entry" => {
                entry = parse_num(arg(0)?, line)? as usize;
                continue;
            }
            "loadimm" => Instr::LoadImm(parse_reg(arg(0)?, line)?, parse_num(arg(1)?, line)?),
            "load" => Instr::Load(parse_reg(arg(0)?, line)?, parse_num(arg(1)?, line)?),
            "store" => Instr::Store(parse_num(arg(0)?, line)?, parse_reg(arg(1)?, line)?),
            "add" => Instr::Add(parse_reg(arg(0)?, line)?, parse_reg(arg(1)?, line)?),
            "xor" => Instr::Xor(parse_reg(arg(0)?, line)?, parse_reg(arg(1)?, line)?),
            "jmp" => Instr::Jmp(parse_num(arg(0)?, line)? as usize),
            "jnz" => Instr::Jnz(parse_reg(arg(0)?, line)?, parse_num(arg(1)?, line)? as usize),
            "syscall" => Instr::Syscall(parse_leaf(arg(0)?, line)?),
            "fault" => {
                let kind = match arg(0)? {
                    "page-fault" => FaultKind::PageFault,
                    "rmp-fault" => FaultKind::RmpFault,
                    "invalid-opcode" => FaultKind::InvalidOpcode,
                    "general-protection" => FaultKind::GeneralProtection,
                    other => {
                        return Err(AsmError::UnknownInstruction {
                            line,
                            text: other.to_string(),
                        })
                    }
                };
                Instr::TriggerFault(kind)
            }
            "halt" => Instr::Halt,
            _ => return Err(AsmError::UnknownInstruction { line, text: code.to_string() }),
        };
        instructions.push(instr);
    }
    Program::new(instructions, entry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::PtEntry;
    use crate::types::{ContextTag, PAGE_SIZE};

    fn scratch_memory() -> (Memory, PtId) {
        let mut mem = Memory::new(16);
        mem.carve_layout(8, 4).unwrap();
        let pt = mem.create_table(ContextTag::AppUser(1));
        let entry = PtEntry {
            gpa: 10 * PAGE_SIZE,
            user: true,
            writable: true,
            executable: false,
            immutable: false,
        };
        mem.table_mut(pt).unwrap().map_page(0x7000_0000, entry).unwrap();
        (mem, pt)
    }

    #[test]
    fn store_then_load_roundtrip() {
        let (mut mem, pt) = scratch_memory();
        let program = parse_program(
            "loadimm r1, 0x1122334455667788\n\
             store 0x7000_0040, r1\n\
             load r2, 0x7000_0040\n\
             halt\n"
                .replace('_', "")
                .as_str(),
        )
        .unwrap();
        let mut regs = [0u64; 16];
        let mut rip = 0u64;
        let mut bus = MemBus { mem: &mut mem, pt, mode: CpuMode::User, vmpl: 1 };
        let out = run(&program, &mut regs, &mut rip, &mut bus, 100).unwrap();
        assert_eq!(out, RunOutcome::Halted);
        assert_eq!(regs[2], 0x1122334455667788);
    }

    #[test]
    fn load_outside_table_traps_page_fault() {
        let (mut mem, pt) = scratch_memory();
        let program =
            Program::new(vec![Instr::Load(0, 0x9000_0000), Instr::Halt], 0).unwrap();
        let mut regs = [0u64; 16];
        let mut rip = 0u64;
        let mut bus = MemBus { mem: &mut mem, pt, mode: CpuMode::User, vmpl: 1 };
        match run(&program, &mut regs, &mut rip, &mut bus, 10).unwrap() {
            RunOutcome::Trapped(Exception::PageFault(f)) => assert_eq!(f.gva, 0x9000_0000),
            other => panic!("expected page fault, got {other:?}"),
        }
    }

    #[test]
    fn trigger_fault_traps() {
        let (mut mem, pt) = scratch_memory();
        let program = parse_program("fault invalid-opcode\n").unwrap();
        let mut regs = [0u64; 16];
        let mut rip = 0u64;
        let mut bus = MemBus { mem: &mut mem, pt, mode: CpuMode::User, vmpl: 1 };
        assert_eq!(
            run(&program, &mut regs, &mut rip, &mut bus, 10).unwrap(),
            RunOutcome::Trapped(Exception::InvalidOpcode)
        );
    }

    #[test]
    fn infinite_loop_exhausts_budget() {
        let (mut mem, pt) = scratch_memory();
        let program = parse_program("jmp 0\n").unwrap();
        let mut regs = [0u64; 16];
        let mut rip = 0u64;
        let mut bus = MemBus { mem: &mut mem, pt, mode: CpuMode::User, vmpl: 1 };
        assert_eq!(
            run(&program, &mut regs, &mut rip, &mut bus, 10_000).unwrap(),
            RunOutcome::BudgetExhausted
        );
    }

    #[test]
    fn three_instruction_eexit_in_three_steps() {
        let (mut mem, pt) = scratch_memory();
        let program =
            parse_program("loadimm r0, 1\nadd r0, r0\nsyscall eexit\n").unwrap();
        let mut regs = [0u64; 16];
        let mut rip = 0u64;
        let mut bus = MemBus { mem: &mut mem, pt, mode: CpuMode::User, vmpl: 1 };
        assert_eq!(
            run(&program, &mut regs, &mut rip, &mut bus, 3).unwrap(),
            RunOutcome::Exited(SyscallLeaf::Eexit, [2, 0, 0, 0, 0, 0])
        );
    }

    #[test]
    fn zero_budget_rejected() {
        let (mut mem, pt) = scratch_memory();
        let program = parse_program("halt\n").unwrap();
        let mut regs = [0u64; 16];
        let mut rip = 0u64;
        let mut bus = MemBus { mem: &mut mem, pt, mode: CpuMode::User, vmpl: 1 };
        assert_eq!(
            run(&program, &mut regs, &mut rip, &mut bus, 0),
            Err(EvmError::ZeroBudget)
        );
    }

    #[test]
    fn jump_targets_validated() {
        assert!(matches!(
            Program::new(vec![Instr::Jmp(7)], 0),
            Err(AsmError::JumpOutOfRange { .. })
        ));
        assert!(parse_program("jnz r1, 9\n").is_err());
    }

    #[test]
    fn parser_accepts_comments_and_hex() {
        let p = parse_program(
            "# setup\nloadimm r1, 0x10 ; hex imm\n.entry 0\nsyscall ioctl.eenter\nhalt\n",
        )
        .unwrap();
        assert_eq!(p.instructions.len(), 3);
        assert_eq!(
            p.instructions[1],
            Instr::Syscall(SyscallLeaf::Ioctl(IoctlLeaf::Eenter))
        );
    }

    #[test]
    fn identical_inputs_identical_traces() {
        let (mut mem, pt) = scratch_memory();
        let program = parse_program(
            "loadimm r1, 5\nloadimm r2, 3\nadd r1, r2\nstore 0x70000000, r1\nload r3, 0x70000000\nsyscall eexit\n",
        )
        .unwrap();
        let run_once = |mem: &mut Memory| {
            let mut regs = [0u64; 16];
            let mut rip = 0u64;
            let mut trace = Vec::new();
            let mut bus = MemBus { mem, pt, mode: CpuMode::User, vmpl: 1 };
            loop {
                let out = step(&program, &mut regs, &mut rip, &mut bus);
                trace.push((rip, regs, out));
                if !matches!(out, StepOutcome::Continue) {
                    break;
                }
            }
            trace
        };
        let t1 = run_once(&mut mem);
        let (mut mem2, _) = scratch_memory();
        let t2 = run_once(&mut mem2);
        assert_eq!(t1, t2);
    }
}
