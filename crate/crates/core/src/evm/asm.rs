//! Text assembler/disassembler and a label-aware bytecode builder.
//!
//! Text format: one instruction per line, `MNEMONIC [0xHEX]`, `#` starts a
//! comment. `DATA 0xHEX` emits raw bytes; the disassembler uses it for
//! undefined opcodes and truncated PUSH data so that every byte string
//! round-trips.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::opcode::Opcode;
use crate::primitives::{word_to_be, Address, Word};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsmError {
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: operand {operand} does not fit {mnemonic}")]
    Width { line: usize, mnemonic: String, operand: String },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("label `{0}` defined twice")]
    DuplicateLabel(String),
}

fn parse_hex_operand(line: usize, s: &str) -> Result<Vec<u8>, AsmError> {
    let digits = s.strip_prefix("0x").ok_or_else(|| AsmError::Syntax {
        line,
        message: format!("operand `{s}` must start with 0x"),
    })?;
    if digits.is_empty() {
        return Err(AsmError::Syntax {
            line,
            message: "empty operand".into(),
        });
    }
    let padded = if digits.len() % 2 == 1 {
        format!("0{digits}")
    } else {
        digits.to_owned()
    };
    hex::decode(&padded).map_err(|e| AsmError::Syntax {
        line,
        message: format!("operand `{s}`: {e}"),
    })
}

pub fn assemble(text: &str) -> Result<Vec<u8>, AsmError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut parts = body.split_whitespace();
        let mnemonic = parts.next().expect("non-empty line");
        let operand = parts.next();
        if parts.next().is_some() {
            return Err(AsmError::Syntax {
                line,
                message: "too many operands".into(),
            });
        }
        if mnemonic.eq_ignore_ascii_case("DATA") {
            let bytes = operand.ok_or_else(|| AsmError::Syntax {
                line,
                message: "DATA needs an operand".into(),
            })?;
            out.extend(parse_hex_operand(line, bytes)?);
            continue;
        }
        let op: Opcode = mnemonic.parse().map_err(|_| AsmError::UnknownMnemonic {
            line,
            mnemonic: mnemonic.to_owned(),
        })?;
        let width = op.push_width();
        match (width, operand) {
            (0, None) => out.push(op.0),
            (0, Some(_)) => {
                return Err(AsmError::Syntax {
                    line,
                    message: format!("{mnemonic} takes no operand"),
                })
            }
            (_, None) => {
                return Err(AsmError::Syntax {
                    line,
                    message: format!("{mnemonic} needs an operand"),
                })
            }
            (n, Some(o)) => {
                let mut bytes = parse_hex_operand(line, o)?;
                while bytes.len() > n && bytes[0] == 0 {
                    bytes.remove(0);
                }
                if bytes.len() > n {
                    return Err(AsmError::Width {
                        line,
                        mnemonic: mnemonic.to_owned(),
                        operand: o.to_owned(),
                    });
                }
                out.push(op.0);
                out.extend(std::iter::repeat_n(0, n - bytes.len()));
                out.extend(bytes);
            }
        }
    }
    Ok(out)
}

pub fn disassemble(code: &[u8]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < code.len() {
        let op = Opcode(code[i]);
        if !op.is_defined() {
            let _ = writeln!(out, "DATA 0x{:02x}", code[i]);
            i += 1;
            continue;
        }
        let n = op.push_width();
        if n == 0 {
            let _ = writeln!(out, "{}", op.name());
            i += 1;
        } else if i + n < code.len() {
            let _ = writeln!(out, "{} 0x{}", op.name(), hex::encode(&code[i + 1..=i + n]));
            i += 1 + n;
        } else {
            let _ = writeln!(out, "DATA 0x{}", hex::encode(&code[i..]));
            i = code.len();
        }
    }
    out
}

/// Builds bytecode programmatically, resolving jump labels at the end.
/// Label references are always encoded as PUSH2.
#[derive(Debug, Clone, Default)]
pub struct CodeBuilder {
    code: Vec<u8>,
    labels: HashMap<String, usize>,
    fixups: Vec<(usize, String)>,
    duplicate: Option<String>,
}

impl CodeBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }

    pub fn op(&mut self, op: Opcode) -> &mut Self {
        self.code.push(op.0);
        self
    }

    pub fn ops(&mut self, ops: &[Opcode]) -> &mut Self {
        for op in ops {
            self.code.push(op.0);
        }
        self
    }

    /// PUSH with the smallest width that holds `v` (at least one byte).
    pub fn push(&mut self, v: impl Into<Word>) -> &mut Self {
        let v = v.into();
        let bytes = word_to_be(v);
        let skip = bytes.iter().take_while(|b| **b == 0).count().min(31);
        self.push_bytes(&bytes[skip..])
    }

    pub fn push_bytes(&mut self, bytes: &[u8]) -> &mut Self {
        assert!((1..=32).contains(&bytes.len()), "push operand of {} bytes", bytes.len());
        self.code.push(Opcode::push(bytes.len()).0);
        self.code.extend_from_slice(bytes);
        self
    }

    pub fn push_address(&mut self, a: Address) -> &mut Self {
        self.push_bytes(a.as_bytes())
    }

    pub fn push_label(&mut self, name: &str) -> &mut Self {
        self.code.push(Opcode::PUSH2.0);
        self.fixups.push((self.code.len(), name.to_owned()));
        self.code.extend_from_slice(&[0, 0]);
        self
    }

    /// Marks the current offset with a JUMPDEST.
    pub fn label(&mut self, name: &str) -> &mut Self {
        if self.labels.insert(name.to_owned(), self.code.len()).is_some() {
            self.duplicate.get_or_insert_with(|| name.to_owned());
        }
        self.code.push(Opcode::JUMPDEST.0);
        self
    }

    /// Names the current offset without emitting code, for data sections.
    pub fn mark(&mut self, name: &str) -> &mut Self {
        if self.labels.insert(name.to_owned(), self.code.len()).is_some() {
            self.duplicate.get_or_insert_with(|| name.to_owned());
        }
        self
    }

    pub fn jump(&mut self, name: &str) -> &mut Self {
        self.push_label(name).op(Opcode::JUMP)
    }

    /// Jumps to `name` when the top of the stack is non-zero.
    pub fn jumpi(&mut self, name: &str) -> &mut Self {
        self.push_label(name).op(Opcode::JUMPI)
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.code.extend_from_slice(bytes);
        self
    }

    pub fn build(&self) -> Result<Vec<u8>, AsmError> {
        if let Some(d) = &self.duplicate {
            return Err(AsmError::DuplicateLabel(d.clone()));
        }
        let mut code = self.code.clone();
        for (pos, name) in &self.fixups {
            let target = *self.labels.get(name).ok_or_else(|| AsmError::UndefinedLabel(name.clone()))?;
            let t = u16::try_from(target).expect("code fits a PUSH2 offset");
            code[*pos..*pos + 2].copy_from_slice(&t.to_be_bytes());
        }
        Ok(code)
    }
}

/// Init code that runs `constructor` and then deploys `runtime`.
pub fn deployer(constructor: &[u8], runtime: &[u8]) -> Vec<u8> {
    // constructor ++ PUSH2 len DUP1 PUSH2 offset PUSH1 0 CODECOPY PUSH1 0 RETURN ++ runtime
    let tail_len = 3 + 1 + 3 + 2 + 1 + 2 + 1;
    let offset = constructor.len() + tail_len;
    let len = u16::try_from(runtime.len()).expect("runtime below 64 KiB");
    let off = u16::try_from(offset).expect("constructor below 64 KiB");
    let mut out = constructor.to_vec();
    out.push(Opcode::PUSH2.0);
    out.extend_from_slice(&len.to_be_bytes());
    out.push(Opcode::DUP1.0);
    out.push(Opcode::PUSH2.0);
    out.extend_from_slice(&off.to_be_bytes());
    out.extend_from_slice(&[Opcode::PUSH1.0, 0, Opcode::CODECOPY.0, Opcode::PUSH1.0, 0, Opcode::RETURN.0]);
    debug_assert_eq!(out.len(), offset);
    out.extend_from_slice(runtime);
    out
}
