use std::fmt;
use std::str::FromStr;

/// A single EVM instruction byte.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Opcode(pub u8);

#[derive(Debug, Clone, Copy)]
pub struct OpInfo {
    pub name: &'static str,
    pub inputs: u8,
    pub outputs: u8,
    /// Constant part of the gas cost.
    pub base_gas: u16,
}

const fn info(name: &'static str, inputs: u8, outputs: u8, base_gas: u16) -> Option<OpInfo> {
    Some(OpInfo {
        name,
        inputs,
        outputs,
        base_gas,
    })
}

const fn build_table() -> [Option<OpInfo>; 256] {
    let mut t: [Option<OpInfo>; 256] = [None; 256];
    t[0x00] = info("STOP", 0, 0, 0);
    t[0x01] = info("ADD", 2, 1, 3);
    t[0x02] = info("MUL", 2, 1, 5);
    t[0x03] = info("SUB", 2, 1, 3);
    t[0x04] = info("DIV", 2, 1, 5);
    t[0x05] = info("SDIV", 2, 1, 5);
    t[0x06] = info("MOD", 2, 1, 5);
    t[0x07] = info("SMOD", 2, 1, 5);
    t[0x08] = info("ADDMOD", 3, 1, 8);
    t[0x09] = info("MULMOD", 3, 1, 8);
    t[0x0a] = info("EXP", 2, 1, 10);
    t[0x0b] = info("SIGNEXTEND", 2, 1, 5);
    t[0x10] = info("LT", 2, 1, 3);
    t[0x11] = info("GT", 2, 1, 3);
    t[0x12] = info("SLT", 2, 1, 3);
    t[0x13] = info("SGT", 2, 1, 3);
    t[0x14] = info("EQ", 2, 1, 3);
    t[0x15] = info("ISZERO", 1, 1, 3);
    t[0x16] = info("AND", 2, 1, 3);
    t[0x17] = info("OR", 2, 1, 3);
    t[0x18] = info("XOR", 2, 1, 3);
    t[0x19] = info("NOT", 1, 1, 3);
    t[0x1a] = info("BYTE", 2, 1, 3);
    t[0x1b] = info("SHL", 2, 1, 3);
    t[0x1c] = info("SHR", 2, 1, 3);
    t[0x1d] = info("SAR", 2, 1, 3);
    t[0x20] = info("SHA3", 2, 1, 30);
    t[0x30] = info("ADDRESS", 0, 1, 2);
    t[0x31] = info("BALANCE", 1, 1, 400);
    t[0x32] = info("ORIGIN", 0, 1, 2);
    t[0x33] = info("CALLER", 0, 1, 2);
    t[0x34] = info("CALLVALUE", 0, 1, 2);
    t[0x35] = info("CALLDATALOAD", 1, 1, 3);
    t[0x36] = info("CALLDATASIZE", 0, 1, 2);
    t[0x37] = info("CALLDATACOPY", 3, 0, 3);
    t[0x38] = info("CODESIZE", 0, 1, 2);
    t[0x39] = info("CODECOPY", 3, 0, 3);
    t[0x3a] = info("GASPRICE", 0, 1, 2);
    t[0x3b] = info("EXTCODESIZE", 1, 1, 700);
    t[0x3c] = info("EXTCODECOPY", 4, 0, 700);
    t[0x3d] = info("RETURNDATASIZE", 0, 1, 2);
    t[0x3e] = info("RETURNDATACOPY", 3, 0, 3);
    t[0x3f] = info("EXTCODEHASH", 1, 1, 400);
    t[0x40] = info("BLOCKHASH", 1, 1, 20);
    t[0x41] = info("COINBASE", 0, 1, 2);
    t[0x42] = info("TIMESTAMP", 0, 1, 2);
    t[0x43] = info("NUMBER", 0, 1, 2);
    t[0x44] = info("DIFFICULTY", 0, 1, 2);
    t[0x45] = info("GASLIMIT", 0, 1, 2);
    t[0x50] = info("POP", 1, 0, 2);
    t[0x51] = info("MLOAD", 1, 1, 3);
    t[0x52] = info("MSTORE", 2, 0, 3);
    t[0x53] = info("MSTORE8", 2, 0, 3);
    t[0x54] = info("SLOAD", 1, 1, 200);
    t[0x55] = info("SSTORE", 2, 0, 0);
    t[0x56] = info("JUMP", 1, 0, 8);
    t[0x57] = info("JUMPI", 2, 0, 10);
    t[0x58] = info("PC", 0, 1, 2);
    t[0x59] = info("MSIZE", 0, 1, 2);
    t[0x5a] = info("GAS", 0, 1, 2);
    t[0x5b] = info("JUMPDEST", 0, 0, 1);
    let mut i = 0;
    while i < 32 {
        t[0x60 + i] = info(PUSH_NAMES[i], 0, 1, 3);
        i += 1;
    }
    let mut i = 0;
    while i < 16 {
        t[0x80 + i] = info(DUP_NAMES[i], i as u8 + 1, i as u8 + 2, 3);
        t[0x90 + i] = info(SWAP_NAMES[i], i as u8 + 2, i as u8 + 2, 3);
        i += 1;
    }
    let mut i = 0;
    while i < 5 {
        t[0xa0 + i] = info(LOG_NAMES[i], i as u8 + 2, 0, 375 + 375 * i as u16);
        i += 1;
    }
    t[0xf0] = info("CREATE", 3, 1, 32000);
    t[0xf1] = info("CALL", 7, 1, 700);
    t[0xf2] = info("CALLCODE", 7, 1, 700);
    t[0xf3] = info("RETURN", 2, 0, 0);
    t[0xf4] = info("DELEGATECALL", 6, 1, 700);
    t[0xf5] = info("CREATE2", 4, 1, 32000);
    t[0xfa] = info("STATICCALL", 6, 1, 700);
    t[0xfd] = info("REVERT", 2, 0, 0);
    t[0xfe] = info("INVALID", 0, 0, 0);
    t[0xff] = info("SELFDESTRUCT", 1, 0, 5000);
    t
}

const PUSH_NAMES: [&str; 32] = [
    "PUSH1", "PUSH2", "PUSH3", "PUSH4", "PUSH5", "PUSH6", "PUSH7", "PUSH8", "PUSH9", "PUSH10",
    "PUSH11", "PUSH12", "PUSH13", "PUSH14", "PUSH15", "PUSH16", "PUSH17", "PUSH18", "PUSH19",
    "PUSH20", "PUSH21", "PUSH22", "PUSH23", "PUSH24", "PUSH25", "PUSH26", "PUSH27", "PUSH28",
    "PUSH29", "PUSH30", "PUSH31", "PUSH32",
];
const DUP_NAMES: [&str; 16] = [
    "DUP1", "DUP2", "DUP3", "DUP4", "DUP5", "DUP6", "DUP7", "DUP8", "DUP9", "DUP10", "DUP11",
    "DUP12", "DUP13", "DUP14", "DUP15", "DUP16",
];
const SWAP_NAMES: [&str; 16] = [
    "SWAP1", "SWAP2", "SWAP3", "SWAP4", "SWAP5", "SWAP6", "SWAP7", "SWAP8", "SWAP9", "SWAP10",
    "SWAP11", "SWAP12", "SWAP13", "SWAP14", "SWAP15", "SWAP16",
];
const LOG_NAMES: [&str; 5] = ["LOG0", "LOG1", "LOG2", "LOG3", "LOG4"];

static TABLE: [Option<OpInfo>; 256] = build_table();

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown mnemonic {0:?}")]
pub struct UnknownMnemonic(pub String);

impl Opcode {
    pub const STOP: Opcode = Opcode(0x00);
    pub const ADD: Opcode = Opcode(0x01);
    pub const MUL: Opcode = Opcode(0x02);
    pub const SUB: Opcode = Opcode(0x03);
    pub const DIV: Opcode = Opcode(0x04);
    pub const SDIV: Opcode = Opcode(0x05);
    pub const MOD: Opcode = Opcode(0x06);
    pub const SMOD: Opcode = Opcode(0x07);
    pub const ADDMOD: Opcode = Opcode(0x08);
    pub const MULMOD: Opcode = Opcode(0x09);
    pub const EXP: Opcode = Opcode(0x0a);
    pub const SIGNEXTEND: Opcode = Opcode(0x0b);
    pub const LT: Opcode = Opcode(0x10);
    pub const GT: Opcode = Opcode(0x11);
    pub const SLT: Opcode = Opcode(0x12);
    pub const SGT: Opcode = Opcode(0x13);
    pub const EQ: Opcode = Opcode(0x14);
    pub const ISZERO: Opcode = Opcode(0x15);
    pub const AND: Opcode = Opcode(0x16);
    pub const OR: Opcode = Opcode(0x17);
    pub const XOR: Opcode = Opcode(0x18);
    pub const NOT: Opcode = Opcode(0x19);
    pub const BYTE: Opcode = Opcode(0x1a);
    pub const SHL: Opcode = Opcode(0x1b);
    pub const SHR: Opcode = Opcode(0x1c);
    pub const SAR: Opcode = Opcode(0x1d);
    pub const SHA3: Opcode = Opcode(0x20);
    pub const ADDRESS: Opcode = Opcode(0x30);
    pub const BALANCE: Opcode = Opcode(0x31);
    pub const ORIGIN: Opcode = Opcode(0x32);
    pub const CALLER: Opcode = Opcode(0x33);
    pub const CALLVALUE: Opcode = Opcode(0x34);
    pub const CALLDATALOAD: Opcode = Opcode(0x35);
    pub const CALLDATASIZE: Opcode = Opcode(0x36);
    pub const CALLDATACOPY: Opcode = Opcode(0x37);
    pub const CODESIZE: Opcode = Opcode(0x38);
    pub const CODECOPY: Opcode = Opcode(0x39);
    pub const GASPRICE: Opcode = Opcode(0x3a);
    pub const EXTCODESIZE: Opcode = Opcode(0x3b);
    pub const EXTCODECOPY: Opcode = Opcode(0x3c);
    pub const RETURNDATASIZE: Opcode = Opcode(0x3d);
    pub const RETURNDATACOPY: Opcode = Opcode(0x3e);
    pub const EXTCODEHASH: Opcode = Opcode(0x3f);
    pub const BLOCKHASH: Opcode = Opcode(0x40);
    pub const COINBASE: Opcode = Opcode(0x41);
    pub const TIMESTAMP: Opcode = Opcode(0x42);
    pub const NUMBER: Opcode = Opcode(0x43);
    pub const DIFFICULTY: Opcode = Opcode(0x44);
    pub const GASLIMIT: Opcode = Opcode(0x45);
    pub const POP: Opcode = Opcode(0x50);
    pub const MLOAD: Opcode = Opcode(0x51);
    pub const MSTORE: Opcode = Opcode(0x52);
    pub const MSTORE8: Opcode = Opcode(0x53);
    pub const SLOAD: Opcode = Opcode(0x54);
    pub const SSTORE: Opcode = Opcode(0x55);
    pub const JUMP: Opcode = Opcode(0x56);
    pub const JUMPI: Opcode = Opcode(0x57);
    pub const PC: Opcode = Opcode(0x58);
    pub const MSIZE: Opcode = Opcode(0x59);
    pub const GAS: Opcode = Opcode(0x5a);
    pub const JUMPDEST: Opcode = Opcode(0x5b);
    pub const PUSH1: Opcode = Opcode(0x60);
    pub const PUSH2: Opcode = Opcode(0x61);
    pub const PUSH4: Opcode = Opcode(0x63);
    pub const PUSH20: Opcode = Opcode(0x73);
    pub const PUSH32: Opcode = Opcode(0x7f);
    pub const DUP1: Opcode = Opcode(0x80);
    pub const SWAP1: Opcode = Opcode(0x90);
    pub const LOG0: Opcode = Opcode(0xa0);
    pub const LOG4: Opcode = Opcode(0xa4);
    pub const CREATE: Opcode = Opcode(0xf0);
    pub const CALL: Opcode = Opcode(0xf1);
    pub const CALLCODE: Opcode = Opcode(0xf2);
    pub const RETURN: Opcode = Opcode(0xf3);
    pub const DELEGATECALL: Opcode = Opcode(0xf4);
    pub const CREATE2: Opcode = Opcode(0xf5);
    pub const STATICCALL: Opcode = Opcode(0xfa);
    pub const REVERT: Opcode = Opcode(0xfd);
    pub const INVALID: Opcode = Opcode(0xfe);
    pub const SELFDESTRUCT: Opcode = Opcode(0xff);

    pub fn info(self) -> Option<&'static OpInfo> {
        TABLE[self.0 as usize].as_ref()
    }

    pub fn is_defined(self) -> bool {
        self.info().is_some()
    }

    pub fn name(self) -> &'static str {
        self.info().map(|i| i.name).unwrap_or("UNDEFINED")
    }

    pub fn to_number(self) -> u8 {
        self.0
    }

    /// Immediate operand width: 1..=32 for PUSH opcodes, 0 otherwise.
    pub fn push_width(self) -> usize {
        if (0x60..=0x7f).contains(&self.0) {
            (self.0 - 0x5f) as usize
        } else {
            0
        }
    }

    pub fn push(width: usize) -> Opcode {
        assert!((1..=32).contains(&width), "PUSH width out of range");
        Opcode(0x5f + width as u8)
    }

    pub fn dup(n: usize) -> Opcode {
        assert!((1..=16).contains(&n));
        Opcode(0x7f + n as u8)
    }

    pub fn swap(n: usize) -> Opcode {
        assert!((1..=16).contains(&n));
        Opcode(0x8f + n as u8)
    }

    pub fn log(topics: usize) -> Opcode {
        assert!(topics <= 4);
        Opcode(0xa0 + topics as u8)
    }

    pub fn is_call(self) -> bool {
        matches!(self.0, 0xf1 | 0xf2 | 0xf4 | 0xfa)
    }

    pub fn is_create(self) -> bool {
        matches!(self.0, 0xf0 | 0xf5)
    }

    /// Every defined opcode, in byte order.
    pub fn all() -> impl Iterator<Item = Opcode> {
        (0u8..=255).map(Opcode).filter(|op| op.is_defined())
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.info() {
            Some(info) => f.write_str(info.name),
            None => write!(f, "0x{:02x}", self.0),
        }
    }
}

impl fmt::Debug for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Opcode {
    type Err = UnknownMnemonic;

    /// Case-insensitive mnemonic lookup; `KECCAK256` is accepted for `SHA3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.to_ascii_uppercase();
        let wanted = if upper == "KECCAK256" { "SHA3" } else { upper.as_str() };
        TABLE
            .iter()
            .position(|e| e.map(|i| i.name == wanted).unwrap_or(false))
            .map(|i| Opcode(i as u8))
            .ok_or_else(|| UnknownMnemonic(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_shapes() {
        assert_eq!(Opcode::CALL.info().unwrap().inputs, 7);
        assert_eq!(Opcode::dup(16).info().unwrap().inputs, 16);
        assert_eq!(Opcode::swap(1).name(), "SWAP1");
        assert_eq!(Opcode::push(32), Opcode::PUSH32);
        assert_eq!(Opcode::PUSH20.push_width(), 20);
        assert_eq!(Opcode::ADD.push_width(), 0);
        assert!(!Opcode(0x0c).is_defined());
    }

    #[test]
    fn mnemonic_lookup() {
        assert_eq!("jumpi".parse::<Opcode>().unwrap(), Opcode::JUMPI);
        assert_eq!("KECCAK256".parse::<Opcode>().unwrap(), Opcode::SHA3);
        assert!("FOO".parse::<Opcode>().is_err());
        for op in Opcode::all() {
            assert_eq!(op.name().parse::<Opcode>().unwrap(), op);
        }
    }
}
