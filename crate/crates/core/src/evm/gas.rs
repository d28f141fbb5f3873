//! A small, deterministic gas model. Costs follow the familiar fee tiers but
//! make no attempt to track any particular mainnet fork: replay verification
//! only compares gas against fixtures recorded under this same schedule.

use super::opcode::Opcode;

#[derive(Debug, Clone)]
pub struct GasSchedule {
    base: [u64; 256],
    pub memory_word: u64,
    pub memory_quad_divisor: u64,
    pub copy_word: u64,
    pub sha3_word: u64,
    pub exp_byte: u64,
    pub log_data_byte: u64,
    pub sstore_set: u64,
    pub sstore_reset: u64,
    pub call_value: u64,
    pub call_new_account: u64,
    pub call_stipend: u64,
    pub code_deposit_byte: u64,
    pub identity_base: u64,
    pub identity_word: u64,
    pub tx_base: u64,
    pub tx_create: u64,
    pub tx_data_zero: u64,
    pub tx_data_nonzero: u64,
}

impl Default for GasSchedule {
    fn default() -> Self {
        let mut base = [0u64; 256];
        for op in Opcode::all() {
            base[op.0 as usize] = op.info().map(|i| i.base_gas as u64).unwrap_or(0);
        }
        GasSchedule {
            base,
            memory_word: 3,
            memory_quad_divisor: 512,
            copy_word: 3,
            sha3_word: 6,
            exp_byte: 50,
            log_data_byte: 8,
            sstore_set: 20_000,
            sstore_reset: 5_000,
            call_value: 9_000,
            call_new_account: 25_000,
            call_stipend: 2_300,
            code_deposit_byte: 200,
            identity_base: 15,
            identity_word: 3,
            tx_base: 21_000,
            tx_create: 32_000,
            tx_data_zero: 4,
            tx_data_nonzero: 16,
        }
    }
}

pub fn words(bytes: u64) -> u64 {
    bytes.div_ceil(32)
}

impl GasSchedule {
    pub fn base_cost(&self, op: Opcode) -> u64 {
        self.base[op.0 as usize]
    }

    /// Total cost of a memory of `size_words` words; expansion charges the
    /// difference between the new and old totals.
    pub fn memory_cost(&self, size_words: u64) -> u64 {
        self.memory_word * size_words + size_words * size_words / self.memory_quad_divisor
    }

    pub fn intrinsic(&self, input: &[u8], is_create: bool) -> u64 {
        let data: u64 = input
            .iter()
            .map(|b| if *b == 0 { self.tx_data_zero } else { self.tx_data_nonzero })
            .sum();
        self.tx_base + data + if is_create { self.tx_create } else { 0 }
    }

    /// All but one 64th of the available gas.
    pub fn max_forward(&self, available: u64) -> u64 {
        available - available / 64
    }
}
