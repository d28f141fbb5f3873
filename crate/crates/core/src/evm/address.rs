//! Contract address derivation and function selectors.

use crate::primitives::{keccak256, Address, B256};

fn rlp_u64(v: u64, out: &mut Vec<u8>) {
    match v {
        0 => out.push(0x80),
        1..=0x7f => out.push(v as u8),
        _ => {
            let be = v.to_be_bytes();
            let skip = be.iter().take_while(|b| **b == 0).count();
            out.push(0x80 + (8 - skip) as u8);
            out.extend_from_slice(&be[skip..]);
        }
    }
}

/// RLP encoding of the two-item list `[creator, nonce]`.
fn rlp_creator_nonce(creator: &Address, nonce: u64) -> Vec<u8> {
    let mut payload = Vec::with_capacity(30);
    payload.push(0x80 + 20);
    payload.extend_from_slice(creator.as_bytes());
    rlp_u64(nonce, &mut payload);
    let mut out = Vec::with_capacity(payload.len() + 1);
    // The payload is at most 30 bytes, so the short list form always applies.
    out.push(0xc0 + payload.len() as u8);
    out.extend_from_slice(&payload);
    out
}

fn low_20(hash: B256) -> Address {
    let mut out = [0u8; 20];
    out.copy_from_slice(&hash.0[12..]);
    Address(out)
}

/// Address of a contract created by `creator` when its nonce is `nonce`.
pub fn create_address(creator: &Address, nonce: u64) -> Address {
    low_20(keccak256(&rlp_creator_nonce(creator, nonce)))
}

/// Address of a contract created through CREATE2.
pub fn create2_address(creator: &Address, salt: &B256, init_code: &[u8]) -> Address {
    let mut buf = Vec::with_capacity(85);
    buf.push(0xff);
    buf.extend_from_slice(creator.as_bytes());
    buf.extend_from_slice(salt.as_bytes());
    buf.extend_from_slice(keccak256(init_code).as_bytes());
    low_20(keccak256(&buf))
}

/// First four bytes of the Keccak-256 hash of a canonical signature such as
/// `transfer(address,uint256)`.
pub fn selector(signature: &str) -> [u8; 4] {
    let h = keccak256(signature.as_bytes());
    [h.0[0], h.0[1], h.0[2], h.0[3]]
}
