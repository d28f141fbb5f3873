mod common;

use chainsleuth_core::evm::{create2_address, create_address, selector, Opcode};
use chainsleuth_core::instrument::Scratch;
use chainsleuth_core::{keccak256, Address, B256};
use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn create_address_matches_rlp_oracle(sender in any::<[u8; 20]>(), nonce in prop_oneof![0u64..300, any::<u64>()]) {
        prop_assert_eq!(create_address(&Address(sender), nonce).0, create_oracle(&sender, nonce));
    }

    #[test]
    fn create2_address_matches_oracle(
        sender in any::<[u8; 20]>(),
        salt in any::<[u8; 32]>(),
        init in proptest::collection::vec(any::<u8>(), 0..200),
    ) {
        prop_assert_eq!(create2_address(&Address(sender), &B256(salt), &init).0, create2_oracle(&sender, &salt, &init));
    }

    #[test]
    fn selector_matches_oracle(name in "[a-zA-Z_][a-zA-Z0-9_]{0,20}", args in proptest::collection::vec(prop_oneof![
        Just("uint256"), Just("address"), Just("bytes32"), Just("bool"), Just("bytes"), Just("string"),
    ], 0..4)) {
        let sig = format!("{name}({})", args.join(","));
        prop_assert_eq!(selector(&sig), selector_oracle(&sig));
    }

    #[test]
    fn keccak_matches_oracle(data in proptest::collection::vec(any::<u8>(), 0..300)) {
        prop_assert_eq!(keccak256(&data).0, keccak(&data));
    }
}

#[test]
fn keccak_of_empty_input() {
    assert_eq!(hex::encode(keccak256(b"").0), KECCAK_EMPTY);
}

#[test]
fn known_contract_addresses() {
    // Nonce 0 and nonce 1 of a commonly cited deployer.
    let sender: Address = "0x6ac7ea33f8831ea9dcc53393aaa88b25a785dbf0".parse().unwrap();
    assert_eq!(
        create_address(&sender, 0).to_string(),
        "0xcd234a471b72ba2f1ccf0a70fcaba648a5eecd8d"
    );
    assert_eq!(
        create_address(&sender, 1).to_string(),
        "0x343c43a37d37dff08ae8c4a11544c718abb4fcf8"
    );
}

fn word_strategy() -> impl Strategy<Value = [u8; 32]> {
    let small = (0u64..300).prop_map(|v| {
        let mut w = [0u8; 32];
        w[24..].copy_from_slice(&v.to_be_bytes());
        w
    });
    let near_max = (0u8..4).prop_map(|d| {
        let mut w = [0xff; 32];
        w[31] -= d;
        w
    });
    let power = (0usize..256, prop_oneof![Just(-1i8), Just(0), Just(1)]).prop_map(|(bit, adj)| {
        let mut w = [0u8; 32];
        w[31 - bit / 8] = 1 << (bit % 8);
        match adj {
            -1 => {
                // 2^bit - 1
                let mut borrow = true;
                for b in w.iter_mut().rev() {
                    if borrow {
                        borrow = *b == 0;
                        *b = b.wrapping_sub(1);
                    }
                }
            }
            1 => w[31] |= 1,
            _ => {}
        }
        w
    });
    prop_oneof![any::<[u8; 32]>(), small, near_max, power]
}

/// One transaction evaluating every arithmetic opcode on `(a, b, c)`.
fn evaluate_all(a: &[u8; 32], b: &[u8; 32], c: &[u8; 32]) -> Vec<[u8; 32]> {
    let mut code = Vec::new();
    let push = |code: &mut Vec<u8>, w: &[u8; 32]| {
        code.push(0x7f);
        code.extend_from_slice(w);
    };
    for (i, (op, k)) in ARITH_OPS.iter().enumerate() {
        let operands = [a, b, c];
        for w in operands[..*k].iter().rev() {
            push(&mut code, w);
        }
        code.push(op.0);
        code.extend([0x61, 0, 0]);
        let off = (i * 32) as u16;
        let n = code.len();
        code[n - 2..].copy_from_slice(&off.to_be_bytes());
        code.push(Opcode::MSTORE.0);
    }
    let len = (ARITH_OPS.len() * 32) as u16;
    code.push(0x61);
    code.extend(len.to_be_bytes());
    code.extend([0x60, 0x00, Opcode::RETURN.0]);
    let target = Address::from_low_u64(CONTRACT);
    let exec = run_code(&[(target, code)], target, Vec::new(), None, &mut Scratch::default());
    assert!(exec.success, "{:?}", exec.halt);
    exec.output.as_slice().chunks(32).map(|c| c.try_into().unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn arithmetic_matches_bigint_oracle(a in word_strategy(), b in word_strategy(), c in word_strategy()) {
        let got = evaluate_all(&a, &b, &c);
        for (i, (op, _)) in ARITH_OPS.iter().enumerate() {
            prop_assert_eq!(
                hex::encode(got[i]),
                hex::encode(arith_oracle(*op, &a, &b, &c)),
                "{} a={} b={} c={}", op.name(), hex::encode(a), hex::encode(b), hex::encode(c)
            );
        }
    }
}

#[test]
fn arithmetic_edge_cases() {
    let mut min = [0u8; 32];
    min[0] = 0x80;
    let neg_one = [0xff; 32];
    let mut one = [0u8; 32];
    one[31] = 1;
    let zero = [0u8; 32];
    for (a, b, c) in [
        (min, neg_one, zero),
        (neg_one, min, one),
        (zero, zero, zero),
        (neg_one, neg_one, neg_one),
        (one, min, neg_one),
    ] {
        let got = evaluate_all(&a, &b, &c);
        for (i, (op, _)) in ARITH_OPS.iter().enumerate() {
            assert_eq!(got[i], arith_oracle(*op, &a, &b, &c), "{}", op.name());
        }
    }
}
