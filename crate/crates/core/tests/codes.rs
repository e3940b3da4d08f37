use adl_core::codec::{
    concat, count_bracketed, decode_bounded_int, encode_bounded_int, BracketBuilder, BracketedString,
};
use adl_core::numerics::{Matrix, RngStream};
use adl_core::sketch::{decode_sketch, encode_sketch, encoded_length_bound, ksketch, Shape};
use proptest::prelude::*;

fn tree() -> impl Strategy<Value = BracketedString> {
    let leaf = any::<bool>().prop_map(BracketedString::leaf);
    leaf.prop_recursive(5, 64, 4, |inner| {
        prop::collection::vec(inner, 2..5).prop_map(|kids| {
            let mut b = BracketBuilder::new();
            b.open();
            for k in &kids {
                b.push(k);
            }
            b.close();
            b.finish()
        })
    })
}

proptest! {
    #[test]
    fn text_round_trip(s in tree()) {
        let text = s.serialize();
        prop_assert_eq!(BracketedString::deserialize(&text).unwrap(), s);
    }

    #[test]
    fn concat_keeps_bits(a in tree(), b in tree()) {
        let c = concat(&[a.clone(), b.clone()]).unwrap();
        prop_assert_eq!(c.len(), a.len() + b.len());
        let bits: Vec<bool> = a.bits().chain(b.bits()).collect();
        prop_assert_eq!(c.bits().collect::<Vec<_>>(), bits);
    }

    #[test]
    fn arbitrary_text_never_panics(bytes in prop::collection::vec(prop::sample::select(b"[]01 x".to_vec()), 0..64)) {
        if let Ok(s) = BracketedString::deserialize(&bytes) {
            prop_assert_eq!(BracketedString::deserialize(&s.serialize()).unwrap(), s);
        }
    }

    #[test]
    fn bounded_int_round_trip(lo in -1_000_000i64..1_000_000, span in 0i64..100_000, off in 0i64..100_000) {
        let hi = lo + span;
        let v = lo + off % (span + 1);
        let code = encode_bounded_int(v, lo, hi).unwrap();
        prop_assert_eq!(decode_bounded_int(&code, lo, hi).unwrap(), v);
    }

    #[test]
    fn sketch_code_round_trip(rows in 1usize..5, cols in 1usize..5, k in 1usize..6, seed in any::<u64>()) {
        let rng = RngStream::new(seed);
        let mut g = rng.derive(0).generator();
        let data: Vec<f64> = (0..rows * cols).map(|_| rand::Rng::random_range(&mut g, -2.0..2.0)).collect();
        let w = Matrix::new(rows, cols, data).unwrap();
        let m = w.frobenius_norm();
        let s = ksketch(&w, k, &rng.derive(1)).unwrap();
        let code = encode_sketch(&s, m).unwrap();
        prop_assert!(code.len() as u64 <= encoded_length_bound(Shape::matrix(rows, cols), k, m));
        prop_assert_eq!(decode_sketch(&code, Shape::matrix(rows, cols), k, m).unwrap(), s);
    }
}

// Brute force over token strings: a tree with n leaves has at most n - 1
// internal nodes, so at most 3n - 2 tokens.
fn brute_count(n: usize) -> u64 {
    let alphabet = *b"[]01";
    let mut count = 0;
    for tokens in 1..=3 * n - 2 {
        for code in 0..4usize.pow(tokens as u32) {
            let text: Vec<u8> = (0..tokens).map(|i| alphabet[code / 4usize.pow(i as u32) % 4]).collect();
            if let Ok(s) = BracketedString::deserialize(&text) {
                if (1..=n).contains(&s.len()) {
                    count += 1;
                }
            }
        }
    }
    count
}

#[test]
fn counts_match_enumeration() {
    for n in 1..=4 {
        assert_eq!(count_bracketed(n).unwrap(), brute_count(n), "n = {n}");
    }
}

#[test]
fn malformed_text_rejected() {
    for bad in ["[0]", "[01", "01]", "[0 1][1 0]", "[[0]1]", "2", "[0x]"] {
        assert!(BracketedString::deserialize(bad.as_bytes()).is_err(), "{bad:?} parsed");
    }
}

#[test]
fn out_of_range_ints_rejected() {
    assert!(encode_bounded_int(5, 0, 4).is_err());
    let code = encode_bounded_int(7, 0, 7).unwrap();
    assert!(decode_bounded_int(&code, 0, 6).is_err());
}

#[test]
fn wrong_length_sketch_rejected() {
    let w = Matrix::identity(3);
    let s = ksketch(&w, 2, &RngStream::new(3)).unwrap();
    let code = encode_sketch(&s, 2.0).unwrap();
    assert!(decode_sketch(&code, Shape::matrix(3, 3), 3, 2.0).is_err());
    assert!(decode_sketch(&code, Shape::matrix(3, 3), 1, 2.0).is_err());
}
