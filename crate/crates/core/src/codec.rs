//! Bracketed strings: ordered trees with 0/1 leaves and no unary nodes.
//!
//! Length is the number of leaves; bracket structure is free. The canonical
//! text form writes every internal node as `[` children `]` and every leaf as
//! a bare `0` or `1`, so a node with leaves 0 and 1 reads `[01]` and the
//! nested example `[[01][[101][0101][1110]]]` has length 13. Values are
//! stored as their canonical token sequence, which keeps very large codes
//! compact and makes equality a byte comparison.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};

pub const MAX_ENUM_LENGTH: usize = 8;

#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BracketedString {
    tokens: Vec<u8>,
    len: usize,
}

impl BracketedString {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn leaf(bit: bool) -> Self {
        Self { tokens: vec![if bit { b'1' } else { b'0' }], len: 1 }
    }

    /// A flat string: nothing, a single leaf, or one node holding the bits.
    pub fn from_bits(bits: &[bool]) -> Self {
        let mut b = BracketBuilder::new();
        b.push_bits(bits);
        b.finish()
    }

    /// Number of leaves.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_leaf(&self) -> bool {
        self.len == 1
    }

    /// Leaf bits in tree order.
    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.tokens.iter().filter_map(|t| match t {
            b'0' => Some(false),
            b'1' => Some(true),
            _ => None,
        })
    }

    /// Immediate children of the root. Leaves and the empty string have none.
    pub fn children(&self) -> Vec<BracketedString> {
        if self.len <= 1 {
            return Vec::new();
        }
        let body = &self.tokens[1..self.tokens.len() - 1];
        let mut out = Vec::new();
        let mut depth = 0usize;
        let mut start = 0usize;
        let mut leaves = 0usize;
        for (i, &t) in body.iter().enumerate() {
            match t {
                b'[' => {
                    if depth == 0 {
                        start = i;
                        leaves = 0;
                    }
                    depth += 1;
                }
                b']' => {
                    depth -= 1;
                    if depth == 0 {
                        out.push(Self { tokens: body[start..=i].to_vec(), len: leaves });
                    }
                }
                _ => {
                    if depth == 0 {
                        out.push(Self { tokens: vec![t], len: 1 });
                    } else {
                        leaves += 1;
                    }
                }
            }
        }
        out
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.tokens
    }

    pub fn serialize(&self) -> Vec<u8> {
        self.tokens.clone()
    }

    /// Parses the canonical form. ASCII whitespace between tokens is ignored.
    pub fn deserialize(text: &[u8]) -> Result<Self> {
        let mut tokens = Vec::with_capacity(text.len());
        // per open node: number of children seen so far
        let mut stack: Vec<(usize, usize)> = Vec::new();
        let mut top_level = 0usize;
        let mut len = 0usize;
        for (offset, &c) in text.iter().enumerate() {
            match c {
                b' ' | b'\t' | b'\n' | b'\r' => continue,
                b'[' => {
                    if stack.is_empty() && top_level > 0 {
                        return Err(parse_err(offset, "more than one top-level element"));
                    }
                    stack.push((offset, 0));
                }
                b']' => {
                    let Some((_, children)) = stack.pop() else {
                        return Err(parse_err(offset, "unbalanced closing bracket"));
                    };
                    if children < 2 {
                        return Err(parse_err(
                            offset,
                            &format!("node with {children} child(ren); nodes need at least two"),
                        ));
                    }
                    match stack.last_mut() {
                        Some(parent) => parent.1 += 1,
                        None => top_level += 1,
                    }
                }
                b'0' | b'1' => {
                    match stack.last_mut() {
                        Some(parent) => parent.1 += 1,
                        None => {
                            if top_level > 0 {
                                return Err(parse_err(offset, "more than one top-level element"));
                            }
                            top_level += 1;
                        }
                    }
                    len += 1;
                }
                other => {
                    return Err(parse_err(offset, &format!("unexpected byte 0x{other:02x}")));
                }
            }
            tokens.push(c);
        }
        if let Some((offset, _)) = stack.last() {
            return Err(parse_err(*offset, "unclosed bracket"));
        }
        Ok(Self { tokens, len })
    }
}

fn parse_err(offset: usize, reason: &str) -> Error {
    Error::Parse { offset, reason: reason.to_string() }
}

impl fmt::Display for BracketedString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // tokens are always ASCII
        f.write_str(std::str::from_utf8(&self.tokens).expect("ascii tokens"))
    }
}

impl fmt::Debug for BracketedString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.tokens.len() <= 64 {
            write!(f, "BracketedString({self})")
        } else {
            write!(f, "BracketedString(len={}, {} tokens)", self.len, self.tokens.len())
        }
    }
}

impl Serialize for BracketedString {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BracketedString {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BracketedString::deserialize(s.as_bytes()).map_err(serde::de::Error::custom)
    }
}

/// Incremental construction of a bracketed string.
///
/// Nodes opened with [`open`](Self::open) collapse on close: a node with no
/// children vanishes and a node with one child is replaced by that child.
#[derive(Debug, Default)]
pub struct BracketBuilder {
    tokens: Vec<u8>,
    len: usize,
    // (token position of '[', children so far)
    stack: Vec<(usize, usize)>,
    top_level: usize,
}

impl BracketBuilder {
    pub fn new() -> Self {
        let mut b = Self::default();
        b.open();
        b
    }

    pub fn open(&mut self) {
        self.stack.push((self.tokens.len(), 0));
        self.tokens.push(b'[');
    }

    pub fn close(&mut self) {
        let (start, children) = self.stack.pop().expect("close without open");
        match children {
            0 => {
                self.tokens.truncate(start);
                return;
            }
            1 => {
                self.tokens.remove(start);
            }
            _ => self.tokens.push(b']'),
        }
        self.count_child();
    }

    fn count_child(&mut self) {
        match self.stack.last_mut() {
            Some(p) => p.1 += 1,
            None => self.top_level += 1,
        }
    }

    pub fn push_bit(&mut self, bit: bool) {
        self.tokens.push(if bit { b'1' } else { b'0' });
        self.len += 1;
        self.count_child();
    }

    /// The bits as one child (a node, a leaf, or nothing when empty).
    pub fn push_bits(&mut self, bits: &[bool]) {
        self.open();
        for &b in bits {
            self.push_bit(b);
        }
        self.close();
    }

    /// `width` low bits of `value`, big-endian, as one child.
    pub fn push_uint(&mut self, value: u64, width: u32) {
        self.open();
        for i in (0..width).rev() {
            self.push_bit((value >> i) & 1 == 1);
        }
        self.close();
    }

    pub fn push(&mut self, s: &BracketedString) {
        if s.is_empty() {
            return;
        }
        self.tokens.extend_from_slice(&s.tokens);
        self.len += s.len;
        self.count_child();
    }

    pub fn finish(mut self) -> BracketedString {
        while !self.stack.is_empty() {
            self.close();
        }
        BracketedString { tokens: self.tokens, len: self.len }
    }
}

/// A new root whose children are the parts in order. Empty parts contribute
/// nothing, and a single remaining part is returned unchanged.
pub fn concat(parts: &[BracketedString]) -> Result<BracketedString> {
    if parts.is_empty() {
        return invalid("concat needs at least one part");
    }
    let mut b = BracketBuilder::new();
    for p in parts {
        b.push(p);
    }
    Ok(b.finish())
}

/// Number of distinct bracketed strings of length `1..=n`.
///
/// With `T(n)` trees of exactly `n` leaves and `F(n)` ordered forests of
/// total length `n`: `T(1) = 2`, `T(n) = Σ_{j<n} T(j)·F(n−j)` (a first child
/// followed by at least one more), `F(n) = Σ_{j≤n} T(j)·F(n−j)`, `F(0) = 1`.
pub fn count_bracketed(n: usize) -> Result<u64> {
    if !(1..=MAX_ENUM_LENGTH).contains(&n) {
        return invalid(format!("count_bracketed supports 1..={MAX_ENUM_LENGTH}, got {n}"));
    }
    Ok(count_by_length(n).iter().skip(1).sum())
}

/// `T(j)` for `j = 0..=n` (with `T(0) = 0`).
pub fn count_by_length(n: usize) -> Vec<u64> {
    let mut trees = vec![0u64; n + 1];
    let mut forests = vec![0u64; n + 1];
    forests[0] = 1;
    for len in 1..=n {
        let t = if len == 1 { 2 } else { (1..len).map(|j| trees[j] * forests[len - j]).sum() };
        trees[len] = t;
        forests[len] = (1..=len).map(|j| trees[j] * forests[len - j]).sum();
    }
    trees
}

/// Bits needed for the `hi − lo + 1` values of `[lo, hi]`.
pub fn bounded_width(lo: i64, hi: i64) -> u32 {
    let span = (hi as i128 - lo as i128) as u128;
    if span == 0 {
        0
    } else {
        128 - span.leading_zeros()
    }
}

/// Fixed-width big-endian binary of `v − lo`.
pub fn encode_bounded_int(v: i64, lo: i64, hi: i64) -> Result<BracketedString> {
    if lo > hi || v < lo || v > hi {
        return invalid(format!("value {v} outside [{lo}, {hi}]"));
    }
    let mut b = BracketBuilder::new();
    b.push_uint((v as i128 - lo as i128) as u64, bounded_width(lo, hi));
    Ok(b.finish())
}

pub fn decode_bounded_int(s: &BracketedString, lo: i64, hi: i64) -> Result<i64> {
    if lo > hi {
        return invalid(format!("empty range [{lo}, {hi}]"));
    }
    let width = bounded_width(lo, hi);
    if s.len() != width as usize {
        return invalid(format!("expected {width} bits, got {}", s.len()));
    }
    let mut r = BitReader::new(s);
    let off = r.read(width)?;
    let v = lo as i128 + off as i128;
    if v > hi as i128 {
        return invalid(format!("decoded value {v} above {hi}"));
    }
    Ok(v as i64)
}

/// Sequential fixed-width reads over the leaf bits of a string.
pub struct BitReader<'a> {
    bits: Box<dyn Iterator<Item = bool> + 'a>,
    consumed: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(s: &'a BracketedString) -> Self {
        Self { bits: Box::new(s.bits()), consumed: 0 }
    }

    pub fn read(&mut self, width: u32) -> Result<u64> {
        if width > 64 {
            return invalid(format!("read width {width} exceeds 64"));
        }
        let mut v = 0u64;
        for _ in 0..width {
            let Some(b) = self.bits.next() else {
                return invalid(format!("bit string exhausted after {} bits", self.consumed));
            };
            v = (v << 1) | b as u64;
            self.consumed += 1;
        }
        Ok(v)
    }

    pub fn read_bit(&mut self) -> Result<bool> {
        Ok(self.read(1)? == 1)
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn is_exhausted(&mut self) -> bool {
        self.bits.next().is_none()
    }
}

/// Seed bits and the empirical mean of per-draw code lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitReport {
    pub seed_bits: u64,
    pub expected_random_bits: f64,
    pub measured_samples: u64,
}

impl BitReport {
    pub fn from_lengths(seed_bits: u64, code_lengths: &[u64]) -> Self {
        let n = code_lengths.len() as u64;
        let mean = if n == 0 { 0.0 } else { code_lengths.iter().sum::<u64>() as f64 / n as f64 };
        Self { seed_bits, expected_random_bits: mean, measured_samples: n }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> BracketedString {
        BracketedString::deserialize(s.as_bytes()).unwrap()
    }

    #[test]
    fn concat_of_two_leaves() {
        let s = concat(&[BracketedString::leaf(false), BracketedString::leaf(true)]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.to_string(), "[01]");
    }

    #[test]
    fn nested_example_length_and_round_trip() {
        let h1 = BracketedString::from_bits(&[false, true]);
        let parts: Vec<_> = ["101", "0101", "1110"]
            .iter()
            .map(|p| BracketedString::from_bits(&p.bytes().map(|c| c == b'1').collect::<Vec<_>>()))
            .collect();
        let h2 = concat(&parts).unwrap();
        let h = concat(&[h1, h2]).unwrap();
        assert_eq!(h.len(), 13);
        assert_eq!(h.to_string(), "[[01][[101][0101][1110]]]");
        assert_eq!(parse("[[01][ [101] [0101] [1110] ]]"), h);
        assert_eq!(BracketedString::deserialize(&h.serialize()).unwrap(), h);
        assert_eq!(h.children().len(), 2);
        assert_eq!(h.children()[1].children().len(), 3);
    }

    #[test]
    fn concat_single_part_is_identity() {
        let p = parse("[10[01]]");
        assert_eq!(concat(std::slice::from_ref(&p)).unwrap(), p);
        assert!(concat(&[]).is_err());
        assert_eq!(concat(&[BracketedString::empty(), p.clone()]).unwrap(), p);
    }

    #[test]
    fn leaf_serialization() {
        assert_eq!(BracketedString::leaf(true).to_string(), "1");
        assert_eq!(parse("1"), BracketedString::leaf(true));
        assert_eq!(parse(""), BracketedString::empty());
    }

    #[test]
    fn malformed_text_reports_offsets() {
        let cases = [("[0]", 2), ("[01", 0), ("01]", 1), ("[01]]", 4), ("[0x1]", 2), ("[]", 1), ("[01][10]", 4)];
        for (text, offset) in cases {
            match BracketedString::deserialize(text.as_bytes()) {
                Err(Error::Parse { offset: o, .. }) => assert_eq!(o, offset, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn builder_collapses_unary_nodes() {
        let mut b = BracketBuilder::new();
        b.open();
        b.open();
        b.push_bit(true);
        b.close();
        b.close();
        b.push_bits(&[]);
        b.push_bit(false);
        assert_eq!(b.finish().to_string(), "[10]");
    }

    #[test]
    fn small_counts() {
        assert_eq!(count_bracketed(1).unwrap(), 2);
        assert_eq!(count_bracketed(2).unwrap(), 2 + 4);
        assert!(count_bracketed(2).unwrap() <= 1024);
        assert!(count_bracketed(0).is_err());
        assert!(count_bracketed(9).is_err());
    }

    #[test]
    fn bounded_int_examples() {
        assert_eq!(encode_bounded_int(0, 0, 1).unwrap().to_string(), "0");
        assert_eq!(encode_bounded_int(5, 0, 7).unwrap().to_string(), "[101]");
        // 2·d1·d2·M + 2 = 66 values
        assert_eq!(bounded_width(0, 65), 7);
        assert_eq!(bounded_width(3, 3), 0);
        assert!(encode_bounded_int(8, 0, 7).is_err());
        let s = encode_bounded_int(-3, -10, 20).unwrap();
        assert_eq!(decode_bounded_int(&s, -10, 20).unwrap(), -3);
        assert!(decode_bounded_int(&s, -10, 2000).is_err());
    }

    #[test]
    fn bit_report_mean() {
        let r = BitReport::from_lengths(12, &[3, 5, 7]);
        assert_eq!(r.expected_random_bits, 5.0);
        assert_eq!(r.measured_samples, 3);
    }

    proptest::proptest! {
        #[test]
        fn bounded_int_round_trip(lo in -1000i64..1000, span in 0i64..5000, off in 0i64..5000) {
            let hi = lo + span;
            let v = lo + off.min(span);
            let s = encode_bounded_int(v, lo, hi).unwrap();
            proptest::prop_assert_eq!(s.len() as u32, bounded_width(lo, hi));
            proptest::prop_assert_eq!(decode_bounded_int(&s, lo, hi).unwrap(), v);
        }
    }
}
