//! Index-stream entropy coding: fixed-width codes and canonical Huffman.
//!
//! Bit order is MSB-first within each byte. Huffman tables are fully
//! determined by their code lengths (canonical form), so serialized streams
//! carry one byte per symbol instead of a tree. Construction is
//! deterministic: heap ties break on node identity, so equal-frequency
//! histograms always produce the same table.

use crate::error::{Error, Result};

/// Longest admissible Huffman code, and the widest fixed-width code. Chosen
/// so any code fits a u16 and the canonical decoder can use fixed arrays.
pub const MAX_CODE_LEN: u8 = 16;

/// Smallest fixed-code width that distinguishes `levels` symbols (at least
/// one bit even for a single level).
pub fn width_for_levels(levels: usize) -> u8 {
    let mut width = 1u8;
    while (1usize << width) < levels {
        width += 1;
    }
    width
}

/// Symbol histogram over `levels` bins. Indices at or beyond `levels` are an
/// error.
pub fn histogram(indices: &[u32], levels: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; levels];
    for &i in indices {
        let slot = counts.get_mut(i as usize).ok_or_else(|| {
            Error::Argument(format!("index {i} out of range for {levels} levels"))
        })?;
        *slot += 1;
    }
    Ok(counts)
}

// ---------------------------------------------------------------------------
// Bitstream
// ---------------------------------------------------------------------------

/// A growable MSB-first bit buffer. The final byte is zero-padded, so equal
/// bit content always serializes to equal bytes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bitstream {
    bytes: Vec<u8>,
    bit_len: usize,
}

impl Bitstream {
    /// An empty stream.
    pub fn new() -> Self {
        Bitstream::default()
    }

    /// Reconstructs a stream from stored bytes and its exact bit length.
    pub fn from_parts(bytes: Vec<u8>, bit_len: usize) -> Result<Self> {
        if bytes.len() != bit_len.div_ceil(8) {
            return Err(Error::Corrupt(format!(
                "{} bytes cannot hold a {bit_len}-bit stream",
                bytes.len()
            )));
        }
        Ok(Bitstream { bytes, bit_len })
    }

    /// Total bits written.
    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    /// Backing bytes (final byte zero-padded).
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Appends the low `width` bits of `value`, most significant first.
    pub fn push_bits(&mut self, value: u32, width: u8) {
        debug_assert!(width >= 1 && width <= 32);
        for shift in (0..width).rev() {
            let bit = (value >> shift) & 1;
            let byte_idx = self.bit_len / 8;
            if byte_idx == self.bytes.len() {
                self.bytes.push(0);
            }
            self.bytes[byte_idx] |= (bit as u8) << (7 - self.bit_len % 8);
            self.bit_len += 1;
        }
    }

    /// A reader positioned at the stream's start.
    pub fn reader(&self) -> BitReader<'_> {
        BitReader {
            bytes: &self.bytes,
            bit_len: self.bit_len,
            pos: 0,
        }
    }
}

/// Sequential reader over a [`Bitstream`].
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    bit_len: usize,
    pos: usize,
}

impl BitReader<'_> {
    /// Next bit, or a corruption error past the end.
    pub fn read_bit(&mut self) -> Result<u32> {
        if self.pos >= self.bit_len {
            return Err(Error::Corrupt("bitstream ended mid-symbol".into()));
        }
        let bit = (self.bytes[self.pos / 8] >> (7 - self.pos % 8)) & 1;
        self.pos += 1;
        Ok(bit as u32)
    }

    /// Next `width` bits as an MSB-first value.
    pub fn read_bits(&mut self, width: u8) -> Result<u32> {
        let mut v = 0u32;
        for _ in 0..width {
            v = (v << 1) | self.read_bit()?;
        }
        Ok(v)
    }

    /// Bits not yet consumed.
    pub fn remaining(&self) -> usize {
        self.bit_len - self.pos
    }
}

// ---------------------------------------------------------------------------
// Fixed-width coding
// ---------------------------------------------------------------------------

/// Packs indices at a fixed `width` bits each.
pub fn encode_fixed(indices: &[u32], width: u8) -> Result<Bitstream> {
    if width == 0 || width > MAX_CODE_LEN {
        return Err(Error::Argument(format!(
            "fixed-code width must be 1..={MAX_CODE_LEN}, got {width}"
        )));
    }
    let limit = 1u64 << width;
    let mut bs = Bitstream::new();
    for &i in indices {
        if (i as u64) >= limit {
            return Err(Error::Argument(format!(
                "index {i} does not fit in {width} bits"
            )));
        }
        bs.push_bits(i, width);
    }
    Ok(bs)
}

/// Unpacks `count` fixed-width indices; the stream must hold exactly that
/// many.
pub fn decode_fixed(bs: &Bitstream, width: u8, count: usize) -> Result<Vec<u32>> {
    if width == 0 || width > MAX_CODE_LEN {
        return Err(Error::Argument(format!(
            "fixed-code width must be 1..={MAX_CODE_LEN}, got {width}"
        )));
    }
    if bs.bit_len() != count * width as usize {
        return Err(Error::Corrupt(format!(
            "{} bits cannot hold {count} symbols of width {width}",
            bs.bit_len()
        )));
    }
    let mut reader = bs.reader();
    (0..count).map(|_| reader.read_bits(width)).collect()
}

// ---------------------------------------------------------------------------
// Canonical Huffman
// ---------------------------------------------------------------------------

/// A canonical Huffman table, represented by code lengths alone. Length 0
/// marks a symbol absent from the training histogram; encoding it is an
/// error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTable {
    lengths: Vec<u8>,
    length_limited: bool,
}

impl HuffmanTable {
    /// Rebuilds a table from stored lengths, checking the Kraft inequality.
    pub fn from_lengths(lengths: Vec<u8>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Argument("length table must not be empty".into()));
        }
        let mut kraft = 0u64; // in units of 2^-MAX_CODE_LEN
        let mut any = false;
        let mut limited = false;
        for &len in &lengths {
            if len > MAX_CODE_LEN {
                return Err(Error::Corrupt(format!(
                    "code length {len} exceeds the {MAX_CODE_LEN}-bit cap"
                )));
            }
            if len > 0 {
                any = true;
                kraft += 1u64 << (MAX_CODE_LEN - len);
                if len == MAX_CODE_LEN {
                    limited = true;
                }
            }
        }
        if !any {
            return Err(Error::Corrupt("length table codes no symbols".into()));
        }
        if kraft > 1u64 << MAX_CODE_LEN {
            return Err(Error::Corrupt(
                "code lengths violate the Kraft inequality".into(),
            ));
        }
        Ok(HuffmanTable {
            lengths,
            length_limited: limited,
        })
    }

    /// Per-symbol code lengths (0 = symbol unused).
    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    /// True when construction had to clamp lengths to the 16-bit cap (the
    /// table is then valid but no longer strictly optimal).
    pub fn length_limited(&self) -> bool {
        self.length_limited
    }

    /// Average code length in bits per symbol under a frequency histogram.
    pub fn expected_rate(&self, freqs: &[u64]) -> Result<f64> {
        if freqs.len() != self.lengths.len() {
            return Err(Error::Argument(format!(
                "histogram covers {} symbols, table covers {}",
                freqs.len(),
                self.lengths.len()
            )));
        }
        let total: u64 = freqs.iter().sum();
        if total == 0 {
            return Err(Error::Argument("histogram has no mass".into()));
        }
        let mut bits = 0.0f64;
        for (sym, &f) in freqs.iter().enumerate() {
            if f > 0 {
                if self.lengths[sym] == 0 {
                    return Err(Error::Argument(format!(
                        "symbol {sym} has mass but no code"
                    )));
                }
                bits += f as f64 * self.lengths[sym] as f64;
            }
        }
        Ok(bits / total as f64)
    }

    /// Canonical code for each symbol, `(code, len)`, assigned in
    /// (length, symbol) order; unused symbols get `(0, 0)`.
    fn codes(&self) -> Vec<(u32, u8)> {
        let mut order: Vec<usize> = (0..self.lengths.len())
            .filter(|&s| self.lengths[s] > 0)
            .collect();
        order.sort_by_key(|&s| (self.lengths[s], s));
        let mut codes = vec![(0u32, 0u8); self.lengths.len()];
        let mut code = 0u32;
        let mut prev_len = 0u8;
        for &s in &order {
            let len = self.lengths[s];
            code <<= len - prev_len;
            codes[s] = (code, len);
            code += 1;
            prev_len = len;
        }
        codes
    }
}

/// Builds a Huffman table from a symbol histogram.
///
/// Ties in the merge heap break on node identity (leaves in symbol order,
/// then internal nodes in creation order), so the result is a pure function
/// of the histogram. A lone nonzero symbol gets a 1-bit code. Codes longer
/// than 16 bits are clamped and the Kraft deficit repaired, with the table
/// flagged as length-limited.
pub fn build_huffman(freqs: &[u64]) -> Result<HuffmanTable> {
    if freqs.is_empty() {
        return Err(Error::Argument("histogram must not be empty".into()));
    }
    if freqs.len() > 1 << MAX_CODE_LEN {
        return Err(Error::Argument(format!(
            "histogram covers {} symbols, max is {}",
            freqs.len(),
            1usize << MAX_CODE_LEN
        )));
    }
    let active: Vec<usize> = (0..freqs.len()).filter(|&s| freqs[s] > 0).collect();
    if active.is_empty() {
        return Err(Error::Argument("histogram has no mass".into()));
    }

    let mut lengths = vec![0u8; freqs.len()];
    if active.len() == 1 {
        lengths[active[0]] = 1;
        return Ok(HuffmanTable {
            lengths,
            length_limited: false,
        });
    }

    // Node ids: actives keep their rank order, internal nodes follow.
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    let mut children: Vec<Option<(usize, usize)>> = vec![None; active.len()];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = active
        .iter()
        .enumerate()
        .map(|(rank, &sym)| Reverse((freqs[sym], rank)))
        .collect();
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().expect("len checked");
        let Reverse((wb, b)) = heap.pop().expect("len checked");
        let id = children.len();
        children.push(Some((a, b)));
        heap.push(Reverse((wa + wb, id)));
    }
    let Reverse((_, root)) = heap.pop().expect("one node remains");

    // Depths by explicit walk; the tree has at most 2n-1 nodes.
    let mut depth_of = vec![0u32; children.len()];
    let mut stack = vec![root];
    while let Some(node) = stack.pop() {
        if let Some((a, b)) = children[node] {
            depth_of[a] = depth_of[node] + 1;
            depth_of[b] = depth_of[node] + 1;
            stack.push(a);
            stack.push(b);
        }
    }

    let mut limited = false;
    let mut raw: Vec<u32> = active.iter().enumerate().map(|(rank, _)| depth_of[rank]).collect();
    if raw.iter().any(|&d| d > MAX_CODE_LEN as u32) {
        limited = true;
        for d in &mut raw {
            *d = (*d).min(MAX_CODE_LEN as u32);
        }
        // Clamping can overshoot the Kraft budget; walking the deepest
        // un-capped code down one level at a time restores it with the
        // least rate damage among single-code moves.
        let budget = 1u64 << MAX_CODE_LEN;
        let mut kraft: u64 = raw
            .iter()
            .map(|&d| 1u64 << (MAX_CODE_LEN as u32 - d))
            .sum();
        while kraft > budget {
            let (victim, _) = raw
                .iter()
                .enumerate()
                .filter(|&(_, &d)| d < MAX_CODE_LEN as u32)
                .max_by_key(|&(rank, &d)| (d, rank))
                .expect("kraft over budget implies a shortenable code");
            kraft -= 1u64 << (MAX_CODE_LEN as u32 - raw[victim] - 1);
            raw[victim] += 1;
        }
    }
    for (rank, &sym) in active.iter().enumerate() {
        lengths[sym] = raw[rank] as u8;
    }

    Ok(HuffmanTable {
        lengths,
        length_limited: limited,
    })
}

/// Encodes an index stream against a table. Symbols without a code (length
/// 0, i.e. absent from the training histogram) are an error.
pub fn encode_huffman(indices: &[u32], table: &HuffmanTable) -> Result<Bitstream> {
    let codes = table.codes();
    let mut bs = Bitstream::new();
    for &i in indices {
        let (code, len) = *codes.get(i as usize).ok_or_else(|| {
            Error::Argument(format!(
                "index {i} out of range for a {}-symbol table",
                table.lengths.len()
            ))
        })?;
        if len == 0 {
            return Err(Error::Argument(format!("symbol {i} has no code")));
        }
        bs.push_bits(code, len);
    }
    Ok(bs)
}

/// Decodes exactly `count` symbols; the stream must end exactly there.
pub fn decode_huffman(bs: &Bitstream, table: &HuffmanTable, count: usize) -> Result<Vec<u32>> {
    // Canonical decoding tables: symbols in (length, symbol) order, plus the
    // first code and first rank at each length.
    let mut order: Vec<u32> = (0..table.lengths.len() as u32)
        .filter(|&s| table.lengths[s as usize] > 0)
        .collect();
    order.sort_by_key(|&s| (table.lengths[s as usize], s));
    let max_len = MAX_CODE_LEN as usize;
    let mut count_at = vec![0u32; max_len + 1];
    for &s in &order {
        count_at[table.lengths[s as usize] as usize] += 1;
    }
    let mut first_code = vec![0u32; max_len + 2];
    let mut first_rank = vec![0u32; max_len + 2];
    let mut code = 0u32;
    let mut rank = 0u32;
    for len in 1..=max_len {
        first_code[len] = code;
        first_rank[len] = rank;
        code = (code + count_at[len]) << 1;
        rank += count_at[len];
    }

    let mut reader = bs.reader();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut code = 0u32;
        let mut len = 0usize;
        loop {
            code = (code << 1) | reader.read_bit()?;
            len += 1;
            if len > max_len {
                return Err(Error::Corrupt("bit pattern matches no code".into()));
            }
            let offset = code.wrapping_sub(first_code[len]);
            if count_at[len] > 0 && offset < count_at[len] {
                out.push(order[(first_rank[len] + offset) as usize]);
                break;
            }
        }
    }
    if reader.remaining() != 0 {
        return Err(Error::Corrupt(format!(
            "{} bits left after the declared symbol count",
            reader.remaining()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_covers_level_counts() {
        assert_eq!(width_for_levels(1), 1);
        assert_eq!(width_for_levels(2), 1);
        assert_eq!(width_for_levels(3), 2);
        assert_eq!(width_for_levels(16), 4);
        assert_eq!(width_for_levels(17), 5);
        assert_eq!(width_for_levels(65536), 16);
    }

    #[test]
    fn fixed_round_trip_uses_exact_bit_count() {
        let indices: Vec<u32> = (0..10).map(|i| i % 16).collect();
        let bs = encode_fixed(&indices, 4).unwrap();
        assert_eq!(bs.bit_len(), 40);
        assert_eq!(bs.bytes().len(), 5);
        assert_eq!(decode_fixed(&bs, 4, 10).unwrap(), indices);
    }

    #[test]
    fn fixed_encode_rejects_wide_indices() {
        assert!(matches!(
            encode_fixed(&[4], 2),
            Err(Error::Argument(_))
        ));
        assert!(encode_fixed(&[3], 2).is_ok());
    }

    #[test]
    fn canonical_table_for_small_histogram() {
        // Frequencies 5,2,1,1 over four symbols: lengths 1,2,3,3 and average
        // rate 15/9 bits.
        let table = build_huffman(&[5, 2, 1, 1]).unwrap();
        assert_eq!(table.lengths(), &[1, 2, 3, 3]);
        assert!(!table.length_limited());
        let rate = table.expected_rate(&[5, 2, 1, 1]).unwrap();
        assert!((rate - 15.0 / 9.0).abs() < 1e-12);

        let indices = [0, 0, 0, 0, 0, 1, 1, 2, 3];
        let bs = encode_huffman(&indices, &table).unwrap();
        assert_eq!(bs.bit_len(), 15);
        assert_eq!(decode_huffman(&bs, &table, 9).unwrap(), indices);
    }

    #[test]
    fn single_symbol_gets_a_one_bit_code() {
        let table = build_huffman(&[0, 7, 0]).unwrap();
        assert_eq!(table.lengths(), &[0, 1, 0]);
        let bs = encode_huffman(&[1, 1, 1], &table).unwrap();
        assert_eq!(bs.bit_len(), 3);
        assert_eq!(decode_huffman(&bs, &table, 3).unwrap(), vec![1, 1, 1]);
    }

    #[test]
    fn equal_frequencies_build_deterministically() {
        let freqs = vec![3u64; 8];
        let a = build_huffman(&freqs).unwrap();
        let b = build_huffman(&freqs).unwrap();
        assert_eq!(a, b);
        assert!(a.lengths().iter().all(|&l| l == 3));
    }

    #[test]
    fn skewed_histogram_hits_the_length_cap() {
        // Fibonacci frequencies force one extra bit per extra symbol, so 25
        // active symbols overflow a 16-bit cap.
        let mut freqs = vec![0u64; 25];
        let (mut a, mut b) = (1u64, 1u64);
        for f in freqs.iter_mut() {
            *f = a;
            let next = a + b;
            a = b;
            b = next;
        }
        let table = build_huffman(&freqs).unwrap();
        assert!(table.length_limited());
        assert!(table.lengths().iter().all(|&l| l > 0 && l <= MAX_CODE_LEN));
        let kraft: u64 = table
            .lengths()
            .iter()
            .map(|&l| 1u64 << (MAX_CODE_LEN - l))
            .sum();
        assert!(kraft <= 1u64 << MAX_CODE_LEN);

        let indices: Vec<u32> = (0..25).rev().collect();
        let bs = encode_huffman(&indices, &table).unwrap();
        assert_eq!(decode_huffman(&bs, &table, 25).unwrap(), indices);
    }

    #[test]
    fn truncated_stream_reports_corruption() {
        let table = build_huffman(&[5, 2, 1, 1]).unwrap();
        let bs = encode_huffman(&[3, 3, 3], &table).unwrap();
        let cut = Bitstream::from_parts(bs.bytes()[..1].to_vec(), 8).unwrap();
        assert!(matches!(
            decode_huffman(&cut, &table, 3),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn trailing_bits_report_corruption() {
        let table = build_huffman(&[5, 2, 1, 1]).unwrap();
        let bs = encode_huffman(&[0, 0, 1], &table).unwrap();
        assert!(matches!(
            decode_huffman(&bs, &table, 2),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn coding_an_absent_symbol_fails() {
        let table = build_huffman(&[5, 0, 1]).unwrap();
        assert!(matches!(
            encode_huffman(&[1], &table),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_mass_histogram_is_rejected() {
        assert!(matches!(build_huffman(&[0, 0]), Err(Error::Argument(_))));
        assert!(matches!(build_huffman(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn lengths_round_trip_through_serial_form() {
        let table = build_huffman(&[9, 4, 4, 2, 1, 1]).unwrap();
        let rebuilt = HuffmanTable::from_lengths(table.lengths().to_vec()).unwrap();
        let indices = [0u32, 2, 1, 5, 4, 3, 0];
        let bs = encode_huffman(&indices, &table).unwrap();
        assert_eq!(decode_huffman(&bs, &rebuilt, 7).unwrap(), indices);
    }

    #[test]
    fn from_lengths_rejects_kraft_violation() {
        assert!(matches!(
            HuffmanTable::from_lengths(vec![1, 1, 1]),
            Err(Error::Corrupt(_))
        ));
        assert!(matches!(
            HuffmanTable::from_lengths(vec![17]),
            Err(Error::Corrupt(_))
        ));
        assert!(HuffmanTable::from_lengths(vec![1, 2, 2]).is_ok());
    }

    #[test]
    fn rate_sits_between_entropy_and_entropy_plus_one() {
        let cases: Vec<Vec<u64>> = vec![
            vec![10, 10, 10, 10],
            vec![100, 50, 25, 12, 6, 3, 1, 1],
            vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
            vec![1000, 1],
        ];
        for freqs in cases {
            let total: u64 = freqs.iter().sum();
            let entropy: f64 = freqs
                .iter()
                .filter(|&&f| f > 0)
                .map(|&f| {
                    let p = f as f64 / total as f64;
                    -p * p.log2()
                })
                .sum();
            let table = build_huffman(&freqs).unwrap();
            let rate = table.expected_rate(&freqs).unwrap();
            assert!(rate >= entropy - 1e-12, "rate {rate} below entropy {entropy}");
            assert!(rate < entropy + 1.0, "rate {rate} not within a bit of {entropy}");
        }
    }
}
