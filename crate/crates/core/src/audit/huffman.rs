//! Canonical Huffman coding over a per-block value alphabet, with an escape
//! symbol for values too rare to deserve a table entry. Used by the columnar
//! codec for the kind+op tag, list-length, and item-count columns.

use std::collections::HashMap;

use crate::util::{get_varint, put_varint, BitReader, BitWriter};

const MAX_ALPHABET: usize = 64;
const MAX_DEPTH: u8 = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sym {
    Val(u64),
    Esc,
}

#[derive(Debug, Clone)]
pub struct Table {
    /// Canonical order: ascending code length, escape sorted after values.
    entries: Vec<(Sym, u8)>,
}

fn assign_lengths(freqs: &[(Sym, u64)]) -> Vec<(Sym, u8)> {
    if freqs.len() == 1 {
        return vec![(freqs[0].0, 0)];
    }
    // Huffman by pairwise merge; deterministic tie-break on insertion order.
    #[derive(Debug)]
    struct Node {
        freq: u64,
        left: Option<usize>,
        right: Option<usize>,
        sym: Option<usize>,
    }
    let mut nodes: Vec<Node> = freqs
        .iter()
        .enumerate()
        .map(|(i, &(_, f))| Node {
            freq: f,
            left: None,
            right: None,
            sym: Some(i),
        })
        .collect();
    let mut heap: std::collections::BinaryHeap<std::cmp::Reverse<(u64, usize)>> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| std::cmp::Reverse((n.freq, i)))
        .collect();
    while heap.len() > 1 {
        let std::cmp::Reverse((fa, a)) = heap.pop().unwrap();
        let std::cmp::Reverse((fb, b)) = heap.pop().unwrap();
        let idx = nodes.len();
        nodes.push(Node {
            freq: fa + fb,
            left: Some(a),
            right: Some(b),
            sym: None,
        });
        heap.push(std::cmp::Reverse((fa + fb, idx)));
    }
    let root = heap.pop().unwrap().0 .1;
    let mut lengths = vec![0u8; freqs.len()];
    let mut stack = vec![(root, 0u8)];
    let mut too_deep = false;
    while let Some((n, d)) = stack.pop() {
        let node = &nodes[n];
        if let Some(s) = node.sym {
            lengths[s] = d.max(1);
            if d > MAX_DEPTH {
                too_deep = true;
            }
        } else {
            stack.push((node.left.unwrap(), d + 1));
            stack.push((node.right.unwrap(), d + 1));
        }
    }
    if too_deep {
        // Pathological skew: fall back to a balanced tree.
        let bits = (usize::BITS - (freqs.len() - 1).leading_zeros()) as u8;
        for l in lengths.iter_mut() {
            *l = bits.max(1);
        }
    }
    freqs
        .iter()
        .zip(lengths)
        .map(|(&(s, _), l)| (s, l))
        .collect()
}

impl Table {
    /// Builds a table for `values`; frequent values get dedicated symbols,
    /// the long tail goes through the escape.
    pub fn build(values: &[u64]) -> Table {
        let mut freq: HashMap<u64, u64> = HashMap::new();
        for &v in values {
            *freq.entry(v).or_insert(0) += 1;
        }
        let mut by_freq: Vec<(u64, u64)> = freq.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut freqs: Vec<(Sym, u64)> = Vec::new();
        if by_freq.len() <= MAX_ALPHABET {
            for &(v, f) in &by_freq {
                freqs.push((Sym::Val(v), f));
            }
        } else {
            let mut esc_count = 0;
            for (i, &(v, f)) in by_freq.iter().enumerate() {
                if i < MAX_ALPHABET - 1 {
                    freqs.push((Sym::Val(v), f));
                } else {
                    esc_count += f;
                }
            }
            freqs.push((Sym::Esc, esc_count));
        }
        if freqs.is_empty() {
            return Table { entries: vec![] };
        }
        let mut entries = assign_lengths(&freqs);
        // Canonical order: (length, value, escape last).
        entries.sort_by_key(|&(s, l)| {
            (
                l,
                match s {
                    Sym::Val(v) => (0u8, v),
                    Sym::Esc => (1u8, 0),
                },
            )
        });
        Table { entries }
    }

    fn codes(&self) -> Vec<(Sym, u32, u8)> {
        let mut out = Vec::with_capacity(self.entries.len());
        let mut code = 0u32;
        let mut prev_len = 0u8;
        for &(sym, len) in &self.entries {
            if len == 0 {
                out.push((sym, 0, 0));
                continue;
            }
            code <<= len - prev_len;
            out.push((sym, code, len));
            code += 1;
            prev_len = len;
        }
        out
    }

    pub fn serialize(&self, out: &mut Vec<u8>) {
        put_varint(out, self.entries.len() as u64);
        for &(sym, len) in &self.entries {
            match sym {
                Sym::Val(v) => {
                    out.push(0);
                    put_varint(out, v);
                }
                Sym::Esc => out.push(1),
            }
            out.push(len);
        }
    }

    pub fn deserialize(buf: &[u8], pos: &mut usize) -> Option<Table> {
        let n = get_varint(buf, pos)? as usize;
        if n > 4096 {
            return None;
        }
        let mut entries = Vec::with_capacity(n);
        let mut prev_len = 0u8;
        for _ in 0..n {
            let tag = *buf.get(*pos)?;
            *pos += 1;
            let sym = match tag {
                0 => Sym::Val(get_varint(buf, pos)?),
                1 => Sym::Esc,
                _ => return None,
            };
            let len = *buf.get(*pos)?;
            *pos += 1;
            if len > 32 || len < prev_len {
                return None;
            }
            prev_len = len;
            entries.push((sym, len));
        }
        Some(Table { entries })
    }
}

/// Encodes a value column: serialized table, bit stream, escape sidecar.
pub fn encode_column(values: &[u64], out: &mut Vec<u8>) {
    let table = Table::build(values);
    table.serialize(out);
    if table.entries.is_empty() {
        return;
    }
    let codes = table.codes();
    let mut by_val: HashMap<u64, (u32, u8)> = HashMap::new();
    let mut esc: Option<(u32, u8)> = None;
    for &(sym, code, len) in &codes {
        match sym {
            Sym::Val(v) => {
                by_val.insert(v, (code, len));
            }
            Sym::Esc => esc = Some((code, len)),
        }
    }
    let mut bits = BitWriter::new();
    let mut escapes = Vec::new();
    for &v in values {
        match by_val.get(&v) {
            Some(&(code, len)) => bits.put_bits(code, len),
            None => {
                let (code, len) = esc.expect("value not in table and no escape");
                bits.put_bits(code, len);
                put_varint(&mut escapes, v);
            }
        }
    }
    let bit_bytes = bits.finish();
    put_varint(out, bit_bytes.len() as u64);
    out.extend_from_slice(&bit_bytes);
    put_varint(out, escapes.len() as u64);
    out.extend_from_slice(&escapes);
}

/// Decodes `n` values written by [`encode_column`].
pub fn decode_column(buf: &[u8], pos: &mut usize, n: usize) -> Option<Vec<u64>> {
    let table = Table::deserialize(buf, pos)?;
    if n == 0 {
        if !table.entries.is_empty() {
            // Encoder only writes streams for nonempty columns.
            let bl = get_varint(buf, pos)? as usize;
            *pos += bl;
            let el = get_varint(buf, pos)? as usize;
            *pos += el;
        }
        return Some(vec![]);
    }
    if table.entries.is_empty() {
        return None;
    }
    let codes = table.codes();
    let bit_len = get_varint(buf, pos)? as usize;
    let bit_bytes = buf.get(*pos..*pos + bit_len)?;
    *pos += bit_len;
    let esc_len = get_varint(buf, pos)? as usize;
    let esc_bytes = buf.get(*pos..*pos + esc_len)?;
    *pos += esc_len;

    let mut out = Vec::with_capacity(n);
    let mut esc_pos = 0usize;
    if codes.len() == 1 {
        // Zero-length code: the symbol repeats n times.
        for _ in 0..n {
            match codes[0].0 {
                Sym::Val(v) => out.push(v),
                Sym::Esc => out.push(get_varint(esc_bytes, &mut esc_pos)?),
            }
        }
        return Some(out);
    }
    let mut reader = BitReader::new(bit_bytes);
    for _ in 0..n {
        let mut code = 0u32;
        let mut len = 0u8;
        let mut idx = 0usize;
        let sym = loop {
            code = (code << 1) | reader.next_bit()?;
            len += 1;
            while idx < codes.len() && codes[idx].2 < len {
                idx += 1;
            }
            let mut found = None;
            let mut j = idx;
            while j < codes.len() && codes[j].2 == len {
                if codes[j].1 == code {
                    found = Some(codes[j].0);
                    break;
                }
                j += 1;
            }
            if let Some(s) = found {
                break s;
            }
            if len > 32 {
                return None;
            }
        };
        match sym {
            Sym::Val(v) => out.push(v),
            Sym::Esc => out.push(get_varint(esc_bytes, &mut esc_pos)?),
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(values: &[u64]) {
        let mut buf = Vec::new();
        encode_column(values, &mut buf);
        let mut pos = 0;
        let got = decode_column(&buf, &mut pos, values.len()).unwrap();
        assert_eq!(got, values);
        assert_eq!(pos, buf.len());
    }

    #[test]
    fn basic_roundtrips() {
        roundtrip(&[]);
        roundtrip(&[7]);
        roundtrip(&[5, 5, 5, 5]);
        roundtrip(&[1, 2, 3, 2, 1, 2, 2, 2, 9]);
        let wide: Vec<u64> = (0..500).map(|i| i * 31 % 257).collect();
        roundtrip(&wide);
    }

    #[test]
    fn long_tail_goes_through_escape() {
        // 200 distinct values, most appearing once.
        let mut vals = vec![42u64; 300];
        vals.extend(1000..1200u64);
        roundtrip(&vals);
        let mut buf = Vec::new();
        encode_column(&vals, &mut buf);
        // Skewed column should compress far below 8 bytes/value.
        assert!(buf.len() < vals.len() * 3);
    }

    #[test]
    fn skewed_beats_uniform() {
        let skewed = vec![1u64; 4096];
        let uniform: Vec<u64> = (0..4096u64).map(|i| i % 6).collect();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        encode_column(&skewed, &mut a);
        encode_column(&uniform, &mut b);
        assert!(a.len() < b.len());
    }
}
