//! Random bits from photon-number residues.
//!
//! Each resolved event contributes the natural binary encoding of its total
//! modulo 2^d, most significant bit first. Discarded events contribute
//! nothing.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::counting::CountRecord;
use crate::error::{Error, Result};

pub const MAX_BITS_PER_EVENT: u32 = 5;

/// Magic bytes of a bitstream file.
pub const BITS_MAGIC: [u8; 4] = *b"PNRB";
pub const BITS_VERSION: u16 = 1;
pub const BITS_HEADER_BYTES: usize = 16;

fn check_d(d: u32) -> Result<()> {
    if !(1..=MAX_BITS_PER_EVENT).contains(&d) {
        return Err(Error::config(format!("bits per event must be in 1..={MAX_BITS_PER_EVENT}, got {d}")));
    }
    Ok(())
}

/// The `d` bits of `n mod 2^d`, most significant first.
pub fn bits_from_count(n: u32, d: u32) -> Result<Vec<u8>> {
    check_d(d)?;
    Ok((0..d).rev().map(|k| ((n >> k) & 1) as u8).collect())
}

/// Where the bits came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub nbar: Option<f64>,
    pub seed: Option<u64>,
    pub input_hash: Option<String>,
}

/// Packed bits, most significant bit of each byte first.
#[derive(Debug, Clone, PartialEq)]
pub struct BitStream {
    bytes: Vec<u8>,
    len: u64,
    pub d: u32,
    pub n_events_used: u64,
    pub n_discarded: u64,
    pub source: SourceMeta,
}

impl BitStream {
    pub fn new(d: u32) -> Result<Self> {
        check_d(d)?;
        Ok(Self {
            bytes: Vec::new(),
            len: 0,
            d,
            n_events_used: 0,
            n_discarded: 0,
            source: SourceMeta::default(),
        })
    }

    fn push_bit(&mut self, b: u8) {
        let off = (self.len % 8) as u32;
        if off == 0 {
            self.bytes.push(0);
        }
        if b != 0 {
            *self.bytes.last_mut().unwrap() |= 0x80 >> off;
        }
        self.len += 1;
    }

    /// Appends the word of one resolved total.
    pub fn push_count(&mut self, n: u32) {
        for k in (0..self.d).rev() {
            self.push_bit(((n >> k) & 1) as u8);
        }
        self.n_events_used += 1;
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn packed(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit(&self, i: u64) -> u8 {
        (self.bytes[(i / 8) as usize] >> (7 - (i % 8))) & 1
    }

    /// One byte per bit, each 0 or 1.
    pub fn unpacked(&self) -> Vec<u8> {
        (0..self.len).map(|i| self.bit(i)).collect()
    }

    /// The `d`-bit word of every used event, in order.
    pub fn words(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.n_events_used).map(move |e| {
            (0..self.d as u64).fold(0u32, |w, k| (w << 1) | self.bit(e * self.d as u64 + k) as u32)
        })
    }

    /// Writes the 16-byte header (magic, version, d, padding bits, event
    /// count) followed by the packed bits.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let pad = ((8 - self.len % 8) % 8) as u8;
        let mut h = Vec::with_capacity(BITS_HEADER_BYTES);
        h.extend_from_slice(&BITS_MAGIC);
        h.extend_from_slice(&BITS_VERSION.to_le_bytes());
        h.push(self.d as u8);
        h.push(pad);
        h.extend_from_slice(&self.n_events_used.to_le_bytes());
        w.write_all(&h)?;
        w.write_all(&self.bytes)?;
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut h = [0u8; BITS_HEADER_BYTES];
        r.read_exact(&mut h)
            .map_err(|e| Error::format("bitstream header", e.to_string()))?;
        if h[0..4] != BITS_MAGIC {
            return Err(Error::format("bitstream header", "bad magic"));
        }
        let version = u16::from_le_bytes([h[4], h[5]]);
        if version != BITS_VERSION {
            return Err(Error::format("bitstream header", format!("unsupported version {version}")));
        }
        let d = h[6] as u32;
        check_d(d)?;
        let pad = h[7] as u64;
        let events = u64::from_le_bytes(h[8..16].try_into().unwrap());
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let len = events * d as u64;
        if bytes.len() as u64 * 8 != len + pad || pad > 7 {
            return Err(Error::format(
                "bitstream",
                format!("{} payload bytes do not hold {events} words of {d} bits", bytes.len()),
            ));
        }
        Ok(Self {
            bytes,
            len,
            d,
            n_events_used: events,
            n_discarded: 0,
            source: SourceMeta::default(),
        })
    }
}

/// Concatenates the words of all fully resolved events in record order.
pub fn generate(records: &[CountRecord], d: u32) -> Result<BitStream> {
    let mut s = BitStream::new(d)?;
    for r in records {
        match r.total() {
            Ok(n) => s.push_count(n),
            Err(_) => s.n_discarded += 1,
        }
    }
    Ok(s)
}

/// Residue frequencies of a stream with their multinomial standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalBias {
    pub q: u32,
    pub n_symbols: u64,
    pub frequencies: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub max_bias: f64,
    /// Standard error of the residue with the largest deviation.
    pub max_bias_se: f64,
}

/// Residues of each event word modulo `q`, which must divide 2^d.
pub fn empirical_bias(stream: &BitStream, q: u32) -> Result<EmpiricalBias> {
    if q < 2 || !q.is_power_of_two() || q > (1 << stream.d) {
        return Err(Error::domain(format!(
            "modulus {q} must be a power of two between 2 and 2^{}",
            stream.d
        )));
    }
    let n = stream.n_events_used;
    if n < q as u64 * 100 {
        return Err(Error::InsufficientData(format!(
            "{n} symbols are fewer than 100 per residue for q = {q}"
        )));
    }
    let mut counts = vec![0u64; q as usize];
    for w in stream.words() {
        counts[(w % q) as usize] += 1;
    }
    let nf = n as f64;
    let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / nf).collect();
    let std_errors: Vec<f64> = frequencies.iter().map(|p| (p * (1.0 - p) / nf).sqrt()).collect();
    let target = 1.0 / q as f64;
    let (imax, max_bias) = frequencies
        .iter()
        .map(|p| (p - target).abs())
        .enumerate()
        .fold((0, -1.0), |acc, (i, b)| if b > acc.1 { (i, b) } else { acc });
    Ok(EmpiricalBias {
        q,
        n_symbols: n,
        max_bias_se: std_errors[imax],
        frequencies,
        std_errors,
        max_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::{Assignment, DiscardReason};

    fn recs(totals: &[u32]) -> Vec<CountRecord> {
        totals
            .iter()
            .enumerate()
            .map(|(i, &t)| CountRecord {
                event_id: i as u64,
                channels: [Assignment::Photons(t), Assignment::Photons(0), Assignment::Photons(0)],
            })
            .collect()
    }

    #[test]
    fn word_examples() {
        assert_eq!(bits_from_count(6, 3).unwrap(), vec![1, 1, 0]);
        assert_eq!(bits_from_count(57, 3).unwrap(), vec![0, 0, 1]);
        assert_eq!(bits_from_count(2, 2).unwrap(), vec![1, 0]);
        assert!(bits_from_count(1, 0).is_err());
        assert!(bits_from_count(1, 6).is_err());
    }

    #[test]
    fn generate_examples() {
        assert_eq!(generate(&recs(&[0, 1, 2, 3]), 1).unwrap().unpacked(), vec![0, 1, 0, 1]);
        assert_eq!(generate(&recs(&[57, 6]), 3).unwrap().unpacked(), vec![0, 0, 1, 1, 1, 0]);
        let mut r = recs(&[1, 2]);
        r[0].channels[1] = Assignment::Discard(DiscardReason::Overflow);
        let s = generate(&r, 2).unwrap();
        assert_eq!((s.unpacked(), s.n_events_used, s.n_discarded), (vec![1, 0], 1, 1));
    }

    #[test]
    fn parity_bit_is_last_bit_of_word() {
        let totals: Vec<u32> = (0..1000).map(|i| (i * 7919 % 113) as u32).collect();
        let p = generate(&recs(&totals), 1).unwrap().unpacked();
        let w = generate(&recs(&totals), 3).unwrap().unpacked();
        for (i, b) in p.iter().enumerate() {
            assert_eq!(*b, w[3 * i + 2]);
        }
    }

    #[test]
    fn file_round_trip() {
        let s = generate(&recs(&[5, 9, 31, 0, 17]), 5).unwrap();
        let mut buf = Vec::new();
        s.write(&mut buf).unwrap();
        assert_eq!(buf.len(), BITS_HEADER_BYTES + 4);
        assert_eq!(buf[7], 7);
        let back = BitStream::read(buf.as_slice()).unwrap();
        assert_eq!(back.unpacked(), s.unpacked());
        assert_eq!(back.words().collect::<Vec<_>>(), vec![5, 9, 31, 0, 17]);
        assert!(BitStream::read(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn cyclic_totals_have_zero_bias() {
        let totals: Vec<u32> = (0..8000).map(|i| i % 8).collect();
        let s = generate(&recs(&totals), 3).unwrap();
        assert_eq!(empirical_bias(&s, 8).unwrap().max_bias, 0.0);
        assert_eq!(empirical_bias(&s, 2).unwrap().max_bias, 0.0);
        assert!(empirical_bias(&s, 16).is_err());
        let short = generate(&recs(&totals[..700]), 3).unwrap();
        assert!(matches!(empirical_bias(&short, 8), Err(Error::InsufficientData(_))));
    }
}
