//! Basic RAPPOR: unary encoding, memoized permanent randomized response,
//! instantaneous randomized response, and the frequency estimator.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::scalar::Scalar;

pub const MAX_K: u8 = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LdpError {
    #[error("reading {reading} does not fit in {k} bits")]
    ReadingOutOfRange { reading: u32, k: u8 },
    #[error("invalid LDP parameters: {0}")]
    InvalidParams(String),
    #[error("no reports to aggregate")]
    EmptyReports,
    #[error("bit vector has {got} bits, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("malformed PRR cache encoding")]
    MalformedCache,
    #[error("line {line}: {reason}")]
    BadReportLine { line: usize, reason: String },
}

/// `f` drives the permanent stage, `p`/`q` the instantaneous one, `k` is the
/// bit width of raw readings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LdpParams<T> {
    pub f: T,
    pub p: T,
    pub q: T,
    pub k: u8,
}

impl<T: Scalar> LdpParams<T> {
    pub fn new(f: T, p: T, q: T, k: u8) -> Result<Self, LdpError> {
        let params = Self { f, p, q, k };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), LdpError> {
        let unit = |v: T| v >= T::zero() && v <= T::one();
        if !(self.f >= T::zero() && self.f < T::one()) {
            return Err(LdpError::InvalidParams(format!("f = {} not in [0, 1)", self.f)));
        }
        if !unit(self.p) || !unit(self.q) {
            return Err(LdpError::InvalidParams("p and q must lie in [0, 1]".into()));
        }
        if self.p == self.q {
            return Err(LdpError::InvalidParams("p must differ from q".into()));
        }
        if !(1..=MAX_K).contains(&self.k) {
            return Err(LdpError::InvalidParams(format!(
                "k = {} not in 1..={MAX_K}",
                self.k
            )));
        }
        Ok(())
    }

    /// Length of encoded vectors, `2^k`.
    pub fn width(&self) -> usize {
        1usize << self.k
    }
}

/// A fixed-length bit vector, packed little-endian with bit 0 first.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitVector {
    // field order matters: ordering is by packed bytes first
    bytes: Vec<u8>,
    len: usize,
}

impl BitVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            bytes: vec![0; packed_len(len)],
            len,
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut v = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            v.set(i, b);
        }
        v
    }

    /// Rejects wrong byte counts and set padding bits.
    pub fn from_packed(bytes: &[u8], len: usize) -> Option<Self> {
        if bytes.len() != packed_len(len) {
            return None;
        }
        let tail = len % 8;
        if tail != 0 && bytes[bytes.len() - 1] >> tail != 0 {
            return None;
        }
        Some(Self {
            bytes: bytes.to_vec(),
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        if value {
            self.bytes[i / 8] |= 1 << (i % 8);
        } else {
            self.bytes[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    pub fn as_packed(&self) -> &[u8] {
        &self.bytes
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.bytes)
    }
}

impl fmt::Debug for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.iter().map(|b| if b { '1' } else { '0' }).collect();
        write!(f, "BitVector[{s}]")
    }
}

fn packed_len(bits: usize) -> usize {
    bits.div_ceil(8)
}

pub fn unary_encode(reading: u32, k: u8) -> Result<BitVector, LdpError> {
    let width = 1usize << k;
    if reading as usize >= width {
        return Err(LdpError::ReadingOutOfRange { reading, k });
    }
    let mut b = BitVector::zeros(width);
    b.set(reading as usize, true);
    Ok(b)
}

/// Index of the set bit of a unary encoding.
pub fn unary_decode(b: &BitVector) -> Option<u32> {
    if b.count_ones() != 1 {
        return None;
    }
    b.iter().position(|x| x).map(|i| i as u32)
}

/// Per-bit outcome masses of the permanent stage: forced one, forced zero,
/// keep the input bit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrrMass<T> {
    pub one: T,
    pub zero: T,
    pub keep: T,
}

pub fn prr_mass<T: Scalar>(f: T) -> PrrMass<T> {
    let half = f / T::lit(2.0);
    PrrMass {
        one: half,
        zero: half,
        keep: T::one() - f,
    }
}

/// `P(b'_i = 1 | b_i)`.
pub fn prr_one_probability<T: Scalar>(f: T, b_i: bool) -> T {
    let m = prr_mass(f);
    if b_i {
        m.one + m.keep
    } else {
        m.one
    }
}

/// `P(O_i = 1 | b'_i)`.
pub fn irr_one_probability<T: Scalar>(p: T, q: T, b_prime_i: bool) -> T {
    if b_prime_i {
        p
    } else {
        q
    }
}

/// The mapping `b -> b'` kept across invocations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrrCache {
    entries: BTreeMap<BitVector, BitVector>,
}

impl PrrCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, b: &BitVector) -> Option<&BitVector> {
        self.entries.get(b)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&BitVector, &BitVector)> {
        self.entries.iter()
    }

    /// Entries sorted by the packed bytes of `b`, each `b ‖ b'`.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (b, b_prime) in &self.entries {
            out.extend_from_slice(b.as_packed());
            out.extend_from_slice(b_prime.as_packed());
        }
        out
    }

    pub fn deserialize(bytes: &[u8], k: u8) -> Result<Self, LdpError> {
        let width = 1usize << k;
        let vlen = packed_len(width);
        if bytes.len() % (2 * vlen) != 0 {
            return Err(LdpError::MalformedCache);
        }
        let mut entries = BTreeMap::new();
        for chunk in bytes.chunks_exact(2 * vlen) {
            let b = BitVector::from_packed(&chunk[..vlen], width).ok_or(LdpError::MalformedCache)?;
            let b_prime =
                BitVector::from_packed(&chunk[vlen..], width).ok_or(LdpError::MalformedCache)?;
            if entries.insert(b, b_prime).is_some() {
                return Err(LdpError::MalformedCache);
            }
        }
        let cache = Self { entries };
        // non-canonical order would give the same map but a different digest
        if cache.serialize() != bytes {
            return Err(LdpError::MalformedCache);
        }
        Ok(cache)
    }
}

pub fn init_state() -> Vec<u8> {
    PrrCache::new().serialize()
}

fn check_len<T: Scalar>(b: &BitVector, params: &LdpParams<T>) -> Result<(), LdpError> {
    if b.len() != params.width() {
        return Err(LdpError::LengthMismatch {
            expected: params.width(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Samples the permanent response for `b` once and memoizes it.
pub fn prr<T: Scalar, R: Rng + ?Sized>(
    b: &BitVector,
    params: &LdpParams<T>,
    cache: &mut PrrCache,
    rng: &mut R,
) -> Result<BitVector, LdpError> {
    check_len(b, params)?;
    if let Some(hit) = cache.get(b) {
        return Ok(hit.clone());
    }
    let half = (params.f / T::lit(2.0)).as_f64();
    let f = params.f.as_f64();
    let mut out = BitVector::zeros(b.len());
    for i in 0..b.len() {
        let u: f64 = rng.gen();
        let bit = if u < half {
            true
        } else if u < f {
            false
        } else {
            b.get(i)
        };
        out.set(i, bit);
    }
    cache.entries.insert(b.clone(), out.clone());
    Ok(out)
}

pub fn irr<T: Scalar, R: Rng + ?Sized>(
    b_prime: &BitVector,
    params: &LdpParams<T>,
    rng: &mut R,
) -> Result<BitVector, LdpError> {
    check_len(b_prime, params)?;
    let (p, q) = (params.p.as_f64(), params.q.as_f64());
    let mut out = BitVector::zeros(b_prime.len());
    for i in 0..b_prime.len() {
        let threshold = if b_prime.get(i) { p } else { q };
        let u: f64 = rng.gen();
        out.set(i, u < threshold);
    }
    Ok(out)
}

/// One report: encode the reading, apply the permanent then the
/// instantaneous response. `prr_rng` and `irr_rng` should be distinct streams.
pub fn ldp_dc<T: Scalar, R1: Rng + ?Sized, R2: Rng + ?Sized>(
    reading: u32,
    params: &LdpParams<T>,
    cache: &mut PrrCache,
    prr_rng: &mut R1,
    irr_rng: &mut R2,
) -> Result<BitVector, LdpError> {
    params.validate()?;
    let b = unary_encode(reading, params.k)?;
    let b_prime = prr(&b, params, cache, prr_rng)?;
    irr(&b_prime, params, irr_rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyEstimate<T> {
    pub n: usize,
    pub counts: Vec<u64>,
    /// Unclipped estimates; may fall outside `[0, 1]`.
    pub estimates: Vec<T>,
}

impl<T: Scalar> FrequencyEstimate<T> {
    pub fn clipped(&self) -> Vec<T> {
        self.estimates
            .iter()
            .map(|&e| e.max(T::zero()).min(T::one()))
            .collect()
    }
}

/// `f̃_x = (c_x − (q + ½fp − ½fq)·n) / ((1 − f)(p − q)·n)` for every bit `x`.
pub fn estimate_frequency<T: Scalar>(
    reports: &[BitVector],
    params: &LdpParams<T>,
) -> Result<FrequencyEstimate<T>, LdpError> {
    params.validate()?;
    if reports.is_empty() {
        return Err(LdpError::EmptyReports);
    }
    let width = params.width();
    let mut counts = vec![0u64; width];
    for r in reports {
        check_len(r, params)?;
        for (x, c) in counts.iter_mut().enumerate() {
            if r.get(x) {
                *c += 1;
            }
        }
    }
    let n = T::from_usize(reports.len()).expect("report count fits the scalar");
    let (f, p, q) = (params.f, params.p, params.q);
    let half = T::lit(0.5);
    let baseline = (q + half * f * p - half * f * q) * n;
    let denom = (T::one() - f) * (p - q) * n;
    let estimates = counts
        .iter()
        .map(|&c| (T::from_u64(c).expect("count fits the scalar") - baseline) / denom)
        .collect();
    Ok(FrequencyEstimate {
        n: reports.len(),
        counts,
        estimates,
    })
}

/// Report file: one hex-encoded packed vector per line. Blank lines are
/// not allowed.
pub fn parse_reports(text: &str, k: u8) -> Result<Vec<BitVector>, LdpError> {
    let width = 1usize << k;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let line_no = i + 1;
            let bytes = hex::decode(line.trim()).map_err(|e| LdpError::BadReportLine {
                line: line_no,
                reason: e.to_string(),
            })?;
            BitVector::from_packed(&bytes, width).ok_or_else(|| LdpError::BadReportLine {
                line: line_no,
                reason: format!("not a packed {width}-bit vector"),
            })
        })
        .collect()
}

pub fn format_reports(reports: &[BitVector]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&r.to_hex());
        out.push('\n');
    }
    out
}

/// `x c_x f̃_x` rows, one per value.
pub fn format_estimate<T: Scalar>(est: &FrequencyEstimate<T>) -> String {
    let mut out = String::new();
    for (x, (c, e)) in est.counts.iter().zip(&est.estimates).enumerate() {
        out.push_str(&format!("{x}\t{c}\t{e}\n"));
    }
    out
}
