//! Adaptive multi-symbol range coder.
//!
//! The encoder follows the classic carry-propagating design (33-bit `low`,
//! 32-bit `range`, byte-wise normalization below 2^24). Symbol statistics come
//! from [`AdaptiveModel`], a frequency-count model that both sides update in
//! lockstep. A binary source is simply a two-symbol model.
//!
//! The encoder also tracks the model's information content
//! `sum(-log2 p(symbol))`, which is what the coded length is compared against
//! when measuring coder overhead.

use crate::error::CodecError;

const TOP: u32 = 1 << 24;

/// Largest total frequency a model may reach before its counts are halved.
pub const MAX_TOTAL: u32 = 1 << 16;

/// Frequency-count model over a fixed alphabet `0..len`.
///
/// Every symbol starts with count 1 and gains [`AdaptiveModel::INCREMENT`]
/// each time it is coded, which amounts to a Krichevsky–Trofimov style
/// estimator. Counts are halved whenever the total exceeds [`MAX_TOTAL`].
#[derive(Debug, Clone)]
pub struct AdaptiveModel {
    freqs: Vec<u32>,
    total: u32,
}

impl AdaptiveModel {
    pub const INCREMENT: u32 = 2;

    pub fn new(alphabet: usize) -> Self {
        assert!(
            (1..=4096).contains(&alphabet),
            "alphabet size {alphabet} out of range"
        );
        Self {
            freqs: vec![1; alphabet],
            total: alphabet as u32,
        }
    }

    pub fn alphabet(&self) -> usize {
        self.freqs.len()
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    /// Current probability of `symbol` under the model.
    pub fn probability(&self, symbol: usize) -> f64 {
        f64::from(self.freqs[symbol]) / f64::from(self.total)
    }

    fn interval(&self, symbol: usize) -> (u32, u32) {
        let cum = self.freqs[..symbol].iter().sum();
        (cum, self.freqs[symbol])
    }

    fn lookup(&self, target: u32) -> Option<(usize, u32, u32)> {
        let mut cum = 0;
        for (symbol, &freq) in self.freqs.iter().enumerate() {
            if target < cum + freq {
                return Some((symbol, cum, freq));
            }
            cum += freq;
        }
        None
    }

    fn update(&mut self, symbol: usize) {
        self.freqs[symbol] += Self::INCREMENT;
        self.total += Self::INCREMENT;
        if self.total > MAX_TOTAL {
            self.total = 0;
            for f in &mut self.freqs {
                *f = (*f + 1) / 2;
                self.total += *f;
            }
        }
    }
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
    information_bits: f64,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
            information_bits: 0.0,
        }
    }

    fn encode_interval(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0 && cum + freq <= total && total <= MAX_TOTAL);
        let r = self.range / total;
        self.low += u64::from(r) * u64::from(cum);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Codes `symbol` under `model`, then adapts the model.
    pub fn encode(&mut self, model: &mut AdaptiveModel, symbol: usize) {
        let (cum, freq) = model.interval(symbol);
        let total = model.total();
        self.information_bits -= (f64::from(freq) / f64::from(total)).log2();
        self.encode_interval(cum, freq, total);
        model.update(symbol);
    }

    /// Codes the low `nbits` bits of `value` with a flat distribution.
    pub fn encode_bits(&mut self, value: u32, nbits: u32) {
        assert!(nbits <= 16, "at most 16 raw bits per call");
        if nbits == 0 {
            return;
        }
        let value = value & ((1 << nbits) - 1);
        self.information_bits += f64::from(nbits);
        self.encode_interval(value, 1, 1 << nbits);
    }

    /// Information content of everything coded so far, in bits.
    pub fn information_bits(&self) -> f64 {
        self.information_bits
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    base_offset: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    /// `base_offset` is added to positions reported in errors, so that
    /// offsets refer to the enclosing container.
    pub fn new(bytes: &'a [u8], base_offset: usize) -> Result<Self, CodecError> {
        let mut dec = Self {
            bytes,
            pos: 0,
            base_offset,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..5 {
            let b = dec.next_byte()?;
            dec.code = (dec.code << 8) | u32::from(b);
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8, CodecError> {
        let b = *self.bytes.get(self.pos).ok_or(CodecError::Truncated {
            offset: self.base_offset + self.pos,
        })?;
        self.pos += 1;
        Ok(b)
    }

    fn decode_target(&mut self, total: u32) -> Result<(u32, u32), CodecError> {
        let r = self.range / total;
        let target = self.code / r;
        if target >= total {
            return Err(CodecError::Corrupt {
                offset: self.base_offset + self.pos,
            });
        }
        Ok((r, target))
    }

    fn consume(&mut self, r: u32, cum: u32, freq: u32) -> Result<(), CodecError> {
        self.code -= r * cum;
        self.range = r * freq;
        while self.range < TOP {
            let b = self.next_byte()?;
            self.code = (self.code << 8) | u32::from(b);
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode(&mut self, model: &mut AdaptiveModel) -> Result<usize, CodecError> {
        let (r, target) = self.decode_target(model.total())?;
        let (symbol, cum, freq) = model.lookup(target).ok_or(CodecError::Corrupt {
            offset: self.base_offset + self.pos,
        })?;
        self.consume(r, cum, freq)?;
        model.update(symbol);
        Ok(symbol)
    }

    pub fn decode_bits(&mut self, nbits: u32) -> Result<u32, CodecError> {
        assert!(nbits <= 16, "at most 16 raw bits per call");
        if nbits == 0 {
            return Ok(0);
        }
        let (r, target) = self.decode_target(1 << nbits)?;
        self.consume(r, target, 1)?;
        Ok(target)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Codes `symbols` with a single fresh [`AdaptiveModel`] over `alphabet`.
pub fn range_code(symbols: &[usize], alphabet: usize) -> Vec<u8> {
    let mut model = AdaptiveModel::new(alphabet);
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        enc.encode(&mut model, s);
    }
    enc.finish()
}

/// Information content in bits that [`range_code`] would be charged for `symbols`.
pub fn information_content(symbols: &[usize], alphabet: usize) -> f64 {
    let mut model = AdaptiveModel::new(alphabet);
    let mut bits = 0.0;
    for &s in symbols {
        bits -= model.probability(s).log2();
        model.update(s);
    }
    bits
}

/// Inverse of [`range_code`]; the symbol count is not stored in the stream.
pub fn range_decode(bytes: &[u8], alphabet: usize, count: usize) -> Result<Vec<usize>, CodecError> {
    let mut model = AdaptiveModel::new(alphabet);
    let mut dec = RangeDecoder::new(bytes, 0)?;
    (0..count).map(|_| dec.decode(&mut model)).collect()
}
