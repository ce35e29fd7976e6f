//! Binary checkpoint encoding.
//!
//! Layout: the 8-byte magic `AASNCKP1`, then a sequence of sections. Every
//! scalar is little-endian: counts and ids as `u64`, reals as the IEEE-754
//! bit pattern of an `f64` (so a round trip is bit-exact), booleans and tags
//! as a single byte. A vector is its `u64` length followed by its elements. A
//! section starts with a 4-byte ASCII tag so a reader fails fast on
//! misaligned input.
//!
//! Sections written by [`crate::trainer::Engine::save`], in order:
//!
//! - `CONF`: the trainer configuration as a length-prefixed JSON string.
//! - `STOR`: the embedding store (dimension, history capacity, Adam
//!   hyperparameters, RNG seed/stream/word position, then per field `k`,
//!   shared vectors with their Adam states, the unique slot table with owners,
//!   free list and Adam states, and every id's frequency, position, slot and
//!   loss history).
//! - `RECM`: recommendation model layers and Adam states.
//! - `AGNT`: per field, actor and target actor, then critic and target
//!   critic when present, each with their Adam states (agent modes only).
//! - `ENGN`: loop counters, the smoothed TD-error window and the engine RNG.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::embedding::{read_adam_state, write_adam_state};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseLayer, Matrix, Mlp, MlpOptimizer};

pub const MAGIC: &[u8; 8] = b"AASNCKP1";

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(MAGIC);
        w
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn tag(&mut self, tag: &[u8; 4]) {
        self.buf.extend_from_slice(tag);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn bool(&mut self, v: bool) {
        self.buf.push(u8::from(v));
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.usize(vs.len());
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn bytes(&mut self, bytes: &[u8]) {
        self.usize(bytes.len());
        self.buf.extend_from_slice(bytes);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("missing magic header".into()));
        }
        Ok(Self {
            buf,
            pos: MAGIC.len(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn expect_tag(&mut self, tag: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != tag {
            return Err(Error::Checkpoint(format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("invalid bool byte {b}"))),
        }
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("count overflows usize".into()))
    }

    /// A length prefix, sanity-checked against the remaining input.
    pub fn len(&mut self, elem_size: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem_size.max(1)) > self.buf.len() - self.pos {
            return Err(Error::Checkpoint(format!(
                "length {n} exceeds remaining input"
            )));
        }
        Ok(n)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<&'a str> {
        std::str::from_utf8(self.bytes()?).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn write_matrix(w: &mut Writer, m: &Matrix) {
    w.usize(m.rows());
    w.usize(m.cols());
    w.f64s(m.data());
}

pub fn read_matrix(r: &mut Reader<'_>) -> Result<Matrix> {
    let rows = r.usize()?;
    let cols = r.usize()?;
    let data = r.f64s()?;
    if data.len() != rows.saturating_mul(cols) {
        return Err(Error::Checkpoint(format!(
            "matrix {rows}x{cols} has {} values",
            data.len()
        )));
    }
    Matrix::new(rows, cols, data).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn write_mlp(w: &mut Writer, mlp: &Mlp) {
    w.usize(mlp.layers().len());
    for layer in mlp.layers() {
        w.u8(layer.activation().tag());
        write_matrix(w, layer.weights());
        w.f64s(layer.bias());
    }
}

pub fn read_mlp(r: &mut Reader<'_>) -> Result<Mlp> {
    let n = r.len(1)?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let act = Activation::from_tag(r.u8()?)?;
        let weights = read_matrix(r)?;
        let bias = r.f64s()?;
        layers.push(
            DenseLayer::new(weights, bias, act).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
    }
    Mlp::new(layers).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn write_optimizer(w: &mut Writer, opt: &MlpOptimizer) {
    w.usize(opt.blocks().len());
    for (a, b) in opt.blocks() {
        write_adam_state(w, a);
        write_adam_state(w, b);
    }
}

pub fn read_optimizer(r: &mut Reader<'_>) -> Result<MlpOptimizer> {
    let n = r.len(1)?;
    let blocks = (0..n)
        .map(|_| Ok((read_adam_state(r)?, read_adam_state(r)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MlpOptimizer::from_blocks(blocks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalars_round_trip_bit_exact() {
        let mut w = Writer::new();
        w.tag(b"TEST");
        w.u64(u64::MAX);
        w.f64(-0.0);
        w.f64(f64::MIN_POSITIVE);
        w.f64s(&[1.5, f64::NAN]);
        w.str("héllo");
        w.bool(true);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes).unwrap();
        r.expect_tag(b"TEST").unwrap();
        assert_eq!(r.u64().unwrap(), u64::MAX);
        assert_eq!(r.f64().unwrap().to_bits(), (-0.0f64).to_bits());
        assert_eq!(r.f64().unwrap(), f64::MIN_POSITIVE);
        let v = r.f64s().unwrap();
        assert_eq!(v[0], 1.5);
        assert!(v[1].is_nan());
        assert_eq!(r.str().unwrap(), "héllo");
        assert!(r.bool().unwrap());
        r.finish().unwrap();
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(Reader::new(b"nope").is_err());
        let mut w = Writer::new();
        w.tag(b"ABCD");
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes).unwrap();
        assert!(r.expect_tag(b"WXYZ").is_err());
        let mut r = Reader::new(&bytes[..10]).unwrap();
        assert!(r.u64().is_err());
    }
}

/// Seed, stream and word position: enough to resume the exact sequence.
pub fn write_rng(w: &mut Writer, rng: &ChaCha8Rng) {
    for b in rng.get_seed() {
        w.u8(b);
    }
    w.u64(rng.get_stream());
    let pos = rng.get_word_pos();
    w.u64(pos as u64);
    w.u64((pos >> 64) as u64);
}

pub fn read_rng(r: &mut Reader<'_>) -> Result<ChaCha8Rng> {
    let mut seed = [0u8; 32];
    for b in &mut seed {
        *b = r.u8()?;
    }
    let stream = r.u64()?;
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(lo | (hi << 64));
    Ok(rng)
}
