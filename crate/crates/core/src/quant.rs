//! Fixed-tolerance block quantizer and an external-process codec hook.
//!
//! Stream layout (little-endian): element count `u32`, then per block the
//! block minimum `f64`, a bit width `u8`, and the packed quantization indices
//! (LSB first, padded to a whole byte). A block whose indices would not fit,
//! or where f64 roundoff would break the tolerance, is stored verbatim with
//! width byte `255`.

use std::io::Write;
use std::process::{Command, Stdio};

use crate::error::{check_len, Error, Result};
use crate::store::VectorCodec;

const MAX_WIDTH: u32 = 56;
const RAW_BLOCK: u8 = 255;
/// Step shrink leaving room for roundoff in `base + step·k`.
const STEP_SHRINK: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantizerConfig {
    pub tolerance: f64,
    #[serde(default = "default_block")]
    pub block_size: usize,
}

fn default_block() -> usize {
    64
}

impl QuantizerConfig {
    pub fn new(tolerance: f64) -> Self {
        Self { tolerance, block_size: default_block() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::Config(format!("quantizer tolerance must be positive, got {}", self.tolerance)));
        }
        if self.block_size == 0 {
            return Err(Error::Config("quantizer block size must be positive".into()));
        }
        Ok(())
    }

    fn step(&self) -> f64 {
        2.0 * self.tolerance * STEP_SHRINK
    }
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    bits: u32,
}

impl BitWriter {
    fn push(&mut self, value: u64, width: u32) {
        if width == 0 {
            return;
        }
        self.acc |= value << self.bits;
        self.bits += width;
        while self.bits >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.bits -= 8;
        }
    }

    fn flush(&mut self) {
        if self.bits > 0 {
            self.out.push(self.acc as u8);
        }
        self.acc = 0;
        self.bits = 0;
    }
}

/// Nearest representable index, or `None` if even that misses the tolerance.
fn quantize(y: f64, base: f64, step: f64, tol: f64) -> Option<u64> {
    let k = ((y - base) / step).round().max(0.0) as u64;
    let err = |k: u64| (base + step * k as f64 - y).abs();
    [k, k.saturating_sub(1), k + 1].into_iter().find(|&c| err(c) <= tol)
}

/// Quantizes `y` so that every decoded element lies within the tolerance.
pub fn q_encode(y: &[f64], cfg: &QuantizerConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    let len = u32::try_from(y.len()).map_err(|_| Error::Data("vector too long for the quantizer".into()))?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in quantizer input".into()));
    }
    let step = cfg.step();
    let mut w = BitWriter { out: len.to_le_bytes().to_vec(), acc: 0, bits: 0 };
    for block in y.chunks(cfg.block_size) {
        let base = block.iter().copied().fold(f64::INFINITY, f64::min);
        w.out.extend_from_slice(&base.to_le_bytes());
        let ks: Option<Vec<u64>> = block.iter().map(|&v| quantize(v, base, step, cfg.tolerance)).collect();
        let kmax = ks.as_ref().and_then(|ks| ks.iter().copied().max()).unwrap_or(0);
        let width = u64::BITS - kmax.leading_zeros();
        let Some(ks) = ks.filter(|_| width <= MAX_WIDTH) else {
            w.out.push(RAW_BLOCK);
            for v in block {
                w.out.extend_from_slice(&v.to_le_bytes());
            }
            continue;
        };
        w.out.push(width as u8);
        for k in ks {
            w.push(k, width);
        }
        w.flush();
    }
    Ok(w.out)
}

/// Inverse of [`q_encode`].
pub fn q_decode(bytes: &[u8], cfg: &QuantizerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let corrupt = || Error::Format("corrupt quantizer stream".into());
    let len = u32::from_le_bytes(bytes.get(..4).ok_or_else(corrupt)?.try_into().unwrap()) as usize;
    let step = cfg.step();
    let mut out = Vec::with_capacity(len);
    let mut pos = 4;
    while out.len() < len {
        let n = cfg.block_size.min(len - out.len());
        let head = bytes.get(pos..pos + 9).ok_or_else(corrupt)?;
        let base = f64::from_le_bytes(head[..8].try_into().unwrap());
        pos += 9;
        if head[8] == RAW_BLOCK {
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(corrupt)?;
            out.extend(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
            pos += 8 * n;
            continue;
        }
        let width = head[8] as u32;
        if width > MAX_WIDTH {
            return Err(corrupt());
        }
        let nbytes = (n * width as usize).div_ceil(8);
        let packed = bytes.get(pos..pos + nbytes).ok_or_else(corrupt)?;
        pos += nbytes;
        let mask = if width == 0 { 0 } else { (1u64 << width) - 1 };
        let (mut acc, mut bits, mut next) = (0u64, 0u32, 0usize);
        for _ in 0..n {
            while bits < width {
                acc |= (packed[next] as u64) << bits;
                next += 1;
                bits += 8;
            }
            let k = acc & mask;
            acc = if width == 0 { acc } else { acc.checked_shr(width).unwrap_or(0) };
            bits -= width;
            out.push(base + step * k as f64);
        }
    }
    if pos != bytes.len() {
        return Err(corrupt());
    }
    Ok(out)
}

/// [`VectorCodec`] backed by [`q_encode`]/[`q_decode`].
#[derive(Debug, Clone)]
pub struct Quantizer {
    config: QuantizerConfig,
}

impl Quantizer {
    pub fn new(config: QuantizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.config
    }
}

impl VectorCodec for Quantizer {
    fn name(&self) -> &'static str {
        "quant"
    }

    fn input_dim(&self) -> Option<usize> {
        None
    }

    fn encode_batch(&self, n_in: usize, data: &[f64]) -> Result<Vec<Vec<u8>>> {
        data.chunks_exact(n_in).map(|v| q_encode(v, &self.config)).collect()
    }

    fn decode_batch(&self, n_in: usize, payloads: &[&[u8]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n_in * payloads.len());
        for p in payloads {
            let v = q_decode(p, &self.config)?;
            check_len(n_in, v.len())?;
            out.extend(v);
        }
        Ok(out)
    }

    fn tolerance(&self) -> Option<f64> {
        Some(self.config.tolerance)
    }
}

/// Codec delegated to an external program.
///
/// The program is invoked as `program [args..] encode|decode N_in tolerance`.
/// Encoding receives the vector as little-endian f64 on stdin and writes the
/// compressed bytes to stdout; decoding does the reverse.
#[derive(Debug, Clone)]
pub struct ExternalCodec {
    pub program: String,
    pub args: Vec<String>,
    pub tolerance: f64,
}

impl ExternalCodec {
    pub fn new(program: impl Into<String>, args: Vec<String>, tolerance: f64) -> Self {
        Self { program: program.into(), args, tolerance }
    }

    fn run(&self, mode: &str, n_in: usize, input: Vec<u8>) -> Result<Vec<u8>> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .args([mode.to_string(), n_in.to_string(), self.tolerance.to_string()])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let mut stdin = child.stdin.take().expect("stdin piped");
        let writer = std::thread::spawn(move || stdin.write_all(&input));
        let output = child.wait_with_output()?;
        writer.join().map_err(|_| Error::Storage("external codec writer panicked".into()))??;
        if !output.status.success() {
            return Err(Error::Storage(format!("external codec {mode} exited with {}", output.status)));
        }
        Ok(output.stdout)
    }
}

impl VectorCodec for ExternalCodec {
    fn name(&self) -> &'static str {
        "external"
    }

    fn input_dim(&self) -> Option<usize> {
        None
    }

    fn encode_batch(&self, n_in: usize, data: &[f64]) -> Result<Vec<Vec<u8>>> {
        data.chunks_exact(n_in)
            .map(|v| self.run("encode", n_in, v.iter().flat_map(|x| x.to_le_bytes()).collect()))
            .collect()
    }

    fn decode_batch(&self, n_in: usize, payloads: &[&[u8]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n_in * payloads.len());
        for p in payloads {
            let bytes = self.run("decode", n_in, p.to_vec())?;
            let v = crate::store::spill::f64s_from_le(&bytes)?;
            check_len(n_in, v.len())?;
            out.extend(v);
        }
        Ok(out)
    }

    fn tolerance(&self) -> Option<f64> {
        Some(self.tolerance)
    }
}
