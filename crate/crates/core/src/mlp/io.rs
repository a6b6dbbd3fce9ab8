//! Codec weight file.
//!
//! Little-endian: magic `AEMW`, version `u32`, layer count `u16`, encoder layer
//! count `u16`, hidden activation `u8`. Then per layer: rows `u32`, cols `u32`,
//! storage `u8` (0 dense row-major, 1 compressed rows) and the payload. A
//! compressed payload is `nnz u32`, row pointers `u32`, column indices `u32`
//! and values `f32`. Every layer ends with its `cols` biases as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::{Activation, CsrWeights, Layer, MlpArchitecture, MlpCodec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"AEMW";
const VERSION: u32 = 1;
const DENSE: u8 = 0;
const CSR: u8 = 1;

fn put_u32s(w: &mut impl Write, v: impl IntoIterator<Item = u32>) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn put_f32s(w: &mut impl Write, v: impl IntoIterator<Item = f32>) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|_| Error::Format("truncated weight file".into()))?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        (0..n).map(|_| self.u32()).collect()
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| Ok(f32::from_le_bytes(self.bytes()?))).collect()
    }
}

impl MlpCodec {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u16).to_le_bytes())?;
        w.write_all(&(self.arch.encoder_layers() as u16).to_le_bytes())?;
        w.write_all(&[match self.arch.activation {
            Activation::Elu => 0,
            Activation::Identity => 1,
        }])?;
        for layer in &self.layers {
            let (rows, cols) = layer.weights.shape();
            put_u32s(&mut w, [rows as u32, cols as u32])?;
            if layer.mask.is_some() {
                let csr = CsrWeights::from_dense(&layer.weights);
                w.write_all(&[CSR])?;
                put_u32s(&mut w, [csr.nnz() as u32])?;
                put_u32s(&mut w, csr.row_ptr.iter().copied())?;
                put_u32s(&mut w, csr.col_idx.iter().copied())?;
                put_f32s(&mut w, csr.values.iter().copied())?;
            } else {
                w.write_all(&[DENSE])?;
                put_f32s(&mut w, layer.weights.transpose().iter().copied())?;
            }
            put_f32s(&mut w, layer.bias.iter().copied())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader { inner: r };
        if &r.bytes::<4>()? != MAGIC {
            return Err(Error::Format("bad weight-file magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight-file version {version}")));
        }
        let count = r.u16()? as usize;
        let encoder = r.u16()? as usize;
        let activation = match r.u8()? {
            0 => Activation::Elu,
            1 => Activation::Identity,
            a => return Err(Error::Format(format!("unknown activation tag {a}"))),
        };
        if count < 2 || encoder == 0 || encoder >= count {
            return Err(Error::Format("inconsistent layer counts".into()));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            let layer = match r.u8()? {
                DENSE => {
                    let vals = r.f32s(rows * cols)?;
                    Layer { weights: DMatrix::from_row_slice(rows, cols, &vals), bias: vec![], mask: None, sparse: None }
                }
                CSR => {
                    let nnz = r.u32()? as usize;
                    let row_ptr = r.u32s(rows + 1)?;
                    let col_idx = r.u32s(nnz)?;
                    let values = r.f32s(nnz)?;
                    let well_formed = row_ptr.first() == Some(&0)
                        && row_ptr.last() == Some(&(nnz as u32))
                        && row_ptr.windows(2).all(|p| p[0] <= p[1])
                        && col_idx.iter().all(|&c| (c as usize) < cols);
                    if !well_formed {
                        return Err(Error::Format("corrupt compressed layer".into()));
                    }
                    let csr = CsrWeights { rows, cols, row_ptr, col_idx, values };
                    let weights = csr.to_dense();
                    let mask = weights.iter().map(|v| *v != 0.0).collect();
                    Layer { weights, bias: vec![], mask: Some(mask), sparse: Some(csr) }
                }
                s => return Err(Error::Format(format!("unknown layer storage {s}"))),
            };
            layers.push(Layer { bias: r.f32s(cols)?, ..layer });
        }
        let dims: Vec<(usize, usize)> = layers.iter().map(|l| l.weights.shape()).collect();
        if dims.windows(2).any(|d| d[0].1 != d[1].0) {
            return Err(Error::Format("layer shapes do not chain".into()));
        }
        let arch = MlpArchitecture {
            input_dim: dims[0].0,
            encoder_widths: dims[..encoder - 1].iter().map(|d| d.1).collect(),
            latent_dim: dims[encoder - 1].1,
            decoder_widths: dims[encoder..].iter().map(|d| d.1).collect(),
            activation,
        };
        arch.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(MlpCodec { arch, layers, use_sparse: true, trained: true })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_dense_and_sparse() {
        let mut codec = MlpCodec::random(MlpArchitecture::desk(), 11).unwrap();
        codec.layers[1].bias = (0..64).map(|i| i as f32).collect();
        let w = &mut codec.layers[0].weights;
        let mask: Vec<bool> = (0..w.len()).map(|i| i % 20 == 0).collect();
        for (v, k) in w.iter_mut().zip(&mask) {
            if !k {
                *v = 0.0;
            }
        }
        codec.layers[0].mask = Some(mask);
        codec.refresh_sparse();
        codec.trained = true;
        let mut buf = Vec::new();
        codec.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"AEMW");
        let back = MlpCodec::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, codec);
        assert!(MlpCodec::read_from(&buf[..buf.len() - 2]).is_err());
    }
}
