//! Dense autoencoder codec with ELU hidden layers and optional sparse
//! first/last layers.

mod io;
mod train;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use train::{lr_at, median, relative_errors, train, EpochLog, TrainConfig, TrainReport, TrainingSet};

use crate::error::{check_len, Error, Result};
use crate::store::VectorCodec;

/// Floor on the normalisation range.
pub const BETA: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalizationMeta {
    pub offset: f64,
    pub scale: f64,
}

/// Maps `y_true` onto `[0, 1]` by its own minimum and range.
pub fn normalize(y_true: &[f64]) -> Result<(Vec<f64>, NormalizationMeta)> {
    if y_true.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("NaN in vector to normalise".into()));
    }
    let (lo, hi) = y_true.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if y_true.is_empty() {
        return Ok((Vec::new(), NormalizationMeta { offset: 0.0, scale: BETA }));
    }
    let scale = (hi - lo).max(BETA);
    let y = y_true.iter().map(|v| (v - lo) / scale).collect();
    Ok((y, NormalizationMeta { offset: lo, scale }))
}

pub fn denormalize(y: &[f64], meta: &NormalizationMeta) -> Vec<f64> {
    y.iter().map(|v| meta.offset + meta.scale * v).collect()
}

pub fn denormalize_in_place(y: &mut [f64], meta: &NormalizationMeta) {
    for v in y {
        *v = meta.offset + meta.scale * *v;
    }
}

pub fn elu(x: f64) -> f64 {
    if x < 0.0 {
        x.exp_m1()
    } else {
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut DMatrix<f32>) {
        if self == Activation::Elu {
            z.apply(|v| {
                if *v < 0.0 {
                    *v = v.exp_m1()
                }
            });
        }
    }
}

/// Layer widths of an autoencoder. Hidden layers use `activation`; the
/// latent layer and the reconstruction layer are linear.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub latent_dim: usize,
    /// Decoder hidden widths followed by the output width, which equals `input_dim`.
    pub decoder_widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpArchitecture {
    /// 256 → [128, 64, 32] → 16 → [32, 64, 128, 256].
    pub fn desk() -> Self {
        Self {
            input_dim: 256,
            encoder_widths: vec![128, 64, 32],
            latent_dim: 16,
            decoder_widths: vec![32, 64, 128, 256],
            activation: Activation::Elu,
        }
    }

    /// The large reference instance: 4096 inputs, latent 64.
    pub fn reference() -> Self {
        Self {
            input_dim: 4096,
            encoder_widths: vec![512, 256, 256, 256, 128, 64, 64],
            latent_dim: 64,
            decoder_widths: vec![128, 128, 256, 256, 256, 512, 4096],
            activation: Activation::Elu,
        }
    }

    /// One linear encoder layer and one linear decoder layer.
    pub fn linear(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            encoder_widths: vec![],
            latent_dim,
            decoder_widths: vec![input_dim],
            activation: Activation::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths_ok = self.input_dim > 0
            && self.latent_dim > 0
            && self.encoder_widths.iter().chain(&self.decoder_widths).all(|&w| w > 0);
        if !widths_ok {
            return Err(Error::Config("autoencoder widths must be positive".into()));
        }
        if self.decoder_widths.last() != Some(&self.input_dim) {
            return Err(Error::Config("decoder must end at the input width".into()));
        }
        Ok(())
    }

    pub fn encoder_layers(&self) -> usize {
        self.encoder_widths.len() + 1
    }

    /// `(fan_in, fan_out)` for every layer, encoder first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let widths: Vec<usize> = std::iter::once(self.input_dim)
            .chain(self.encoder_widths.iter().copied())
            .chain(std::iter::once(self.latent_dim))
            .chain(self.decoder_widths.iter().copied())
            .collect();
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn layer_activation(&self, layer: usize) -> Activation {
        let last = self.layer_dims().len() - 1;
        if layer == self.encoder_layers() - 1 || layer == last {
            Activation::Identity
        } else {
            self.activation
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// `op(a) · op(b)` where `op` optionally transposes. Each output element is
/// accumulated in the same order whatever the row count of `a`.
pub(crate) fn matmul(a: &DMatrix<f32>, ta: bool, b: &DMatrix<f32>, tb: bool) -> DMatrix<f32> {
    let (m, k) = if ta { (a.ncols(), a.nrows()) } else { a.shape() };
    let (kb, n) = if tb { (b.ncols(), b.nrows()) } else { b.shape() };
    assert_eq!(k, kb, "matmul: inner dimensions differ");
    let mut out = DMatrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let strides = |x: &DMatrix<f32>, t: bool| {
        let ld = x.nrows() as isize;
        if t {
            (ld, 1)
        } else {
            (1, ld)
        }
    };
    let (rsa, csa) = strides(a, ta);
    let (rsb, csb) = strides(b, tb);
    // SAFETY: pointers and strides describe the column-major storage of live matrices of the stated shapes.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            1,
            m as isize,
        );
    }
    out
}

/// Compressed-row storage of a layer's `fan_in × fan_out` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrWeights {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<u32>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f32>,
}

impl CsrWeights {
    pub fn from_dense(w: &DMatrix<f32>) -> Self {
        let mut row_ptr = vec![0u32];
        let (mut col_idx, mut values) = (Vec::new(), Vec::new());
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                let v = w[(i, j)];
                if v != 0.0 {
                    col_idx.push(j as u32);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len() as u32);
        }
        Self { rows: w.nrows(), cols: w.ncols(), row_ptr, col_idx, values }
    }

    pub fn to_dense(&self) -> DMatrix<f32> {
        let mut w = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for k in self.row_ptr[i] as usize..self.row_ptr[i + 1] as usize {
                w[(i, self.col_idx[k] as usize)] = self.values[k];
            }
        }
        w
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `x · W` for a row-stacked batch `x`.
    pub fn left_mul(&self, x: &DMatrix<f32>) -> DMatrix<f32> {
        let mut out = DMatrix::zeros(x.nrows(), self.cols);
        for i in 0..self.rows {
            let xi = x.column(i);
            for k in self.row_ptr[i] as usize..self.row_ptr[i + 1] as usize {
                out.column_mut(self.col_idx[k] as usize).axpy(self.values[k], &xi, 1.0);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`; the layer computes `σ(y W + b)` for a row vector `y`.
    pub weights: DMatrix<f32>,
    pub bias: Vec<f32>,
    /// Keep-mask in column-major order of `weights`, present once the layer is pruned.
    pub mask: Option<Vec<bool>>,
    pub sparse: Option<CsrWeights>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weights: DMatrix::zeros(fan_in, fan_out), bias: vec![0.0; fan_out], mask: None, sparse: None }
    }

    fn affine(&self, x: &DMatrix<f32>, use_sparse: bool) -> DMatrix<f32> {
        let mut z = match (&self.sparse, use_sparse) {
            (Some(csr), true) => csr.left_mul(x),
            _ => matmul(x, false, &self.weights, false),
        };
        for (j, b) in self.bias.iter().enumerate() {
            z.column_mut(j).add_scalar_mut(*b);
        }
        z
    }

    pub fn sparsity(&self) -> f64 {
        let zeros = self.weights.iter().filter(|v| **v == 0.0).count();
        zeros as f64 / self.weights.len() as f64
    }
}

/// Trained (or freshly initialised) encoder/decoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCodec {
    pub arch: MlpArchitecture,
    pub layers: Vec<Layer>,
    /// Use compressed-row kernels for pruned layers at inference.
    pub use_sparse: bool,
    pub trained: bool,
}

impl MlpCodec {
    pub fn zeros(arch: MlpArchitecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch.layer_dims().into_iter().map(|(i, o)| Layer::zeros(i, o)).collect();
        Ok(Self { arch, layers, use_sparse: true, trained: false })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random(arch: MlpArchitecture, seed: u64) -> Result<Self> {
        let mut codec = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut codec.layers {
            let (fi, fo) = layer.weights.shape();
            let limit = (6.0 / (fi + fo) as f32).sqrt();
            layer.weights = DMatrix::from_fn(fi, fo, |_, _| rng.random_range(-limit..limit));
        }
        Ok(codec)
    }

    /// Rebuilds compressed-row weights of masked layers from their dense values.
    pub fn refresh_sparse(&mut self) {
        for layer in &mut self.layers {
            layer.sparse = layer.mask.as_ref().map(|_| CsrWeights::from_dense(&layer.weights));
        }
    }

    fn run(&self, mut x: DMatrix<f32>, layers: std::ops::Range<usize>) -> DMatrix<f32> {
        for l in layers {
            x = self.layers[l].affine(&x, self.use_sparse);
            self.arch.layer_activation(l).apply(&mut x);
        }
        x
    }

    /// Encodes a row-stacked batch (`B × input_dim`) to latents (`B × latent_dim`).
    pub fn encode_matrix(&self, x: &DMatrix<f32>) -> Result<DMatrix<f32>> {
        check_len(self.arch.input_dim, x.ncols())?;
        Ok(self.run(x.clone(), 0..self.arch.encoder_layers()))
    }

    /// Decodes a row-stacked batch of latents.
    pub fn decode_matrix(&self, z: &DMatrix<f32>) -> Result<DMatrix<f32>> {
        check_len(self.arch.latent_dim, z.ncols())?;
        Ok(self.run(z.clone(), self.arch.encoder_layers()..self.layers.len()))
    }

    pub fn encode(&self, y: &[f64]) -> Result<Vec<f32>> {
        check_len(self.arch.input_dim, y.len())?;
        let x = DMatrix::from_iterator(1, y.len(), y.iter().map(|v| *v as f32));
        Ok(self.encode_matrix(&x)?.iter().copied().collect())
    }

    pub fn decode(&self, latent: &[f32]) -> Result<Vec<f64>> {
        check_len(self.arch.latent_dim, latent.len())?;
        let z = DMatrix::from_row_slice(1, latent.len(), latent);
        Ok(self.decode_matrix(&z)?.iter().map(|v| *v as f64).collect())
    }

    pub fn reconstruct_matrix(&self, x: &DMatrix<f32>) -> Result<DMatrix<f32>> {
        self.decode_matrix(&self.encode_matrix(x)?)
    }
}

/// Row-stacks `data` (row-major, rows of length `n`) into an f32 matrix.
pub(crate) fn rows_to_matrix(n: usize, data: &[f64]) -> DMatrix<f32> {
    let rows = data.len() / n;
    DMatrix::from_fn(rows, n, |i, j| data[i * n + j] as f32)
}

impl VectorCodec for MlpCodec {
    fn name(&self) -> &'static str {
        "ae"
    }

    fn input_dim(&self) -> Option<usize> {
        Some(self.arch.input_dim)
    }

    fn encode_batch(&self, n_in: usize, data: &[f64]) -> Result<Vec<Vec<u8>>> {
        check_len(self.arch.input_dim, n_in)?;
        let z = self.encode_matrix(&rows_to_matrix(n_in, data))?;
        Ok(z.row_iter().map(|row| row.iter().flat_map(|v| v.to_le_bytes()).collect()).collect())
    }

    fn decode_batch(&self, n_in: usize, payloads: &[&[u8]]) -> Result<Vec<f64>> {
        check_len(self.arch.input_dim, n_in)?;
        let latent = self.arch.latent_dim;
        let mut flat = Vec::with_capacity(payloads.len() * latent);
        for p in payloads {
            check_len(4 * latent, p.len())?;
            flat.extend(p.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        }
        let z = DMatrix::from_row_slice(payloads.len(), latent, &flat);
        let y = self.decode_matrix(&z)?;
        Ok(y.transpose().iter().map(|v| *v as f64).collect())
    }

    fn tolerance(&self) -> Option<f64> {
        None
    }
}
