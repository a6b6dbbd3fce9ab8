//! Mini-batch training with LAMB, magnitude pruning and masked fine-tuning.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{matmul, Activation, MlpArchitecture, MlpCodec};
use crate::error::{Error, Result};

/// Normalised training vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub n_in: usize,
    pub data: Vec<f32>,
}

impl TrainingSet {
    pub fn new(n_in: usize, data: Vec<f32>) -> Result<Self> {
        if n_in == 0 || !data.len().is_multiple_of(n_in) {
            return Err(Error::Data(format!("{} values do not form records of length {n_in}", data.len())));
        }
        Ok(Self { n_in, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.n_in
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.n_in..(i + 1) * self.n_in]
    }

    pub fn gather(&self, rows: &[usize]) -> DMatrix<f32> {
        DMatrix::from_fn(rows.len(), self.n_in, |i, j| self.data[rows[i] * self.n_in + j])
    }

    /// Deterministic `(train, validation)` split of record indices.
    pub fn split(&self, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.len() as f64) * validation_fraction).round() as usize;
        let val = idx.split_off(self.len() - n_val.min(self.len()));
        (idx, val)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub trust_clip: (f64, f64),
    /// Fraction of first-encoder and last-decoder weights zeroed; 0 disables pruning.
    pub prune_fraction: f64,
    pub finetune_epochs: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 512,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            decay_every: 5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 0.0,
            trust_clip: (1e-3, 10.0),
            prune_fraction: 0.95,
            finetune_epochs: 5,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Learning rate of 1-based dense-training `epoch`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let drops = (epoch.max(1) - 1) / cfg.decay_every.max(1);
    cfg.learning_rate * cfg.lr_decay.powi(drops as i32)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub finetune: bool,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub train_records: usize,
    pub validation_records: usize,
    /// Relative l2 reconstruction errors on the validation records with nonzero norm.
    pub validation_rel_errors: Vec<f64>,
}

impl TrainReport {
    pub fn median_validation_error(&self) -> Option<f64> {
        median(&self.validation_rel_errors)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

struct Lamb {
    /// Two entries per layer: weights, then bias.
    state: Vec<Moments>,
    step: i32,
}

impl Lamb {
    fn new(codec: &MlpCodec) -> Self {
        let state = codec
            .layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .map(|n| Moments { m: vec![0.0; n], v: vec![0.0; n] })
            .collect();
        Self { state, step: 0 }
    }

    fn update(&mut self, slot: usize, param: &mut [f32], grad: &[f32], lr: f64, cfg: &TrainConfig, mask: Option<&[bool]>) {
        let mo = &mut self.state[slot];
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        let mut dir = vec![0f32; param.len()];
        for i in 0..param.len() {
            mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * grad[i];
            mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = mo.m[i] as f64 / c1;
            let vh = mo.v[i] as f64 / c2;
            dir[i] = (mh / (vh.sqrt() + cfg.epsilon) + cfg.weight_decay * param[i] as f64) as f32;
        }
        if let Some(mask) = mask {
            for (d, keep) in dir.iter_mut().zip(mask) {
                if !keep {
                    *d = 0.0;
                }
            }
        }
        let wn = param.iter().map(|w| (*w as f64).powi(2)).sum::<f64>().sqrt();
        let dn = dir.iter().map(|d| (*d as f64).powi(2)).sum::<f64>().sqrt();
        let trust = if wn > 0.0 && dn > 0.0 { (wn / dn).clamp(cfg.trust_clip.0, cfg.trust_clip.1) } else { 1.0 };
        let step = (lr * trust) as f32;
        for (w, d) in param.iter_mut().zip(&dir) {
            *w -= step * d;
        }
        if let Some(mask) = mask {
            for (w, keep) in param.iter_mut().zip(mask) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }
}

fn forward_cache(codec: &MlpCodec, x: DMatrix<f32>) -> Vec<DMatrix<f32>> {
    let mut acts = vec![x];
    for (l, layer) in codec.layers.iter().enumerate() {
        let mut z = layer.affine(acts.last().unwrap(), false);
        codec.arch.layer_activation(l).apply(&mut z);
        acts.push(z);
    }
    acts
}

fn mse(a: &DMatrix<f32>, b: &DMatrix<f32>) -> f64 {
    let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    s / a.len() as f64
}

/// One optimiser step on batch `x`; returns the batch loss before the step.
fn train_step(codec: &mut MlpCodec, opt: &mut Lamb, x: DMatrix<f32>, lr: f64, cfg: &TrainConfig) -> f64 {
    let acts = forward_cache(codec, x);
    let (x, out) = (&acts[0], acts.last().unwrap());
    let loss = mse(out, x);
    let mut da = (out - x) * (2.0 / out.len() as f32);
    opt.step += 1;
    for l in (0..codec.layers.len()).rev() {
        let a = &acts[l + 1];
        if codec.arch.layer_activation(l) == Activation::Elu {
            da.zip_apply(a, |d, av| {
                if av < 0.0 {
                    *d *= av + 1.0
                }
            });
        }
        let dz = da;
        let dw = matmul(&acts[l], true, &dz, false);
        let db: Vec<f32> = dz.column_iter().map(|c| c.sum()).collect();
        if l > 0 {
            da = matmul(&dz, false, &codec.layers[l].weights, true);
        } else {
            da = DMatrix::zeros(0, 0);
        }
        let layer = &mut codec.layers[l];
        let mask = layer.mask.clone();
        opt.update(2 * l, layer.weights.as_mut_slice(), dw.as_slice(), lr, cfg, mask.as_deref());
        opt.update(2 * l + 1, &mut layer.bias, &db, lr, cfg, None);
    }
    loss
}

fn validation_loss(codec: &MlpCodec, set: &TrainingSet, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    let mut total = 0.0;
    for chunk in rows.chunks(4096) {
        let x = set.gather(chunk);
        let y = codec.reconstruct_matrix(&x).expect("shape checked at training start");
        total += mse(&y, &x) * chunk.len() as f64;
    }
    total / rows.len() as f64
}

/// Relative l2 reconstruction error of each listed record; zero-norm records are skipped.
pub fn relative_errors(codec: &MlpCodec, set: &TrainingSet, rows: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(4096) {
        let x = set.gather(chunk);
        let y = codec.reconstruct_matrix(&x)?;
        for i in 0..chunk.len() {
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for j in 0..x.ncols() {
                num += ((y[(i, j)] - x[(i, j)]) as f64).powi(2);
                den += (x[(i, j)] as f64).powi(2);
            }
            if den > 0.0 {
                out.push((num / den).sqrt());
            }
        }
    }
    Ok(out)
}

fn magnitude_mask(w: &DMatrix<f32>, prune_fraction: f64) -> Vec<bool> {
    let n = w.len();
    let keep = n - (prune_fraction * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| w.as_slice()[b].abs().total_cmp(&w.as_slice()[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    for &i in &order[..keep.min(n)] {
        mask[i] = true;
    }
    mask
}

fn run_epochs(
    codec: &mut MlpCodec,
    set: &TrainingSet,
    train_rows: &mut [usize],
    val_rows: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    epochs: std::ops::RangeInclusive<usize>,
    lr_of: impl Fn(usize) -> f64,
    finetune: bool,
    report: &mut TrainReport,
) -> Result<()> {
    let mut opt = Lamb::new(codec);
    for epoch in epochs {
        let lr = lr_of(epoch);
        train_rows.shuffle(rng);
        let mut loss_sum = 0.0;
        for batch in train_rows.chunks(cfg.batch_size) {
            loss_sum += train_step(codec, &mut opt, set.gather(batch), lr, cfg) * batch.len() as f64;
        }
        let train_loss = loss_sum / train_rows.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Solver(format!("training loss diverged at epoch {epoch}")));
        }
        let val_loss = validation_loss(codec, set, val_rows);
        log::info!("epoch {epoch}{}: lr {lr:.3e} train {train_loss:.4e} val {val_loss:.4e}", if finetune { " (fine-tune)" } else { "" });
        report.epochs.push(EpochLog { epoch, finetune, lr, train_loss, val_loss });
    }
    Ok(())
}

/// Trains a codec of shape `arch` on `set`.
pub fn train(set: &TrainingSet, arch: MlpArchitecture, cfg: &TrainConfig) -> Result<(MlpCodec, TrainReport)> {
    if set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if set.n_in != arch.input_dim {
        return Err(Error::Shape { expected: arch.input_dim, got: set.n_in });
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.prune_fraction) {
        return Err(Error::Config("invalid training hyperparameters".into()));
    }
    let mut codec = MlpCodec::random(arch, cfg.seed)?;
    codec.use_sparse = false;
    let (mut train_rows, val_rows) = set.split(cfg.validation_fraction, cfg.seed ^ 0x5eed);
    if train_rows.is_empty() {
        return Err(Error::Data("no training records after the validation split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut report = TrainReport { train_records: train_rows.len(), validation_records: val_rows.len(), ..Default::default() };
    run_epochs(&mut codec, set, &mut train_rows, &val_rows, cfg, &mut rng, 1..=cfg.epochs, |e| lr_at(cfg, e), false, &mut report)?;

    if cfg.prune_fraction > 0.0 {
        let last = codec.layers.len() - 1;
        for l in [0, last] {
            let layer = &mut codec.layers[l];
            let mask = magnitude_mask(&layer.weights, cfg.prune_fraction);
            for (w, keep) in layer.weights.iter_mut().zip(&mask) {
                if !keep {
                    *w = 0.0;
                }
            }
            layer.mask = Some(mask);
        }
        let lr = lr_at(cfg, cfg.epochs);
        let range = cfg.epochs + 1..=cfg.epochs + cfg.finetune_epochs;
        run_epochs(&mut codec, set, &mut train_rows, &val_rows, cfg, &mut rng, range, |_| lr, true, &mut report)?;
        codec.refresh_sparse();
        codec.use_sparse = true;
    }
    codec.trained = true;
    report.validation_rel_errors = relative_errors(&codec, set, &val_rows)?;
    Ok((codec, report))
}
