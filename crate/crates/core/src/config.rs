//! TOML run configuration and the inverse problem it describes.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adjoint::Objective;
use crate::datagen::DatagenConfig;
use crate::dias::DiasConfig;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::mlp::{MlpArchitecture, MlpCodec, TrainConfig};
use crate::newton::NewtonConfig;
use crate::prior::BiLaplacianPrior;
use crate::quant::QuantizerConfig;
use crate::store::{Scheme, StoreFactory};
use crate::wave::{ForwardConfig, SourceKind, SourceSpec, TimeAxis};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub cells: Vec<usize>,
    /// Physical length of axis 0; spacing is `extent / cells[0]`.
    pub extent: f64,
    pub tile: Vec<usize>,
}

/// Axis-aligned box where the wavespeed differs from the background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inclusion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumSection {
    pub density: f64,
    pub background: f64,
    #[serde(default)]
    pub inclusions: Vec<Inclusion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub final_time: f64,
    /// Fraction of the stability limit used for the timestep.
    pub cfl: f64,
    /// Wavespeed the timestep must stay stable for.
    pub c_ref: f64,
}

/// A horizontal line of receivers `depth` below the top, every `stride` columns,
/// or an explicit node list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceiverSection {
    #[serde(default)]
    pub depth: f64,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub nodes: Option<Vec<usize>>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub noise_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub alpha: f64,
    pub theta: f64,
    pub mean: f64,
    pub c_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Full,
    Checkpoint,
    Ae,
    Quant,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Backend::Full),
            "checkpoint" => Ok(Backend::Checkpoint),
            "ae" => Ok(Backend::Ae),
            "quant" => Ok(Backend::Quant),
            other => Err(Error::Config(format!("unknown store backend '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreSection {
    pub backend: Backend,
    /// `"space"` or `"time"`.
    pub scheme: String,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_block")]
    pub block_size: usize,
    #[serde(default)]
    pub checkpoint_interval: Option<usize>,
    #[serde(default)]
    pub codec_file: Option<PathBuf>,
}

fn default_window() -> usize {
    16
}

fn default_eta() -> f64 {
    1e-3
}

fn default_block() -> usize {
    64
}

impl StoreSection {
    pub fn scheme(&self) -> Result<Scheme> {
        match self.scheme.as_str() {
            "space" => Ok(Scheme::Space),
            "time" => Ok(Scheme::Time { window: self.window }),
            other => Err(Error::Config(format!("unknown consolidation scheme '{other}'"))),
        }
    }

    /// Factory for `self.backend`; the autoencoder backend needs `codec`.
    pub fn factory(&self, codec: Option<Arc<MlpCodec>>) -> Result<StoreFactory> {
        Ok(match self.backend {
            Backend::Full => StoreFactory::Full,
            Backend::Checkpoint => StoreFactory::Checkpoint { interval: self.checkpoint_interval },
            Backend::Quant => {
                let config = QuantizerConfig { tolerance: self.eta, block_size: self.block_size };
                config.validate()?;
                StoreFactory::Quant { config, scheme: self.scheme()? }
            }
            Backend::Ae => StoreFactory::Mlp {
                codec: codec.ok_or_else(|| Error::Config("the ae backend needs a trained codec file".into()))?,
                scheme: self.scheme()?,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSection,
    pub medium: MediumSection,
    pub time: TimeSection,
    pub sources: Vec<SourceSpec>,
    pub receivers: ReceiverSection,
    pub data: DataSection,
    pub prior: PriorSection,
    pub store: StoreSection,
    #[serde(default)]
    pub newton: NewtonConfig,
    #[serde(default)]
    pub architecture: Option<MlpArchitecture>,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub datagen: DatagenConfig,
    #[serde(default)]
    pub dias: DiasConfig,
}

/// Everything needed to run an inversion.
#[derive(Debug, Clone)]
pub struct Problem {
    pub forward: ForwardConfig,
    pub truth: Vec<f64>,
    pub prior: BiLaplacianPrior,
    pub objective: Objective,
}

impl Problem {
    pub fn grid(&self) -> &Grid {
        &self.forward.grid
    }

    /// Starting model for inversion: the prior mean.
    pub fn initial_guess(&self) -> Vec<f64> {
        self.prior.mean().to_vec()
    }
}

impl RunConfig {
    /// Two-dimensional box setup: 32² cells on the unit square, three Ricker
    /// sources near the top, one receiver per column, a single box inclusion.
    pub fn desk() -> Self {
        let source = |x: f64| SourceSpec {
            location: vec![x, 0.9],
            kind: SourceKind::Ricker,
            t_c: 0.6,
            sigma_t: 1.0 / std::f64::consts::PI,
            sigma_x: 0.05,
            direction: vec![0.0, -1.0],
        };
        Self {
            grid: GridSection { cells: vec![32, 32], extent: 1.0, tile: vec![4, 4] },
            medium: MediumSection {
                density: 1.0,
                background: 1.0,
                inclusions: vec![Inclusion { lo: vec![0.375, 0.375], hi: vec![0.625, 0.625], value: 1.2 }],
            },
            time: TimeSection { final_time: 2.0, cfl: 0.5, c_ref: 1.5 },
            sources: vec![source(0.25), source(0.5), source(0.75)],
            receivers: ReceiverSection { depth: 0.03, stride: 1, nodes: None },
            data: DataSection { noise_fraction: 0.01, seed: 1 },
            prior: PriorSection { alpha: 28.0, theta: 0.01, mean: 1.0, c_min: 0.5 },
            store: StoreSection {
                backend: Backend::Checkpoint,
                scheme: "time".into(),
                window: 16,
                eta: 1e-3,
                block_size: 64,
                checkpoint_interval: None,
                codec_file: None,
            },
            newton: NewtonConfig { max_newton_iters: 8, c_min: Some(0.5), ..Default::default() },
            architecture: Some(MlpArchitecture::desk()),
            training: TrainConfig {
                epochs: 60,
                batch_size: 64,
                learning_rate: 1e-2,
                decay_every: 15,
                finetune_epochs: 30,
                ..Default::default()
            },
            datagen: DatagenConfig::default(),
            dias: DiasConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn build_grid(&self) -> Result<Grid> {
        let g = &self.grid;
        let first = *g.cells.first().ok_or_else(|| Error::Config("grid needs at least one axis".into()))?;
        Grid::new(&g.cells, g.extent / first as f64, &g.tile)
    }

    pub fn true_wavespeed(&self, grid: &Grid) -> Vec<f64> {
        (0..grid.node_count())
            .map(|i| {
                let x = grid.coord(i);
                self.medium
                    .inclusions
                    .iter()
                    .rev()
                    .find(|b| (0..grid.dim()).all(|a| x[a] >= b.lo[a] && x[a] <= b.hi[a]))
                    .map_or(self.medium.background, |b| b.value)
            })
            .collect()
    }

    fn receivers(&self, grid: &Grid) -> Result<Vec<usize>> {
        if let Some(nodes) = &self.receivers.nodes {
            if let Some(&bad) = nodes.iter().find(|&&n| n >= grid.node_count()) {
                return Err(Error::Config(format!("receiver node {bad} outside the grid")));
            }
            return Ok(nodes.clone());
        }
        if grid.dim() != 2 || self.receivers.stride == 0 {
            return Err(Error::Config("receiver line needs a 2D grid and a positive stride".into()));
        }
        let [n0, _] = grid.shape2();
        let y = grid.extent(1) - self.receivers.depth;
        let row = grid.multi_index(grid.nearest_node(&[grid.coord(0)[0], y])?)[1];
        Ok((0..n0).step_by(self.receivers.stride).map(|i| grid.index(i, row)).collect())
    }

    fn forward_config(&self, grid: &Grid) -> Result<ForwardConfig> {
        let t = &self.time;
        if !(t.final_time > 0.0 && t.cfl > 0.0 && t.cfl <= 1.0 && t.c_ref > 0.0) {
            return Err(Error::Config("time section needs final_time > 0, cfl in (0, 1], c_ref > 0".into()));
        }
        for b in &self.medium.inclusions {
            if b.lo.len() != grid.dim() || b.hi.len() != grid.dim() {
                return Err(Error::Config("inclusion corners need one entry per axis".into()));
            }
        }
        let dt_max = t.cfl * grid.spacing() / ((grid.dim() as f64).sqrt() * t.c_ref);
        let num_steps = (t.final_time / dt_max).ceil() as usize;
        Ok(ForwardConfig {
            grid: grid.clone(),
            density: vec![self.medium.density; grid.node_count()],
            time: TimeAxis { dt: t.final_time / num_steps as f64, num_steps },
            sources: self.sources.clone(),
            receivers: self.receivers(grid)?,
            initial: None,
        })
    }

    /// Builds the forward model, the prior and the synthetic data.
    pub fn build(&self) -> Result<Problem> {
        let grid = self.build_grid()?;
        let forward = self.forward_config(&grid)?;
        let truth = self.true_wavespeed(&grid);
        let p = &self.prior;
        let prior = BiLaplacianPrior::new(grid.clone(), p.alpha, p.theta, vec![p.mean; grid.node_count()])?
            .with_c_min(p.c_min);
        let objective = Objective::synthesize(forward.clone(), &truth, self.data.noise_fraction, self.data.seed)?;
        Ok(Problem { forward, truth, prior, objective })
    }

    /// Autoencoder shape; defaults to the desk shape when its input width fits the scheme.
    pub fn architecture(&self, grid: &Grid) -> Result<MlpArchitecture> {
        let n_in = self.store.scheme()?.input_dim(grid);
        let arch = self.architecture.clone().unwrap_or_else(MlpArchitecture::desk);
        if arch.input_dim != n_in {
            return Err(Error::Config(format!("autoencoder input {} does not match consolidated length {n_in}", arch.input_dim)));
        }
        arch.validate()?;
        Ok(arch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_round_trips_through_toml() {
        let cfg = RunConfig::desk();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn desk_problem_shape() {
        let cfg = RunConfig::desk();
        let p = cfg.build().unwrap();
        assert_eq!(p.grid().node_count(), 1024);
        assert_eq!(p.forward.receivers.len(), 32);
        assert!((p.forward.time.final_time() - 2.0).abs() < 1e-12);
        let inside = p.truth.iter().filter(|&&c| c == 1.2).count();
        assert_eq!(inside, 64);
        assert_eq!(cfg.architecture(p.grid()).unwrap().input_dim, 256);
    }

    #[test]
    fn bad_sections_are_config_errors() {
        let mut cfg = RunConfig::desk();
        cfg.store.scheme = "diagonal".into();
        assert!(matches!(cfg.store.scheme(), Err(Error::Config(_))));
        assert!(matches!("zip".parse::<Backend>(), Err(Error::Config(_))));
        let mut cfg = RunConfig::desk();
        cfg.store.backend = Backend::Ae;
        assert!(cfg.store.factory(None).is_err());
        assert!(RunConfig::from_toml_str("[grid]\ncells = [8]\n").is_err());
    }
}
