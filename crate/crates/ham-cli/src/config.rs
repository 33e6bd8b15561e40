//! Flat JSON run configuration. Every key is optional; command-line flags
//! override the file.

use std::path::{Path, PathBuf};

use ham_core::analysis::{NiahSpec, SyntheticSpec};
use ham_core::cost::{ArchConfig, Family, HamOptions, LayerCount, Route, VOCAB};
use ham_core::layer::LayerConfig;
use ham_core::router::{Aggregation, RouterKind, ThresholdParam};
use ham_core::{HamError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub out_dir: PathBuf,

    // cost
    pub family: String,
    /// Hidden size; the reference width of the family when absent.
    pub d: Option<f64>,
    pub layers: Option<u32>,
    pub vocab: f64,
    pub cost_t: f64,
    /// Hybrid cache length; `target_rho · cost_t` when absent.
    pub cost_t_kv: Option<f64>,
    pub ranks: f64,
    pub steps: u64,
    pub route: Route,
    pub itemize: bool,
    pub learnable_tau: bool,
    pub learnable_router: bool,

    // model for trace and sweep
    pub checkpoint: Option<PathBuf>,
    pub d_hidden: usize,
    pub num_layers: usize,
    pub router: RouterKind,
    pub aggregation: Aggregation,
    pub eda: bool,
    pub chunk: usize,
    pub d_conv: usize,

    // corpus for trace and sweep
    pub corpus: Option<PathBuf>,
    pub sequences: usize,
    pub seq_len: usize,
    pub docs_per_sequence: usize,

    // thresholds
    pub tau: Option<f64>,
    pub target_rho: Option<f64>,
    pub grid_points: usize,
    pub control_steps: u64,
    pub control_fine_steps: u64,

    // niah
    pub niah_t: usize,
    pub needle_pos: usize,
    pub needle_len: usize,
    pub pattern_vocab_size: usize,
    pub needle_vocab_size: usize,
    pub embed_dim: usize,
    pub niah_seeds: u64,
}

impl Default for Config {
    fn default() -> Self {
        let syn = SyntheticSpec::default();
        let niah = NiahSpec::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            family: "ham".into(),
            d: None,
            layers: None,
            vocab: VOCAB,
            cost_t: 16384.0,
            cost_t_kv: None,
            ranks: 32.0,
            steps: 95_367,
            route: Route::Polynomial,
            itemize: false,
            learnable_tau: false,
            learnable_router: false,
            checkpoint: None,
            d_hidden: syn.d,
            num_layers: 4,
            router: RouterKind::PredictionError,
            aggregation: Aggregation::Min,
            eda: false,
            chunk: 4,
            d_conv: 4,
            corpus: None,
            sequences: syn.sequences,
            seq_len: syn.t,
            docs_per_sequence: syn.docs_per_sequence,
            tau: None,
            target_rho: None,
            grid_points: 20,
            control_steps: 300,
            control_fine_steps: 300,
            niah_t: niah.t,
            needle_pos: niah.needle_pos,
            needle_len: niah.needle_len,
            pattern_vocab_size: niah.pattern_vocab_size,
            needle_vocab_size: niah.needle_vocab_size,
            embed_dim: niah.embed_dim,
            niah_seeds: 20,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| HamError::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| HamError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn family(&self) -> Result<Family> {
        self.family.parse()
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        let family = self.family()?;
        let mut cfg = ArchConfig::reference(family);
        if let Some(d) = self.d {
            cfg.d = d;
        }
        if let Some(l) = self.layers {
            cfg.layers = LayerCount::Fixed(l);
        }
        cfg.vocab = self.vocab;
        cfg.ham = HamOptions {
            learnable_tau: self.learnable_tau,
            learnable_router: self.learnable_router,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hybrid cache length for the cost tables.
    pub fn cost_t_kv(&self) -> f64 {
        self.cost_t_kv.unwrap_or(self.target_rho.unwrap_or(0.5) * self.cost_t)
    }

    pub fn layer(&self) -> Result<LayerConfig> {
        let mut cfg = LayerConfig::small(self.d_hidden);
        cfg.chunk = self.chunk;
        cfg.d_conv = self.d_conv;
        cfg.router.kind = self.router;
        cfg.router.aggregation = self.aggregation;
        cfg.router.eda_enabled = self.eda;
        cfg.threshold = ThresholdParam::for_kind(self.router);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            sequences: self.sequences,
            t: self.seq_len,
            d: self.d_hidden,
            docs_per_sequence: self.docs_per_sequence,
            seed: self.seed,
        }
    }

    pub fn niah(&self) -> NiahSpec {
        NiahSpec {
            t: self.niah_t,
            needle_pos: self.needle_pos,
            needle_len: self.needle_len,
            pattern_vocab_size: self.pattern_vocab_size,
            needle_vocab_size: self.needle_vocab_size,
            embed_dim: self.embed_dim,
            seed: self.seed,
        }
    }
}
