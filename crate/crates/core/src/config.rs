//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bases::BasisKind;
use crate::error::{DcfError, Result};
use crate::nn::{TrainConfig, CONV2_KERNEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Conv2Dense,
    Conv2Dcf,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Conv2Dense => "conv2_dense",
            Architecture::Conv2Dcf => "conv2_dcf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv2_dense" => Some(Architecture::Conv2Dense),
            "conv2_dcf" => Some(Architecture::Conv2Dcf),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub architecture: Architecture,
    pub basis: BasisKind,
    pub k: usize,
    pub train: TrainConfig,
    /// Train on the first `n` training samples only.
    pub subset_size: Option<usize>,
    pub output_dir: PathBuf,
    /// Directory holding the four MNIST IDX files.
    pub data_dir: Option<PathBuf>,
    /// Dense model whose filters seed PCA bases; trained on the fly if absent.
    pub pca_model: Option<PathBuf>,
    pub pca_subset: usize,
    pub pca_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            architecture: Architecture::Conv2Dcf,
            basis: BasisKind::FourierBessel,
            k: 3,
            train: TrainConfig::default(),
            subset_size: None,
            output_dir: PathBuf::from("out"),
            data_dir: None,
            pca_model: None,
            pca_subset: 1000,
            pca_epochs: 5,
        }
    }
}

const KEYS: &[&str] = &[
    "architecture",
    "basis",
    "K",
    "lr_start",
    "lr_end",
    "momentum",
    "weight_decay",
    "batch_size",
    "epochs",
    "seed",
    "subset_size",
    "output_dir",
    "data_dir",
    "pca_model",
    "pca_subset",
    "pca_epochs",
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DcfError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(DcfError::Config(format!("line {}: unknown key '{k}'", n + 1)));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(DcfError::Config(format!("line {}: duplicate key '{k}'", n + 1)));
            }
        }
        let mut cfg = ExperimentConfig::default();
        for (k, v) in &map {
            let bad = || DcfError::Config(format!("invalid value '{v}' for {k}"));
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
            let int = |v: &str| v.parse::<usize>().map_err(|_| bad());
            match k.as_str() {
                "architecture" => cfg.architecture = Architecture::parse(v).ok_or_else(bad)?,
                "basis" => cfg.basis = BasisKind::parse(v).ok_or_else(bad)?,
                "K" => cfg.k = int(v)?,
                "lr_start" => cfg.train.lr_start = num(v)?,
                "lr_end" => cfg.train.lr_end = num(v)?,
                "momentum" => cfg.train.momentum = num(v)?,
                "weight_decay" => cfg.train.weight_decay = num(v)?,
                "batch_size" => cfg.train.batch_size = int(v)?,
                "epochs" => cfg.train.epochs = int(v)?,
                "seed" => cfg.train.seed = v.parse().map_err(|_| bad())?,
                "subset_size" => cfg.subset_size = Some(int(v)?),
                "output_dir" => cfg.output_dir = PathBuf::from(v),
                "data_dir" => cfg.data_dir = Some(PathBuf::from(v)),
                "pca_model" => cfg.pca_model = Some(PathBuf::from(v)),
                "pca_subset" => cfg.pca_subset = int(v)?,
                "pca_epochs" => cfg.pca_epochs = int(v)?,
                _ => unreachable!(),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = ExperimentConfig::parse(&text)?;
        // Relative paths are taken relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [Some(&mut cfg.output_dir), cfg.data_dir.as_mut(), cfg.pca_model.as_mut()]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let l2 = CONV2_KERNEL * CONV2_KERNEL;
        if self.architecture == Architecture::Conv2Dcf {
            if self.k == 0 || self.k > l2 {
                return Err(DcfError::Config(format!("K = {} must be in 1..={l2}", self.k)));
            }
            if self.basis == BasisKind::Delta && self.k != l2 {
                return Err(DcfError::Config(format!("the delta basis needs K = {l2}")));
            }
            if self.basis == BasisKind::Pca && self.k > 16 {
                return Err(DcfError::Config("PCA bases need K <= 16 (first layer has 16 filters)".into()));
            }
        }
        if self.subset_size == Some(0) {
            return Err(DcfError::Config("subset_size must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it returns the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let _ = writeln!(s, "architecture = {}", self.architecture.name());
        let _ = writeln!(s, "basis = {}", self.basis.name());
        let _ = writeln!(s, "K = {}", self.k);
        let _ = writeln!(s, "lr_start = {:e}", t.lr_start);
        let _ = writeln!(s, "lr_end = {:e}", t.lr_end);
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "weight_decay = {:e}", t.weight_decay);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "seed = {}", t.seed);
        if let Some(n) = self.subset_size {
            let _ = writeln!(s, "subset_size = {n}");
        }
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        if let Some(d) = &self.data_dir {
            let _ = writeln!(s, "data_dir = {}", d.display());
        }
        if let Some(p) = &self.pca_model {
            let _ = writeln!(s, "pca_model = {}", p.display());
        }
        let _ = writeln!(s, "pca_subset = {}", self.pca_subset);
        let _ = writeln!(s, "pca_epochs = {}", self.pca_epochs);
        s
    }
}
