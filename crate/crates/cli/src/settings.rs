//! Flag definitions and their merge with an optional `key=value` config file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;

use crate::failure::Failure;

/// Every key a config file may contain (flag names without `--`, with
/// either `-` or `_`).
const KNOWN_KEYS: &[&str] = &[
    "data_root",
    "weights_in",
    "weights_out",
    "epochs",
    "batch_size",
    "lr",
    "lambda1",
    "optimizer",
    "augment",
    "freeze_mode",
    "model",
    "k_test",
    "val_fraction",
    "split_manifest",
    "skip_unreadable",
    "window",
    "stride",
    "fill",
    "seed",
    "out_dir",
    "classes",
    "per_class",
    "size",
    "class_offset",
];

#[derive(Args, Debug, Clone, Default)]
pub struct CommonOpts {
    /// Seed for every random stream (init, split, shuffling, augmentation) [default: 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for all written artifacts [default: out]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Optional key=value file; command-line flags win on conflict
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataOpts {
    /// Corpus root laid out as <root>/<class>/<image>.ppm|pgm (required)
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Test images drawn per class [default: 4]
    #[arg(long)]
    pub k_test: Option<usize>,
    /// Share of the remaining images per class used for validation [default: 0.2]
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Reuse a split manifest (source_path,class_id,partition) instead of drawing one
    #[arg(long)]
    pub split_manifest: Option<PathBuf>,
    /// Skip undecodable images instead of failing [default: false]
    #[arg(long)]
    pub skip_unreadable: Option<bool>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainOpts {
    /// Training epochs [default: 100]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size, at least 2 [default: 24]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate [default: 0.0002]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the squared Frobenius norm of the classifier weights [default: 0.0001]
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// adam or sgd [default: adam]
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Comma list from {flip, crop, brightness}, or none [default: none]
    #[arg(long)]
    pub augment: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct OcclusionOpts {
    /// Occlusion window side N in pixels [default: 32]
    #[arg(long)]
    pub window: Option<usize>,
    /// Window stride S in pixels [default: 16]
    #[arg(long)]
    pub stride: Option<usize>,
    /// Raw pixel value written into the window [default: 0]
    #[arg(long)]
    pub fill: Option<f32>,
}

/// Flag values layered over config-file values.
pub struct Resolver {
    file: BTreeMap<String, String>,
    source: Option<PathBuf>,
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = config else {
            return Ok(Self {
                file: BTreeMap::new(),
                source: None,
            });
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            Failure::config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let pairs = irisnet::config::parse_lines(&text)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let known: BTreeSet<&str> = KNOWN_KEYS.iter().copied().collect();
        let mut file = BTreeMap::new();
        for (k, v) in pairs {
            let key = k.replace('-', "_");
            if !known.contains(key.as_str()) {
                return Err(Failure::config(format!(
                    "{}: unknown key `{k}`",
                    path.display()
                )));
            }
            file.insert(key, v);
        }
        Ok(Self {
            file,
            source: Some(path.to_path_buf()),
        })
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                let src = self.source.as_deref().map(Path::display);
                Failure::config(format!(
                    "{}: bad value `{v}` for `{key}`",
                    src.expect("file values have a source")
                ))
            }),
        }
    }

    pub fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Failure> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.file_value(key),
        }
    }

    pub fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, Failure> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, Failure> {
        self.opt(flag, key)?
            .ok_or_else(|| Failure::config(format!("--{} is required", key.replace('_', "-"))))
    }
}
