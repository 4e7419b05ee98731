use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mambasam_core::data::PhantomSpec;
use mambasam_core::models::{ModelConfig, ModelKind};
use mambasam_core::traineval::TrainConfig;
use mambasam_core::{Error, Result};

/// Every key with its default. The text parses as a config itself.
pub const DEFAULT_CONFIG: &str = "\
# Seeds model initialisation and the shuffling order.
seed = 0

[model]
# dual_branch | adapter_conv | adapter_mfgc | adapter_lora
kind = adapter_mfgc
classes = 4
# Frozen ViT stub.
dim = 64
depth = 4
heads = 4
patch = 8
mlp_ratio = 2
# Adapter models.
d_adapter = 16
lora_rank = 4
d_state = 8
# bilinear | zoh
discretization = bilinear
# full, or a low-frequency cube such as 2,2,2
mfgc_cube = full
# Dual-branch model.
stem_patch = 4
specialist = 16,32
cba_heads = 4
cba_dk = 16
# none, or the width of a trainable projection of the generalist features
sam_proj = none

[data]
# Generated phantoms, D,H,W.
phantom_dims = 16,64,64
spacing = 1.5
noise_sigma = 0.04
# Model input, D,H,W. Larger volumes are cut into label-aware patches.
patch = 16,64,64
patches_per_volume = 1
train_count = 200
train_seed = 1000
# Held-out phantoms scored after every epoch; the best epoch is saved.
val_count = 0
val_seed = 40000
eval_count = 32
eval_seed = 50000
# Directories of .msv volumes; when set they replace the phantoms.
train_dir =
eval_dir =

[train]
lr = 2e-4
warmup_steps = 10
epochs = 1
batch_size = 1
clip_norm = 1.0
weight_decay = 1e-4
# Random flips along H and W.
augment = false

[paths]
checkpoint = model.ckpt
# Metrics CSV written by eval; empty prints to stdout only.
report =
";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub phantom: PhantomSpec,
    pub patch: [usize; 3],
    pub patches_per_volume: usize,
    pub train_count: usize,
    pub train_seed: u64,
    pub val_count: usize,
    pub val_seed: u64,
    pub eval_count: usize,
    pub eval_seed: u64,
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epochs: usize,
    pub augment: bool,
    pub data: DataConfig,
    pub checkpoint: PathBuf,
    pub report: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse(DEFAULT_CONFIG).expect("built-in defaults parse")
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::Config(format!("`{key}`: cannot parse {v:?}: {e}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(|s| value(key, s.trim())).collect()
}

fn triple<T: FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]>
where
    T::Err: Display,
{
    let xs = list(key, v)?;
    xs.try_into().map_err(|_| Error::Config(format!("`{key}` needs three comma-separated values, got {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got {v:?}"))),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Reads `path`, starting from the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config not found: {}", path.display())),
            _ => Error::Config(format!("cannot read {}: {e}", path.display())),
        })?;
        let mut cfg = RunConfig::default();
        cfg.apply(&text)?;
        Ok(cfg)
    }

    /// Placeholder values overridden by `text`; only meaningful for a text
    /// that sets every key, i.e. [`DEFAULT_CONFIG`].
    fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            epochs: 1,
            augment: false,
            data: DataConfig {
                phantom: PhantomSpec::default(),
                patch: [16, 64, 64],
                patches_per_volume: 1,
                train_count: 0,
                train_seed: 0,
                val_count: 0,
                val_seed: 0,
                eval_count: 0,
                eval_seed: 0,
                train_dir: None,
                eval_dir: None,
            },
            checkpoint: PathBuf::from("model.ckpt"),
            report: None,
        };
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Overrides fields from `key = value` lines grouped under `[section]`
    /// headers. `#` and `;` start comments.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        let mut phantom_dims = None;
        let mut spacing = None;
        let mut noise = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", no + 1)),
                other => other,
            };
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at(Error::Config(format!("malformed section header {line:?}"))))?;
                section = name.trim().to_string();
                if !["model", "data", "train", "paths"].contains(&section.as_str()) {
                    return Err(at(Error::Config(format!("unknown section [{section}]"))));
                }
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| at(Error::Config(format!("expected key = value, got {line:?}"))))?;
            let (k, v) = (k.trim(), v.trim());
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            match key.as_str() {
                "data.phantom_dims" => phantom_dims = Some(triple(&key, v).map_err(at)?),
                "data.spacing" => spacing = Some(value::<f32>(&key, v).map_err(at)?),
                "data.noise_sigma" => noise = Some(value::<f32>(&key, v).map_err(at)?),
                _ => self.set(&key, v).map_err(at)?,
            }
        }
        if let Some(dims) = phantom_dims {
            self.data.phantom = PhantomSpec::for_dims(dims);
        }
        if let Some(s) = spacing {
            self.data.phantom.spacing = s;
        }
        if let Some(s) = noise {
            self.data.phantom.noise_sigma = s;
        }
        self.model.patch_dims = self.data.patch;
        self.train.seed = self.seed;
        self.validate()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, d, t) = (&mut self.model, &mut self.data, &mut self.train);
        match key {
            "seed" => self.seed = value(key, v)?,
            "model.kind" => m.kind = v.parse::<ModelKind>()?,
            "model.classes" => m.classes = value(key, v)?,
            "model.dim" => m.encoder.dim = value(key, v)?,
            "model.depth" => m.encoder.depth = value(key, v)?,
            "model.heads" => m.encoder.heads = value(key, v)?,
            "model.patch" => m.encoder.patch = value(key, v)?,
            "model.mlp_ratio" => m.encoder.mlp_ratio = value(key, v)?,
            "model.d_adapter" => m.d_adapter = value(key, v)?,
            "model.lora_rank" => m.lora_rank = value(key, v)?,
            "model.d_state" => m.d_state = value(key, v)?,
            "model.discretization" => m.method = v.parse()?,
            "model.mfgc_cube" => m.mfgc_cube = if v == "full" { [usize::MAX; 3] } else { triple(key, v)? },
            "model.stem_patch" => m.stem_patch = value(key, v)?,
            "model.specialist" => m.specialist = list(key, v)?,
            "model.cba_heads" => m.cba_heads = value(key, v)?,
            "model.cba_dk" => m.cba_dk = value(key, v)?,
            "model.sam_proj" => m.sam_proj = if v == "none" { None } else { Some(value(key, v)?) },
            "data.patch" => d.patch = triple(key, v)?,
            "data.patches_per_volume" => d.patches_per_volume = value(key, v)?,
            "data.train_count" => d.train_count = value(key, v)?,
            "data.train_seed" => d.train_seed = value(key, v)?,
            "data.val_count" => d.val_count = value(key, v)?,
            "data.val_seed" => d.val_seed = value(key, v)?,
            "data.eval_count" => d.eval_count = value(key, v)?,
            "data.eval_seed" => d.eval_seed = value(key, v)?,
            "data.train_dir" => d.train_dir = path(v),
            "data.eval_dir" => d.eval_dir = path(v),
            "train.lr" => t.base_lr = value(key, v)?,
            "train.warmup_steps" => t.warmup_steps = value(key, v)?,
            "train.epochs" => self.epochs = value(key, v)?,
            "train.batch_size" => t.batch_size = value(key, v)?,
            "train.clip_norm" => t.clip_norm = value(key, v)?,
            "train.weight_decay" => t.weight_decay = value(key, v)?,
            "train.augment" => self.augment = flag(key, v)?,
            "paths.checkpoint" => {
                self.checkpoint = path(v).ok_or_else(|| Error::Config("`paths.checkpoint` must not be empty".into()))?
            }
            "paths.report" => self.report = path(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("`train.epochs` must be at least 1".into());
        }
        if self.data.patches_per_volume == 0 {
            return bad("`data.patches_per_volume` must be at least 1".into());
        }
        if (0..3).any(|i| self.data.patch[i] > self.data.phantom.dims[i]) && self.data.train_dir.is_none() {
            return bad(format!(
                "`data.patch` {:?} exceeds `data.phantom_dims` {:?}",
                self.data.patch, self.data.phantom.dims
            ));
        }
        if self.train.batch_size == 0 || !(self.train.clip_norm > 0.0) || !(self.train.base_lr >= 0.0) {
            return bad("`train.batch_size`, `train.clip_norm` and `train.lr` must be positive".into());
        }
        self.data.phantom.validate().map_err(|e| Error::Config(format!("phantom: {e}")))?;
        self.model.expected_counts().map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_library_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.data.phantom, PhantomSpec::default());
        assert_eq!(c.data.train_count, 200);
        assert_eq!(c.checkpoint, PathBuf::from("model.ckpt"));
    }

    #[test]
    fn one_line_config_overrides_one_field() {
        let mut c = RunConfig::default();
        c.apply("[model]\nkind = dual_branch").unwrap();
        assert_eq!(c.model.kind, ModelKind::DualBranch);
        assert_eq!(c.model.encoder.dim, 64);
        let mut c = RunConfig::default();
        c.apply("seed = 9 # trailing comment\n[data]\nphantom_dims = 8,32,32\npatch=8,32,32\n").unwrap();
        assert_eq!((c.seed, c.train.seed), (9, 9));
        assert_eq!(c.model.patch_dims, [8, 32, 32]);
        assert_eq!(c.data.phantom, PhantomSpec::for_dims([8, 32, 32]));
    }

    #[test]
    fn errors_name_the_line() {
        let mut c = RunConfig::default();
        let e = c.apply("[train]\nlr = fast").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("train.lr"), "{e}");
        assert!(c.apply("[nope]").is_err());
        assert!(c.apply("[train]\nmomentum = 1").is_err());
        assert!(c.apply("just words").is_err());
        assert!(c.apply("[data]\npatch = 8,8").is_err());
        assert!(c.apply("[train]\nepochs = 0").is_err());
    }

    #[test]
    fn missing_file_says_not_found() {
        let e = RunConfig::load(Path::new("/definitely/missing.cfg")).unwrap_err().to_string();
        assert!(e.contains("config not found"), "{e}");
    }
}
