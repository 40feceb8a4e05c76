//! Flat `key = value` run configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tsvit::data::{DatasetManifest, SitsRecord, Split};
use tsvit::model::TsvitConfig;
use tsvit::training::{LrSchedule, TrainConfig};

use crate::CliError;

/// A dataset directory with every split read into memory.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<SitsRecord>,
    pub val: Vec<SitsRecord>,
    pub test: Vec<SitsRecord>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self, CliError> {
        let manifest = DatasetManifest::load(root)?;
        Ok(Self {
            train: manifest.read_split(Split::Train)?,
            val: manifest.read_split(Split::Val)?,
            test: manifest.read_split(Split::Test)?,
            manifest,
        })
    }

    pub fn split(&self, split: Split) -> &[SitsRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn all(&self) -> impl Iterator<Item = &SitsRecord> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Model, optimisation and dataset settings for one run. `seed` drives both
/// the parameter initialisation and the shuffling.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: TsvitConfig,
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub ablate_patch_sizes: Vec<usize>,
    pub ablate_seeds: usize,
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: TsvitConfig::default(),
            train: TrainConfig::default(),
            dataset: None,
            out_dir: None,
            ablate_patch_sizes: vec![2, 4],
            ablate_seeds: 1,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value '{value}' for {key}")))
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "peak_lr" => t.peak_lr = parse(key, value)?,
            "floor_lr" => t.floor_lr = parse(key, value)?,
            "beta1" => t.adamw.beta1 = parse(key, value)?,
            "beta2" => t.adamw.beta2 = parse(key, value)?,
            "adam_eps" => t.adamw.eps = parse(key, value)?,
            "weight_decay" => t.adamw.weight_decay = parse(key, value)?,
            "focal_gamma" => t.focal_gamma = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "ablate_patch_sizes" => {
                self.ablate_patch_sizes = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "ablate_seeds" => self.ablate_seeds = parse(key, value)?,
            _ if TsvitConfig::KEYS.contains(&key) => self
                .model
                .set(key, value)
                .map_err(|e| CliError::Usage(e.to_string()))?,
            _ => {
                return Err(CliError::Usage(format!(
                    "unknown configuration key '{key}'"
                )))
            }
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got '{pair}'")))?;
        self.set(k.trim(), v)
    }

    pub fn parse_text(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{origin}:{}: expected key = value", n + 1))
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(CliError::Usage(format!(
                    "{origin}:{}: duplicate key '{k}'",
                    n + 1
                )));
            }
            cfg.set(k, v)
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_text(&text, &path.display().to_string())
    }

    /// Every key with its resolved value, one per line. Parsing the output
    /// gives back an equal configuration.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut lines: Vec<(String, String)> = self
            .model
            .to_kv()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let sizes: Vec<String> = self
            .ablate_patch_sizes
            .iter()
            .map(|s| s.to_string())
            .collect();
        lines.extend(
            [
                ("epochs", t.epochs.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("warmup_epochs", t.warmup_epochs.to_string()),
                ("peak_lr", t.peak_lr.to_string()),
                ("floor_lr", t.floor_lr.to_string()),
                ("beta1", t.adamw.beta1.to_string()),
                ("beta2", t.adamw.beta2.to_string()),
                ("adam_eps", t.adamw.eps.to_string()),
                ("weight_decay", t.adamw.weight_decay.to_string()),
                ("focal_gamma", t.focal_gamma.to_string()),
                ("seed", t.seed.to_string()),
                ("dataset", path(&self.dataset)),
                ("out_dir", path(&self.out_dir)),
                ("ablate_patch_sizes", sizes.join(",")),
                ("ablate_seeds", self.ablate_seeds.to_string()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v)),
        );
        lines
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Loads the dataset and fills the data-dependent model fields
    /// (`num_classes`, `height`, `width`, `channels`, `input_t`) that the
    /// file left unset. Explicit values must agree with the data.
    pub fn resolve_dataset(&mut self) -> Result<Dataset, CliError> {
        let root = self
            .dataset
            .clone()
            .ok_or_else(|| CliError::Usage("missing required key 'dataset'".into()))?;
        if !root.is_dir() {
            return Err(CliError::Usage(format!(
                "dataset: '{}' is not a directory",
                root.display()
            )));
        }
        let data = Dataset::load(&root)?;
        let first = data.train.first().ok_or_else(|| {
            CliError::Usage(format!(
                "dataset: '{}' has no training samples",
                root.display()
            ))
        })?;
        let (_, h, w, c) = first.sits.dims();
        let longest = data.all().map(|r| r.sits.dims().0).max().unwrap_or(1);
        let pt = self.model.patch.t.max(1);
        let inferred = [
            ("num_classes", data.manifest.num_classes()),
            ("height", h),
            ("width", w),
            ("channels", c),
            ("input_t", longest.div_ceil(pt) * pt),
        ];
        for (key, value) in inferred {
            if !self.explicit.contains(key) {
                self.model.set(key, &value.to_string())?;
                continue;
            }
            let set = match key {
                "num_classes" => self.model.num_classes,
                "height" => self.model.height,
                "width" => self.model.width,
                "channels" => self.model.channels,
                _ => continue,
            };
            if set != value {
                return Err(CliError::Usage(format!(
                    "{key} = {set} does not match the dataset ({value})"
                )));
            }
        }
        self.model
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let t = &self.train;
        LrSchedule::new(t.warmup_epochs, t.peak_lr, t.floor_lr, t.epochs, 1)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if t.batch_size == 0 {
            return Err(CliError::Usage("batch_size must be positive".into()));
        }
        Ok(data)
    }

    /// Output directory from `out_dir`, which is required.
    pub fn require_out_dir(&self) -> Result<PathBuf, CliError> {
        self.out_dir
            .clone()
            .ok_or_else(|| CliError::Usage("missing required key 'out_dir'".into()))
    }
}
