//! Dataset directories: sample files, a `manifest.csv` table with columns
//! `path,split,seed` and a `classes.txt` sidecar with one class name per line.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::record::{read_sample, write_sample, SitsRecord};
use super::synth::{Generator, SynthConfig};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown split '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the dataset directory.
    pub path: PathBuf,
    pub split: Split,
    /// Generation seed; with the row index it determines the sample.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Background pixels carry this label and are excluded from losses and
    /// metrics.
    pub fn ignore_label(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn read_split(&self, split: Split) -> Result<Vec<SitsRecord>> {
        self.split(split)
            .map(|e| read_sample(&self.root.join(&e.path)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,split,seed\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.path.display(), e.split, e.seed));
        }
        s
    }

    pub fn save(&self) -> Result<()> {
        fs::write(self.root.join(MANIFEST_FILE), self.to_csv())?;
        let mut names = self.class_names.join("\n");
        names.push('\n');
        fs::write(self.root.join(CLASSES_FILE), names)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let csv = fs::read_to_string(root.join(MANIFEST_FILE))?;
        let mut lines = csv.lines().enumerate();
        match lines.next() {
            Some((_, "path,split,seed")) => {}
            _ => {
                return Err(Error::Data(format!(
                    "{MANIFEST_FILE}: missing 'path,split,seed' header"
                )))
            }
        }
        let mut entries = Vec::new();
        for (n, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Data(format!("{MANIFEST_FILE} line {}: '{line}'", n + 1));
            let mut cols = line.split(',');
            let (Some(path), Some(split), Some(seed), None) =
                (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(bad());
            };
            entries.push(ManifestEntry {
                path: PathBuf::from(path),
                split: split.parse().map_err(|_| bad())?,
                seed: seed.parse().map_err(|_| bad())?,
            });
        }
        let class_names: Vec<String> = fs::read_to_string(root.join(CLASSES_FILE))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if class_names.is_empty() {
            return Err(Error::Data(format!("{CLASSES_FILE} lists no classes")));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = entries.iter().find(|e| !seen.insert(&e.path)) {
            return Err(Error::Data(format!("{} listed twice", dup.path.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
            class_names,
        })
    }
}

/// Assigns `n` indices to splits: a seeded shuffle, then the first
/// `round(n·test)` go to test, the next `round(n·val)` to val, the rest to
/// train.
pub fn assign_splits(
    n: usize,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<Split>> {
    if !(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fractions val={val_fraction} test={test_fraction} leave no training data"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n - n_test);
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_test {
            out[i] = Split::Test;
        } else if rank < n_test + n_val {
            out[i] = Split::Val;
        }
    }
    Ok(out)
}

/// Writes `n_samples` generated samples plus manifest and class list into
/// `dir` (created if missing). Files are named `sample_<index>.sits`.
pub fn generate_synthetic_dataset(
    dir: &Path,
    config: &SynthConfig,
    n_samples: usize,
    val_fraction: f64,
    test_fraction: f64,
) -> Result<DatasetManifest> {
    let generator = Generator::new(config.clone())?;
    let splits = assign_splits(n_samples, val_fraction, test_fraction, config.seed)?;
    fs::create_dir_all(dir)?;
    let name = |i: usize| PathBuf::from(format!("sample_{i:05}.sits"));

    let workers = thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(n_samples.max(1));
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let generator = &generator;
                s.spawn(move || -> Result<()> {
                    for i in (w..n_samples).step_by(workers) {
                        write_sample(&generator.sample(i as u64), &dir.join(name(i)))?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("generator thread panicked"))
    })?;

    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        entries: splits
            .into_iter()
            .enumerate()
            .map(|(i, split)| ManifestEntry {
                path: name(i),
                split,
                seed: config.seed,
            })
            .collect(),
        class_names: (0..config.num_classes)
            .map(|k| format!("crop_{k}"))
            .collect(),
    };
    manifest.save()?;
    Ok(manifest)
}
