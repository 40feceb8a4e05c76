//! Synthetic crop-type time series.
//!
//! Every class follows a double-logistic vegetation curve per channel;
//! classes differ in when they green up and senesce, so telling them apart
//! requires knowing the acquisition dates. Each sample has its own random
//! calendar and a random partition of the grid into rectangular parcels
//! inside a background margin.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::record::{Labels, SitsRecord};
use crate::embedding::{DayIndex, SitsTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `baseline + amplitude·(σ((day−green_up)/rise) − σ((day−senescence)/fall))`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DoubleLogistic {
    pub baseline: f64,
    pub amplitude: f64,
    pub green_up: f64,
    pub senescence: f64,
    pub rise: f64,
    pub fall: f64,
}

impl DoubleLogistic {
    pub fn at(&self, day: f64) -> f64 {
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        self.baseline
            + self.amplitude
                * (s((day - self.green_up) / self.rise) - s((day - self.senescence) / self.fall))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhenologyClassSpec {
    /// One curve per channel.
    pub curves: Vec<DoubleLogistic>,
    pub noise_std: f64,
    /// Probability that an acquisition of a pixel is replaced by cloud.
    pub cloud_prob: f64,
}

impl PhenologyClassSpec {
    pub fn validate(&self) -> Result<()> {
        for (c, curve) in self.curves.iter().enumerate() {
            if !(curve.green_up < curve.senescence) {
                return Err(Error::Config(format!(
                    "channel {c}: green-up must precede senescence"
                )));
            }
            if !(curve.amplitude >= 0.0) {
                return Err(Error::Config(format!(
                    "channel {c}: amplitude must be non-negative"
                )));
            }
            if !(curve.rise > 0.0 && curve.fall > 0.0) {
                return Err(Error::Config(format!(
                    "channel {c}: slopes must be positive"
                )));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise std must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.cloud_prob) {
            return Err(Error::Config(format!(
                "cloud probability {} outside [0, 1]",
                self.cloud_prob
            )));
        }
        Ok(())
    }

    /// Noise-free channel values on `day`.
    pub fn mean_at(&self, day: DayIndex) -> Vec<f64> {
        self.curves.iter().map(|c| c.at(day as f64)).collect()
    }
}

/// Reflectance written for a clouded observation, every channel.
pub const CLOUD_VALUE: f32 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of acquisitions per sample.
    pub t_min: usize,
    pub t_max: usize,
    /// Inclusive range of days acquisitions are drawn from.
    pub season_start: DayIndex,
    pub season_end: DayIndex,
    /// Acquisitions fall on `season_start + k·revisit`.
    pub revisit: u16,
    /// Background rim width in pixels.
    pub margin: usize,
    /// Parcels are not split below this side length.
    pub min_parcel: usize,
    pub noise_std: f64,
    pub cloud_prob: f64,
    /// Makes the last channel a season-long plateau at a class-specific
    /// level, so every single acquisition identifies the class.
    pub level_cue: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            channels: 2,
            height: 8,
            width: 8,
            t_min: 6,
            t_max: 10,
            season_start: 0,
            season_end: 364,
            revisit: 1,
            margin: 1,
            min_parcel: 2,
            noise_std: 0.02,
            cloud_prob: 0.05,
            level_cue: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_classes >= u16::MAX as usize {
            return err("too many classes".into());
        }
        if self.channels == 0 {
            return err("channels must be positive".into());
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return err(format!(
                "bad acquisition range {}..={}",
                self.t_min, self.t_max
            ));
        }
        if self.season_end < self.season_start {
            return err("season ends before it starts".into());
        }
        if self.revisit == 0 {
            return err("revisit must be positive".into());
        }
        if self.t_max > self.acquisition_days() {
            return err(format!(
                "{} acquisitions do not fit {} possible days",
                self.t_max,
                self.acquisition_days()
            ));
        }
        if self.min_parcel == 0 {
            return err("min_parcel must be positive".into());
        }
        if self.height <= 2 * self.margin || self.width <= 2 * self.margin {
            return err(format!(
                "margin {} leaves no parcels in a {}x{} grid",
                self.margin, self.height, self.width
            ));
        }
        if !(self.noise_std >= 0.0) || !(0.0..=1.0).contains(&self.cloud_prob) {
            return err("noise std must be >= 0 and cloud probability in [0, 1]".into());
        }
        Ok(())
    }

    /// Number of days an acquisition can fall on.
    pub fn acquisition_days(&self) -> usize {
        (self.season_end - self.season_start) as usize / self.revisit as usize + 1
    }

    pub fn background_label(&self) -> u16 {
        self.num_classes as u16
    }

    /// Class curves used by [`Generator::new`]. Green-up days are spread
    /// evenly over the first half of the season and every class stays green
    /// for the same fraction of it; channels differ only in level and
    /// amplitude, never in timing (except for the optional level cue).
    pub fn class_specs(&self) -> Vec<PhenologyClassSpec> {
        let start = self.season_start as f64;
        let len = (self.season_end - self.season_start) as f64 + 1.0;
        let k = self.num_classes as f64;
        (0..self.num_classes)
            .map(|i| {
                let green_up = start + len * (0.1 + 0.5 * i as f64 / k);
                let senescence = green_up + 0.35 * len;
                let mut curves = (0..self.channels)
                    .map(|c| DoubleLogistic {
                        baseline: 0.1 + 0.05 * c as f64,
                        amplitude: 0.6 / (1.0 + c as f64),
                        green_up,
                        senescence,
                        rise: 0.02 * len,
                        fall: 0.03 * len,
                    })
                    .collect::<Vec<_>>();
                if self.level_cue {
                    let last = curves.last_mut().expect("validated channels");
                    last.green_up = start - len;
                    last.senescence = start + 2.0 * len;
                    last.amplitude = 0.2 + 0.5 * i as f64 / k;
                }
                PhenologyClassSpec {
                    curves,
                    noise_std: self.noise_std,
                    cloud_prob: self.cloud_prob,
                }
            })
            .collect()
    }

    /// Bare soil: flat curves at the lowest class baseline.
    pub fn background_spec(&self) -> PhenologyClassSpec {
        let mid = (self.season_start as f64 + self.season_end as f64) / 2.0;
        PhenologyClassSpec {
            curves: (0..self.channels)
                .map(|c| DoubleLogistic {
                    baseline: 0.1 + 0.05 * c as f64,
                    amplitude: 0.0,
                    green_up: mid - 1.0,
                    senescence: mid + 1.0,
                    rise: 1.0,
                    fall: 1.0,
                })
                .collect(),
            noise_std: self.noise_std,
            cloud_prob: self.cloud_prob,
        }
    }
}

/// Generator bound to one configuration and one set of class curves.
#[derive(Clone, Debug)]
pub struct Generator {
    config: SynthConfig,
    classes: Vec<PhenologyClassSpec>,
    background: PhenologyClassSpec,
}

impl Generator {
    pub fn new(config: SynthConfig) -> Result<Self> {
        let classes = config.class_specs();
        Self::with_classes(config, classes)
    }

    pub fn with_classes(config: SynthConfig, classes: Vec<PhenologyClassSpec>) -> Result<Self> {
        config.validate()?;
        if classes.len() != config.num_classes {
            return Err(Error::Config(format!(
                "{} class specs for {} classes",
                classes.len(),
                config.num_classes
            )));
        }
        for (i, spec) in classes.iter().enumerate() {
            spec.validate()
                .map_err(|e| Error::Config(format!("class {i}: {e}")))?;
            if spec.curves.len() != config.channels {
                return Err(Error::Config(format!(
                    "class {i} has {} channel curves",
                    spec.curves.len()
                )));
            }
        }
        let background = config.background_spec();
        Ok(Self {
            config,
            classes,
            background,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn classes(&self) -> &[PhenologyClassSpec] {
        &self.classes
    }

    /// Sample `index`; depends only on the seed, the index and the specs.
    pub fn sample(&self, index: u64) -> SitsRecord {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index);

        let t = rng.random_range(cfg.t_min..=cfg.t_max);
        let mut dates: Vec<DayIndex> = sample_indices(&mut rng, cfg.acquisition_days(), t)
            .into_iter()
            .map(|d| cfg.season_start + d as DayIndex * cfg.revisit)
            .collect();
        dates.sort_unstable();

        let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
        let bg = cfg.background_label();
        let mut labels = vec![bg; h * w];
        let mut parcels = Vec::new();
        split_parcels(
            &mut rng,
            Rect {
                top: cfg.margin,
                left: cfg.margin,
                height: h - 2 * cfg.margin,
                width: w - 2 * cfg.margin,
            },
            cfg.min_parcel,
            &mut parcels,
        );
        for r in parcels {
            let class = rng.random_range(0..cfg.num_classes) as u16;
            for y in r.top..r.top + r.height {
                labels[y * w + r.left..y * w + r.left + r.width].fill(class);
            }
        }

        let means: Vec<Vec<Vec<f64>>> = self
            .classes
            .iter()
            .chain(std::iter::once(&self.background))
            .map(|s| dates.iter().map(|&d| s.mean_at(d)).collect())
            .collect();
        let mut values = vec![0f32; t * h * w * c];
        for (p, &label) in labels.iter().enumerate() {
            let spec = self.spec(label);
            let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
            for (ti, mean) in means[label as usize].iter().enumerate() {
                let px = &mut values[(ti * h * w + p) * c..(ti * h * w + p + 1) * c];
                if spec.cloud_prob > 0.0 && rng.random_bool(spec.cloud_prob) {
                    px.fill(CLOUD_VALUE);
                    continue;
                }
                for (v, m) in px.iter_mut().zip(mean) {
                    *v = (m + noise.sample(&mut rng)) as f32;
                }
            }
        }
        let values = Tensor::new(&[t, h, w, c], values).expect("sized above");
        let sits = SitsTensor::new(values, dates).expect("dates sorted and distinct");
        SitsRecord::new(sits, Labels::Pixels(labels)).expect("labels sized to grid")
    }

    fn spec(&self, label: u16) -> &PhenologyClassSpec {
        self.classes.get(label as usize).unwrap_or(&self.background)
    }
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

/// Guillotine partition: cut the longer side at a random position while
/// both halves stay at least `min` wide; stop at random once a side fits.
fn split_parcels(rng: &mut ChaCha8Rng, r: Rect, min: usize, out: &mut Vec<Rect>) {
    let can_h = r.height >= 2 * min;
    let can_w = r.width >= 2 * min;
    let small = r.height < 4 * min && r.width < 4 * min;
    if !(can_h || can_w) || (small && rng.random_bool(0.5)) {
        out.push(r);
        return;
    }
    let horizontal = if can_h && can_w {
        r.height >= r.width
    } else {
        can_h
    };
    if horizontal {
        let cut = rng.random_range(min..=r.height - min);
        split_parcels(rng, Rect { height: cut, ..r }, min, out);
        split_parcels(
            rng,
            Rect {
                top: r.top + cut,
                height: r.height - cut,
                ..r
            },
            min,
            out,
        );
    } else {
        let cut = rng.random_range(min..=r.width - min);
        split_parcels(rng, Rect { width: cut, ..r }, min, out);
        split_parcels(
            rng,
            Rect {
                left: r.left + cut,
                width: r.width - cut,
                ..r
            },
            min,
            out,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let g = Generator::new(SynthConfig::default()).unwrap();
        assert_eq!(g.sample(3).to_bytes(), g.sample(3).to_bytes());
        assert_ne!(g.sample(3).to_bytes(), g.sample(4).to_bytes());
    }

    #[test]
    fn margin_is_background_and_interior_is_not() {
        let cfg = SynthConfig::default();
        let g = Generator::new(cfg.clone()).unwrap();
        for i in 0..20 {
            let Labels::Pixels(l) = g.sample(i).labels else {
                panic!()
            };
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let edge = y < cfg.margin
                        || x < cfg.margin
                        || y >= cfg.height - cfg.margin
                        || x >= cfg.width - cfg.margin;
                    assert_eq!(l[y * cfg.width + x] == cfg.background_label(), edge);
                }
            }
        }
    }

    #[test]
    fn calendars_are_sorted_distinct_and_in_season() {
        let cfg = SynthConfig {
            season_start: 100,
            season_end: 120,
            t_min: 15,
            t_max: 21,
            ..Default::default()
        };
        let g = Generator::new(cfg).unwrap();
        for i in 0..30 {
            let r = g.sample(i);
            let d = r.sits.dates();
            assert!((15..=21).contains(&d.len()));
            assert!(d.iter().all(|&x| (100..=120).contains(&x)));
        }
    }

    #[test]
    fn noiseless_same_class_pixels_are_identical() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            cloud_prob: 0.0,
            height: 12,
            width: 12,
            ..Default::default()
        };
        let g = Generator::new(cfg.clone()).unwrap();
        let r = g.sample(0);
        let Labels::Pixels(l) = &r.labels else {
            panic!()
        };
        let (t, h, w, c) = r.sits.dims();
        let series = |p: usize| -> Vec<f32> {
            (0..t)
                .flat_map(|ti| {
                    r.sits.values().data()[(ti * h * w + p) * c..(ti * h * w + p + 1) * c].to_vec()
                })
                .collect()
        };
        for p in 0..h * w {
            for q in 0..h * w {
                if l[p] == l[q] {
                    assert_eq!(series(p), series(q));
                }
            }
        }
    }

    #[test]
    fn curves_peak_between_green_up_and_senescence() {
        let spec = &SynthConfig::default().class_specs()[0];
        let c = spec.curves[0];
        let mid = (c.green_up + c.senescence) / 2.0;
        assert!(c.at(mid) > c.at(c.green_up - 50.0));
        assert!(c.at(mid) > c.at(c.senescence + 50.0));
        assert!((c.at(mid) - (c.baseline + c.amplitude)).abs() < 0.01);
    }

    #[test]
    fn invalid_specs_are_configuration_errors() {
        let cfg = SynthConfig::default();
        let mut specs = cfg.class_specs();
        specs[1].curves[0].senescence = specs[1].curves[0].green_up;
        assert!(matches!(
            Generator::with_classes(cfg.clone(), specs),
            Err(Error::Config(_))
        ));
        let mut specs = cfg.class_specs();
        specs[0].cloud_prob = 1.5;
        assert!(matches!(
            Generator::with_classes(cfg.clone(), specs),
            Err(Error::Config(_))
        ));
        let mut specs = cfg.class_specs();
        specs[0].curves[1].amplitude = -0.1;
        assert!(matches!(
            Generator::with_classes(cfg.clone(), specs),
            Err(Error::Config(_))
        ));
        assert!(Generator::new(SynthConfig {
            num_classes: 1,
            ..cfg
        })
        .is_err());
    }
}
