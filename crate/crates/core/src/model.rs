//! The full temporo-spatial model: temporal encoder over each location's
//! token series, spatial encoder over each class stream, and the
//! segmentation or classification head.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::embedding::{
    build_spatial_input, build_temporal_input, grid_dims, temporal_pe_lookup, tile_patches,
    tokenize_sits, ClsTokenBank, DayIndex, PatchSize, SitsTensor, SpatialPositionTable,
    TemporalPositionTable,
};
use crate::error::{dim_err, Error, Result};
use crate::nn::{encoder_forward, EncoderShape, EncoderWeights, Linear};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " '{}' (expected one of: {})"),
                        s,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(Task {
    Segmentation => "segmentation",
    Classification => "classification",
});

keyword_enum!(
    /// Which axis is attended first.
    Factorization {
        TemporalFirst => "temporal_first",
        SpatialFirst => "spatial_first",
    }
);

keyword_enum!(
    /// One class token per class, or a single token.
    ClsMode {
        MultiK => "multi_k",
        Single => "single",
    }
);

keyword_enum!(
    /// Temporal encodings looked up by acquisition day, or by position in
    /// the series.
    PeMode {
        DateLookup => "date_lookup",
        Static => "static",
    }
);

keyword_enum!(
    /// Whether class streams may attend to one another in the spatial
    /// encoder.
    ClsInteractions {
        Blocked => "blocked",
        Full => "full",
    }
);

#[derive(Clone, Debug, PartialEq)]
pub struct TsvitConfig {
    /// Number of object classes; background is not one of them.
    pub num_classes: usize,
    pub dim: usize,
    pub temporal_depth: usize,
    pub spatial_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: PatchSize,
    /// Expected input `(T, H, W, C)`. T bounds the static encoding table.
    pub input_t: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub task: Task,
    pub factorization: Factorization,
    pub cls_mode: ClsMode,
    pub pe_mode: PeMode,
    pub cls_interactions: ClsInteractions,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for TsvitConfig {
    /// Germany-sized segmentation model. `dim` 128 is assumed; the reference
    /// results never state the final width.
    fn default() -> Self {
        Self {
            num_classes: 17,
            dim: 128,
            temporal_depth: 4,
            spatial_depth: 4,
            heads: 4,
            mlp_ratio: 4,
            patch: PatchSize { t: 1, h: 2, w: 2 },
            input_t: 52,
            height: 24,
            width: 24,
            channels: 13,
            task: Task::Segmentation,
            factorization: Factorization::TemporalFirst,
            cls_mode: ClsMode::MultiK,
            pe_mode: PeMode::DateLookup,
            cls_interactions: ClsInteractions::Blocked,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl TsvitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 || self.channels == 0 || self.input_t == 0 {
            return Err(Error::Config(
                "mlp_ratio, channels and input_t must be positive".into(),
            ));
        }
        grid_dims(self.input_t, self.height, self.width, self.patch)?;
        Ok(())
    }

    /// Token-grid locations `N_H · N_W`.
    pub fn locations(&self) -> usize {
        (self.height / self.patch.h) * (self.width / self.patch.w)
    }

    /// Class tokens per stream: `K` or 1.
    pub fn cls_tokens(&self) -> usize {
        match self.cls_mode {
            ClsMode::MultiK => self.num_classes,
            ClsMode::Single => 1,
        }
    }

    fn encoder_shape(&self, depth: usize) -> EncoderShape {
        EncoderShape {
            dim: self.dim,
            depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            ln_eps: self.ln_eps,
        }
    }

    /// Width of each head projector's output.
    fn head_out(&self) -> usize {
        let per_class = match self.task {
            Task::Segmentation => self.patch.h * self.patch.w,
            Task::Classification => 1,
        };
        match self.cls_mode {
            ClsMode::MultiK => per_class,
            ClsMode::Single => per_class * self.num_classes,
        }
    }

    /// Closed-form learnable-scalar count for a model whose temporal table
    /// has `table_rows` keys.
    pub fn parameter_count(&self, table_rows: usize) -> usize {
        let d = self.dim;
        let kc = self.cls_tokens();
        let token = self.patch.t * self.patch.h * self.patch.w * self.channels;
        let embed = Linear::num_params(token, d);
        let tables = table_rows * d + self.locations() * d;
        let cls = match self.factorization {
            Factorization::TemporalFirst => 2 * kc * d,
            Factorization::SpatialFirst => kc * d,
        };
        let encoders = self.encoder_shape(self.temporal_depth).num_params()
            + self.encoder_shape(self.spatial_depth).num_params();
        let head = kc * Linear::num_params(d, self.head_out());
        embed + tables + cls + encoders + head
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_classes", self.num_classes.to_string()),
            ("dim", self.dim.to_string()),
            ("temporal_depth", self.temporal_depth.to_string()),
            ("spatial_depth", self.spatial_depth.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("patch_t", self.patch.t.to_string()),
            ("patch_h", self.patch.h.to_string()),
            ("patch_w", self.patch.w.to_string()),
            ("input_t", self.input_t.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("channels", self.channels.to_string()),
            ("task", self.task.to_string()),
            ("factorization", self.factorization.to_string()),
            ("cls_mode", self.cls_mode.to_string()),
            ("pe_mode", self.pe_mode.to_string()),
            ("cls_interactions", self.cls_interactions.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("init_std", self.init_std.to_string()),
        ]
    }

    pub const KEYS: &'static [&'static str] = &[
        "num_classes",
        "dim",
        "temporal_depth",
        "spatial_depth",
        "heads",
        "mlp_ratio",
        "patch_t",
        "patch_h",
        "patch_w",
        "input_t",
        "height",
        "width",
        "channels",
        "task",
        "factorization",
        "cls_mode",
        "pe_mode",
        "cls_interactions",
        "ln_eps",
        "init_std",
    ];

    /// Applies one `key=value` setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
        }
        match key {
            "num_classes" => self.num_classes = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "temporal_depth" => self.temporal_depth = num(key, value)?,
            "spatial_depth" => self.spatial_depth = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "patch_t" => self.patch.t = num(key, value)?,
            "patch_h" => self.patch.h = num(key, value)?,
            "patch_w" => self.patch.w = num(key, value)?,
            "input_t" => self.input_t = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "task" => self.task = value.trim().parse()?,
            "factorization" => self.factorization = value.trim().parse()?,
            "cls_mode" => self.cls_mode = value.trim().parse()?,
            "pe_mode" => self.pe_mode = value.trim().parse()?,
            "cls_interactions" => self.cls_interactions = value.trim().parse()?,
            "ln_eps" => self.ln_eps = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key '{key}'"))),
        }
        Ok(())
    }

    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-class affine projectors stored as `[K_cls, d, out]` and `[K_cls, 1, out]`.
#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub weight: ParamId,
    pub bias: ParamId,
    pub out: usize,
}

#[derive(Clone, Debug)]
pub struct TsvitModel {
    config: TsvitConfig,
    params: ParamStore,
    pub embed: Linear,
    pub temporal_pe: TemporalPositionTable,
    pub spatial_pe: SpatialPositionTable,
    pub cls: ClsTokenBank,
    pub temporal_encoder: EncoderWeights,
    pub spatial_encoder: EncoderWeights,
    pub head: HeadWeights,
    input_norm: Option<InputNorm>,
}

/// Fixed per-channel standardisation applied to raw inputs,
/// `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl InputNorm {
    /// Statistics over every pixel and acquisition of `series`. Channels
    /// with zero spread get std 1.
    pub fn fit<'a>(series: impl IntoIterator<Item = &'a SitsTensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for s in series {
            let c = s.dims().3;
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return dim_err(format!("series with {c} and {} channels", sum.len()));
            }
            for px in s.values().data().chunks_exact(c) {
                for (j, &v) in px.iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += v as f64 * v as f64;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data("cannot fit input statistics to no data".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n as f64 - m * m).max(0.0).sqrt();
                if sd > 1e-12 {
                    sd as f32
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn apply(&self, x: &mut [f32]) {
        let c = self.mean.len();
        for px in x.chunks_exact_mut(c) {
            for (j, v) in px.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }
}

/// Intermediate outputs of a forward pass, for inspection and tests.
#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    /// Retained temporal class states, `[B·N_H·N_W, K_cls, d]`
    /// (temporal-first wiring only).
    pub temporal_cls: Option<Var>,
    /// `[B, K_cls, d]`
    pub global: Var,
    /// `[B, K_cls, N_H·N_W, d]`
    pub local: Var,
    pub logits: Var,
}

impl TsvitModel {
    /// Builds a freshly initialised model. `date_keys` are the acquisition
    /// days seen in training data; in static mode they are ignored and the
    /// table has one row per temporal token position.
    pub fn new(config: TsvitConfig, date_keys: &[DayIndex], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            std: config.init_std,
        };
        let mut store = ParamStore::new();
        let d = config.dim;
        let kc = config.cls_tokens();
        let p = config.patch;
        let locs = config.locations();

        let keys: Vec<DayIndex> = match config.pe_mode {
            PeMode::DateLookup => date_keys.to_vec(),
            PeMode::Static => {
                let rows = config.input_t / p.t;
                (0..rows)
                    .map(|i| {
                        DayIndex::try_from(i).map_err(|_| Error::Config("input_t too large".into()))
                    })
                    .collect::<Result<_>>()?
            }
        };
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() {
            return Err(Error::Config(
                "no acquisition dates to build the temporal table from".into(),
            ));
        }

        let embed = Linear::new(
            &mut store,
            &mut init,
            "embed",
            p.t * p.h * p.w * config.channels,
            d,
        );
        let pt = store.add("temporal_pe", init.truncated_normal(&[sorted.len(), d]));
        let temporal_pe = TemporalPositionTable::new(sorted, pt)?;
        let spatial_pe = SpatialPositionTable {
            table: store.add("spatial_pe", init.truncated_normal(&[locs, d])),
            rows: locs,
        };
        let cls_t = store.add("cls.temporal", init.truncated_normal(&[kc, d]));
        let cls_s = match config.factorization {
            Factorization::TemporalFirst => {
                Some(store.add("cls.spatial", init.truncated_normal(&[kc, 1, d])))
            }
            Factorization::SpatialFirst => None,
        };
        let cls = ClsTokenBank {
            temporal: cls_t,
            spatial: cls_s,
            count: kc,
        };
        let temporal_encoder = EncoderWeights::new(
            &mut store,
            &mut init,
            "temporal",
            config.encoder_shape(config.temporal_depth),
        )?;
        let spatial_encoder = EncoderWeights::new(
            &mut store,
            &mut init,
            "spatial",
            config.encoder_shape(config.spatial_depth),
        )?;
        let out = config.head_out();
        let head = HeadWeights {
            weight: store.add("head.weight", init.truncated_normal(&[kc, d, out])),
            bias: store.add("head.bias", Tensor::zeros(&[kc, 1, out])),
            out,
        };

        Ok(Self {
            config,
            params: store,
            input_norm: None,
            embed,
            temporal_pe,
            spatial_pe,
            cls,
            temporal_encoder,
            spatial_encoder,
            head,
        })
    }

    pub fn config(&self) -> &TsvitConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn input_norm(&self) -> Option<&InputNorm> {
        self.input_norm.as_ref()
    }

    pub fn set_input_norm(&mut self, norm: Option<InputNorm>) -> Result<()> {
        if let Some(n) = &norm {
            if n.mean.len() != self.config.channels || n.std.len() != self.config.channels {
                return Err(Error::Config(format!(
                    "input statistics for {} channels, model has {}",
                    n.mean.len(),
                    self.config.channels
                )));
            }
            if n.std.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config("input std must be positive".into()));
            }
        }
        self.input_norm = norm;
        Ok(())
    }

    /// Exact count of learnable scalars held by the model.
    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn stack_inputs<E: Element>(&self, tape: &mut Tape<E>, batch: &[&SitsTensor]) -> Result<Var> {
        let first = batch
            .first()
            .ok_or_else(|| Error::Dimension("empty batch".into()))?;
        let (t, h, w, c) = first.dims();
        if (h, w, c) != (self.config.height, self.config.width, self.config.channels) {
            return dim_err(format!(
                "input is {t}x{h}x{w}x{c}, model expects HxWxC = {}x{}x{}",
                self.config.height, self.config.width, self.config.channels
            ));
        }
        let parts: Vec<&Tensor<f32>> = batch.iter().map(|s| s.values()).collect();
        let mut stacked = Tensor::stack(&parts)?;
        if let Some(norm) = &self.input_norm {
            norm.apply(stacked.data_mut());
        }
        Ok(tape.constant(stacked.cast()))
    }

    /// Temporal encodings per batch member: `[B, N_T, d]`.
    fn temporal_encodings<E: Element>(
        &self,
        tape: &mut Tape<E>,
        p: &Bound,
        batch: &[&SitsTensor],
        nt: usize,
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(batch.len());
        for s in batch {
            let keys: Vec<DayIndex> = match self.config.pe_mode {
                // a temporal patch is dated by its first acquisition
                PeMode::DateLookup => (0..nt)
                    .map(|j| s.dates()[j * self.config.patch.t])
                    .collect(),
                PeMode::Static => {
                    if nt > self.temporal_pe.len() {
                        return dim_err(format!(
                            "{nt} temporal tokens but the static table has {} rows",
                            self.temporal_pe.len()
                        ));
                    }
                    (0..nt as DayIndex).collect()
                }
            };
            rows.push(temporal_pe_lookup(tape, p, &self.temporal_pe, &keys)?);
        }
        let pe = tape.concat(&rows, 0)?;
        tape.reshape(pe, &[batch.len(), nt, self.config.dim])
    }

    /// Temporal encoder: tokenise, add date encodings, prepend the temporal
    /// class tokens, attend along time per location, keep the class states.
    /// Returns `[B·N_H·N_W, K_cls, d]`.
    pub fn temporal_encode<E: Element>(
        &self,
        tape: &mut Tape<E>,
        p: &Bound,
        batch: &[&SitsTensor],
    ) -> Result<Var> {
        let x = self.stack_inputs(tape, batch)?;
        let grid = tokenize_sits(tape, p, &self.embed, x, self.config.patch)?;
        let nt = tape.shape(grid)[1];
        let pe = self.temporal_encodings(tape, p, batch, nt)?;
        let z = build_temporal_input(tape, grid, pe, p.var(self.cls.temporal))?;
        let z = encoder_forward(tape, p, &self.temporal_encoder, z)?;
        tape.narrow(z, 1, 0, self.cls.count)
    }

    /// Spatial encoder over each class stream. Returns `(global, local)` as
    /// `[B, K_cls, d]` and `[B, K_cls, N_H·N_W, d]`.
    pub fn spatial_encode<E: Element>(
        &self,
        tape: &mut Tape<E>,
        p: &Bound,
        z: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        let cls = self.cls.spatial.ok_or_else(|| {
            Error::Config("spatial class tokens are not used by this factorization".into())
        })?;
        let z = build_spatial_input(tape, z, batch, p.var(self.spatial_pe.table), p.var(cls))?;
        let s = tape.shape(z).to_vec(); // [B, K, 1 + locs, d]
        let (k, n, d) = (s[1], s[2], s[3]);
        let z = match self.config.cls_interactions {
            // class index is a batch axis: streams never see each other
            ClsInteractions::Blocked => {
                let z = tape.reshape(z, &[batch * k, n, d])?;
                encoder_forward(tape, p, &self.spatial_encoder, z)?
            }
            // one joint sequence of K·(1 + locs) tokens per sample
            ClsInteractions::Full => {
                let z = tape.reshape(z, &[batch, k * n, d])?;
                encoder_forward(tape, p, &self.spatial_encoder, z)?
            }
        };
        let z = tape.reshape(z, &[batch, k, n, d])?;
        let global = tape.narrow(z, 2, 0, 1)?;
        let global = tape.reshape(global, &[batch, k, d])?;
        let local = tape.narrow(z, 2, 1, n - 1)?;
        Ok((global, local))
    }

    /// Spatial-then-temporal wiring used only for the factorization-order
    /// ablation: each acquisition's tokens go through the spatial encoder
    /// (with `P_S`, no class tokens), then every location's series goes
    /// through the temporal encoder with date encodings and the temporal
    /// class tokens. `local` is the per-location class states and `global`
    /// their mean over locations.
    fn spatial_first<E: Element>(
        &self,
        tape: &mut Tape<E>,
        p: &Bound,
        batch: &[&SitsTensor],
    ) -> Result<(Var, Var)> {
        let b = batch.len();
        let d = self.config.dim;
        let x = self.stack_inputs(tape, batch)?;
        let grid = tokenize_sits(tape, p, &self.embed, x, self.config.patch)?;
        let g = tape.shape(grid).to_vec();
        let (nt, locs) = (g[1], g[2] * g[3]);

        let z = tape.reshape(grid, &[b * nt, locs, d])?;
        let z = tape.add(z, p.var(self.spatial_pe.table))?;
        let z = encoder_forward(tape, p, &self.spatial_encoder, z)?;
        let z = tape.reshape(z, &[b, nt, g[2], g[3], d])?;

        let pe = self.temporal_encodings(tape, p, batch, nt)?;
        let z = build_temporal_input(tape, z, pe, p.var(self.cls.temporal))?;
        let z = encoder_forward(tape, p, &self.temporal_encoder, z)?;
        let z = tape.narrow(z, 1, 0, self.cls.count)?; // [B·locs, K, d]
        let z = tape.reshape(z, &[b, locs, self.cls.count, d])?;
        let local = tape.permute(z, &[0, 2, 1, 3])?;
        let sum = tape.sum_axis(local, 2)?;
        let global = tape.scale(sum, E::from_f64(1.0 / locs as f64));
        Ok((global, local))
    }

    /// Dense head: each local class token is projected to `h·w` pixel logits
    /// (or `h·w·K` with a single class token) and the patches are tiled back
    /// into the image. Returns `[B, H, W, K]`.
    pub fn segmentation_head<E: Element>(
        &self,
        tape: &mut Tape<E>,
        p: &Bound,
        local: Var,
    ) -> Result<Var> {
        let s = tape.shape(local).to_vec();
        let (b, kc, locs) = (s[0], s[1], s[2]);
        let PatchSize { h, w, .. } = self.config.patch;
        let (nh, nw) = (self.config.height / h, self.config.width / w);
        if locs != nh * nw {
            return dim_err(format!("{locs} local tokens for a {nh}x{nw} grid"));
        }
        let k = self.config.num_classes;
        let y = tape.matmul(local, p.var(self.head.weight))?; // [B, Kc, locs, out]
        let y = tape.add(y, p.var(self.head.bias))?;
        let y = match self.config.cls_mode {
            ClsMode::MultiK => {
                let y = tape.reshape(y, &[b, kc, nh, nw, h, w])?;
                tape.permute(y, &[0, 2, 3, 4, 5, 1])?
            }
            ClsMode::Single => tape.reshape(y, &[b, nh, nw, h, w, k])?,
        };
        tile_patches(tape, y)
    }

    /// Global head: each class token is projected to a scalar (one projector
    /// per class). Returns `[B, K]`.
    pub fn classification_head<E: Element>(
        &self,
        tape: &mut Tape<E>,
        p: &Bound,
        global: Var,
    ) -> Result<Var> {
        let s = tape.shape(global).to_vec();
        let (b, kc, d) = (s[0], s[1], s[2]);
        let g = tape.reshape(global, &[b, kc, 1, d])?;
        let y = tape.matmul(g, p.var(self.head.weight))?; // [B, Kc, 1, out]
        let y = tape.add(y, p.var(self.head.bias))?;
        tape.reshape(y, &[b, self.config.num_classes])
    }

    /// Runs the whole network on a batch of equally long series.
    pub fn forward_trace<E: Element>(
        &self,
        tape: &mut Tape<E>,
        p: &Bound,
        batch: &[&SitsTensor],
    ) -> Result<ForwardTrace> {
        if let Some(s) = batch.iter().find(|s| s.dims().0 != batch[0].dims().0) {
            return dim_err(format!(
                "batch mixes series of length {} and {}",
                batch[0].dims().0,
                s.dims().0
            ));
        }
        let (temporal_cls, global, local) = match self.config.factorization {
            Factorization::TemporalFirst => {
                let z = self.temporal_encode(tape, p, batch)?;
                let (g, l) = self.spatial_encode(tape, p, z, batch.len())?;
                (Some(z), g, l)
            }
            Factorization::SpatialFirst => {
                let (g, l) = self.spatial_first(tape, p, batch)?;
                (None, g, l)
            }
        };
        let logits = match self.config.task {
            Task::Segmentation => self.segmentation_head(tape, p, local)?,
            Task::Classification => self.classification_head(tape, p, global)?,
        };
        Ok(ForwardTrace {
            temporal_cls,
            global,
            local,
            logits,
        })
    }

    /// Unnormalised logits: `[B, H, W, K]` for segmentation, `[B, K]` for
    /// classification.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        p: &Bound,
        batch: &[&SitsTensor],
    ) -> Result<Var> {
        Ok(self.forward_trace(tape, p, batch)?.logits)
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, batch: &[&SitsTensor]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let y = self.forward(&mut tape, &p, batch)?;
        Ok(tape.value(y).clone())
    }

    /// Groups batch members by series length, preserving order.
    pub fn group_by_length<'a>(batch: &[&'a SitsTensor]) -> Vec<Vec<&'a SitsTensor>> {
        let mut groups: BTreeMap<usize, Vec<&SitsTensor>> = BTreeMap::new();
        let mut order = Vec::new();
        for s in batch {
            let t = s.dims().0;
            if !groups.contains_key(&t) {
                order.push(t);
            }
            groups.entry(t).or_default().push(s);
        }
        order
            .into_iter()
            .map(|t| groups.remove(&t).unwrap())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyword_round_trip() {
        for f in Factorization::ALL {
            assert_eq!(f.as_str().parse::<Factorization>().unwrap(), *f);
        }
        assert!("sideways".parse::<PeMode>().is_err());
    }

    #[test]
    fn input_norm_standardises_each_channel() {
        let values =
            Tensor::new(&[2, 1, 2, 2], vec![1.0, 5.0, 3.0, 5.0, 5.0, 5.0, 7.0, 5.0]).unwrap();
        let s = SitsTensor::new(values, vec![1, 9]).unwrap();
        let norm = InputNorm::fit([&s]).unwrap();
        assert_eq!(norm.mean, vec![4.0, 5.0]);
        assert_eq!(norm.std, vec![5f32.sqrt(), 1.0]);
        let mut x = s.values().data().to_vec();
        norm.apply(&mut x);
        let first: Vec<f32> = x.iter().step_by(2).copied().collect();
        assert!((first.iter().sum::<f32>()).abs() < 1e-6);
        assert!(x.iter().skip(1).step_by(2).all(|&v| v == 0.0));
        assert!(InputNorm::fit(std::iter::empty()).is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let mut cfg = TsvitConfig {
            pe_mode: PeMode::Static,
            cls_mode: ClsMode::Single,
            dim: 32,
            ..TsvitConfig::default()
        };
        cfg.ln_eps = 1e-6;
        let kv = cfg.to_kv();
        let back = TsvitConfig::from_kv(kv.iter().map(|(k, v)| (*k, v.as_str()))).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(kv.len(), TsvitConfig::KEYS.len());
        for ((k, _), want) in kv.iter().zip(TsvitConfig::KEYS) {
            assert_eq!(k, want);
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = TsvitConfig::default();
        assert!(cfg.set("depth", "3").is_err());
    }

    #[test]
    fn single_affine_count() {
        assert_eq!(Linear::num_params(4, 3), 15);
    }
}
