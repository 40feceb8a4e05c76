//! Turning a satellite image time series into encoder inputs: patch
//! tokenisation, date-indexed temporal encodings, spatial encodings and the
//! prepended class tokens.

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::Linear;
use crate::params::{Bound, ParamId};
use crate::tensor::{Element, Tensor};

/// Day offset from the dataset epoch.
pub type DayIndex = u16;

/// One time series `[T, H, W, C]` with its acquisition days.
#[derive(Clone, Debug, PartialEq)]
pub struct SitsTensor {
    values: Tensor<f32>,
    dates: Vec<DayIndex>,
}

impl SitsTensor {
    pub fn new(values: Tensor<f32>, dates: Vec<DayIndex>) -> Result<Self> {
        if values.rank() != 4 {
            return dim_err(format!(
                "SITS values must be [T,H,W,C], got {:?}",
                values.shape()
            ));
        }
        if values.shape()[0] != dates.len() {
            return dim_err(format!(
                "{} dates for {} acquisitions",
                dates.len(),
                values.shape()[0]
            ));
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!(
                "acquisition dates must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { values, dates })
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn dates(&self) -> &[DayIndex] {
        &self.dates
    }

    /// `(T, H, W, C)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// Token extent along time, rows and columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSize {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

/// Number of tokens along each axis, `(N_T, N_H, N_W)`.
pub fn grid_dims(t: usize, h: usize, w: usize, patch: PatchSize) -> Result<(usize, usize, usize)> {
    if patch.t == 0 || patch.h == 0 || patch.w == 0 {
        return Err(Error::Config(format!(
            "patch size must be positive, got {patch:?}"
        )));
    }
    let mut bad = Vec::new();
    if h % patch.h != 0 {
        bad.push(format!("H={h} is not divisible by h={}", patch.h));
    }
    if w % patch.w != 0 {
        bad.push(format!("W={w} is not divisible by w={}", patch.w));
    }
    if !bad.is_empty() {
        return Err(Error::Config(bad.join("; ")));
    }
    if t < patch.t {
        return Err(Error::Config(format!(
            "T={t} is shorter than the temporal patch t={}",
            patch.t
        )));
    }
    Ok((t / patch.t, h / patch.h, w / patch.w))
}

/// Splits `x: [B, T, H, W, C]` into non-overlapping `t×h×w` patches, each
/// flattened in `(t, h, w, C)` order: `[B, N_T, N_H, N_W, t·h·w·C]`.
/// Trailing acquisitions that do not fill a temporal patch are dropped.
pub fn extract_patches<E: Element>(tape: &mut Tape<E>, x: Var, patch: PatchSize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 {
        return dim_err(format!("expected [B,T,H,W,C], got {s:?}"));
    }
    let (b, t, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
    let (nt, nh, nw) = grid_dims(t, h, w, patch)?;
    let x = if nt * patch.t < t {
        tape.narrow(x, 1, 0, nt * patch.t)?
    } else {
        x
    };
    let x = tape.reshape(x, &[b, nt, patch.t, nh, patch.h, nw, patch.w, c])?;
    let x = tape.permute(x, &[0, 1, 3, 5, 2, 4, 6, 7])?;
    tape.reshape(x, &[b, nt, nh, nw, patch.t * patch.h * patch.w * c])
}

/// Inverse layout of patch extraction for a single time step:
/// `[B, N_H, N_W, h, w, M] -> [B, N_H·h, N_W·w, M]`.
pub fn tile_patches<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 6 {
        return dim_err(format!("expected [B,N_H,N_W,h,w,M], got {s:?}"));
    }
    let (b, nh, nw, h, w, m) = (s[0], s[1], s[2], s[3], s[4], s[5]);
    let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(x, &[b, nh * h, nw * w, m])
}

/// Patch tokens projected to the model width: `[B, N_T, N_H, N_W, d]`.
pub fn tokenize_sits<E: Element>(
    tape: &mut Tape<E>,
    p: &Bound,
    embed: &Linear,
    x: Var,
    patch: PatchSize,
) -> Result<Var> {
    let patches = extract_patches(tape, x, patch)?;
    embed.forward(tape, p, patches)
}

/// Learnable encodings `P_T` with one row per known acquisition day.
#[derive(Clone, Debug)]
pub struct TemporalPositionTable {
    keys: Vec<DayIndex>,
    pub table: ParamId,
}

impl TemporalPositionTable {
    pub fn new(mut keys: Vec<DayIndex>, table: ParamId) -> Result<Self> {
        keys.sort_unstable();
        keys.dedup();
        if keys.is_empty() {
            return Err(Error::Config("temporal position table has no keys".into()));
        }
        Ok(Self { keys, table })
    }

    pub fn keys(&self) -> &[DayIndex] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Row for each day. Unknown days map to the nearest key, ties to the
    /// earlier one.
    pub fn lookup_rows(&self, dates: &[DayIndex]) -> Result<Vec<usize>> {
        if self.keys.is_empty() {
            return Err(Error::Config("temporal position table has no keys".into()));
        }
        Ok(dates.iter().map(|&d| self.nearest(d)).collect())
    }

    fn nearest(&self, day: DayIndex) -> usize {
        match self.keys.binary_search(&day) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) if i == self.keys.len() => i - 1,
            Err(i) => {
                let below = day - self.keys[i - 1];
                let above = self.keys[i] - day;
                if above < below {
                    i
                } else {
                    i - 1
                }
            }
        }
    }
}

/// Looks up `P_T` rows for `dates`: `[len(dates), d]`.
pub fn temporal_pe_lookup<E: Element>(
    tape: &mut Tape<E>,
    p: &Bound,
    table: &TemporalPositionTable,
    dates: &[DayIndex],
) -> Result<Var> {
    let rows = table.lookup_rows(dates)?;
    tape.index_select(p.var(table.table), &rows)
}

/// Spatial encodings `P_S`, one row per token-grid location.
#[derive(Clone, Debug)]
pub struct SpatialPositionTable {
    pub table: ParamId,
    pub rows: usize,
}

/// Class tokens: `temporal` is `[K, d]`; `spatial` is `[K, 1, d]` and is
/// absent when the spatial encoder runs without class tokens.
#[derive(Clone, Debug)]
pub struct ClsTokenBank {
    pub temporal: ParamId,
    pub spatial: Option<ParamId>,
    pub count: usize,
}

/// Temporal encoder input: every location's token series plus its date
/// encodings, with the same `K` class tokens prepended.
///
/// `grid: [B, N_T, N_H, N_W, d]`, `pe: [B, N_T, d]`, `cls: [K, d]`
/// -> `[B·N_H·N_W, K + N_T, d]`.
pub fn build_temporal_input<E: Element>(
    tape: &mut Tape<E>,
    grid: Var,
    pe: Var,
    cls: Var,
) -> Result<Var> {
    let g = tape.shape(grid).to_vec();
    if g.len() != 5 {
        return dim_err(format!("token grid must be [B,N_T,N_H,N_W,d], got {g:?}"));
    }
    let (b, nt, nh, nw, d) = (g[0], g[1], g[2], g[3], g[4]);
    if tape.shape(pe) != [b, nt, d] {
        return dim_err(format!(
            "temporal encodings {:?} do not match grid {g:?}",
            tape.shape(pe)
        ));
    }
    let cs = tape.shape(cls).to_vec();
    if cs.len() != 2 || cs[1] != d {
        return dim_err(format!("temporal cls tokens must be [K,{d}], got {cs:?}"));
    }
    let k = cs[0];
    let locs = nh * nw;

    let z = tape.permute(grid, &[0, 2, 3, 1, 4])?; // [B, NH, NW, NT, d]
    let z = tape.reshape(z, &[b, locs, nt, d])?;
    let pe = tape.reshape(pe, &[b, 1, nt, d])?;
    let z = tape.add(z, pe)?;
    let z = tape.reshape(z, &[b * locs, nt, d])?;
    let cls = tape.broadcast_to(cls, &[b * locs, k, d])?;
    tape.concat(&[cls, z], 1)
}

/// Spatial encoder input: per-class feature maps plus `P_S`, with one global
/// class token prepended to each map.
///
/// `cls_states: [B·N_H·N_W, K, d]`, `ps: [N_H·N_W, d]`, `cls: [K, 1, d]`
/// -> `[B, K, 1 + N_H·N_W, d]`.
pub fn build_spatial_input<E: Element>(
    tape: &mut Tape<E>,
    cls_states: Var,
    batch: usize,
    ps: Var,
    cls: Var,
) -> Result<Var> {
    let s = tape.shape(cls_states).to_vec();
    if s.len() != 3 || batch == 0 || s[0] % batch != 0 {
        return dim_err(format!(
            "temporal cls states {s:?} do not split into batch {batch}"
        ));
    }
    let (locs, k, d) = (s[0] / batch, s[1], s[2]);
    if tape.shape(ps) != [locs, d] {
        return dim_err(format!(
            "spatial encodings {:?} do not match {locs} locations of width {d}",
            tape.shape(ps)
        ));
    }
    if tape.shape(cls) != [k, 1, d] {
        return dim_err(format!(
            "spatial cls tokens {:?}, expected [{k}, 1, {d}]",
            tape.shape(cls)
        ));
    }
    let z = tape.reshape(cls_states, &[batch, locs, k, d])?;
    let z = tape.permute(z, &[0, 2, 1, 3])?; // [B, K, locs, d]
    let z = tape.add(z, ps)?;
    let cls = tape.broadcast_to(cls, &[batch, k, 1, d])?;
    tape.concat(&[cls, z], 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn table(keys: &[DayIndex]) -> TemporalPositionTable {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("pt", Tensor::zeros(&[keys.len(), 2]));
        TemporalPositionTable::new(keys.to_vec(), id).unwrap()
    }

    #[test]
    fn exact_keys_map_to_their_rows() {
        assert_eq!(
            table(&[10, 25, 40]).lookup_rows(&[25, 10]).unwrap(),
            vec![1, 0]
        );
    }

    #[test]
    fn unseen_days_fall_back_to_nearest_key() {
        let t = table(&[10, 25, 40]);
        assert_eq!(t.lookup_rows(&[26]).unwrap(), vec![1]);
        // 17 - 10 = 7 < 25 - 17 = 8
        assert_eq!(t.lookup_rows(&[17]).unwrap(), vec![0]);
        // exact tie goes to the earlier key
        assert_eq!(t.lookup_rows(&[35, 30]).unwrap(), vec![2, 1]);
        assert_eq!(t.lookup_rows(&[0, 900]).unwrap(), vec![0, 2]);
    }

    #[test]
    fn empty_table_is_a_configuration_error() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("pt", Tensor::zeros(&[1, 2]));
        assert!(matches!(
            TemporalPositionTable::new(vec![], id),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn indivisible_grid_names_both_dims() {
        let err = grid_dims(4, 7, 9, PatchSize { t: 1, h: 2, w: 2 }).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("H=7") && msg.contains("W=9"), "{msg}");
    }

    #[test]
    fn dates_must_increase() {
        let v = Tensor::zeros(&[2, 2, 2, 1]);
        assert!(SitsTensor::new(v.clone(), vec![5, 5]).is_err());
        assert!(SitsTensor::new(v, vec![5, 6]).is_ok());
    }

    #[test]
    fn germany_sized_tokenisation() {
        assert_eq!(
            grid_dims(52, 24, 24, PatchSize { t: 1, h: 2, w: 2 }).unwrap(),
            (52, 12, 12)
        );
        assert_eq!(52 * 12 * 12, 7488);
    }
}
