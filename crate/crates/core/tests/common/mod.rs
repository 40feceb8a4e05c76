#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tsvit::autodiff::Tape;
use tsvit::embedding::{
    build_temporal_input, temporal_pe_lookup, tokenize_sits, DayIndex, PatchSize, SitsTensor,
};
use tsvit::model::{Task, TsvitConfig, TsvitModel};
use tsvit::nn::encoder_forward;
use tsvit::params::ParamStore;
use tsvit::tensor::{Element, Tensor};

/// T=3, H=W=4, C=2, K=3, d=8, one temporal and one spatial block.
pub fn toy_config() -> TsvitConfig {
    TsvitConfig {
        num_classes: 3,
        dim: 8,
        temporal_depth: 1,
        spatial_depth: 1,
        heads: 2,
        patch: PatchSize { t: 1, h: 2, w: 2 },
        input_t: 3,
        height: 4,
        width: 4,
        channels: 2,
        ..TsvitConfig::default()
    }
}

pub fn random_sits(rng: &mut ChaCha8Rng, cfg: &TsvitConfig, dates: &[DayIndex]) -> SitsTensor {
    let shape = [dates.len(), cfg.height, cfg.width, cfg.channels];
    let values = Tensor::from_fn(&shape, |_| rng.random_range(-1.0f32..1.0));
    SitsTensor::new(values, dates.to_vec()).unwrap()
}

/// Replaces every parameter with N(0, std) draws so that gradients are not
/// dominated by the small initialisation.
pub fn scramble<E: Element>(store: &mut ParamStore<E>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, std).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = E::from_f64(n.sample(&mut rng));
        }
    }
}

/// Loss used by the gradient oracle: masked CE for segmentation, focal
/// (γ=2) for classification.
pub fn loss_value(
    model: &TsvitModel,
    store: &ParamStore<f64>,
    batch: &[&SitsTensor],
    labels: &[usize],
    requires_grad: bool,
) -> (f64, Option<Vec<Tensor<f64>>>) {
    let mut tape = Tape::<f64>::new();
    let p = store.bind(&mut tape, requires_grad);
    let y = model.forward(&mut tape, &p, batch).unwrap();
    let k = model.config().num_classes;
    let rows = tape.value(y).numel() / k;
    let y = tape.reshape(y, &[rows, k]).unwrap();
    let loss = match model.config().task {
        Task::Segmentation => tape.masked_cross_entropy(y, labels, k).unwrap(),
        Task::Classification => tape.focal_loss(y, labels, 2.0).unwrap(),
    };
    let value = tape.value(loss).item().unwrap();
    if !requires_grad {
        return (value, None);
    }
    let mut g = tape.backward(loss).unwrap();
    (value, Some(p.collect_grads(&mut g, store)))
}

pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Central differences over every scalar of every parameter, compared with
/// the tape gradient. Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn check_gradients(
    model: &TsvitModel,
    store: &ParamStore<f64>,
    batch: &[&SitsTensor],
    labels: &[usize],
    h: f64,
    floor: f64,
) -> GradReport {
    let (_, grads) = loss_value(model, store, batch, labels, true);
    let grads = grads.unwrap();
    let mut work = store.clone();
    let mut report = GradReport {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for id in store.ids() {
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let (up, _) = loss_value(model, &work, batch, labels, false);
            work.get_mut(id).data_mut()[j] = orig - h;
            let (down, _) = loss_value(model, &work, batch, labels, false);
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[id.index()].data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!(
                    "{}[{j}] analytic {analytic:e} numeric {numeric:e}",
                    store.name(id)
                );
            }
            report.checked += 1;
        }
    }
    report
}

/// Model, two-sample batch and labels (some background) for the gradient
/// oracle under `cfg`.
pub fn gradient_fixture(
    cfg: TsvitConfig,
    seed: u64,
) -> (TsvitModel, ParamStore<f64>, Vec<SitsTensor>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dates: [&[DayIndex]; 2] = [&[5, 40, 90], &[12, 40, 130]];
    let model = TsvitModel::new(cfg.clone(), &[5, 12, 40, 90, 130], seed).unwrap();
    let mut store = model.params().cast::<f64>();
    scramble(&mut store, 0.3, seed + 1);
    let batch: Vec<SitsTensor> = dates
        .iter()
        .map(|d| random_sits(&mut rng, &cfg, d))
        .collect();
    let k = cfg.num_classes;
    let labels = match cfg.task {
        Task::Segmentation => (0..2 * cfg.height * cfg.width)
            .map(|_| rng.random_range(0..=k))
            .collect(),
        Task::Classification => vec![0, k - 1],
    };
    (model, store, batch, labels)
}

/// Copy of `model` whose class-indexed parameters are reordered so that new
/// class `i` is old class `perm[i]`.
pub fn permute_classes(model: &TsvitModel, perm: &[usize]) -> TsvitModel {
    let mut m = model.clone();
    let ids = [
        Some(m.cls.temporal),
        m.cls.spatial,
        Some(m.head.weight),
        Some(m.head.bias),
    ];
    for id in ids.into_iter().flatten() {
        let t = m.params().get(id).clone();
        let row = t.numel() / t.shape()[0];
        let mut data = Vec::with_capacity(t.numel());
        for &src in perm {
            data.extend_from_slice(&t.data()[src * row..(src + 1) * row]);
        }
        m.params_mut()
            .set(id, Tensor::new(t.shape(), data).unwrap())
            .unwrap();
    }
    m
}

/// Largest change in the temporal class states when the acquisitions of
/// `sits` are reordered by `perm` together with their dates. The reordered
/// series is fed through the same pipeline stages the model uses.
pub fn time_permutation_gap(model: &TsvitModel, sits: &SitsTensor, perm: &[usize]) -> f64 {
    let (t, h, w, c) = sits.dims();
    let frame = h * w * c;
    let mut tape = Tape::<f32>::new();
    let p = model.params().bind(&mut tape, false);
    let reference = model.temporal_encode(&mut tape, &p, &[sits]).unwrap();

    let mut values = Vec::with_capacity(t * frame);
    for &src in perm {
        values.extend_from_slice(&sits.values().data()[src * frame..(src + 1) * frame]);
    }
    let dates: Vec<DayIndex> = perm.iter().map(|&i| sits.dates()[i]).collect();
    let x = tape.constant(Tensor::new(&[1, t, h, w, c], values).unwrap());
    let grid = tokenize_sits(&mut tape, &p, &model.embed, x, model.config().patch).unwrap();
    let pe = temporal_pe_lookup(&mut tape, &p, &model.temporal_pe, &dates).unwrap();
    let pe = tape.reshape(pe, &[1, t, model.config().dim]).unwrap();
    let z = build_temporal_input(&mut tape, grid, pe, p.var(model.cls.temporal)).unwrap();
    let z = encoder_forward(&mut tape, &p, &model.temporal_encoder, z).unwrap();
    let permuted = tape.narrow(z, 1, 0, model.cls.count).unwrap();
    tape.value(reference).max_abs_diff(tape.value(permuted))
}

/// Spatial-encoder outputs `[B, K, 1 + locs, d]` (global then local) when
/// temporal class stream `stream` is perturbed by `delta`, and without.
pub fn spatial_outputs_with_stream_shift(
    model: &TsvitModel,
    sits: &SitsTensor,
    stream: usize,
    delta: f32,
) -> (Tensor<f32>, Tensor<f32>) {
    let run = |shift: f32| {
        let mut tape = Tape::<f32>::new();
        let p = model.params().bind(&mut tape, false);
        let z = model.temporal_encode(&mut tape, &p, &[sits]).unwrap();
        let mut zv = tape.value(z).clone();
        let (locs, k, d) = (zv.shape()[0], zv.shape()[1], zv.shape()[2]);
        for l in 0..locs {
            // a ramp, since layer norm would cancel a constant offset
            for (j, v) in zv.data_mut()[(l * k + stream) * d..(l * k + stream + 1) * d]
                .iter_mut()
                .enumerate()
            {
                *v += shift * j as f32;
            }
        }
        let z = tape.constant(zv);
        let (g, local) = model.spatial_encode(&mut tape, &p, z, 1).unwrap();
        let g = tape.reshape(g, &[1, k, 1, d]).unwrap();
        let all = tape.concat(&[g, local], 2).unwrap();
        tape.value(all).clone()
    };
    (run(0.0), run(delta))
}

/// Slices class stream `k` out of a `[1, K, n, d]` tensor.
pub fn stream(t: &Tensor<f32>, k: usize) -> Vec<f32> {
    let row = t.numel() / t.shape()[1];
    t.data()[k * row..(k + 1) * row].to_vec()
}

/// Largest deviation from `logits'[..., i] = logits[..., perm[i]]` after
/// reordering the class-indexed parameters by `perm`.
pub fn class_permutation_gap(model: &TsvitModel, sits: &SitsTensor, perm: &[usize]) -> f64 {
    let a = model.predict(&[sits]).unwrap();
    let b = permute_classes(model, perm).predict(&[sits]).unwrap();
    let k = perm.len();
    let mut gap = 0f64;
    for (ra, rb) in a.data().chunks(k).zip(b.data().chunks(k)) {
        for i in 0..k {
            gap = gap.max((rb[i] - ra[perm[i]]).abs() as f64);
        }
    }
    gap
}

/// `n` generated samples starting at index `first`, as training examples.
pub fn synthetic_examples(
    cfg: &tsvit::data::SynthConfig,
    first: u64,
    n: usize,
) -> Vec<tsvit::training::Example> {
    let g = tsvit::data::Generator::new(cfg.clone()).unwrap();
    (first..first + n as u64)
        .map(|i| g.sample(i).to_example())
        .collect()
}

/// Every acquisition day occurring in `examples`, sorted.
pub fn observed_days(examples: &[tsvit::training::Example]) -> Vec<DayIndex> {
    let mut days: Vec<DayIndex> = examples
        .iter()
        .flat_map(|e| e.sits.dates().to_vec())
        .collect();
    days.sort_unstable();
    days.dedup();
    days
}

/// Synthetic data shaped for [`toy_config`].
pub fn toy_synth(seed: u64) -> tsvit::data::SynthConfig {
    tsvit::data::SynthConfig {
        num_classes: 3,
        channels: 2,
        height: 4,
        width: 4,
        t_min: 3,
        t_max: 3,
        margin: 0,
        min_parcel: 2,
        seed,
        ..Default::default()
    }
}
