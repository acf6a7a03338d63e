#![allow(dead_code)]

//! Backward-pass gradients against central finite differences.

use fcrn_core::data::{
    augment_cause_specific, augment_subdistribution, censoring_survival, Dataset, FunctionalCurve,
    PersonPeriodRow, SubjectRecord, TimeGrid,
};
use fcrn_core::model::{
    assemble_input, local_rows, Encoded, FcrnModel, Head, Reduction, TrainConfig,
};
use fcrn_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub struct Instance {
    pub model: FcrnModel,
    pub enc: Encoded,
    pub rows: Vec<PersonPeriodRow>,
}

pub fn instance(seed: u64, head_kind: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=6);
    let p = rng.random_range(1..=3);
    let signals = rng.random_range(1..=2);
    let d = rng.random_range(2..=3);
    let l = rng.random_range(3..=5);
    let j = rng.random_range(5..=8);
    let taus: Vec<f64> = (0..j).map(|k| k as f64 / (j - 1) as f64).collect();
    let subjects = (0..n)
        .map(|i| {
            let x = (0..p).map(|_| Some(rng.random_range(-2.0..2.0))).collect();
            let curves = (0..signals)
                .map(|s| {
                    let v = (0..j).map(|_| rng.random_range(-1.5..1.5)).collect();
                    FunctionalCurve::new(format!("f{s}"), taus.clone(), v).unwrap()
                })
                .collect();
            let time = rng.random_range(0.0..l as f64);
            let cause = rng.random_range(0..=2);
            SubjectRecord::new(format!("s{i}"), x, curves, time, cause).unwrap()
        })
        .collect();
    let names = (0..p).map(|k| format!("x{k}")).collect();
    let ds = Dataset::new(names, subjects).unwrap();
    let grid = TimeGrid::new(l as f64, 1.0).unwrap();
    let head = if head_kind == 0 {
        Head::CauseSpecific { causes: 2 }
    } else {
        Head::SubDistribution {
            cause: 1 + seed as usize % 2,
        }
    };
    let cfg = TrainConfig {
        hidden: vec![5, 6, 4],
        basis_hidden: vec![3, 3],
        ..TrainConfig::default()
    };
    let model = FcrnModel::init(&ds, grid, head, &cfg, d, &mut rng).unwrap();
    let rows = match head {
        Head::CauseSpecific { causes } => augment_cause_specific(&ds, &grid, causes).unwrap().rows,
        Head::SubDistribution { cause } => {
            let g = censoring_survival(&ds, &grid).unwrap();
            augment_subdistribution(&ds, &grid, cause, &g).unwrap().rows
        }
    };
    let enc = model.encode(&ds).unwrap();
    Instance { model, enc, rows }
}

pub fn loss(model: &FcrnModel, enc: &Encoded, rows: &[PersonPeriodRow]) -> f64 {
    let (subjects, local) = local_rows(rows);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let fwd = model
        .forward(&mut g, &bound, enc, &subjects, &local, false)
        .unwrap();
    let l = model
        .loss(&mut g, fwd.probs, rows, Reduction::Mean)
        .unwrap();
    g.value(l).item()
}

pub fn analytic(
    model: &FcrnModel,
    enc: &Encoded,
    rows: &[PersonPeriodRow],
) -> (Vec<Tensor>, Vec<usize>, Vec<f64>) {
    let (subjects, local) = local_rows(rows);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let fwd = model
        .forward(&mut g, &bound, enc, &subjects, &local, true)
        .unwrap();
    let l = model
        .loss(&mut g, fwd.probs, rows, Reduction::Mean)
        .unwrap();
    let grads = g.backward(l).unwrap();
    let params = bound.vars().into_iter().map(|v| grads.get(v)).collect();
    (params, subjects, grads.get(fwd.tab).into_data())
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Signs of every ReLU pre-activation over `rows`, zero kept distinct.
pub fn relu_pattern(model: &FcrnModel, enc: &Encoded, rows: &[PersonPeriodRow]) -> Vec<i8> {
    let l = model.grid.len();
    let last = model.layers.len() - 1;
    let mut out = Vec::new();
    for r in rows {
        let coefs = model.basis_coefficients(enc, r.subject).unwrap();
        let mut h = assemble_input(
            enc.row(r.subject),
            &coefs,
            r.interval,
            l,
            model.time_encoding,
        )
        .unwrap();
        for (k, layer) in model.layers[..last].iter().enumerate() {
            let cols = h.len();
            let pre: Vec<f64> = (0..layer.bias.len())
                .map(|o| {
                    let w = &layer.weight.data()[o * cols..(o + 1) * cols];
                    layer.bias.data()[o] + w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if k > 0 {
                out.extend(pre.iter().map(|&v| v.partial_cmp(&0.0).unwrap() as i8));
                h = pre.iter().map(|&v| v.max(0.0)).collect();
            } else {
                h = pre;
            }
        }
    }
    out
}

/// Central difference of `f` at `x`, or `None` when a ReLU kink lies within
/// the stencil: some pre-activation changes sign (to, from or across zero)
/// between `x − H`, `x` and `x + H`.
pub fn central(f: impl Fn(f64) -> f64, pattern: impl Fn(f64) -> Vec<i8>, x: f64) -> Option<f64> {
    let mid = pattern(x);
    if pattern(x + H) != mid || pattern(x - H) != mid {
        return None;
    }
    Some((f(x + H) - f(x - H)) / (2.0 * H))
}

pub struct Tally {
    pub worst: f64,
    pub checked: usize,
    pub kinks: usize,
}

pub fn check_instance(inst: &Instance, tally: &mut Tally) {
    let (grads, subjects, tab_grad) = analytic(&inst.model, &inst.enc, &inst.rows);
    let n_params = inst.model.params().len();
    for k in 0..n_params {
        let len = inst.model.params()[k].len();
        for e in 0..len {
            let x0 = inst.model.params()[k].data()[e];
            let f = |x: f64| {
                let mut m = inst.model.clone();
                m.params_mut()[k].data_mut()[e] = x;
                loss(&m, &inst.enc, &inst.rows)
            };
            let pattern = |x: f64| {
                let mut m = inst.model.clone();
                m.params_mut()[k].data_mut()[e] = x;
                relu_pattern(&m, &inst.enc, &inst.rows)
            };
            match central(f, pattern, x0) {
                Some(fd) => {
                    tally.worst = tally.worst.max(rel_err(grads[k].data()[e], fd));
                    tally.checked += 1;
                }
                None => tally.kinks += 1,
            }
        }
    }
    let p = inst.enc.p;
    for (pos, &i) in subjects.iter().enumerate() {
        for j in 0..p {
            let x0 = inst.enc.tab[i * p + j];
            let f = |x: f64| {
                let mut enc = inst.enc.clone();
                enc.tab[i * p + j] = x;
                loss(&inst.model, &enc, &inst.rows)
            };
            let pattern = |x: f64| {
                let mut enc = inst.enc.clone();
                enc.tab[i * p + j] = x;
                relu_pattern(&inst.model, &enc, &inst.rows)
            };
            match central(f, pattern, x0) {
                Some(fd) => {
                    tally.worst = tally.worst.max(rel_err(tab_grad[pos * p + j], fd));
                    tally.checked += 1;
                }
                None => tally.kinks += 1,
            }
        }
    }
}

/// Checks `count` random models, alternating heads.
pub fn run(count: u64) -> Tally {
    let mut tally = Tally {
        worst: 0.0,
        checked: 0,
        kinks: 0,
    };
    for seed in 0..count {
        let inst = instance(seed, (seed % 2) as usize);
        check_instance(&inst, &mut tally);
    }
    tally
}
