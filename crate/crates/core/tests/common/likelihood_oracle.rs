#![allow(dead_code)]

//! Person-period losses against the subject-level likelihoods they encode.

use fcrn_core::data::{
    augment_cause_specific, augment_subdistribution, censoring_survival, Dataset, SubjectRecord,
    TimeGrid,
};
use fcrn_core::model::{loss_cs, loss_sub, Reduction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub ds: Dataset,
    pub grid: TimeGrid,
    pub causes: usize,
    /// `hazard[i][t-1]` = head output `(1 − Σλ, λ_1, …, λ_M)`.
    pub hazard: Vec<Vec<Vec<f64>>>,
    /// `xi[i][t-1]` for the sub-distribution head.
    pub xi: Vec<Vec<f64>>,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=10);
    let causes = rng.random_range(1..=2);
    let l = rng.random_range(1..=5);
    let subjects = (0..n)
        .map(|i| {
            let time = rng.random_range(0.0..l as f64);
            let cause = rng.random_range(0..=causes);
            SubjectRecord::new(format!("s{i}"), vec![], vec![], time, cause).unwrap()
        })
        .collect();
    let ds = Dataset::new(vec![], subjects).unwrap();
    let hazard = (0..n)
        .map(|_| {
            (0..l)
                .map(|_| {
                    let raw: Vec<f64> = (0..=causes).map(|_| rng.random_range(0.05..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / s).collect()
                })
                .collect()
        })
        .collect();
    let xi = (0..n)
        .map(|_| (0..l).map(|_| rng.random_range(0.01..0.99)).collect())
        .collect();
    Instance {
        ds,
        grid: TimeGrid::new(l as f64, 1.0).unwrap(),
        causes,
        hazard,
        xi,
    }
}

/// `−log Π_i [Π_{t<T_i} (1 − λ(t)) · λ_{R_i}(T_i)^{δ_i} (1 − λ(T_i))^{1−δ_i}]`.
pub fn direct_nll(inst: &Instance) -> f64 {
    let mut ll = 0.0;
    for (i, s) in inst.ds.subjects.iter().enumerate() {
        let ti = (s.time / inst.grid.width()).floor() as usize + 1;
        let ti = if s.time > 0.0 && (s.time / inst.grid.width()).fract() == 0.0 {
            ti - 1
        } else {
            ti
        };
        let ti = ti.min(inst.grid.len());
        for t in 1..ti {
            let overall: f64 = inst.hazard[i][t - 1][1..].iter().sum();
            ll += (1.0 - overall).ln();
        }
        let h = &inst.hazard[i][ti - 1];
        if s.cause > 0 {
            ll += h[s.cause].ln();
        } else {
            ll += (1.0 - h[1..].iter().sum::<f64>()).ln();
        }
    }
    -ll
}

/// Kaplan–Meier of the censoring distribution at interval ends.
pub fn km(inst: &Instance) -> Vec<f64> {
    let l = inst.grid.len();
    let intervals: Vec<usize> = inst
        .ds
        .subjects
        .iter()
        .map(|s| inst.grid.assign_interval(s.time).unwrap())
        .collect();
    let mut g = vec![1.0];
    for t in 1..=l {
        let at_risk = intervals.iter().filter(|&&k| k >= t).count();
        let censored = intervals
            .iter()
            .zip(&inst.ds.subjects)
            .filter(|(&k, s)| k == t && s.cause == 0)
            .count();
        let prev = *g.last().unwrap();
        let next: f64 = if at_risk > 0 {
            prev * (1.0 - censored as f64 / at_risk as f64)
        } else {
            prev
        };
        g.push(next.max(1e-4));
    }
    g
}

/// `−Σ_i Σ_{t<L} w_it [y log ξ + (1 − y) log(1 − ξ)]` with the weights
/// written out from their definition.
pub fn direct_weighted_nll(inst: &Instance, target: usize) -> f64 {
    let g = km(inst);
    let at = |k: usize| g[k.min(g.len() - 1)];
    let mut ll = 0.0;
    for (i, s) in inst.ds.subjects.iter().enumerate() {
        let ti = inst.grid.assign_interval(s.time).unwrap();
        for t in 1..inst.grid.len() {
            let at_risk = t <= ti;
            let competing_past = ti < t && s.cause != 0 && s.cause != target;
            if !at_risk && !competing_past {
                continue;
            }
            let w = at(t - 1) / at(t.min(ti) - 1);
            let y = t == ti && s.cause == target;
            let p = inst.xi[i][t - 1];
            ll += w * if y { p.ln() } else { (1.0 - p).ln() };
        }
    }
    -ll
}

/// `|loss_cs − direct NLL|` for one random instance.
pub fn cause_specific_error(seed: u64) -> f64 {
    let inst = instance(seed);
    let table = augment_cause_specific(&inst.ds, &inst.grid, inst.causes).unwrap();
    let probs: Vec<Vec<f64>> = table
        .rows
        .iter()
        .map(|r| inst.hazard[r.subject][r.interval - 1].clone())
        .collect();
    (loss_cs(&probs, &table.rows, Reduction::Sum) - direct_nll(&inst)).abs()
}

/// Largest `|loss_sub − direct weighted NLL|` over the target causes.
pub fn sub_distribution_error(seed: u64) -> f64 {
    let inst = instance(seed);
    let g = censoring_survival(&inst.ds, &inst.grid).unwrap();
    (1..=inst.causes)
        .map(|target| {
            let table = augment_subdistribution(&inst.ds, &inst.grid, target, &g).unwrap();
            let xi: Vec<f64> = table
                .rows
                .iter()
                .map(|r| inst.xi[r.subject][r.interval - 1])
                .collect();
            (loss_sub(&xi, &table.rows, Reduction::Sum) - direct_weighted_nll(&inst, target)).abs()
        })
        .fold(0.0, f64::max)
}
