//! Acceptance gate: one PASS/FAIL line per criterion.

mod common;

#[path = "../../core/tests/common/gradient_oracle.rs"]
mod gradient_oracle;
#[path = "../../core/tests/common/likelihood_oracle.rs"]
mod likelihood_oracle;
#[path = "../../core/tests/common/recovery.rs"]
mod recovery;
#[path = "../../core/tests/common/weights_case.rs"]
mod weights_case;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use fcrn_core::data::{censoring_survival, Dataset, SubjectRecord, TimeGrid};
use fcrn_core::eval::{brier, brier_ipcw, score_curve};
use fcrn_core::model::{intercept_only, train, HazardPrediction, Head, TrainConfig};
use fcrn_core::synth::{simulate, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Gate {
    results: Vec<(String, bool)>,
}

impl Gate {
    fn run(&mut self, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if elapsed > l => Err(format!("took {elapsed:.1?}, limit {l:?}")),
            (o, _) => o,
        };
        let pass = outcome.is_ok();
        let detail = outcome.unwrap_or_else(|e| e);
        println!(
            "{} {name}: {detail} [{elapsed:.1?}]",
            if pass { "PASS" } else { "FAIL" }
        );
        self.results.push((name.to_string(), pass));
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_criterion() -> Outcome {
    let tally = gradient_oracle::run(100);
    let kinks_ok = tally.kinks * 100 < tally.checked;
    check(
        tally.worst < 1e-5 && kinks_ok,
        format!(
            "max relative error {:.2e} over {} entries ({} kink skips), tolerance 1e-5",
            tally.worst, tally.checked, tally.kinks
        ),
    )
}

fn likelihood_criterion() -> Outcome {
    let (mut cs, mut sub) = (0.0f64, 0.0f64);
    for seed in 0..50 {
        cs = cs.max(likelihood_oracle::cause_specific_error(seed));
        sub = sub.max(likelihood_oracle::sub_distribution_error(seed));
    }
    check(
        cs < 1e-10 && sub < 1e-10,
        format!("max |loss_cs - nll| {cs:.2e}, max |loss_sub - weighted nll| {sub:.2e}, tolerance 1e-10"),
    )
}

fn weights_criterion() -> Outcome {
    let mut mismatches = 0;
    for target in 1..=2 {
        if weights_case::weights_by_subject(target) != weights_case::expected(target) {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("{mismatches} of 2 target causes differ from the hand-computed weights"),
    )
}

fn ipcw_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    let sizes = [1usize, 2, 5, 10, 50, 200, 1000, 5000];
    for (k, &n) in sizes.iter().enumerate() {
        let subjects = (0..n)
            .map(|i| {
                let t = rng.random_range(0.0..100.0);
                SubjectRecord::new(format!("s{i}"), vec![], vec![], t, rng.random_range(1..=2))
                    .unwrap()
            })
            .collect();
        let ds = Dataset::new(vec![], subjects).unwrap();
        let grid = TimeGrid::new(100.0, 2.5 * (k + 1) as f64).unwrap();
        let g = censoring_survival(&ds, &grid).unwrap();
        for l in 0..=grid.len() {
            let preds: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            for cause in 1..=2 {
                let a = brier(&grid, l, &preds, &ds, cause).unwrap();
                let b = brier_ipcw(&grid, l, &preds, &ds, cause, &g).unwrap();
                worst = worst.max((a - b).abs());
            }
        }
    }
    check(
        worst < 1e-12,
        format!("max |brier_ipcw - brier| {worst:.2e} over sizes {sizes:?}, tolerance 1e-12"),
    )
}

fn recovery_criterion() -> Outcome {
    let runs: Vec<_> = (0..10).map(recovery::run).collect();
    let iro = runs.iter().map(|r| r.rmse_iro).sum::<f64>() / 10.0;
    let med = runs.iter().map(|r| r.rmse_median).sum::<f64>() / 10.0;
    let gain = 1.0 - iro / med;
    check(
        gain >= 0.15,
        format!(
            "mean RMSE {iro:.4} vs median fill {med:.4}: {:.1}% lower, need >= 15%",
            100.0 * gain
        ),
    )
}

const RATES: [f64; 3] = [0.0, 0.25, 0.5];
const REPLICATES: u64 = 20;
/// (label, head index, cause): CSM covers both causes, each SDM one.
const SERIES: [(&str, usize, usize); 4] = [
    ("CSM cause 1", 0, 1),
    ("CSM cause 2", 0, 2),
    ("SDM cause 1", 1, 1),
    ("SDM cause 2", 2, 2),
];

struct Experiment {
    /// `fcrn[series][rate][replicate]`
    fcrn: Vec<Vec<Vec<f64>>>,
    /// `baseline[series][replicate]` at 0% missingness.
    baseline: Vec<Vec<f64>>,
    cif_worst_sum: f64,
    cif_worst_product: f64,
    cif_monotone: bool,
    subjects_checked: usize,
}

fn heads() -> [Head; 3] {
    [
        Head::CauseSpecific { causes: 2 },
        Head::SubDistribution { cause: 1 },
        Head::SubDistribution { cause: 2 },
    ]
}

fn ibs_of(preds: &[HazardPrediction], cause: usize, test: &Dataset, grid: &TimeGrid) -> f64 {
    let g = censoring_survival(test, grid).unwrap();
    let cif: Vec<&[f64]> = preds.iter().map(|p| p.cif_for(cause).unwrap()).collect();
    score_curve(grid, grid.len(), &cif, test, cause, &g)
        .unwrap()
        .ibs
}

fn run_experiment() -> Experiment {
    let grid = TimeGrid::new(100.0, 5.0).unwrap();
    let mut ex = Experiment {
        fcrn: vec![vec![Vec::new(); RATES.len()]; SERIES.len()],
        baseline: vec![Vec::new(); SERIES.len()],
        cif_worst_sum: 0.0,
        cif_worst_product: 0.0,
        cif_monotone: true,
        subjects_checked: 0,
    };
    for rep in 0..REPLICATES {
        for (r, &rate) in RATES.iter().enumerate() {
            let mut sim_cfg = SimConfig {
                seed: rep,
                missing_rate: rate,
                ..SimConfig::default()
            };
            sim_cfg.functional.signals = 0;
            let sim = simulate(&sim_cfg).unwrap();
            let cfg = TrainConfig {
                seed: rep,
                ..TrainConfig::default()
            };
            let mut preds = Vec::new();
            for head in heads() {
                let model = train(&sim.train, grid, head, &cfg).unwrap().model;
                let p = model.predict(&sim.test).unwrap();
                audit_cif(&p, &mut ex);
                preds.push(p);
            }
            for (s, &(_, h, cause)) in SERIES.iter().enumerate() {
                ex.fcrn[s][r].push(ibs_of(&preds[h], cause, &sim.test, &grid));
                if r == 0 {
                    let head = heads()[h];
                    let probs = intercept_only(&sim.train, &grid, head).unwrap();
                    let base: Vec<HazardPrediction> = sim
                        .test
                        .subjects
                        .iter()
                        .map(|x| HazardPrediction::from_head(x.id.clone(), head, probs.clone()))
                        .collect();
                    ex.baseline[s].push(ibs_of(&base, cause, &sim.test, &grid));
                }
            }
        }
    }
    ex
}

fn audit_cif(preds: &[HazardPrediction], ex: &mut Experiment) {
    for p in preds {
        ex.subjects_checked += 1;
        match p.head {
            Head::CauseSpecific { .. } => {
                let s = p.survival.as_ref().unwrap();
                for t in 0..s.len() {
                    let total = s[t] + p.cif.iter().map(|f| f[t]).sum::<f64>();
                    ex.cif_worst_sum = ex.cif_worst_sum.max((total - 1.0).abs());
                }
                ex.cif_monotone &= p.cif.iter().all(|f| f.windows(2).all(|w| w[1] >= w[0]));
            }
            Head::SubDistribution { .. } => {
                let mut surv = 1.0;
                for (t, row) in p.probs.iter().enumerate() {
                    surv *= 1.0 - row[0];
                    ex.cif_worst_product = ex
                        .cif_worst_product
                        .max((p.cif[0][t + 1] - (1.0 - surv)).abs());
                }
            }
        }
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn e2e_criterion(ex: &Experiment) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for (s, &(label, _, _)) in SERIES.iter().enumerate() {
        let cells: Vec<(f64, f64)> = ex.fcrn[s].iter().map(|v| mean_se(v)).collect();
        let (base, base_se) = mean_se(&ex.baseline[s]);
        println!(
            "  {label}: IBS 0% {:.4}±{:.4}, 25% {:.4}±{:.4}, 50% {:.4}±{:.4}; intercept-only {base:.4}±{base_se:.4}",
            cells[0].0, cells[0].1, cells[1].0, cells[1].1, cells[2].0, cells[2].1
        );
        // (a) below the covariate-free model at 0% missingness.
        if cells[0].0 >= base {
            ok = false;
            notes.push(format!("{label} not below intercept-only at 0%"));
        }
        // (b) paired degradation across missingness levels, one SE of slack.
        for r in 1..RATES.len() {
            let diffs: Vec<f64> = ex.fcrn[s][r]
                .iter()
                .zip(&ex.fcrn[s][r - 1])
                .map(|(a, b)| a - b)
                .collect();
            let (d, se) = mean_se(&diffs);
            if d < -se {
                ok = false;
                notes.push(format!(
                    "{label} improves from {:.0}% to {:.0}% by {:.4} > SE {se:.4}",
                    100.0 * RATES[r - 1],
                    100.0 * RATES[r],
                    -d
                ));
            }
        }
        // (c) every IBS within (0, 0.5).
        if ex.fcrn[s]
            .iter()
            .flatten()
            .chain(&ex.baseline[s])
            .any(|&v| !(v > 0.0 && v < 0.5))
        {
            ok = false;
            notes.push(format!("{label} has an IBS outside (0, 0.5)"));
        }
    }
    let detail = if notes.is_empty() {
        format!("{REPLICATES} replicates x {} missingness levels: below baseline, monotone within 1 SE, IBS in (0, 0.5)", RATES.len())
    } else {
        notes.join("; ")
    };
    check(ok, detail)
}

fn cif_criterion(ex: &Experiment) -> Outcome {
    check(
        ex.cif_worst_sum < 1e-10 && ex.cif_monotone && ex.cif_worst_product < 1e-12,
        format!(
            "{} predictions: max |S + sum F - 1| {:.2e} (tol 1e-10), CSM CIF nondecreasing: {}, max SDM product gap {:.2e} (tol 1e-12)",
            ex.subjects_checked, ex.cif_worst_sum, ex.cif_monotone, ex.cif_worst_product
        ),
    )
}

fn determinism_criterion() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("pipeline");
    let mut compared = 0;
    for (seed, rate, head) in [(3, 0.25, "csm"), (8, 0.0, "sdm")] {
        common::pipeline(&root, seed, rate, head);
        let first = common::snapshot(&root);
        std::fs::remove_dir_all(&root).unwrap();
        common::pipeline(&root, seed, rate, head);
        let second = common::snapshot(&root);
        std::fs::remove_dir_all(&root).unwrap();
        if first != second {
            let differ: Vec<_> = first
                .keys()
                .filter(|k| first.get(*k) != second.get(*k))
                .collect();
            return Err(format!("files differ between reruns: {differ:?}"));
        }
        compared += first.len();
    }
    Ok(format!(
        "{compared} output files byte-identical across reruns"
    ))
}

fn main() {
    let mut gate = Gate {
        results: Vec::new(),
    };
    gate.run(
        "gradient oracle",
        Some(Duration::from_secs(60)),
        gradient_criterion,
    );
    gate.run(
        "likelihood oracle",
        Some(Duration::from_secs(10)),
        likelihood_criterion,
    );
    gate.run("weight correctness", None, weights_criterion);
    gate.run("IPCW reduction", None, ipcw_criterion);
    gate.run(
        "imputation recovery",
        Some(Duration::from_secs(120)),
        recovery_criterion,
    );

    let start = Instant::now();
    let experiment = catch_unwind(run_experiment);
    let spent = start.elapsed();
    match &experiment {
        Ok(ex) => {
            gate.run("CIF identities", None, || cif_criterion(ex));
            gate.run("end-to-end experiment", None, || {
                let out = e2e_criterion(ex)?;
                check(
                    spent < Duration::from_secs(30 * 60),
                    format!("{out}; experiment took {spent:.1?}, limit 30 min"),
                )
            });
        }
        Err(_) => {
            gate.run("CIF identities", None, || Err("experiment panicked".into()));
            gate.run("end-to-end experiment", None, || {
                Err("experiment panicked".into())
            });
        }
    }
    gate.run("CLI determinism", None, determinism_criterion);

    let failed: Vec<_> = gate
        .results
        .iter()
        .filter(|r| !r.1)
        .map(|r| r.0.as_str())
        .collect();
    println!(
        "{} of {} criteria passed",
        gate.results.len() - failed.len(),
        gate.results.len()
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
