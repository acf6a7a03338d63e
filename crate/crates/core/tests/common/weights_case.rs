#![allow(dead_code)]
//! Six hand-built subjects with one censoring and one competing event.

use fcrn_core::data::{
    augment_subdistribution, censoring_survival, Dataset, SubjectRecord, TimeGrid,
};

/// Width-1 grid with six intervals:
///
/// | subject | time | interval | cause |
/// |---------|------|----------|-------|
/// | a       | 2.5  | 3        | 1     |
/// | b       | 1.5  | 2        | 0     |
/// | c       | 0.5  | 1        | 2     |
/// | d       | 4.5  | 5        | 1     |
/// | e       | 5.5  | 6        | 1     |
/// | f       | 1.2  | 2        | 1     |
///
/// Censoring Kaplan–Meier: five at risk in interval 2 with one censoring,
/// so `G(0) = G(1) = 1` and `G(2..) = 1 − 1/5`.
pub fn dataset() -> (Dataset, TimeGrid) {
    let rows = [
        ("a", 2.5, 1),
        ("b", 1.5, 0),
        ("c", 0.5, 2),
        ("d", 4.5, 1),
        ("e", 5.5, 1),
        ("f", 1.2, 1),
    ];
    let subjects = rows
        .iter()
        .map(|&(id, t, c)| SubjectRecord::new(id, vec![], vec![], t, c).unwrap())
        .collect();
    (
        Dataset::new(vec![], subjects).unwrap(),
        TimeGrid::new(6.0, 1.0).unwrap(),
    )
}

pub fn weights_by_subject(target: usize) -> Vec<Vec<(usize, usize, f64)>> {
    let (ds, grid) = dataset();
    let g = censoring_survival(&ds, &grid).unwrap();
    let table = augment_subdistribution(&ds, &grid, target, &g).unwrap();
    let mut out = vec![Vec::new(); ds.len()];
    for r in &table.rows {
        out[r.subject].push((r.interval, r.target, r.weight));
    }
    out
}

/// Hand-computed `(interval, target, weight)` rows per subject.
#[allow(clippy::eq_op)]
pub fn expected(target: usize) -> Vec<Vec<(usize, usize, f64)>> {
    let g2 = 1.0 - 1.0 / 5.0;
    match target {
        1 => vec![
            // a: at risk through its event interval 3.
            vec![(1, 0, 1.0), (2, 0, 1.0), (3, 1, 1.0)],
            // b: censored in interval 2, then gone.
            vec![(1, 0, 1.0), (2, 0, 1.0)],
            // c: competing event in interval 1, kept with G(t-1)/G(0).
            vec![
                (1, 0, 1.0),
                (2, 0, 1.0 / 1.0),
                (3, 0, g2 / 1.0),
                (4, 0, g2 / 1.0),
                (5, 0, g2 / 1.0),
            ],
            // d: event in interval 5.
            vec![
                (1, 0, 1.0),
                (2, 0, 1.0),
                (3, 0, 1.0),
                (4, 0, 1.0),
                (5, 1, 1.0),
            ],
            // e: event in interval 6, beyond the last modelled interval 5.
            vec![
                (1, 0, 1.0),
                (2, 0, 1.0),
                (3, 0, 1.0),
                (4, 0, 1.0),
                (5, 0, 1.0),
            ],
            // f: event in interval 2.
            vec![(1, 0, 1.0), (2, 1, 1.0)],
        ],
        2 => vec![
            // a: cause 1 now competes; G(t-1)/G(2) after interval 3.
            vec![
                (1, 0, 1.0),
                (2, 0, 1.0),
                (3, 0, 1.0),
                (4, 0, g2 / g2),
                (5, 0, g2 / g2),
            ],
            vec![(1, 0, 1.0), (2, 0, 1.0)],
            // c: the event of interest in interval 1.
            vec![(1, 1, 1.0)],
            vec![
                (1, 0, 1.0),
                (2, 0, 1.0),
                (3, 0, 1.0),
                (4, 0, 1.0),
                (5, 0, 1.0),
            ],
            vec![
                (1, 0, 1.0),
                (2, 0, 1.0),
                (3, 0, 1.0),
                (4, 0, 1.0),
                (5, 0, 1.0),
            ],
            // f: competing event in interval 2; G(t-1)/G(1).
            vec![
                (1, 0, 1.0),
                (2, 0, 1.0),
                (3, 0, g2 / 1.0),
                (4, 0, g2 / 1.0),
                (5, 0, g2 / 1.0),
            ],
        ],
        _ => unreachable!("two causes"),
    }
}
