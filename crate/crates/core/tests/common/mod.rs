//! Independent reference implementations used as test oracles, plus fixture
//! helpers. Nothing here calls into the metric code under test.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// Rows of a reference score table: (task_id, dice, hscore, otce), in table order.
pub fn score_table(name: &str) -> Vec<(String, f64, f64, f64)> {
    let text = std::fs::read_to_string(fixture(name)).unwrap();
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect()
}

/// xorshift64* stream for generating test instances.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(0x2545F4914F6CDD1D) | 1)
    }

    pub fn next(&mut self) -> u64 {
        self.0 ^= self.0 >> 12;
        self.0 ^= self.0 << 25;
        self.0 ^= self.0 >> 27;
        self.0.wrapping_mul(0x2545F4914F6CDD1D)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next() % n as u64) as usize
    }

    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }
}

// ---- sampling ---------------------------------------------------------------

/// SplitMix64 and selection sampling written out from the standard description.
pub fn reference_select(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut state = seed;
    let mut next = || {
        state = state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    };
    let mut out = Vec::new();
    let mut t = 0;
    while out.len() < k {
        let u = (next() >> 11) as f64 / 9007199254740992.0;
        if ((n - t) as f64) * u < (k - out.len()) as f64 {
            out.push(t);
        }
        t += 1;
    }
    out
}

// ---- SSIM -------------------------------------------------------------------

/// Whole-image SSIM with the default constants, straight from the formula.
pub fn ssim_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
    let cxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

// ---- optimal transport ------------------------------------------------------

pub fn naive_cost(src: &[Vec<f64>], tgt: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; tgt.len()]; src.len()];
    for i in 0..src.len() {
        for j in 0..tgt.len() {
            let mut d = 0.0;
            for k in 0..src[i].len() {
                d += (src[i][k] - tgt[j][k]) * (src[i][k] - tgt[j][k]);
            }
            c[i][j] = d;
        }
    }
    c
}

/// Plain alternating scaling with uniform marginals, run until every marginal
/// is within 1e-14 (or 200k sweeps).
pub fn scalar_sinkhorn(cost: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    let n = cost.len();
    let m = cost[0].len();
    let a = 1.0 / n as f64;
    let b = 1.0 / m as f64;
    let k: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|c| (-c / eps).exp()).collect()).collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    for _ in 0..200_000 {
        for i in 0..n {
            let s: f64 = (0..m).map(|j| k[i][j] * v[j]).sum();
            u[i] = a / s;
        }
        for j in 0..m {
            let s: f64 = (0..n).map(|i| k[i][j] * u[i]).sum();
            v[j] = b / s;
        }
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let s: f64 = (0..m).map(|j| u[i] * k[i][j] * v[j]).sum();
            worst = worst.max((s - a).abs());
        }
        if worst < 1e-14 {
            break;
        }
    }
    (0..n).map(|i| (0..m).map(|j| u[i] * k[i][j] * v[j]).collect()).collect()
}

pub fn naive_joint(plan: &[Vec<f64>], ys: &[u8], yt: &[u8]) -> BTreeMap<(u8, u8), f64> {
    let mut joint = BTreeMap::new();
    for i in 0..plan.len() {
        for j in 0..plan[i].len() {
            *joint.entry((ys[i], yt[j])).or_insert(0.0) += plan[i][j];
        }
    }
    joint
}

pub fn direct_neg_conditional_entropy(joint: &BTreeMap<(u8, u8), f64>) -> f64 {
    let mut row: BTreeMap<u8, f64> = BTreeMap::new();
    for (&(s, _), &p) in joint {
        *row.entry(s).or_insert(0.0) += p;
    }
    joint
        .iter()
        .filter(|(_, &p)| p > 0.0)
        .map(|(&(s, _), &p)| p * (p / row[&s]).ln())
        .sum()
}

pub fn otce_oracle(src: &[Vec<f64>], ys: &[u8], tgt: &[Vec<f64>], yt: &[u8], eps: f64) -> f64 {
    let plan = scalar_sinkhorn(&naive_cost(src, tgt), eps);
    direct_neg_conditional_entropy(&naive_joint(&plan, ys, yt))
}

// ---- H-score ----------------------------------------------------------------

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        inv.swap(col, piv);
        let d = a[col][col];
        for j in 0..n {
            a[col][j] /= d;
            inv[col][j] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                for j in 0..n {
                    a[r][j] -= f * a[col][j];
                    inv[r][j] -= f * inv[col][j];
                }
            }
        }
    }
    inv
}

/// `tr((cov(F) + ridge I)^-1 cov(E[F|Y]))` with explicit matrices.
pub fn hscore_oracle(rows: &[Vec<f64>], labels: &[u8], ridge: f64) -> f64 {
    let n = rows.len();
    let c = rows[0].len();
    let mut classes: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        classes.entry(y).or_default().push(i);
    }
    if classes.len() < 2 {
        return 0.0;
    }
    let mean: Vec<f64> = (0..c).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![vec![0.0; c]; c];
    for r in rows {
        for a in 0..c {
            for b in 0..c {
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / n as f64;
            }
        }
    }
    for (a, row) in cov.iter_mut().enumerate() {
        row[a] += ridge;
    }
    let mut between = vec![vec![0.0; c]; c];
    for idx in classes.values() {
        let p = idx.len() as f64 / n as f64;
        let mu: Vec<f64> = (0..c).map(|k| idx.iter().map(|&i| rows[i][k]).sum::<f64>() / idx.len() as f64).collect();
        for a in 0..c {
            for b in 0..c {
                between[a][b] += p * (mu[a] - mean[a]) * (mu[b] - mean[b]);
            }
        }
    }
    let inv = invert(cov);
    let mut tr = 0.0;
    for a in 0..c {
        for b in 0..c {
            tr += inv[a][b] * between[b][a];
        }
    }
    tr
}

// ---- instance builders ------------------------------------------------------

use ndarray::{Array3, Array4};
use xfersel_core::{LabelMaskSet, PixelFeatureSet};

/// Owned storage for a feature set laid out as one image of `1 x N` pixels.
pub struct Strip {
    pub labels: LabelMaskSet,
    pub data: Array4<f32>,
}

impl Strip {
    pub fn new(id: &str, rows: &[Vec<f32>], labels: &[u8]) -> Self {
        let c = rows[0].len();
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        Self {
            labels: LabelMaskSet::new(id, Array3::from_shape_vec((1, 1, rows.len()), labels.to_vec()).unwrap(), 1),
            data: Array4::from_shape_vec((1, 1, rows.len(), c), flat).unwrap(),
        }
    }

    pub fn view(&self) -> PixelFeatureSet<'_> {
        PixelFeatureSet::new(&self.labels.task_id, self.data.view(), &self.labels).unwrap()
    }
}

pub fn random_rows(rng: &mut TestRng, n: usize, c: usize) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..c).map(|_| rng.uniform() as f32).collect()).collect()
}

pub fn random_labels(rng: &mut TestRng, n: usize, classes: usize) -> Vec<u8> {
    (0..n).map(|_| rng.below(classes) as u8).collect()
}

pub fn widen(rows: &[Vec<f32>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
}

/// Random binary `h x w` image as a flat 0/1 vector.
pub fn random_binary(rng: &mut TestRng, len: usize) -> Vec<f64> {
    (0..len).map(|_| (rng.next() >> 63) as f64).collect()
}

// ---- reference ranking-evaluation tables -------------------------------------

use xfersel_core::pipeline::{select, Metric, RoiSimTable, ScoreTable, SelectionConfig, SelectionPath};
use xfersel_core::ranking::{read_keyed_csv, Direction};
use xfersel_core::{build_ranking, footrule_topk, TaskDescriptor};

/// Footrule over the first `k` predicted ids, by linear search in `truth`.
pub fn footrule_oracle(pred: &[&str], truth: &[&str], k: usize) -> u64 {
    pred[..k]
        .iter()
        .enumerate()
        .map(|(n, id)| {
            let t = truth.iter().position(|x| x == id).unwrap();
            n.abs_diff(t) as u64
        })
        .sum()
}

/// (target, method, top-1..4) reference values.
pub const REFERENCE_FOOTRULES: [(&str, &str, [u64; 4]); 8] = [
    ("ET-22-T2", "H-score w/o PK", [5, 10, 22, 27]),
    ("ET-22-T2", "H-score w/ PK", [4, 5, 6, 7]),
    ("ET-22-T2", "OTCE w/o PK", [2, 2, 4, 12]),
    ("ET-22-T2", "OTCE w/ PK", [2, 2, 4, 7]),
    ("ET-20-T1", "H-score w/o PK", [14, 24, 30, 40]),
    ("ET-20-T1", "H-score w/ PK", [0, 9, 9, 13]),
    ("ET-20-T1", "OTCE w/o PK", [2, 14, 17, 23]),
    ("ET-20-T1", "OTCE w/ PK", [2, 11, 13, 17]),
];

pub fn target_fixture(target: &str) -> &'static str {
    match target {
        "ET-22-T2" => "et22-t2.csv",
        "ET-20-T1" => "et20-t1.csv",
        other => panic!("no fixture for {other}"),
    }
}

pub fn fixture_pool(target: &str) -> Vec<TaskDescriptor> {
    score_table(target_fixture(target))
        .iter()
        .map(|r| TaskDescriptor::from_task_name(&r.0, "fets").unwrap())
        .collect()
}

pub fn fixture_roi_sims() -> RoiSimTable {
    RoiSimTable(read_keyed_csv(fixture("roi-sim-et.csv"), "roi_class", "roi_sim").unwrap().into_iter().collect())
}

/// Runs one selection path over a fixture with the reference scores injected.
pub fn fixture_selection(target: &str, path: SelectionPath, metric: Metric) -> xfersel_core::pipeline::SelectionReport {
    let rows = score_table(target_fixture(target));
    let col: Vec<(String, f64)> = rows
        .iter()
        .map(|r| (r.0.clone(), if metric == Metric::HScore { r.2 } else { r.3 }))
        .collect();
    let scores = ScoreTable::from_rows(&col).unwrap();
    let t = TaskDescriptor::from_task_name(target, "fets").unwrap();
    select(&fixture_pool(target), &t, &SelectionConfig::new(path, metric), &fixture_roi_sims(), &scores).unwrap()
}

/// Recomputes every reference footrule cell: (target, method, got, want).
pub fn reproduce_footrules() -> Vec<(&'static str, &'static str, [u64; 4], [u64; 4])> {
    REFERENCE_FOOTRULES
        .iter()
        .map(|&(target, method, want)| {
            let rows = score_table(target_fixture(target));
            let dice: Vec<(String, f64)> = rows.iter().map(|r| (r.0.clone(), r.1)).collect();
            let truth = build_ranking(&dice, Direction::HigherIsBetter).unwrap();
            let metric = if method.starts_with("OTCE") { Metric::Otce } else { Metric::HScore };
            let path = if method.ends_with("w/ PK") { SelectionPath::Guided } else { SelectionPath::Baseline };
            let pred = fixture_selection(target, path, metric).final_ranking;
            let mut got = [0; 4];
            for (k, cell) in got.iter_mut().enumerate() {
                *cell = footrule_topk(&pred, &truth, k + 1).unwrap().distance;
            }
            (target, method, got, want)
        })
        .collect()
}
