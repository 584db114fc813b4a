//! One PASS/FAIL line per acceptance criterion. Run with `--nocapture` to see them.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use ndarray::{Array2, Array3, Array4};
use xfersel_core::pipeline::{modality_filter, roi_filter, score_pair, Metric, NoMatchPolicy, SelectionPath};
use xfersel_core::ranking::{read_ranking_csv, Direction};
use xfersel_core::synth::{evaluate_family, generate_tasks, EvalSettings, SynthSpec};
use xfersel_core::{
    build_ranking, footrule_full, footrule_topk, hscore_segmentation, otce, sinkhorn, ssim_global, CostNormalization,
    HScoreParams, LabelMaskSet, PixelFeatureSet, SinkhornParams, SsimParams, SubsampleSpec, TaskDescriptor,
};

type Criterion = (u32, &'static str, Duration, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---- 1: reference footrule table -------------------------------------------

fn criterion_1() -> Verdict {
    let mut exact = 0;
    let mut tie_ok = 0;
    let mut failures = Vec::new();
    for &(target, method, want) in REFERENCE_FOOTRULES.iter() {
        let rows = score_table(target_fixture(target));
        let dice: Vec<(String, f64)> = rows.iter().map(|r| (r.0.clone(), r.1)).collect();
        let truth = build_ranking(&dice, Direction::HigherIsBetter).unwrap();
        // the same ground truth with every pair of equal Dice values swapped
        let mut alt = dice.clone();
        for i in 0..alt.len() {
            for j in i + 1..alt.len() {
                if alt[i].1 == alt[j].1 {
                    alt.swap(i, j);
                }
            }
        }
        let alt_truth = build_ranking(&alt, Direction::HigherIsBetter).unwrap();
        let metric = if method.starts_with("OTCE") { Metric::Otce } else { Metric::HScore };
        let path = if method.ends_with("w/ PK") { SelectionPath::Guided } else { SelectionPath::Baseline };
        let pred = fixture_selection(target, path, metric).final_ranking;
        for k in 1..=4 {
            let got = footrule_topk(&pred, &truth, k).unwrap().distance;
            let other = footrule_topk(&pred, &alt_truth, k).unwrap().distance;
            if got == want[k - 1] {
                exact += 1;
            } else if got != other && got.abs_diff(want[k - 1]) <= 1 {
                tie_ok += 1;
            } else {
                failures.push(format!("{target} {method} top-{k}: got {got}, reference {}", want[k - 1]));
            }
        }
    }
    let mut detail = format!("{exact}/32 cells exact, {tie_ok} within the Dice-tie allowance");
    if !failures.is_empty() {
        detail.push_str(&format!("; mismatched: {}", failures.join("; ")));
    }
    verdict(failures.is_empty(), detail)
}

// ---- 2: supplementary footrule example --------------------------------------

fn criterion_2() -> Verdict {
    let a = read_ranking_csv(fixture("footrule-a.csv")).unwrap();
    let b = read_ranking_csv(fixture("footrule-b.csv")).unwrap();
    let d = footrule_full(&a, &b).unwrap().distance;
    verdict(d == 2, format!("footrule([1,2,3],[2,1,3]) = {d}"))
}

// ---- 3: subset reproduction --------------------------------------------------

fn criterion_3() -> Verdict {
    let pool = fixture_pool("ET-22-T2");
    let target = TaskDescriptor::from_task_name("ET-22-T2", "fets").unwrap();
    let s1 = modality_filter(&pool, &target, NoMatchPolicy::Error).unwrap().tasks;
    let s2 = roi_filter(&s1, &target, 1, &fixture_roi_sims()).unwrap().tasks;
    let set = |v: &[TaskDescriptor]| {
        let mut ids: Vec<String> = v.iter().map(|d| d.task_id.clone()).collect();
        ids.sort();
        ids
    };
    let want1: Vec<String> = {
        let mut v: Vec<String> = ["ED", "NCR"]
            .iter()
            .flat_map(|c| ["13", "14", "17", "18"].iter().map(move |p| format!("{c}-{p}-T2")))
            .collect();
        v.sort();
        v
    };
    let want2: Vec<String> = ["ED-13-T2", "ED-14-T2", "ED-17-T2", "ED-18-T2"].iter().map(|s| s.to_string()).collect();
    let (g1, g2) = (set(&s1), set(&s2));
    verdict(
        g1 == want1 && g2 == want2,
        format!("subset 1 = {} sources, subset 2 = {:?}", g1.len(), g2),
    )
}

// ---- 4: OTCE against the composed brute-force oracle -------------------------

fn criterion_4() -> Verdict {
    let mut rng = TestRng::new(0xACCE);
    let mut worst: f64 = 0.0;
    for case in 0..50u64 {
        let (ns, nt, c) = (rng.range(1, 6), rng.range(1, 6), rng.range(1, 3));
        let fs = random_rows(&mut rng, ns, c);
        let ft = random_rows(&mut rng, nt, c);
        let ys = random_labels(&mut rng, ns, 3);
        let yt = random_labels(&mut rng, nt, 3);
        let (s, t) = (Strip::new("s", &fs, &ys), Strip::new("t", &ft, &yt));
        let got = otce(&s.view(), &t.view(), SubsampleSpec::new(64, case), &SinkhornParams::default(), CostNormalization::None)
            .unwrap()
            .score;
        let want = otce_oracle(&widen(&fs), &ys, &widen(&ft), &yt, 0.1);
        worst = worst.max((got - want).abs());
    }
    verdict(worst <= 1e-6, format!("50 instances, max |otce - oracle| = {worst:.3e}"))
}

// ---- 5: Sinkhorn feasibility ---------------------------------------------------

fn criterion_5() -> Verdict {
    let mut rng = TestRng::new(0x5117);
    let (mut converged, mut worst_marginal, mut worst_mass) = (0, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let (n, m) = (rng.range(1, 64), rng.range(1, 64));
        let cost = Array2::from_shape_fn((n, m), |_| rng.uniform());
        let plan = sinkhorn(cost.view(), &SinkhornParams::default()).unwrap();
        if !plan.converged {
            continue;
        }
        converged += 1;
        for row in plan.coupling.rows() {
            worst_marginal = worst_marginal.max((row.sum() - 1.0 / n as f64).abs());
        }
        for col in plan.coupling.columns() {
            worst_marginal = worst_marginal.max((col.sum() - 1.0 / m as f64).abs());
        }
        worst_mass = worst_mass.max((plan.total_mass() - 1.0).abs());
    }
    verdict(
        converged == 100 && worst_marginal <= 1e-9 && worst_mass <= 1e-9,
        format!("{converged}/100 converged, max marginal violation {worst_marginal:.3e}, max mass error {worst_mass:.3e}"),
    )
}

// ---- 6: H-score against per-pixel brute force ----------------------------------

fn criterion_6() -> Verdict {
    let mut rng = TestRng::new(0x45C0);
    let params = HScoreParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (n, c) = (rng.range(6, 16), rng.range(1, 4));
        let labels = Array3::from_shape_fn((n, 8, 8), |_| rng.below(2) as u8);
        let data = Array4::from_shape_fn((n, 8, 8, c), |_| (2.0 * rng.uniform() - 1.0) as f32);
        let set = LabelMaskSet::new("t", labels.clone(), 1);
        let fs = PixelFeatureSet::new("t", data.view(), &set).unwrap();
        let got = hscore_segmentation("s", &fs, &params).unwrap().score;
        let mut want = 0.0;
        for r in 0..8 {
            for col in 0..8 {
                let rows: Vec<Vec<f64>> =
                    (0..n).map(|i| (0..c).map(|k| f64::from(data[[i, r, col, k]])).collect()).collect();
                let ys: Vec<u8> = (0..n).map(|i| labels[[i, r, col]]).collect();
                want += hscore_oracle(&rows, &ys, params.ridge);
            }
        }
        worst = worst.max((got - want / 64.0).abs());
    }
    let labels = Array3::from_shape_vec((4, 1, 1), vec![0u8, 1, 1, 0]).unwrap();
    let data = labels.mapv(f32::from).into_shape_with_order((4, 1, 1, 1)).unwrap();
    let set = LabelMaskSet::new("t", labels, 1);
    let one = hscore_segmentation("s", &PixelFeatureSet::new("t", data.view(), &set).unwrap(), &params)
        .unwrap()
        .score;
    verdict(
        worst <= 1e-9 && (one - 1.0).abs() <= 1e-6,
        format!("20 instances, max deviation {worst:.3e}; f = y balanced gives {one:.9}"),
    )
}

// ---- 7: SSIM properties --------------------------------------------------------

fn criterion_7() -> Verdict {
    let p = SsimParams::default();
    let mut rng = TestRng::new(0x551);
    let (mut id_err, mut asym, mut over): (f64, usize, f64) = (0.0, 0, 0.0);
    for _ in 0..1000 {
        let x = Array2::from_shape_vec((16, 16), random_binary(&mut rng, 256)).unwrap();
        let y = Array2::from_shape_vec((16, 16), random_binary(&mut rng, 256)).unwrap();
        let xy = ssim_global(x.view(), y.view(), &p).unwrap();
        let yx = ssim_global(y.view(), x.view(), &p).unwrap();
        asym += usize::from(xy.to_bits() != yx.to_bits());
        over = over.max(xy.abs() - 1.0);
        id_err = id_err.max((ssim_global(x.view(), x.view(), &p).unwrap() - 1.0).abs());
    }
    let half: Vec<f64> = (0..64).map(|i| f64::from(u8::from(i < 32))).collect();
    let comp: Vec<f64> = half.iter().map(|v| 1.0 - v).collect();
    let got = ssim_global(
        Array2::from_shape_vec((8, 8), half.clone()).unwrap().view(),
        Array2::from_shape_vec((8, 8), comp.clone()).unwrap().view(),
        &p,
    )
    .unwrap();
    let dev = (got - ssim_oracle(&half, &comp)).abs();
    verdict(
        id_err <= 1e-12 && asym == 0 && over <= 1e-9 && dev <= 1e-9,
        format!(
            "identity err {id_err:.1e}, {asym} asymmetric pairs, max |ssim| - 1 = {over:.3}, complement {got:.6} (oracle dev {dev:.1e})"
        ),
    )
}

// ---- 8: OTCE range and trivial cases --------------------------------------------

fn criterion_8() -> Verdict {
    let params = SinkhornParams::default();
    let mut rng = TestRng::new(0x07CE);
    let mut out_of_range = 0;
    for case in 0..200u64 {
        let (ns, nt, c) = (rng.range(2, 24), rng.range(2, 24), rng.range(1, 4));
        let k = rng.range(1, 4);
        let ys = random_labels(&mut rng, ns, k);
        let yt = random_labels(&mut rng, nt, k);
        let fs = random_rows(&mut rng, ns, c);
        let ft = random_rows(&mut rng, nt, c);
        let (s, t) = (Strip::new("s", &fs, &ys), Strip::new("t", &ft, &yt));
        let score = otce(&s.view(), &t.view(), SubsampleSpec::new(4096, case), &params, CostNormalization::None)
            .unwrap()
            .score;
        let mut classes = yt.clone();
        classes.sort_unstable();
        classes.dedup();
        if !(score <= 0.0 && score >= -(classes.len() as f64).ln() - 1e-9) {
            out_of_range += 1;
        }
    }
    let fs = random_rows(&mut rng, 6, 2);
    let s = Strip::new("s", &fs, &[0, 1, 0, 1, 1, 0]);
    let t = Strip::new("t", &random_rows(&mut rng, 5, 2), &[1; 5]);
    let single = otce(&s.view(), &t.view(), SubsampleSpec::default(), &params, CostNormalization::None).unwrap().score;
    let flat = vec![vec![0.25f32, -1.0]; 8];
    let s = Strip::new("s", &flat, &[0, 1, 0, 1, 0, 1, 0, 1]);
    let t = Strip::new("t", &flat, &[1, 0, 0, 1, 1, 0, 1, 0]);
    let balanced = otce(&s.view(), &t.view(), SubsampleSpec::default(), &params, CostNormalization::None).unwrap().score;
    verdict(
        out_of_range == 0 && single == 0.0 && (balanced + 2f64.ln()).abs() <= 1e-6,
        format!("{out_of_range}/200 out of range; single-class target {single}; constant features {balanced:.9}"),
    )
}

// ---- 9: synthetic rank agreement ---------------------------------------------------

fn criterion_9() -> Verdict {
    let mut top1_hits = 0;
    let mut monotone = 0;
    let mut notes = Vec::new();
    for seed in 0..5u64 {
        let spec = SynthSpec {
            seed,
            ..SynthSpec::default()
        };
        let tasks = generate_tasks(&spec).unwrap();
        let target = SynthSpec::task_id(6);
        let eval = evaluate_family(&tasks, &target, &EvalSettings::new(Metric::Otce, seed)).unwrap();
        if eval.footrule_top1 == 0 {
            top1_hits += 1;
        }
        // sources syn-01..syn-04 carry strengths 0.2, 0.4, 0.6, 0.8
        let otce_mid: Vec<f64> = eval.sources[1..5].iter().map(|s| s.score).collect();
        let hs_mid: Vec<f64> = tasks[1..5]
            .iter()
            .map(|s| {
                score_pair(
                    s,
                    &tasks[6],
                    Metric::HScore,
                    &HScoreParams::default(),
                    &SinkhornParams::default(),
                    CostNormalization::None,
                    SubsampleSpec::default(),
                )
                .unwrap()
                .score
            })
            .collect();
        let up = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if up(&otce_mid) && up(&hs_mid) {
            monotone += 1;
        }
        notes.push(format!("seed {seed}: top1 footrule {}", eval.footrule_top1));
    }
    verdict(
        top1_hits >= 4 && monotone == 5,
        format!("top-1 agreement in {top1_hits}/5 seeds, strictly increasing in {monotone}/5 ({})", notes.join(", ")),
    )
}

// ---- 10: CLI determinism -------------------------------------------------------------

fn run_cli(args: &[String]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_xfersel"))
        .args(args)
        .env_remove("XFERSEL_SEED")
        .output()
        .unwrap()
}

fn snapshot(paths: &[PathBuf]) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for p in paths {
        collect(p, &mut out);
    }
    out.sort();
    out
}

fn collect(p: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    if p.is_dir() {
        for e in std::fs::read_dir(p).unwrap() {
            collect(&e.unwrap().path(), out);
        }
    } else if p.is_file() {
        out.push((p.display().to_string(), std::fs::read(p).unwrap()));
    }
}

fn criterion_10() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |s: &str| root.join(s).display().to_string();
    std::fs::write(
        root.join("spec.json"),
        r#"{"n_tasks": 4, "n_samples": 6, "height": 12, "width": 12, "signal_strengths": [0.2, 0.5, 1.0, 0.8]}"#,
    )
    .unwrap();
    let setup = run_cli(&["synth".into(), "--spec".into(), p("spec.json"), "--out".into(), p("fam")]);
    if !setup.status.success() {
        return verdict(false, "could not generate the synthetic family");
    }
    let fx = |s: &str| fixture(s).display().to_string();
    let out = p("out.txt");
    let matrix: Vec<(&str, Vec<String>, Vec<PathBuf>)> = vec![
        ("roi-sim paired", vec!["roi-sim".into(), "--source".into(), p("fam/syn-00"), "--target".into(), p("fam/syn-03")], vec![]),
        ("roi-sim mean", vec!["roi-sim".into(), "--mode".into(), "mean".into(), "--source".into(), p("fam/syn-00"), "--target".into(), p("fam/syn-03")], vec![]),
        ("score hscore", vec!["score".into(), "--metric".into(), "hscore".into(), "--source".into(), p("fam/syn-01"), "--target".into(), p("fam/syn-03")], vec![]),
        ("score otce", vec!["--format".into(), "json".into(), "score".into(), "--metric".into(), "otce".into(), "--max-pixels".into(), "300".into(), "--source".into(), p("fam/syn-01"), "--target".into(), p("fam/syn-03")], vec![]),
        ("select guided computed", vec!["select".into(), "--target".into(), p("fam/syn-03"), "--sources".into(), p("fam"), "--path".into(), "guided".into(), "--metric".into(), "otce".into(), "--max-pixels".into(), "300".into(), "--top-k".into(), "2".into(), "--out-dir".into(), p("sel")], vec![root.join("sel")]),
        ("select baseline injected", vec!["select".into(), "--target".into(), "ET-20-T1".into(), "--path".into(), "baseline".into(), "--metric".into(), "otce".into(), "--scores-file".into(), fx("et20-t1.csv"), "--top-k".into(), "4".into(), "--out-dir".into(), p("sel2")], vec![root.join("sel2")]),
        ("footrule", vec!["footrule".into(), "--pred".into(), fx("footrule-a.csv"), "--truth".into(), fx("footrule-b.csv"), "--top-k".into(), "2".into()], vec![]),
        ("synth", vec!["synth".into(), "--spec".into(), p("spec.json"), "--out".into(), p("fam2")], vec![root.join("fam2")]),
        ("synth-eval", vec!["synth-eval".into(), "--dir".into(), p("fam"), "--target".into(), "syn-03".into(), "--metric".into(), "otce".into(), "--max-pixels".into(), "300".into()], vec![root.join("fam")]),
    ];
    let mut bad = Vec::new();
    let mut runs = 0;
    for (name, args, extra) in &matrix {
        let mut reference: Option<Vec<(String, Vec<u8>)>> = None;
        for threads in ["1", "1", "2", "8"] {
            for e in extra {
                if e.ends_with("sel") || e.ends_with("sel2") || e.ends_with("fam2") {
                    let _ = std::fs::remove_dir_all(e);
                }
            }
            let _ = std::fs::remove_file(&out);
            let mut full = vec!["--threads".to_string(), threads.to_string(), "--output".to_string(), out.clone()];
            full.extend(args.iter().cloned());
            let o = run_cli(&full);
            runs += 1;
            if !o.status.success() {
                bad.push(format!("{name} failed: {}", String::from_utf8_lossy(&o.stderr).trim()));
                break;
            }
            let mut files = vec![PathBuf::from(&out)];
            files.extend(extra.iter().cloned());
            let snap = snapshot(&files);
            match &reference {
                None => reference = Some(snap),
                Some(r) if *r != snap => {
                    bad.push(format!("{name} differs at --threads {threads}"));
                    break;
                }
                Some(_) => {}
            }
        }
    }
    verdict(
        bad.is_empty(),
        format!("{} commands, {runs} runs at --threads 1,1,2,8{}", matrix.len(), if bad.is_empty() { String::new() } else { format!("; {}", bad.join("; ")) }),
    )
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        (1, "reference footrule table", Duration::from_secs(1), criterion_1),
        (2, "supplementary footrule example", Duration::from_secs(1), criterion_2),
        (3, "subset reproduction", Duration::from_secs(1), criterion_3),
        (4, "OTCE small-instance oracle", Duration::from_secs(10), criterion_4),
        (5, "Sinkhorn feasibility", Duration::from_secs(30), criterion_5),
        (6, "H-score oracle", Duration::from_secs(5), criterion_6),
        (7, "SSIM properties", Duration::from_secs(5), criterion_7),
        (8, "OTCE range and trivial cases", Duration::from_secs(5), criterion_8),
        (9, "synthetic rank agreement", Duration::from_secs(120), criterion_9),
        (10, "CLI determinism", Duration::from_secs(60), criterion_10),
    ];
    println!();
    let mut failed = Vec::new();
    for (id, name, budget, run) in criteria {
        let start = Instant::now();
        let v = run();
        let took = start.elapsed();
        let pass = v.pass && took <= budget;
        let timing = if took <= budget {
            format!("{:.2}s", took.as_secs_f64())
        } else {
            format!("{:.2}s, over the {}s budget", took.as_secs_f64(), budget.as_secs())
        };
        println!("{} criterion {id} ({name}): {} [{timing}]", if pass { "PASS" } else { "FAIL" }, v.detail);
        if !pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
