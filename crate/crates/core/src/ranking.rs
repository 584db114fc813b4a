//! Score rankings and Spearman's footrule, including the top-k protocol used to
//! compare a (possibly filtered) predicted ranking against a full ground truth.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    HigherIsBetter,
    LowerIsBetter,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedTask {
    pub task_id: String,
    pub score: f64,
}

/// Total order over tasks; rank 1 is the best.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    entries: Vec<RankedTask>,
    position: HashMap<String, usize>,
}

impl Serialize for Ranking {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.entries.serialize(s)
    }
}

impl Ranking {
    pub fn entries(&self) -> &[RankedTask] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// 1-based rank of `task_id`.
    pub fn position(&self, task_id: &str) -> Option<usize> {
        self.position.get(task_id).copied()
    }

    /// Task at 1-based `rank`.
    pub fn task_at(&self, rank: usize) -> Option<&str> {
        rank.checked_sub(1)
            .and_then(|i| self.entries.get(i))
            .map(|e| e.task_id.as_str())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.task_id.as_str())
    }

    pub fn top(&self, k: usize) -> Vec<&str> {
        self.ids().take(k).collect()
    }

    /// Ranking given directly as an order, best first. Scores are set to
    /// `-rank` so that they stay consistent with the order.
    pub fn from_order<S: AsRef<str>>(ids: &[S]) -> Result<Ranking> {
        let scores: Vec<(String, f64)> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_ref().to_string(), -((i + 1) as f64)))
            .collect();
        build_ranking(&scores, Direction::HigherIsBetter)
    }
}

/// Stable sort by score; equal scores keep their input order.
pub fn build_ranking(scores: &[(String, f64)], direction: Direction) -> Result<Ranking> {
    if scores.is_empty() {
        return Err(Error::InvalidParams("cannot rank an empty score list".into()));
    }
    let mut seen = HashMap::with_capacity(scores.len());
    for (id, s) in scores {
        if !s.is_finite() {
            return Err(Error::NonFiniteScore(id.clone()));
        }
        if seen.insert(id.as_str(), ()).is_some() {
            return Err(Error::DuplicateTaskId(id.clone()));
        }
    }
    let mut entries: Vec<RankedTask> = scores
        .iter()
        .map(|(id, s)| RankedTask {
            task_id: id.clone(),
            score: *s,
        })
        .collect();
    match direction {
        Direction::HigherIsBetter => entries.sort_by(|a, b| b.score.total_cmp(&a.score)),
        Direction::LowerIsBetter => entries.sort_by(|a, b| a.score.total_cmp(&b.score)),
    }
    let position = entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.task_id.clone(), i + 1))
        .collect();
    Ok(Ranking { entries, position })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FootruleScope {
    Full,
    TopK(usize),
}

impl Serialize for FootruleScope {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            FootruleScope::Full => s.serialize_str("full"),
            FootruleScope::TopK(k) => s.serialize_u64(*k as u64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankPair {
    pub task_id: String,
    pub predicted_rank: usize,
    pub truth_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FootruleReport {
    pub distance: u64,
    pub k: FootruleScope,
    pub pairs: Vec<RankPair>,
}

fn report(k: FootruleScope, pairs: Vec<RankPair>) -> FootruleReport {
    let distance = pairs
        .iter()
        .map(|p| p.predicted_rank.abs_diff(p.truth_rank) as u64)
        .sum();
    FootruleReport { distance, k, pairs }
}

/// `sum_t |pred(t) - truth(t)|` over identical task sets; pairs follow `pred` order.
pub fn footrule_full(pred: &Ranking, truth: &Ranking) -> Result<FootruleReport> {
    if pred.len() != truth.len() {
        return Err(Error::IdSetMismatch(format!(
            "{} predicted vs {} ground-truth tasks",
            pred.len(),
            truth.len()
        )));
    }
    let pairs = pred
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let truth_rank = truth
                .position(&e.task_id)
                .ok_or_else(|| Error::IdSetMismatch(format!("{} missing from ground truth", e.task_id)))?;
            Ok(RankPair {
                task_id: e.task_id.clone(),
                predicted_rank: i + 1,
                truth_rank,
            })
        })
        .collect::<Result<_>>()?;
    Ok(report(FootruleScope::Full, pairs))
}

/// Charges each of the `k` best predicted tasks its displacement from its rank
/// in the full ground truth: `sum_{n=1..k} |n - truth(pred_n)|`.
pub fn footrule_topk(pred: &Ranking, truth: &Ranking, k: usize) -> Result<FootruleReport> {
    if k == 0 || k > pred.len() {
        return Err(Error::KOutOfRange { k, max: pred.len() });
    }
    let pairs = pred.entries[..k]
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let truth_rank = truth
                .position(&e.task_id)
                .ok_or_else(|| Error::UnknownTask(e.task_id.clone()))?;
            Ok(RankPair {
                task_id: e.task_id.clone(),
                predicted_rank: i + 1,
                truth_rank,
            })
        })
        .collect::<Result<_>>()?;
    Ok(report(FootruleScope::TopK(k), pairs))
}

/// Writes `task_id,score,rank` with a header row and six-decimal scores.
pub fn write_ranking_csv<W: Write>(ranking: &Ranking, out: W) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["task_id", "score", "rank"])?;
    for (i, e) in ranking.entries.iter().enumerate() {
        w.write_record([e.task_id.as_str(), &format!("{:.6}", e.score), &(i + 1).to_string()])?;
    }
    w.flush()
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedCsv {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

/// `(task_id, value)` rows from the column named `column`, in file order.
pub fn read_scores_csv(path: impl AsRef<Path>, column: &str) -> Result<Vec<(String, f64)>> {
    read_keyed_csv(path, "task_id", column)
}

/// `(key, value)` rows from two named columns, in file order.
pub fn read_keyed_csv(path: impl AsRef<Path>, key: &str, column: &str) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    read_scores_from(open_csv(path)?, key, column, path)
}

/// Header names of a CSV file.
pub fn csv_headers(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| malformed(path, e.to_string()))?;
    Ok(headers.iter().map(String::from).collect())
}

fn read_scores_from<R: Read>(
    mut rdr: csv::Reader<R>,
    key: &str,
    column: &str,
    path: &Path,
) -> Result<Vec<(String, f64)>> {
    let headers = rdr.headers().map_err(|e| malformed(path, e.to_string()))?.clone();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let id_col = find(key).ok_or_else(|| malformed(path, format!("no {key} column")))?;
    let val_col = find(column).ok_or_else(|| malformed(path, format!("no {column} column")))?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| malformed(path, e.to_string()))?;
        let id = rec.get(id_col).unwrap_or_default().to_string();
        let raw = rec.get(val_col).unwrap_or_default();
        let value: f64 = raw
            .parse()
            .map_err(|_| malformed(path, format!("row {}: {column} = {raw:?} is not a number", line + 2)))?;
        out.push((id, value));
    }
    Ok(out)
}

/// Reads a ranking file. A `rank` column, when present, defines the order;
/// otherwise rows are ranked by the `score` column.
pub fn read_ranking_csv(path: impl AsRef<Path>) -> Result<Ranking> {
    let path = path.as_ref();
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| malformed(path, e.to_string()))?.clone();
    let has = |name: &str| headers.iter().any(|h| h.eq_ignore_ascii_case(name));
    if has("rank") {
        let rows = read_scores_from(rdr, "task_id", "rank", path)?;
        let mut ranked: Vec<(usize, String)> = Vec::with_capacity(rows.len());
        for (id, r) in rows {
            if r.fract() != 0.0 || r < 1.0 {
                return Err(malformed(path, format!("rank {r} for {id} is not a positive integer")));
            }
            ranked.push((r as usize, id));
        }
        ranked.sort_by_key(|(r, _)| *r);
        if ranked.iter().enumerate().any(|(i, (r, _))| *r != i + 1) {
            return Err(malformed(path, "ranks must be a permutation of 1..n"));
        }
        let ids: Vec<String> = ranked.into_iter().map(|(_, id)| id).collect();
        Ranking::from_order(&ids)
    } else if has("score") {
        build_ranking(&read_scores_from(rdr, "task_id", "score", path)?, Direction::HigherIsBetter)
    } else {
        Err(malformed(path, "need a rank or score column"))
    }
}
