use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ImageRecord};
use super::{Label, Provenance};
use crate::error::{bail_input, Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "TRAIN")]
    Train,
    #[serde(rename = "VAL")]
    Val,
    #[serde(rename = "TEST")]
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TRAIN" => Ok(Split::Train),
            "VAL" => Ok(Split::Val),
            "TEST" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Fraction of eyes assigned to TEST.
    pub test_frac: f64,
    /// Fraction of the remaining eyes assigned to VAL.
    pub val_frac: f64,
    /// Allowed deviation of each split's positive fraction from the global one.
    pub strat_tolerance: f64,
    /// Allowed deviation of each split's eye count, as a fraction of all eyes.
    pub size_tolerance: f64,
    pub restarts: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_frac: 0.2,
            val_frac: 0.2,
            strat_tolerance: 0.05,
            size_tolerance: 0.05,
            restarts: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub eyes: usize,
    pub labeled_eyes: usize,
    pub positives: usize,
    pub pos_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub families: BTreeMap<String, Split>,
    pub stats: BTreeMap<Split, SplitStats>,
    pub global_pos_frac: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRow {
    family_id: String,
    split: Split,
}

impl SplitAssignment {
    /// Recomputes per-split statistics for a family mapping.
    pub fn from_families(records: &[ImageRecord], families: BTreeMap<String, Split>) -> Self {
        let groups = group_families(records);
        let mut acc = [Tally::default(); 3];
        let mut total = Tally::default();
        for g in &groups {
            total.add(g);
            if let Some(s) = families.get(&g.id) {
                acc[s.index()].add(g);
            }
        }
        let stats = Split::ALL
            .iter()
            .map(|&s| (s, acc[s.index()].stats()))
            .collect();
        Self {
            families,
            stats,
            global_pos_frac: total.stats().pos_frac,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(f);
        for (family_id, &split) in &self.families {
            w.serialize(SplitRow {
                family_id: family_id.clone(),
                split,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_families(path: &Path) -> Result<BTreeMap<String, Split>> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rd = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(f);
        let mut out = BTreeMap::new();
        for row in rd.deserialize() {
            let row: SplitRow = row?;
            out.insert(row.family_id, row.split);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct FamilyGroup {
    id: String,
    eyes: usize,
    labeled: usize,
    positives: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    eyes: usize,
    labeled: usize,
    positives: usize,
}

impl Tally {
    fn add(&mut self, g: &FamilyGroup) {
        self.eyes += g.eyes;
        self.labeled += g.labeled;
        self.positives += g.positives;
    }

    fn sub(&mut self, g: &FamilyGroup) {
        self.eyes -= g.eyes;
        self.labeled -= g.labeled;
        self.positives -= g.positives;
    }

    fn frac(&self) -> f64 {
        if self.labeled == 0 {
            0.0
        } else {
            self.positives as f64 / self.labeled as f64
        }
    }

    fn stats(&self) -> SplitStats {
        SplitStats {
            eyes: self.eyes,
            labeled_eyes: self.labeled,
            positives: self.positives,
            pos_frac: self.frac(),
        }
    }
}

/// Groups real eyes by family. An eye's label is its first known label.
fn group_families(records: &[ImageRecord]) -> Vec<FamilyGroup> {
    let mut eyes: BTreeMap<(&str, &str), Label> = BTreeMap::new();
    for r in records.iter().filter(|r| r.provenance == Provenance::Real) {
        let e = eyes
            .entry((r.family_id.as_str(), r.eye_id.as_str()))
            .or_insert(r.label);
        if !e.is_known() {
            *e = r.label;
        }
    }
    let mut fams: BTreeMap<&str, FamilyGroup> = BTreeMap::new();
    for ((fam, _), label) in eyes {
        let g = fams.entry(fam).or_insert_with(|| FamilyGroup {
            id: fam.to_string(),
            eyes: 0,
            labeled: 0,
            positives: 0,
        });
        g.eyes += 1;
        if label.is_known() {
            g.labeled += 1;
        }
        if label == Label::Pos {
            g.positives += 1;
        }
    }
    fams.into_values().collect()
}

/// Smallest achievable deviation of k/n from p.
fn granularity_floor(n: usize, p: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let k = (p * n as f64).round();
    (k / n as f64 - p).abs()
}

struct Problem<'a> {
    groups: &'a [FamilyGroup],
    targets: [f64; 3],
    p: f64,
    size_allow: f64,
    strat_tol: f64,
    n_eyes: f64,
}

impl Problem<'_> {
    /// (violation, deviation). A zero violation means every constraint holds.
    fn score(&self, t: &[Tally; 3]) -> (f64, f64) {
        let mut violation = 0.0;
        let mut deviation = 0.0;
        for s in 0..3 {
            let size_dev = (t[s].eyes as f64 - self.targets[s]).abs();
            violation += (size_dev - self.size_allow).max(0.0) / self.n_eyes;
            deviation += size_dev / self.n_eyes;
            if t[s].labeled > 0 {
                let allow = self.strat_tol.max(granularity_floor(t[s].labeled, self.p));
                let d = (t[s].frac() - self.p).abs();
                violation += (d - allow - 1e-12).max(0.0);
                deviation += d;
            } else if self.targets[s] >= 1.0 {
                // A split with a nonzero target but no labeled eyes is unusable.
                violation += 1.0;
            }
        }
        (violation, deviation)
    }

    fn cost(&self, t: &[Tally; 3]) -> f64 {
        let (v, d) = self.score(t);
        1e3 * v + d
    }
}

/// Family-level split with stratified rebalancing.
///
/// Each restart shuffles the families, greedily fills the split with the
/// largest relative deficit, then improves by single-family moves and pairwise
/// swaps until no move lowers the cost. The first restart meeting every size
/// and stratification constraint wins, which makes the result a pure function
/// of the manifest and `seed`.
pub fn make_splits(
    manifest: &DatasetManifest,
    config: &SplitConfig,
    seed: u64,
) -> Result<SplitAssignment> {
    for (name, f) in [("test_frac", config.test_frac), ("val_frac", config.val_frac)] {
        if !(f > 0.0 && f < 1.0) {
            bail_input!("{name} must lie in (0,1), got {f}");
        }
    }
    if let Some(r) = manifest
        .real_records()
        .find(|r| r.family_id.is_empty() || r.eye_id.is_empty())
    {
        bail_input!("record {} lacks a family or eye id", r.path);
    }
    let groups = group_families(&manifest.records);
    if groups.len() < 3 {
        bail_input!("need at least 3 families to split, got {}", groups.len());
    }
    let n_eyes: usize = groups.iter().map(|g| g.eyes).sum();
    let labeled: usize = groups.iter().map(|g| g.labeled).sum();
    let positives: usize = groups.iter().map(|g| g.positives).sum();
    let p = if labeled == 0 {
        0.0
    } else {
        positives as f64 / labeled as f64
    };

    let n_test = (config.test_frac * n_eyes as f64).round();
    let n_val = (config.val_frac * (n_eyes as f64 - n_test)).round();
    let n_train = n_eyes as f64 - n_test - n_val;
    let problem = Problem {
        groups: &groups,
        targets: [n_train, n_val, n_test],
        p,
        size_allow: (config.size_tolerance * n_eyes as f64).max(1.0),
        strat_tol: config.strat_tolerance,
        n_eyes: n_eyes as f64,
    };

    let mut rng = seeded(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..config.restarts.max(1) {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut rng);
        let assign = problem.local_search(problem.greedy(&order));
        let tallies = problem.tallies(&assign);
        let (violation, _) = problem.score(&tallies);
        let cost = problem.cost(&tallies);
        if violation == 0.0 {
            return Ok(problem.finish(manifest, &assign));
        }
        if best.as_ref().map_or(true, |(c, _)| cost < *c) {
            best = Some((cost, assign));
        }
    }

    // Name the family whose label mix is furthest from the global fraction.
    let blocking = groups
        .iter()
        .max_by(|a, b| {
            let da = (a.positives as f64 - p * a.labeled as f64).abs();
            let db = (b.positives as f64 - p * b.labeled as f64).abs();
            da.total_cmp(&db).then_with(|| b.id.cmp(&a.id))
        })
        .expect("nonempty");
    let detail = best
        .map(|(_, a)| {
            let t = problem.tallies(&a);
            format!(
                "best split eye counts {:?}, positive fractions {:.3}/{:.3}/{:.3} vs global {:.3}",
                [t[0].eyes, t[1].eyes, t[2].eyes],
                t[0].frac(),
                t[1].frac(),
                t[2].frac(),
                p
            )
        })
        .unwrap_or_default();
    Err(Error::InfeasibleSplit {
        family: blocking.id.clone(),
        detail,
    })
}

impl Problem<'_> {
    fn tallies(&self, assign: &[usize]) -> [Tally; 3] {
        let mut t = [Tally::default(); 3];
        for (g, &s) in self.groups.iter().zip(assign) {
            t[s].add(g);
        }
        t
    }

    fn greedy(&self, order: &[usize]) -> Vec<usize> {
        let mut assign = vec![0usize; self.groups.len()];
        let mut t = [Tally::default(); 3];
        for &i in order {
            let g = &self.groups[i];
            let s = (0..3)
                .max_by(|&a, &b| {
                    let ra = (self.targets[a] - t[a].eyes as f64) / self.targets[a].max(1.0);
                    let rb = (self.targets[b] - t[b].eyes as f64) / self.targets[b].max(1.0);
                    ra.total_cmp(&rb).then(b.cmp(&a))
                })
                .expect("three splits");
            assign[i] = s;
            t[s].add(g);
        }
        assign
    }

    fn local_search(&self, mut assign: Vec<usize>) -> Vec<usize> {
        let mut t = self.tallies(&assign);
        let mut cost = self.cost(&t);
        let n = self.groups.len();
        loop {
            let mut improved = false;
            for i in 0..n {
                for s in 0..3 {
                    let from = assign[i];
                    if s == from {
                        continue;
                    }
                    let g = &self.groups[i];
                    t[from].sub(g);
                    t[s].add(g);
                    let c = self.cost(&t);
                    if c < cost - 1e-12 {
                        cost = c;
                        assign[i] = s;
                        improved = true;
                    } else {
                        t[s].sub(g);
                        t[from].add(g);
                    }
                }
            }
            for i in 0..n {
                for j in i + 1..n {
                    let (si, sj) = (assign[i], assign[j]);
                    if si == sj {
                        continue;
                    }
                    let (gi, gj) = (&self.groups[i], &self.groups[j]);
                    t[si].sub(gi);
                    t[sj].add(gi);
                    t[sj].sub(gj);
                    t[si].add(gj);
                    let c = self.cost(&t);
                    if c < cost - 1e-12 {
                        cost = c;
                        assign[i] = sj;
                        assign[j] = si;
                        improved = true;
                    } else {
                        t[si].sub(gj);
                        t[sj].add(gj);
                        t[sj].sub(gi);
                        t[si].add(gi);
                    }
                }
            }
            if !improved {
                return assign;
            }
        }
    }

    fn finish(&self, manifest: &DatasetManifest, assign: &[usize]) -> SplitAssignment {
        let families = self
            .groups
            .iter()
            .zip(assign)
            .map(|(g, &s)| (g.id.clone(), Split::ALL[s]))
            .collect();
        SplitAssignment::from_families(&manifest.records, families)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataman::Modality;

    fn manifest(families: &[(usize, usize)]) -> DatasetManifest {
        // (eyes, positives) per family
        let mut m = DatasetManifest::new(".");
        for (f, &(eyes, pos)) in families.iter().enumerate() {
            for e in 0..eyes {
                m.records.push(ImageRecord {
                    path: format!("f{f}e{e}.png"),
                    family_id: format!("f{f:03}"),
                    patient_id: format!("f{f}p{}", e / 2),
                    eye_id: format!("f{f}e{e}"),
                    modality: Modality::OctaSmac,
                    label: if e < pos { Label::Pos } else { Label::Neg },
                    provenance: Provenance::Real,
                });
            }
        }
        m
    }

    #[test]
    fn ten_single_eye_families() {
        let m = manifest(&[(1, 1), (1, 1), (1, 1), (1, 1), (1, 0), (1, 0), (1, 0), (1, 0), (1, 0), (1, 0)]);
        let s = make_splits(&m, &SplitConfig::default(), 1).unwrap();
        let in_test = s.families.values().filter(|&&v| v == Split::Test).count();
        assert_eq!(in_test, 2);
        assert_eq!(s.families.len(), 10);
    }

    #[test]
    fn deterministic_under_seed() {
        let fams: Vec<(usize, usize)> = (0..40).map(|i| (1 + i % 3, (i % 5 == 0) as usize + (i % 7 == 0) as usize)).collect();
        let fams: Vec<(usize, usize)> = fams.into_iter().map(|(e, p)| (e, p.min(e))).collect();
        let m = manifest(&fams);
        let a = make_splits(&m, &SplitConfig::default(), 42).unwrap();
        let b = make_splits(&m, &SplitConfig::default(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_family_with_all_positives_is_named() {
        let mut fams = vec![(6, 6)];
        fams.extend(std::iter::repeat((2, 0)).take(12));
        let m = manifest(&fams);
        match make_splits(&m, &SplitConfig::default(), 0) {
            Err(Error::InfeasibleSplit { family, .. }) => assert_eq!(family, "f000"),
            other => panic!("expected infeasible split, got {other:?}"),
        }
    }

    #[test]
    fn fractions_outside_unit_interval_rejected() {
        let m = manifest(&[(1, 0), (1, 1), (1, 0)]);
        let c = SplitConfig {
            test_frac: 1.0,
            ..SplitConfig::default()
        };
        assert!(make_splits(&m, &c, 0).is_err());
    }

    #[test]
    fn split_file_round_trip() {
        let m = manifest(&[(2, 1), (2, 0), (1, 0), (1, 1), (2, 0)]);
        let cfg = SplitConfig {
            strat_tolerance: 0.5,
            size_tolerance: 0.3,
            ..SplitConfig::default()
        };
        let s = make_splits(&m, &cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("splits.tsv");
        s.write(&p).unwrap();
        let fams = SplitAssignment::read_families(&p).unwrap();
        assert_eq!(SplitAssignment::from_families(&m.records, fams), s);
    }
}
