//! Face manifests, splits, morph pair selection and regime sample lists.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blend::OuterSource;
use crate::partial::{RegionId, RegionSet};
use crate::seed::{derive_seed, derived_rng};
use crate::warp::WarpMethod;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: line {line}: {reason}")]
    ParseError { path: PathBuf, line: usize, reason: String },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios(Vec<f64>),
    #[error("pair constraints cannot be met: {0}")]
    InfeasibleConstraints(String),
    #[error("regime needs morph pairs but none were given")]
    InsufficientPairs,
    #[error("unknown record id {0:?}")]
    UnknownId(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

impl FromStr for Gender {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "M" | "m" => Ok(Gender::M),
            "F" | "f" => Ok(Gender::F),
            other => Err(format!("gender must be M or F, got {other:?}")),
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::M => "M",
            Gender::F => "F",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Val];
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "val" => Ok(Split::Val),
            other => Err(format!("split must be train, test or val, got {other:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub id: String,
    pub image: PathBuf,
    pub landmarks: PathBuf,
    pub gender: Gender,
    pub database: String,
    pub split: Option<Split>,
}

const MANIFEST_COLUMNS: [&str; 6] = ["id", "image", "landmarks", "gender", "database", "split"];

/// Reads a tab-separated manifest with a header row. Relative paths are
/// resolved against the manifest's directory and must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<FaceRecord>, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatasetError::MissingFile(path.to_path_buf()),
        _ => DatasetError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base, path)
}

fn parse_manifest(text: &str, base: &Path, path: &Path) -> Result<Vec<FaceRecord>, DatasetError> {
    let parse_err = |line: usize, reason: String| DatasetError::ParseError {
        path: path.to_path_buf(),
        line,
        reason,
    };
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let has_split = match cols.as_slice() {
        [a, b, c, d, e] if [*a, *b, *c, *d, *e] == MANIFEST_COLUMNS[..5] => false,
        [a, b, c, d, e, f] if [*a, *b, *c, *d, *e, *f] == MANIFEST_COLUMNS => true,
        _ => return Err(parse_err(1, format!("unexpected header {cols:?}"))),
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (k, row) in reader.records().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| parse_err(line, e.to_string()))?;
        if row.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let expect = if has_split { 6 } else { 5 };
        if row.len() != expect {
            return Err(parse_err(line, format!("expected {expect} fields, got {}", row.len())));
        }
        let field = |i: usize| row[i].trim();
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId(id));
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let image = resolve(field(1));
        let landmarks = resolve(field(2));
        for f in [&image, &landmarks] {
            if !f.is_file() {
                return Err(DatasetError::MissingFile(f.clone()));
            }
        }
        let gender = field(3).parse().map_err(|e| parse_err(line, e))?;
        let split = if has_split && !field(5).is_empty() {
            Some(field(5).parse().map_err(|e| parse_err(line, e))?)
        } else {
            None
        };
        out.push(FaceRecord {
            id,
            image,
            landmarks,
            gender,
            database: field(4).to_string(),
            split,
        });
    }
    Ok(out)
}

/// Writes a manifest that [`load_manifest`] reads back. Paths are written
/// relative to the manifest directory when possible.
pub fn write_manifest(path: impl AsRef<Path>, records: &[FaceRecord]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| DatasetError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    w.write_record(MANIFEST_COLUMNS).map_err(csv_err)?;
    for r in records {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
        let split = r.split.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([
            r.id.as_str(),
            &rel(&r.image),
            &rel(&r.landmarks),
            &r.gender.to_string(),
            &r.database,
            &split,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Integer counts summing to `total` that are closest to `total * w_i`:
/// floors first, then the largest fractional parts (earlier index on ties).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>().min(total);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.80, 0.15, 0.05];

/// Assigns train/test/val per database with largest-remainder counts and a
/// seeded shuffle. Record order is preserved.
pub fn split_dataset(records: &[FaceRecord], ratios: [f64; 3], seed: u64) -> Result<Vec<FaceRecord>, DatasetError> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios(ratios.to_vec()));
    }
    let mut by_db: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_db.entry(r.database.as_str()).or_default().push(i);
    }
    let mut out = records.to_vec();
    for (db, mut members) in by_db {
        members.shuffle(&mut derived_rng(seed, db, 0));
        let counts = largest_remainder(members.len(), &ratios);
        let mut it = members.into_iter();
        for (split, n) in Split::ALL.into_iter().zip(counts) {
            for i in it.by_ref().take(n) {
                out[i].split = Some(split);
            }
        }
    }
    Ok(out)
}

/// Two records to morph and the warp method to use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MorphPair {
    pub a: String,
    pub b: String,
    pub method: WarpMethod,
}

type Stratum = (Option<Split>, String, Gender);

fn stratify(records: &[FaceRecord]) -> BTreeMap<Stratum, Vec<usize>> {
    let mut strata: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry((r.split, r.database.clone(), r.gender)).or_default().push(i);
    }
    strata
}

/// Proportional allocation with per-stratum caps.
fn allocate(count: usize, sizes: &[usize], caps: &[usize]) -> Option<Vec<usize>> {
    if caps.iter().sum::<usize>() < count {
        return None;
    }
    let mut alloc = vec![0; sizes.len()];
    let mut open: Vec<usize> = (0..sizes.len()).filter(|&i| caps[i] > 0).collect();
    let mut remaining = count;
    while remaining > 0 {
        let weights: Vec<f64> = open.iter().map(|&i| sizes[i] as f64).collect();
        let share = largest_remainder(remaining, &weights);
        let mut capped = false;
        for (&i, s) in open.iter().zip(share) {
            let take = s.min(caps[i] - alloc[i]);
            capped |= take < s;
            alloc[i] += take;
            remaining -= take;
        }
        open.retain(|&i| alloc[i] < caps[i]);
        if !capped && remaining > 0 && open.is_empty() {
            return None;
        }
    }
    Some(alloc)
}

/// Greedy balanced pairing inside one stratum: each step takes the unused
/// pair with the lowest (max usage, total usage), ties by a random rank.
fn pair_stratum<R: Rng + ?Sized>(members: &[usize], k: usize, rng: &mut R) -> Option<Vec<(usize, usize)>> {
    let n = members.len();
    for _attempt in 0..64 {
        let mut rank: Vec<usize> = (0..n * n).collect();
        rank.shuffle(rng);
        let mut usage = vec![0usize; n];
        let mut used = vec![false; n * n];
        let mut picks = Vec::with_capacity(k);
        for _ in 0..k {
            let mut best: Option<(usize, usize, usize, usize, usize)> = None;
            for a in 0..n {
                for b in a + 1..n {
                    if used[a * n + b] {
                        continue;
                    }
                    let key = (usage[a].max(usage[b]), usage[a] + usage[b], rank[a * n + b]);
                    if best.is_none_or(|(x, y, z, _, _)| key < (x, y, z)) {
                        best = Some((key.0, key.1, key.2, a, b));
                    }
                }
            }
            let (_, _, _, a, b) = best?;
            used[a * n + b] = true;
            usage[a] += 1;
            usage[b] += 1;
            picks.push((members[a], members[b]));
        }
        let lo = usage.iter().min().copied().unwrap_or(0);
        let hi = usage.iter().max().copied().unwrap_or(0);
        if hi - lo <= 1 {
            return Some(picks);
        }
    }
    None
}

/// Selects `count` morph pairs: same split, database and gender, no repeated
/// pair, per-image usage within each stratum differing by at most one, and
/// warp methods split evenly.
pub fn select_pairs(records: &[FaceRecord], count: usize, seed: u64) -> Result<Vec<MorphPair>, DatasetError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let strata: Vec<(Stratum, Vec<usize>)> = stratify(records).into_iter().collect();
    let sizes: Vec<usize> = strata.iter().map(|(_, m)| m.len()).collect();
    let caps: Vec<usize> = sizes.iter().map(|&n| n * n.saturating_sub(1) / 2).collect();
    let alloc = allocate(count, &sizes, &caps).ok_or_else(|| {
        DatasetError::InfeasibleConstraints(format!(
            "{count} pairs requested but only {} same-gender same-database pairs exist",
            caps.iter().sum::<usize>()
        ))
    })?;
    let mut rng = derived_rng(seed, "pairs", 0);
    let mut pairs = Vec::with_capacity(count);
    for ((key, members), k) in strata.iter().zip(alloc) {
        let picked = pair_stratum(members, k, &mut rng).ok_or_else(|| {
            DatasetError::InfeasibleConstraints(format!("cannot balance {k} pairs over {} images in {key:?}", members.len()))
        })?;
        pairs.extend(picked);
    }
    let mut methods: Vec<WarpMethod> = (0..count)
        .map(|i| if i % 2 == 0 { WarpMethod::Triangle } else { WarpMethod::Field })
        .collect();
    methods.shuffle(&mut rng);
    pairs.shuffle(&mut rng);
    Ok(pairs
        .into_iter()
        .zip(methods)
        .map(|((a, b), method)| MorphPair {
            a: records[a].id.clone(),
            b: records[b].id.clone(),
            method,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Naive,
    OneRegion,
    Complex,
    Multiclass,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Naive, Regime::OneRegion, Regime::Complex, Regime::Multiclass];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Naive => "naive",
            Regime::OneRegion => "one_region",
            Regime::Complex => "complex",
            Regime::Multiclass => "multiclass",
        }
    }

    pub fn is_multilabel(self) -> bool {
        self == Regime::Multiclass
    }

    pub fn spec(self) -> RegimeSpec {
        use Bucket::*;
        let buckets = match self {
            Regime::Naive => vec![(Genuine, 0.5), (Complete, 0.5)],
            Regime::OneRegion => {
                let mut b = vec![(Genuine, 0.5), (Complete, 0.1)];
                b.extend(RegionId::ALL.map(|r| (Single(r), 0.1)));
                b
            }
            Regime::Complex => vec![
                (Genuine, 0.5),
                (Complete, 0.1),
                (Regions(1), 0.1),
                (Regions(2), 0.1),
                (Regions(3), 0.1),
                (Regions(4), 0.1),
            ],
            Regime::Multiclass => (0..=4).map(|k| (Regions(k), 0.2)).collect(),
        };
        RegimeSpec { regime: self, buckets }
    }
}

impl FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown regime {s:?}"))
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One line of a regime composition table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bucket {
    Genuine,
    Complete,
    /// Partial morph of exactly this region.
    Single(RegionId),
    /// Partial morph of this many regions, chosen for balance.
    Regions(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub regime: Regime,
    pub buckets: Vec<(Bucket, f64)>,
}

impl RegimeSpec {
    pub fn counts(&self, total: usize) -> Vec<usize> {
        let w: Vec<f64> = self.buckets.iter().map(|b| b.1).collect();
        largest_remainder(total, &w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Genuine,
    CompleteMorph,
    PartialMorph,
}

/// Which of the five corrupted versions to render, with its stream seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentRef {
    pub version: u8,
    pub seed: u64,
}

/// One training or evaluation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub kind: SampleKind,
    pub sources: Vec<String>,
    pub method: Option<WarpMethod>,
    pub outer_source: OuterSource,
    pub regions: RegionSet,
    /// Binary class (0 genuine, 1 morph) or per-region flags.
    pub label: Vec<u8>,
    pub augment: Option<AugmentRef>,
    pub seed: u64,
}

impl SampleRecord {
    pub fn is_attack(&self) -> bool {
        self.kind == SampleKind::CompleteMorph || !self.regions.is_empty()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.label.iter().map(|&l| l as f64).collect()
    }

    /// Checks the kind/source/label invariants.
    pub fn is_consistent(&self, multilabel: bool) -> bool {
        let sources_ok = match self.kind {
            SampleKind::Genuine => self.sources.len() == 1 && self.regions.is_empty() && self.method.is_none(),
            SampleKind::CompleteMorph => self.sources.len() == 2 && self.method.is_some(),
            SampleKind::PartialMorph => self.sources.len() == 2 && self.method.is_some(),
        };
        let label_ok = if multilabel {
            self.label == self.regions.as_labels().map(|v| v as u8).to_vec()
        } else {
            self.label == vec![self.is_attack() as u8]
        };
        sources_ok && label_ok
    }
}

/// Builds the sample list of a regime. Genuine samples cycle through a
/// shuffled copy of `records`, morph samples through a shuffled copy of
/// `pairs`; multi-region partials take the regions morphed least so far.
pub fn build_regime(
    records: &[FaceRecord],
    pairs: &[MorphPair],
    regime: Regime,
    total: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>, DatasetError> {
    let spec = regime.spec();
    let counts = spec.counts(total);
    let needs_pairs = spec
        .buckets
        .iter()
        .zip(&counts)
        .any(|((b, _), &n)| n > 0 && *b != Bucket::Genuine);
    if needs_pairs && pairs.is_empty() {
        return Err(DatasetError::InsufficientPairs);
    }
    let needs_records = spec
        .buckets
        .iter()
        .zip(&counts)
        .any(|((b, _), &n)| n > 0 && *b == Bucket::Genuine);
    if needs_records && records.is_empty() {
        return Err(DatasetError::InsufficientPairs);
    }
    let mut rng = derived_rng(seed, regime.name(), 0);
    let mut rec_order: Vec<usize> = (0..records.len()).collect();
    rec_order.shuffle(&mut rng);
    let mut pair_order: Vec<usize> = (0..pairs.len()).collect();
    pair_order.shuffle(&mut rng);
    let (mut next_rec, mut next_pair) = (0usize, 0usize);
    let mut incidence = [0usize; 4];
    let mut out = Vec::with_capacity(total);
    for ((bucket, _), n) in spec.buckets.iter().zip(counts) {
        for _ in 0..n {
            let index = out.len();
            let sample_seed = derive_seed(seed, regime.name(), index as u64 + 1);
            let (kind, sources, method, regions) = match *bucket {
                Bucket::Genuine => {
                    let r = &records[rec_order[next_rec % records.len()]];
                    next_rec += 1;
                    (SampleKind::Genuine, vec![r.id.clone()], None, RegionSet::EMPTY)
                }
                other => {
                    let p = &pairs[pair_order[next_pair % pairs.len()]];
                    next_pair += 1;
                    let (kind, regions) = match other {
                        Bucket::Complete => (SampleKind::CompleteMorph, RegionSet::EMPTY),
                        Bucket::Single(r) => (SampleKind::PartialMorph, RegionSet::EMPTY.with(r)),
                        Bucket::Regions(k) => {
                            let mut order = RegionId::ALL;
                            order.shuffle(&mut rng);
                            order.sort_by_key(|r| incidence[r.index()]);
                            (SampleKind::PartialMorph, order[..k.min(4)].iter().copied().collect())
                        }
                        Bucket::Genuine => unreachable!(),
                    };
                    (kind, vec![p.a.clone(), p.b.clone()], Some(p.method), regions)
                }
            };
            for r in regions.iter() {
                incidence[r.index()] += 1;
            }
            let mut sample = SampleRecord {
                id: format!("{}-{index:06}", regime.name()),
                kind,
                sources,
                method,
                outer_source: OuterSource::A,
                regions,
                label: Vec::new(),
                augment: None,
                seed: sample_seed,
            };
            sample.label = if regime.is_multilabel() {
                regions.as_labels().map(|v| v as u8).to_vec()
            } else {
                vec![sample.is_attack() as u8]
            };
            out.push(sample);
        }
    }
    Ok(out)
}

/// Replaces every sample by its five corrupted versions.
pub fn expand_augmented(samples: &[SampleRecord]) -> Vec<SampleRecord> {
    samples
        .iter()
        .flat_map(|s| {
            (0..5u8).map(move |v| SampleRecord {
                id: format!("{}-a{v}", s.id),
                augment: Some(AugmentRef {
                    version: v,
                    seed: derive_seed(s.seed, "augment", 0),
                }),
                ..s.clone()
            })
        })
        .collect()
}

pub fn write_samples(path: impl AsRef<Path>, samples: &[SampleRecord]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| DatasetError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|_| DatasetError::MissingFile(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::ParseError {
            path: path.to_path_buf(),
            line: k + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Records of one split, in manifest order.
pub fn records_in(records: &[FaceRecord], split: Split) -> Vec<FaceRecord> {
    records.iter().filter(|r| r.split == Some(split)).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn record(id: &str, gender: Gender, db: &str) -> FaceRecord {
        FaceRecord {
            id: id.into(),
            image: PathBuf::from(format!("{id}.png")),
            landmarks: PathBuf::from(format!("{id}.txt")),
            gender,
            database: db.into(),
            split: None,
        }
    }

    fn population(n: usize, db: &str) -> Vec<FaceRecord> {
        (0..n)
            .map(|i| record(&format!("{db}{i}"), if i % 2 == 0 { Gender::M } else { Gender::F }, db))
            .collect()
    }

    #[test]
    fn largest_remainder_rounding() {
        assert_eq!(largest_remainder(100, &DEFAULT_SPLIT_RATIOS), vec![80, 15, 5]);
        assert_eq!(largest_remainder(20, &DEFAULT_SPLIT_RATIOS), vec![16, 3, 1]);
        assert_eq!(largest_remainder(7, &[1.0, 1.0, 1.0]), vec![3, 2, 2]);
        assert_eq!(largest_remainder(0, &[0.5, 0.5]), vec![0, 0]);
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a.png", "a.txt", "b.png", "b.txt", "c.png", "c.txt"] {
            std::fs::write(dir.path().join(f), "x").unwrap();
        }
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
        let body = "id\timage\tlandmarks\tgender\tdatabase\n\
                    a\ta.png\ta.txt\tM\tdb1\n\
                    b\tb.png\tb.txt\tF\tdb1\n\
                    c\tc.png\tc.txt\tF\tdb2\n";
        std::fs::write(&path, body).unwrap();
        let recs = load_manifest(&path).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].gender, Gender::F);
        assert_eq!(recs[2].image, dir.path().join("c.png"));

        std::fs::write(&path, format!("{body}a\ta.png\ta.txt\tM\tdb1\n")).unwrap();
        assert!(matches!(load_manifest(&path), Err(DatasetError::DuplicateId(id)) if id == "a"));
        std::fs::write(&path, "id\timage\tlandmarks\tgender\tdatabase\nz\tz.png\tz.txt\tM\tdb\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(DatasetError::MissingFile(_))));
        std::fs::write(&path, "id\timage\tlandmarks\tgender\tdatabase\na\ta.png\ta.txt\tX\tdb\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(DatasetError::ParseError { line: 2, .. })));

        let mut recs = recs;
        recs[0].split = Some(Split::Test);
        write_manifest(&path, &recs).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), recs);
    }

    #[test]
    fn splits_are_stratified_and_seeded() {
        let recs = population(100, "db");
        let s = split_dataset(&recs, DEFAULT_SPLIT_RATIOS, 1).unwrap();
        let count = |s: &[FaceRecord], sp| s.iter().filter(|r| r.split == Some(sp)).count();
        assert_eq!([Split::Train, Split::Test, Split::Val].map(|sp| count(&s, sp)), [80, 15, 5]);
        assert_eq!(s, split_dataset(&recs, DEFAULT_SPLIT_RATIOS, 1).unwrap());
        assert_ne!(s, split_dataset(&recs, DEFAULT_SPLIT_RATIOS, 2).unwrap());

        let mut two = population(20, "x");
        two.extend(population(20, "y"));
        let s = split_dataset(&two, DEFAULT_SPLIT_RATIOS, 3).unwrap();
        for db in ["x", "y"] {
            let sub: Vec<FaceRecord> = s.iter().filter(|r| r.database == db).cloned().collect();
            assert_eq!([Split::Train, Split::Test, Split::Val].map(|sp| count(&sub, sp)), [16, 3, 1]);
        }
        assert!(matches!(
            split_dataset(&recs, [0.5, 0.5, 0.5], 0),
            Err(DatasetError::BadRatios(_))
        ));
    }

    #[test]
    fn four_record_pairing_is_unique() {
        let recs = vec![
            record("m1", Gender::M, "d"),
            record("m2", Gender::M, "d"),
            record("f1", Gender::F, "d"),
            record("f2", Gender::F, "d"),
        ];
        let pairs = select_pairs(&recs, 2, 5).unwrap();
        let mut got: Vec<(String, String)> = pairs
            .iter()
            .map(|p| {
                let mut v = [p.a.clone(), p.b.clone()];
                v.sort();
                (v[0].clone(), v[1].clone())
            })
            .collect();
        got.sort();
        assert_eq!(got, vec![("f1".into(), "f2".into()), ("m1".into(), "m2".into())]);
        let tri = pairs.iter().filter(|p| p.method == WarpMethod::Triangle).count();
        assert_eq!(tri, 1);
        assert!(select_pairs(&recs, 0, 5).unwrap().is_empty());
        assert!(matches!(select_pairs(&recs, 3, 5), Err(DatasetError::InfeasibleConstraints(_))));
    }

    #[test]
    fn pairing_guidelines_hold() {
        let mut recs = population(30, "x");
        recs.extend(population(17, "y"));
        let recs = split_dataset(&recs, DEFAULT_SPLIT_RATIOS, 9).unwrap();
        let by_id: HashMap<&str, &FaceRecord> = recs.iter().map(|r| (r.id.as_str(), r)).collect();
        for count in [1, 10, 45, 120] {
            let pairs = select_pairs(&recs, count, 4).unwrap();
            assert_eq!(pairs.len(), count);
            let mut usage: HashMap<&str, usize> = HashMap::new();
            let mut seen = HashSet::new();
            for p in &pairs {
                let (a, b) = (by_id[p.a.as_str()], by_id[p.b.as_str()]);
                assert_ne!(a.id, b.id);
                assert_eq!(a.gender, b.gender);
                assert_eq!(a.database, b.database);
                assert_eq!(a.split, b.split);
                let mut key = [a.id.clone(), b.id.clone()];
                key.sort();
                assert!(seen.insert(key));
                *usage.entry(&a.id).or_default() += 1;
                *usage.entry(&b.id).or_default() += 1;
            }
            for (key, members) in stratify(&recs) {
                let u: Vec<usize> = members.iter().map(|&i| usage.get(recs[i].id.as_str()).copied().unwrap_or(0)).collect();
                let spread = u.iter().max().unwrap() - u.iter().min().unwrap();
                assert!(spread <= 1, "{key:?} usage {u:?}");
            }
            let tri = pairs.iter().filter(|p| p.method == WarpMethod::Triangle).count();
            assert!(tri.abs_diff(count - tri) <= 1);
        }
    }

    fn regime_inputs() -> (Vec<FaceRecord>, Vec<MorphPair>) {
        let recs = population(40, "d");
        let pairs = select_pairs(&recs, 30, 1).unwrap();
        (recs, pairs)
    }

    #[test]
    fn regime_examples() {
        let (recs, pairs) = regime_inputs();
        let count = |s: &[SampleRecord], f: &dyn Fn(&SampleRecord) -> bool| s.iter().filter(|x| f(x)).count();
        let naive = build_regime(&recs, &pairs, Regime::Naive, 100, 1).unwrap();
        assert_eq!(count(&naive, &|s| s.kind == SampleKind::Genuine), 50);
        assert_eq!(count(&naive, &|s| s.kind == SampleKind::CompleteMorph), 50);
        let one = build_regime(&recs, &pairs, Regime::OneRegion, 100, 1).unwrap();
        assert_eq!(count(&one, &|s| s.kind == SampleKind::Genuine), 50);
        assert_eq!(count(&one, &|s| s.kind == SampleKind::CompleteMorph), 10);
        for r in RegionId::ALL {
            assert_eq!(count(&one, &|s| s.regions == RegionSet::EMPTY.with(r)), 10);
        }
        let multi = build_regime(&recs, &pairs, Regime::Multiclass, 100, 1).unwrap();
        for k in 0..=4 {
            assert_eq!(count(&multi, &|s| s.kind == SampleKind::PartialMorph && s.regions.len() == k), 20);
        }
        for regime in Regime::ALL {
            let s = build_regime(&recs, &pairs, regime, 100, 7).unwrap();
            assert!(s.iter().all(|x| x.is_consistent(regime.is_multilabel())));
            assert_eq!(s, build_regime(&recs, &pairs, regime, 100, 7).unwrap());
        }
        assert!(matches!(
            build_regime(&recs, &[], Regime::Naive, 10, 0),
            Err(DatasetError::InsufficientPairs)
        ));
    }

    #[test]
    fn region_incidence_is_balanced() {
        let (recs, pairs) = regime_inputs();
        for regime in [Regime::Complex, Regime::Multiclass] {
            for total in [40, 100, 1000, 37] {
                let s = build_regime(&recs, &pairs, regime, total, 3).unwrap();
                assert_eq!(s.len(), total);
                let inc: Vec<usize> = RegionId::ALL
                    .iter()
                    .map(|&r| s.iter().filter(|x| x.regions.contains(r)).count())
                    .collect();
                let spread = inc.iter().max().unwrap() - inc.iter().min().unwrap();
                assert!(spread <= 1, "{regime} {total}: {inc:?}");
            }
        }
    }

    #[test]
    fn sample_list_round_trip() {
        let (recs, pairs) = regime_inputs();
        let s = expand_augmented(&build_regime(&recs, &pairs, Regime::Complex, 20, 2).unwrap());
        assert_eq!(s.len(), 100);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        write_samples(&path, &s).unwrap();
        assert_eq!(read_samples(&path).unwrap(), s);
    }
}
