//! Dataset ingestion, the user/sample split protocol and a deterministic
//! synthetic signature generator.
//!
//! On-disk layout: `<root>/<dataset>/uNNNN/uNNNN_{g|f|s|r}_NN.png` for
//! genuine, skilled, simple and random samples.
//!
//! Manifest: `# key=value` plan lines, then `split<TAB>user<TAB>kind<TAB>path`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::RawImage;
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Genuine,
    Skilled,
    Simple,
    Random,
}

impl SampleKind {
    pub const ALL: [SampleKind; 4] = [Self::Genuine, Self::Skilled, Self::Simple, Self::Random];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn letter(self) -> char {
        match self {
            Self::Genuine => 'g',
            Self::Skilled => 'f',
            Self::Simple => 's',
            Self::Random => 'r',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.letter() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Genuine => "genuine",
            Self::Skilled => "skilled",
            Self::Simple => "simple",
            Self::Random => "random",
        }
    }

    /// Accepts `genuine`, `skilled`, `simple`, `random`, the `*_forgery`
    /// spellings and the filename letters.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.strip_suffix("_forgery").unwrap_or(s);
        Self::ALL.into_iter().find(|k| k.name() == s).or_else(|| {
            let mut chars = s.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => Self::from_letter(c),
                _ => None,
            }
        })
    }

    pub fn is_forgery(self) -> bool {
        self != Self::Genuine
    }
}

pub fn file_name(user: u32, kind: SampleKind, sample: u32) -> String {
    format!("u{user:04}_{}_{sample:02}.png", kind.letter())
}

pub fn user_dir_name(user: u32) -> String {
    format!("u{user:04}")
}

fn parse_user(s: &str) -> Option<u32> {
    let digits = s.strip_prefix('u')?;
    (digits.len() >= 4 && digits.bytes().all(|b| b.is_ascii_digit()))
        .then(|| digits.parse().ok())
        .flatten()
}

/// Parses `uNNNN_k_NN.png` into `(user, kind, sample)`.
pub fn parse_file_name(name: &str) -> Option<(u32, SampleKind, u32)> {
    let stem = name.strip_suffix(".png")?;
    let mut parts = stem.split('_');
    let user = parse_user(parts.next()?)?;
    let mut letter = parts.next()?.chars();
    let kind = match (letter.next(), letter.next()) {
        (Some(c), None) => SampleKind::from_letter(c)?,
        _ => return None,
    };
    let sample_str = parts.next()?;
    if parts.next().is_some()
        || sample_str.len() < 2
        || !sample_str.bytes().all(|b| b.is_ascii_digit())
    {
        return None;
    }
    Some((user, kind, sample_str.parse().ok()?))
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SampleRecord {
    pub user: u32,
    pub kind: SampleKind,
    pub sample: u32,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub name: String,
    /// Sorted by `(user, kind, sample)`.
    pub records: Vec<SampleRecord>,
    pub num_users: u32,
}

impl DatasetIndex {
    /// Sorts the records and checks that users are `0..n` with at least one
    /// genuine sample each and no duplicated `(user, kind, sample)`.
    pub fn new(name: impl Into<String>, mut records: Vec<SampleRecord>) -> Result<Self> {
        records.sort();
        for w in records.windows(2) {
            if (w[0].user, w[0].kind, w[0].sample) == (w[1].user, w[1].kind, w[1].sample) {
                return Err(Error::parse(
                    &w[1].path,
                    format!("duplicate of {}", w[0].path.display()),
                ));
            }
        }
        let users: BTreeSet<u32> = records.iter().map(|r| r.user).collect();
        let num_users = users.last().map_or(0, |u| u + 1);
        if let Some(missing) = (0..num_users).find(|u| !users.contains(u)) {
            return Err(Error::Index(format!("user {missing} has no samples")));
        }
        let with_genuine: BTreeSet<u32> = records
            .iter()
            .filter(|r| r.kind == SampleKind::Genuine)
            .map(|r| r.user)
            .collect();
        if let Some(u) = users.iter().find(|u| !with_genuine.contains(u)) {
            return Err(Error::Index(format!("user {u} has no genuine signature")));
        }
        Ok(DatasetIndex {
            name: name.into(),
            records,
            num_users,
        })
    }

    pub fn samples(&self, user: u32, kind: SampleKind) -> impl Iterator<Item = &SampleRecord> {
        let start = self
            .records
            .partition_point(|r| (r.user, r.kind) < (user, kind));
        self.records[start..]
            .iter()
            .take_while(move |r| r.user == user && r.kind == kind)
    }

    pub fn find(&self, user: u32, kind: SampleKind, sample: u32) -> Option<&SampleRecord> {
        self.records
            .binary_search_by(|r| (r.user, r.kind, r.sample).cmp(&(user, kind, sample)))
            .ok()
            .map(|i| &self.records[i])
    }
}

/// Indexes a `<root>/<dataset>` directory of `uNNNN` user folders.
pub fn load_index(dir: &Path) -> Result<DatasetIndex> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut records = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let dir_name = entry.file_name().to_string_lossy().into_owned();
        if dir_name.starts_with('.') {
            continue;
        }
        let dir_user = parse_user(&dir_name)
            .ok_or_else(|| Error::parse(entry.path(), "user folder must be named uNNNN"))?;
        for file in std::fs::read_dir(entry.path())? {
            let file = file?;
            let file_name = file.file_name().to_string_lossy().into_owned();
            if file_name.starts_with('.') {
                continue;
            }
            let path = file.path();
            let (user, kind, sample) = parse_file_name(&file_name)
                .ok_or_else(|| Error::parse(&path, "expected uNNNN_{g|f|s|r}_NN.png"))?;
            if user != dir_user {
                return Err(Error::parse(
                    &path,
                    format!("file of user {user} in folder {dir_name}"),
                ));
            }
            records.push(SampleRecord {
                user,
                kind,
                sample,
                path,
            });
        }
    }
    DatasetIndex::new(name, records)
}

/// Where writer-dependent negatives come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// `r` genuine signatures of every development user.
    Development,
    /// The reference signatures of the other users in the same group.
    OtherUsers,
}

impl NegativeSource {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "development" => Some(Self::Development),
            "other_users" => Some(Self::OtherUsers),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Development => "development",
            Self::OtherUsers => "other_users",
        }
    }
}

/// User groups and per-user quotas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Feature-learning users (`L_c` / `V_c`).
    pub development: Vec<u32>,
    /// Users for writer-dependent validation (threshold and model choices).
    pub validation: Vec<u32>,
    /// Enrolled users for final testing.
    pub exploitation: Vec<u32>,
    /// Genuine references per writer-dependent user (`r`).
    pub references: usize,
    /// Share of each development user's samples held out for `V_c`, in percent.
    pub holdout_percent: usize,
    pub negatives: NegativeSource,
}

impl SplitPlan {
    /// Exploitation users first, then validation, then development.
    pub fn contiguous(
        exploitation: u32,
        validation: u32,
        development: u32,
        references: usize,
        negatives: NegativeSource,
    ) -> Self {
        let v0 = exploitation;
        let d0 = v0 + validation;
        SplitPlan {
            development: (d0..d0 + development).collect(),
            validation: (v0..d0).collect(),
            exploitation: (0..v0).collect(),
            references,
            holdout_percent: 10,
            negatives,
        }
    }

    pub fn validate(&self, num_users: u32) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &u in self
            .development
            .iter()
            .chain(&self.validation)
            .chain(&self.exploitation)
        {
            if u >= num_users {
                return Err(Error::Protocol(format!(
                    "user {u} not in a {num_users}-user dataset"
                )));
            }
            if !seen.insert(u) {
                return Err(Error::Protocol(format!("user {u} assigned to two groups")));
            }
        }
        if self.references == 0 {
            return Err(Error::Protocol("reference count must be at least 1".into()));
        }
        if self.holdout_percent >= 100 {
            return Err(Error::Protocol("holdout percent must be below 100".into()));
        }
        if self.negatives == NegativeSource::Development
            && self.development.is_empty()
            && !(self.validation.is_empty() && self.exploitation.is_empty())
        {
            return Err(Error::Protocol(
                "development negatives requested without development users".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitTag {
    /// Feature-learning training samples.
    Lc,
    /// Feature-learning validation samples.
    Vc,
    /// Development genuine samples offered as writer-dependent negatives.
    Pool,
    /// Validation-user references.
    VvRef,
    /// Validation-user test samples.
    VvTest,
    /// Exploitation-user references.
    Lv,
    /// Exploitation-user test samples.
    Tv,
}

impl SplitTag {
    pub const ALL: [SplitTag; 7] = [
        Self::Lc,
        Self::Vc,
        Self::Pool,
        Self::VvRef,
        Self::VvTest,
        Self::Lv,
        Self::Tv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Lc => "lc",
            Self::Vc => "vc",
            Self::Pool => "pool",
            Self::VvRef => "vv_ref",
            Self::VvTest => "vv_test",
            Self::Lv => "lv",
            Self::Tv => "tv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SplitEntry {
    pub split: SplitTag,
    pub user: u32,
    pub kind: SampleKind,
    pub sample: u32,
    pub path: PathBuf,
}

/// Writer-dependent user group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WdGroup {
    Validation,
    Exploitation,
}

impl WdGroup {
    pub fn tags(self) -> (SplitTag, SplitTag) {
        match self {
            Self::Validation => (SplitTag::VvRef, SplitTag::VvTest),
            Self::Exploitation => (SplitTag::Lv, SplitTag::Tv),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub plan: SplitPlan,
    pub seed: u64,
    /// Sorted by `(split, user, kind, sample)`.
    pub entries: Vec<SplitEntry>,
}

impl Split {
    pub fn tagged(&self, tag: SplitTag) -> impl Iterator<Item = &SplitEntry> {
        let start = self.entries.partition_point(|e| e.split < tag);
        self.entries[start..]
            .iter()
            .take_while(move |e| e.split == tag)
    }

    pub fn tagged_user(&self, tag: SplitTag, user: u32) -> impl Iterator<Item = &SplitEntry> {
        self.tagged(tag).filter(move |e| e.user == user)
    }

    pub fn users(&self, group: WdGroup) -> &[u32] {
        match group {
            WdGroup::Validation => &self.plan.validation,
            WdGroup::Exploitation => &self.plan.exploitation,
        }
    }

    /// Writer-dependent negatives for `user` of `group`.
    pub fn negatives(&self, group: WdGroup, user: u32) -> Vec<&SplitEntry> {
        match self.plan.negatives {
            NegativeSource::Development => self
                .tagged(SplitTag::Pool)
                .filter(|e| e.user != user)
                .collect(),
            NegativeSource::OtherUsers => self
                .tagged(group.tags().0)
                .filter(|e| e.user != user)
                .collect(),
        }
    }
}

fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

fn entry(split: SplitTag, r: &SampleRecord) -> SplitEntry {
    SplitEntry {
        split,
        user: r.user,
        kind: r.kind,
        sample: r.sample,
        path: r.path.clone(),
    }
}

/// Materializes `plan` over `index`. Development users are split per kind
/// with `floor(holdout% * n)` samples to `V_c`; validation and exploitation
/// users get `r` random genuine references, everything else of theirs is
/// test data. With development negatives, `r` random genuine samples of each
/// development user form the negative pool, so `N = r * |development|`.
pub fn build_split(index: &DatasetIndex, plan: &SplitPlan, seed: u64) -> Result<Split> {
    plan.validate(index.num_users)?;
    let mut entries = Vec::new();
    for &u in &plan.development {
        for kind in SampleKind::ALL {
            let recs: Vec<&SampleRecord> = index.samples(u, kind).collect();
            let order = shuffled(
                &recs,
                derive_seed(seed, &format!("split/holdout/{u}/{}", kind.name())),
            );
            let held = recs.len() * plan.holdout_percent / 100;
            for (i, r) in order.iter().enumerate() {
                entries.push(entry(if i < held { SplitTag::Vc } else { SplitTag::Lc }, r));
            }
        }
        if plan.negatives == NegativeSource::Development {
            let genuine: Vec<&SampleRecord> = index.samples(u, SampleKind::Genuine).collect();
            if genuine.len() < plan.references {
                return Err(Error::Protocol(format!(
                    "development user {u} has {} genuine signatures, negative pool needs {}",
                    genuine.len(),
                    plan.references
                )));
            }
            let order = shuffled(&genuine, derive_seed(seed, &format!("split/pool/{u}")));
            entries.extend(
                order[..plan.references]
                    .iter()
                    .map(|r| entry(SplitTag::Pool, r)),
            );
        }
    }
    for group in [WdGroup::Validation, WdGroup::Exploitation] {
        let (ref_tag, test_tag) = group.tags();
        let users = match group {
            WdGroup::Validation => &plan.validation,
            WdGroup::Exploitation => &plan.exploitation,
        };
        for &u in users {
            let genuine: Vec<&SampleRecord> = index.samples(u, SampleKind::Genuine).collect();
            if genuine.len() <= plan.references {
                return Err(Error::Protocol(format!(
                    "user {u} has {} genuine signatures, {} references plus at least one test sample needed",
                    genuine.len(),
                    plan.references
                )));
            }
            let order = shuffled(
                &genuine,
                derive_seed(seed, &format!("split/references/{u}")),
            );
            for (i, r) in order.iter().enumerate() {
                entries.push(entry(
                    if i < plan.references {
                        ref_tag
                    } else {
                        test_tag
                    },
                    r,
                ));
            }
            for kind in [SampleKind::Skilled, SampleKind::Simple, SampleKind::Random] {
                entries.extend(index.samples(u, kind).map(|r| entry(test_tag, r)));
            }
        }
    }
    entries.sort();
    Ok(Split {
        plan: plan.clone(),
        seed,
        entries,
    })
}

fn join_users(users: &[u32]) -> String {
    users
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

pub fn write_manifest<W: Write>(w: &mut W, split: &Split) -> Result<()> {
    let p = &split.plan;
    writeln!(w, "# seed={}", split.seed)?;
    writeln!(w, "# development={}", join_users(&p.development))?;
    writeln!(w, "# validation={}", join_users(&p.validation))?;
    writeln!(w, "# exploitation={}", join_users(&p.exploitation))?;
    writeln!(w, "# references={}", p.references)?;
    writeln!(w, "# holdout_percent={}", p.holdout_percent)?;
    writeln!(w, "# negatives={}", p.negatives.name())?;
    for e in &split.entries {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            e.split.name(),
            e.user,
            e.kind.name(),
            e.path.display()
        )?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R, source: &Path) -> Result<Split> {
    let bad = |line: usize, why: String| Error::parse(source, format!("line {line}: {why}"));
    let mut header = BTreeMap::new();
    let mut entries = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        if let Some(kv) = line.strip_prefix("# ") {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| bad(n, "header line without '='".into()))?;
            header.insert(k.to_string(), v.to_string());
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [split, user, kind, path] = cols[..] else {
            return Err(bad(
                n,
                format!("expected 4 tab-separated columns, got {}", cols.len()),
            ));
        };
        let split =
            SplitTag::parse(split).ok_or_else(|| bad(n, format!("unknown split `{split}`")))?;
        let user: u32 = user
            .parse()
            .map_err(|_| bad(n, format!("bad user `{user}`")))?;
        let kind = SampleKind::parse(kind).ok_or_else(|| bad(n, format!("bad kind `{kind}`")))?;
        let path = PathBuf::from(path);
        let file = path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (fu, fk, sample) =
            parse_file_name(&file).ok_or_else(|| bad(n, format!("bad sample file `{file}`")))?;
        if (fu, fk) != (user, kind) {
            return Err(bad(
                n,
                "user/kind columns disagree with the file name".into(),
            ));
        }
        entries.push(SplitEntry {
            split,
            user,
            kind,
            sample,
            path,
        });
    }
    let get = |k: &str| {
        header
            .get(k)
            .cloned()
            .ok_or_else(|| Error::parse(source, format!("missing header `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::parse(source, format!("header `{k}` is not a number")))
    };
    let users = |k: &str| -> Result<Vec<u32>> {
        let v = get(k)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::parse(source, format!("bad user list `{k}`")))
            })
            .collect()
    };
    let negatives = NegativeSource::parse(&get("negatives")?)
        .ok_or_else(|| Error::parse(source, "unknown negative source"))?;
    let seed = get("seed")?
        .parse()
        .map_err(|_| Error::parse(source, "bad seed"))?;
    entries.sort();
    Ok(Split {
        plan: SplitPlan {
            development: users("development")?,
            validation: users("validation")?,
            exploitation: users("exploitation")?,
            references: num("references")?,
            holdout_percent: num("holdout_percent")?,
            negatives,
        },
        seed,
        entries,
    })
}

/// Synthetic writer model: a per-user prototype of smooth cubic strokes;
/// genuine samples jitter its control points slightly, skilled forgeries
/// deviate more, with uniform pen pressure and tremor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub strokes_min: usize,
    pub strokes_max: usize,
    /// Control-point jitter of genuine samples, in pixels.
    pub genuine_jitter: f64,
    /// Control-point jitter of skilled forgeries, in pixels.
    pub forgery_jitter: f64,
    /// Amplitude of the forger's perpendicular tremor, in pixels.
    pub tremor: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 150,
            width: 220,
            strokes_min: 3,
            strokes_max: 5,
            genuine_jitter: 1.5,
            forgery_jitter: 6.0,
            tremor: 1.2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(
                "synthetic images must be at least 32x32".into(),
            ));
        }
        if self.strokes_min == 0 || self.strokes_min > self.strokes_max {
            return Err(Error::Config("need 1 <= strokes_min <= strokes_max".into()));
        }
        if !(self.genuine_jitter >= 0.0 && self.forgery_jitter > self.genuine_jitter) {
            return Err(Error::Config(
                "forgery jitter must exceed the non-negative genuine jitter".into(),
            ));
        }
        if !(self.tremor >= 0.0) {
            return Err(Error::Config("tremor must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stroke {
    /// Bezier control points, `3k + 1` of them for `k` cubic segments.
    points: Vec<(f64, f64)>,
    width: f64,
    /// Ink darkness (0 = white, 255 = black) at the start and end.
    ink: (f64, f64),
}

/// A user's reference drawing.
#[derive(Clone, Debug)]
pub struct Prototype {
    strokes: Vec<Stroke>,
}

fn prototype(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Prototype {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let n = rng.random_range(spec.strokes_min..=spec.strokes_max);
    let band = (0.3 * h, 0.7 * h);
    let mut x = rng.random_range(0.1 * w..0.2 * w);
    let span = 0.7 * w / n as f64;
    let strokes = (0..n)
        .map(|_| {
            let segments = rng.random_range(2..=3);
            let mut points = Vec::with_capacity(3 * segments + 1);
            let mut px = x;
            let mut py = rng.random_range(band.0..band.1);
            points.push((px, py));
            for _ in 0..3 * segments {
                px += rng.random_range(-0.15..0.6) * span / segments as f64 * 2.0;
                py = (py + rng.random_range(-0.25 * h..0.25 * h)).clamp(0.15 * h, 0.85 * h);
                points.push((px, py));
            }
            x += span;
            Stroke {
                points,
                width: rng.random_range(1.2..2.6),
                ink: (
                    rng.random_range(150.0..240.0),
                    rng.random_range(150.0..240.0),
                ),
            }
        })
        .collect();
    Prototype { strokes }
}

fn bezier(p: &[(f64, f64)], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    let (b0, b1, b2, b3) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        b0 * p[0].0 + b1 * p[1].0 + b2 * p[2].0 + b3 * p[3].0,
        b0 * p[0].1 + b1 * p[1].1 + b2 * p[2].1 + b3 * p[3].1,
    )
}

/// How an instance departs from the prototype.
struct Variation {
    jitter: f64,
    tremor: f64,
    uniform_ink: Option<f64>,
    width_scale: f64,
    /// Random whole-signature shift, scale and slant.
    pose: bool,
}

fn render(
    proto: &Prototype,
    spec: &SyntheticSpec,
    var: &Variation,
    rng: &mut ChaCha8Rng,
) -> RawImage {
    let (h, w) = (spec.height, spec.width);
    let mut ink = vec![0f64; h * w];
    let jitter = Normal::new(0.0, var.jitter.max(1e-12)).expect("positive std");
    // Whole-signature shift, scale and slant.
    let (sx, sy, scale, slant) = if var.pose {
        (
            rng.random_range(-6.0..6.0),
            rng.random_range(-4.0..4.0),
            1.0 + rng.random_range(-0.04..0.04),
            rng.random_range(-0.05..0.05),
        )
    } else {
        (0.0, 0.0, 1.0, 0.0)
    };
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let tremor_freq = rng.random_range(0.35..0.6);
    let tremor_phase = rng.random_range(0.0..std::f64::consts::TAU);
    for stroke in &proto.strokes {
        let pts: Vec<(f64, f64)> = stroke
            .points
            .iter()
            .map(|&(x, y)| {
                let (x, y) = (x + jitter.sample(rng), y + jitter.sample(rng));
                let (x, y) = ((x - cx) * scale + slant * (y - cy), (y - cy) * scale);
                (x + cx + sx, y + cy + sy)
            })
            .collect();
        let radius = stroke.width * var.width_scale / 2.0;
        let segments = (pts.len() - 1) / 3;
        let mut arc = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        for s in 0..segments {
            let ctrl = &pts[3 * s..3 * s + 4];
            let steps = 160;
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                let (mut x, mut y) = bezier(ctrl, t);
                if let Some((px, py)) = prev {
                    let (dx, dy) = (x - px, y - py);
                    let len = (dx * dx + dy * dy).sqrt();
                    arc += len;
                    if var.tremor > 0.0 && len > 1e-9 {
                        let off = var.tremor * (tremor_freq * arc + tremor_phase).sin();
                        x += -dy / len * off;
                        y += dx / len * off;
                    }
                }
                prev = Some(bezier(ctrl, t));
                let progress = (s as f64 + t) / segments as f64;
                let darkness = var
                    .uniform_ink
                    .unwrap_or(stroke.ink.0 + (stroke.ink.1 - stroke.ink.0) * progress);
                stamp(&mut ink, h, w, x, y, radius, darkness);
            }
        }
    }
    let pixels = ink
        .iter()
        .map(|&d| (255.0 - d).round().clamp(0.0, 255.0) as u8)
        .collect();
    RawImage::new(h, w, pixels).expect("sized buffer")
}

/// Anti-aliased disc; overlapping ink keeps the darkest value.
fn stamp(ink: &mut [f64], h: usize, w: usize, x: f64, y: f64, r: f64, darkness: f64) {
    let reach = r + 1.0;
    let r0 = (y - reach).floor().max(0.0) as usize;
    let r1 = ((y + reach).ceil() as isize).min(h as isize - 1);
    let c0 = (x - reach).floor().max(0.0) as usize;
    let c1 = ((x + reach).ceil() as isize).min(w as isize - 1);
    if r1 < 0 || c1 < 0 {
        return;
    }
    for row in r0..=r1 as usize {
        for col in c0..=c1 as usize {
            let d = ((row as f64 - y).powi(2) + (col as f64 - x).powi(2)).sqrt();
            let coverage = (r + 0.5 - d).clamp(0.0, 1.0);
            let v = coverage * darkness;
            let p = &mut ink[row * w + col];
            if v > *p {
                *p = v;
            }
        }
    }
}

pub struct SyntheticSample {
    pub user: u32,
    pub kind: SampleKind,
    pub sample: u32,
    pub image: RawImage,
}

fn user_rng(seed: u64, label: String) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &label))
}

/// Prototype of `user` under `seed`, for measurements against the generated samples.
pub fn synthetic_prototype(spec: &SyntheticSpec, seed: u64, user: u32) -> Prototype {
    prototype(
        spec,
        &mut user_rng(seed, format!("synthetic/{user}/prototype")),
    )
}

/// Noise-free rendering of a prototype.
pub fn render_prototype(proto: &Prototype, spec: &SyntheticSpec) -> RawImage {
    let var = Variation {
        jitter: 0.0,
        tremor: 0.0,
        uniform_ink: None,
        width_scale: 1.0,
        pose: false,
    };
    render(proto, spec, &var, &mut ChaCha8Rng::seed_from_u64(0))
}

/// Generates `genuine` genuine samples and `forgeries` skilled forgeries
/// for each of `n_users` users, sorted by `(user, kind, sample)`.
pub fn generate_synthetic(
    n_users: u32,
    genuine: u32,
    forgeries: u32,
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let per_user: Vec<Vec<SyntheticSample>> = (0..n_users)
        .into_par_iter()
        .map(|u| {
            let proto = synthetic_prototype(spec, seed, u);
            let mut out = Vec::with_capacity((genuine + forgeries) as usize);
            for i in 0..genuine {
                let mut rng = user_rng(seed, format!("synthetic/{u}/genuine/{i}"));
                let var = Variation {
                    jitter: spec.genuine_jitter,
                    tremor: 0.0,
                    uniform_ink: None,
                    width_scale: rng.random_range(0.9..1.1),
                    pose: true,
                };
                out.push(SyntheticSample {
                    user: u,
                    kind: SampleKind::Genuine,
                    sample: i,
                    image: render(&proto, spec, &var, &mut rng),
                });
            }
            for i in 0..forgeries {
                let mut rng = user_rng(seed, format!("synthetic/{u}/skilled/{i}"));
                let var = Variation {
                    jitter: spec.forgery_jitter,
                    tremor: spec.tremor,
                    uniform_ink: Some(rng.random_range(170.0..230.0)),
                    width_scale: rng.random_range(1.1..1.4),
                    pose: true,
                };
                out.push(SyntheticSample {
                    user: u,
                    kind: SampleKind::Skilled,
                    sample: i,
                    image: render(&proto, spec, &var, &mut rng),
                });
            }
            out
        })
        .collect();
    Ok(per_user.into_iter().flatten().collect())
}

/// Writes samples under `<root>/<name>/uNNNN/` and returns the index.
pub fn write_dataset(root: &Path, name: &str, samples: &[SyntheticSample]) -> Result<DatasetIndex> {
    let dir = root.join(name);
    std::fs::create_dir_all(&dir)?;
    let records = samples
        .par_iter()
        .map(|s| {
            let user_dir = dir.join(user_dir_name(s.user));
            std::fs::create_dir_all(&user_dir)?;
            let path = user_dir.join(file_name(s.user, s.kind, s.sample));
            s.image.save_png(&path)?;
            Ok(SampleRecord {
                user: s.user,
                kind: s.kind,
                sample: s.sample,
                path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetIndex::new(name, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_index(users: u32, genuine: u32, skilled: u32) -> DatasetIndex {
        let mut records = Vec::new();
        for u in 0..users {
            for (kind, n) in [
                (SampleKind::Genuine, genuine),
                (SampleKind::Skilled, skilled),
            ] {
                for s in 0..n {
                    records.push(SampleRecord {
                        user: u,
                        kind,
                        sample: s,
                        path: PathBuf::from(format!(
                            "d/{}/{}",
                            user_dir_name(u),
                            file_name(u, kind, s)
                        )),
                    });
                }
            }
        }
        DatasetIndex::new("d", records).unwrap()
    }

    #[test]
    fn file_names_parse() {
        assert_eq!(
            parse_file_name("u0003_g_07.png"),
            Some((3, SampleKind::Genuine, 7))
        );
        assert_eq!(
            parse_file_name("u0012_f_30.png"),
            Some((12, SampleKind::Skilled, 30))
        );
        assert_eq!(
            parse_file_name("u0001_s_123.png"),
            Some((1, SampleKind::Simple, 123))
        );
        for bad in [
            "u3_g_07.png",
            "u0003_x_07.png",
            "u0003_g_7.png",
            "u0003_g_07.jpg",
            "u0003_g_07_1.png",
        ] {
            assert_eq!(parse_file_name(bad), None, "{bad}");
        }
        assert_eq!(file_name(3, SampleKind::Random, 4), "u0003_r_04.png");
        for k in SampleKind::ALL {
            assert_eq!(SampleKind::from_code(k.code()), Some(k));
            assert_eq!(SampleKind::parse(k.name()), Some(k));
        }
        assert_eq!(
            SampleKind::parse("skilled_forgery"),
            Some(SampleKind::Skilled)
        );
    }

    #[test]
    fn index_validation() {
        let rec = |u, k, s| SampleRecord {
            user: u,
            kind: k,
            sample: s,
            path: PathBuf::from(file_name(u, k, s)),
        };
        let dup = vec![
            rec(0, SampleKind::Genuine, 1),
            rec(0, SampleKind::Genuine, 1),
        ];
        assert!(matches!(
            DatasetIndex::new("x", dup),
            Err(Error::Parse { .. })
        ));
        let gap = vec![
            rec(0, SampleKind::Genuine, 0),
            rec(2, SampleKind::Genuine, 0),
        ];
        assert!(matches!(DatasetIndex::new("x", gap), Err(Error::Index(_))));
        let no_genuine = vec![
            rec(0, SampleKind::Genuine, 0),
            rec(1, SampleKind::Skilled, 0),
        ];
        assert!(matches!(
            DatasetIndex::new("x", no_genuine),
            Err(Error::Index(_))
        ));
        assert_eq!(DatasetIndex::new("x", vec![]).unwrap().num_users, 0);
    }

    #[test]
    fn gpds_style_negative_count() {
        // 160 exploitation users, 721 others, 14 references each.
        let index = fake_index(881, 24, 0);
        let plan = SplitPlan::contiguous(160, 0, 721, 14, NegativeSource::Development);
        let split = build_split(&index, &plan, 1).unwrap();
        assert_eq!(split.negatives(WdGroup::Exploitation, 0).len(), 10094);
        assert_eq!(split.tagged_user(SplitTag::Lv, 5).count(), 14);
        assert_eq!(split.tagged_user(SplitTag::Tv, 5).count(), 10);
    }

    #[test]
    fn holdout_uses_floor_on_validation_share() {
        let index = fake_index(3, 24, 5);
        let plan = SplitPlan::contiguous(1, 0, 2, 3, NegativeSource::Development);
        let split = build_split(&index, &plan, 9).unwrap();
        let count = |tag, kind| split.tagged_user(tag, 1).filter(|e| e.kind == kind).count();
        assert_eq!(count(SplitTag::Lc, SampleKind::Genuine), 22);
        assert_eq!(count(SplitTag::Vc, SampleKind::Genuine), 2);
        assert_eq!(count(SplitTag::Lc, SampleKind::Skilled), 5);
        assert_eq!(count(SplitTag::Vc, SampleKind::Skilled), 0);
    }

    #[test]
    fn split_protocol_invariants() {
        let index = fake_index(12, 10, 4);
        for negatives in [NegativeSource::Development, NegativeSource::OtherUsers] {
            let plan = SplitPlan::contiguous(4, 3, 5, 4, negatives);
            let split = build_split(&index, &plan, 3).unwrap();
            let key = |e: &SplitEntry| (e.user, e.kind, e.sample);
            for (a, b) in [
                (SplitTag::Lc, SplitTag::Vc),
                (SplitTag::Lv, SplitTag::Tv),
                (SplitTag::VvRef, SplitTag::VvTest),
            ] {
                let left: BTreeSet<_> = split.tagged(a).map(key).collect();
                assert!(split.tagged(b).all(|e| !left.contains(&key(e))));
            }
            let dev: BTreeSet<u32> = plan.development.iter().copied().collect();
            assert!(plan.exploitation.iter().all(|u| !dev.contains(u)));
            // Exploitation skilled forgeries never reach any training tag.
            for tag in [
                SplitTag::Lc,
                SplitTag::Vc,
                SplitTag::Pool,
                SplitTag::Lv,
                SplitTag::VvRef,
            ] {
                assert!(split
                    .tagged(tag)
                    .all(|e| !(e.kind.is_forgery() && plan.exploitation.contains(&e.user))));
            }
            for &u in &plan.exploitation {
                let neg = split.negatives(WdGroup::Exploitation, u);
                assert!(neg
                    .iter()
                    .all(|e| e.user != u && e.kind == SampleKind::Genuine));
                let expected = match negatives {
                    NegativeSource::Development => 4 * 5,
                    NegativeSource::OtherUsers => 4 * 3,
                };
                assert_eq!(neg.len(), expected);
            }
            assert_eq!(build_split(&index, &plan, 3).unwrap(), split);
        }
    }

    #[test]
    fn quota_violations_are_named() {
        let index = fake_index(4, 5, 0);
        let plan = SplitPlan::contiguous(2, 0, 2, 5, NegativeSource::OtherUsers);
        let err = build_split(&index, &plan, 0).unwrap_err();
        assert!(
            matches!(err, Error::Protocol(ref m) if m.contains("references")),
            "{err}"
        );
        let mut overlap = SplitPlan::contiguous(2, 0, 2, 2, NegativeSource::OtherUsers);
        overlap.development.push(0);
        assert!(matches!(
            build_split(&index, &overlap, 0),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let index = fake_index(8, 6, 3);
        let plan = SplitPlan::contiguous(3, 2, 3, 2, NegativeSource::Development);
        let split = build_split(&index, &plan, 17).unwrap();
        let mut buf = Vec::new();
        write_manifest(&mut buf, &split).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().any(|l| l.starts_with("tv\t0\tskilled\t")));
        let back = read_manifest(buf.as_slice(), Path::new("m.tsv")).unwrap();
        assert_eq!(back, split);
        let broken = text.replacen("tv\t0\tskilled", "tv\t1\tskilled", 1);
        assert!(read_manifest(broken.as_bytes(), Path::new("m.tsv")).is_err());
    }

    fn distance(a: &RawImage, b: &RawImage) -> f64 {
        a.pixels()
            .iter()
            .zip(b.pixels())
            .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
            .sum::<f64>()
            / a.pixels().len() as f64
    }

    #[test]
    fn synthetic_generation_is_deterministic_and_separates_forgeries() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(2, 3, 2, &spec, 7).unwrap();
        let b = generate_synthetic(2, 3, 2, &spec, 7).unwrap();
        assert_eq!(a.len(), 10);
        assert!(a.iter().zip(&b).all(|(x, y)| x.image == y.image));
        assert!(generate_synthetic(0, 3, 2, &spec, 7).unwrap().is_empty());
        let samples = generate_synthetic(2, 50, 50, &spec, 11).unwrap();
        for u in 0..2 {
            let proto = render_prototype(&synthetic_prototype(&spec, 11, u), &spec);
            let mean = |kind| {
                let d: Vec<f64> = samples
                    .iter()
                    .filter(|s| s.user == u && s.kind == kind)
                    .map(|s| distance(&s.image, &proto))
                    .collect();
                d.iter().sum::<f64>() / d.len() as f64
            };
            let (g, f) = (mean(SampleKind::Genuine), mean(SampleKind::Skilled));
            assert!(g < f, "user {u}: genuine {g} vs forgery {f}");
        }
    }

    #[test]
    fn written_dataset_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(3, 2, 1, &SyntheticSpec::default(), 1).unwrap();
        let written = write_dataset(dir.path(), "synthetic", &samples).unwrap();
        let loaded = load_index(&dir.path().join("synthetic")).unwrap();
        assert_eq!(loaded, written);
        assert_eq!(loaded.num_users, 3);
        let r = loaded.find(2, SampleKind::Skilled, 0).unwrap();
        assert_eq!(RawImage::load_png(&r.path).unwrap(), samples[8].image);
        std::fs::write(dir.path().join("synthetic/u0001/junk.png"), b"x").unwrap();
        assert!(matches!(
            load_index(&dir.path().join("synthetic")),
            Err(Error::Parse { .. })
        ));
    }
}
