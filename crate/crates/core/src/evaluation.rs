//! Verification metrics: FRR and the FAR variants at a threshold, EER with
//! global and user-specific thresholds, mean per-user AUC and AER.
//!
//! A sample is accepted as genuine iff `score >= threshold`. EER uses only
//! genuine samples and skilled forgeries.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::SampleKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub user: u32,
    pub sample: u32,
    pub kind: SampleKind,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub frr: f64,
    pub far_skilled: f64,
    pub far_random: Option<f64>,
    pub far_simple: Option<f64>,
}

fn check_finite(samples: &[ScoredSample]) -> Result<()> {
    match samples.iter().find(|s| !s.score.is_finite()) {
        Some(s) => Err(Error::Config(format!(
            "non-finite score for user {} sample {}",
            s.user, s.sample
        ))),
        None => Ok(()),
    }
}

fn scores_of(samples: &[ScoredSample], kind: SampleKind) -> Vec<f64> {
    samples
        .iter()
        .filter(|s| s.kind == kind)
        .map(|s| s.score)
        .collect()
}

fn fraction(num: usize, den: usize) -> f64 {
    num as f64 / den as f64
}

/// FRR and the FAR of every forgery kind present, at threshold `t`.
pub fn rates_at_threshold(samples: &[ScoredSample], t: f64) -> Result<Rates> {
    check_finite(samples)?;
    let far = |kind| {
        let s = scores_of(samples, kind);
        (!s.is_empty()).then(|| fraction(s.iter().filter(|&&x| x >= t).count(), s.len()))
    };
    let genuine = scores_of(samples, SampleKind::Genuine);
    if genuine.is_empty() {
        return Err(Error::Empty("no genuine scores".into()));
    }
    let far_skilled =
        far(SampleKind::Skilled).ok_or_else(|| Error::Empty("no skilled-forgery scores".into()))?;
    Ok(Rates {
        frr: fraction(genuine.iter().filter(|&&x| x < t).count(), genuine.len()),
        far_skilled,
        far_random: far(SampleKind::Random),
        far_simple: far(SampleKind::Simple),
    })
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// `(EER, threshold)` over genuine and skilled scores. Every distinct score
/// is a candidate; the winner minimizes `|FRR - FAR|`, then the mean error,
/// then the threshold. EER is the midpoint of the two rates there.
pub fn eer_from_scores(genuine: &[f64], skilled: &[f64]) -> Result<(f64, f64)> {
    if genuine.is_empty() || skilled.is_empty() {
        return Err(Error::Empty(
            "EER needs genuine and skilled-forgery scores".into(),
        ));
    }
    if genuine.iter().chain(skilled).any(|s| !s.is_finite()) {
        return Err(Error::Config("non-finite score".into()));
    }
    let g = sorted(genuine.to_vec());
    let f = sorted(skilled.to_vec());
    let (ng, nf) = (g.len() as u128, f.len() as u128);
    let mut candidates: Vec<f64> = g.iter().chain(&f).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    // Compare in integer units of 1 / (ng * nf) to keep ties exact.
    let mut best: Option<(u128, u128, f64, usize, usize)> = None;
    for &t in &candidates {
        let rejected = g.partition_point(|&x| x < t);
        let accepted = f.len() - f.partition_point(|&x| x < t);
        let a = rejected as u128 * nf;
        let b = accepted as u128 * ng;
        let key = (a.abs_diff(b), a + b);
        if best.is_none_or(|(d, s, _, _, _)| key < (d, s)) {
            best = Some((key.0, key.1, t, rejected, accepted));
        }
    }
    let (_, _, t, rejected, accepted) = best.expect("at least one candidate");
    let eer = (fraction(rejected, g.len()) + fraction(accepted, f.len())) / 2.0;
    Ok((eer, t))
}

pub fn eer_global(samples: &[ScoredSample]) -> Result<(f64, f64)> {
    eer_from_scores(
        &scores_of(samples, SampleKind::Genuine),
        &scores_of(samples, SampleKind::Skilled),
    )
}

fn by_user(samples: &[ScoredSample]) -> BTreeMap<u32, Vec<ScoredSample>> {
    let mut m: BTreeMap<u32, Vec<ScoredSample>> = BTreeMap::new();
    for s in samples {
        m.entry(s.user).or_default().push(*s);
    }
    m
}

/// Mean over users of each user's own EER.
pub fn eer_user_thresholds(samples: &[ScoredSample]) -> Result<f64> {
    let users = by_user(samples);
    if users.is_empty() {
        return Err(Error::Empty("no scores".into()));
    }
    let mut total = 0.0;
    for (u, s) in &users {
        total += eer_global(s)
            .map_err(|e| Error::Empty(format!("user {u}: {e}")))?
            .0;
    }
    Ok(total / users.len() as f64)
}

/// Probability that a genuine score beats a skilled-forgery score, ties ½.
pub fn auc(genuine: &[f64], skilled: &[f64]) -> Result<f64> {
    if genuine.is_empty() || skilled.is_empty() {
        return Err(Error::Empty(
            "AUC needs genuine and skilled-forgery scores".into(),
        ));
    }
    let f = sorted(skilled.to_vec());
    // Twice the Mann-Whitney count keeps ties integral.
    let twice: usize = genuine
        .iter()
        .map(|&x| {
            let below = f.partition_point(|&y| y < x);
            let tied = f.partition_point(|&y| y <= x) - below;
            2 * below + tied
        })
        .sum();
    Ok(twice as f64 / (2 * genuine.len() * f.len()) as f64)
}

pub fn mean_auc(samples: &[ScoredSample]) -> Result<f64> {
    check_finite(samples)?;
    let users = by_user(samples);
    if users.is_empty() {
        return Err(Error::Empty("no scores".into()));
    }
    let mut total = 0.0;
    for (u, s) in &users {
        total += auc(
            &scores_of(s, SampleKind::Genuine),
            &scores_of(s, SampleKind::Skilled),
        )
        .map_err(|e| Error::Empty(format!("user {u}: {e}")))?;
    }
    Ok(total / users.len() as f64)
}

/// `(AER, AER_genuine+skilled)`: the mean of FRR and the available FARs,
/// and the mean of FRR and FAR_skilled.
pub fn aer(rates: &Rates) -> (f64, f64) {
    let all: Vec<f64> = [
        Some(rates.frr),
        rates.far_random,
        rates.far_simple,
        Some(rates.far_skilled),
    ]
    .into_iter()
    .flatten()
    .collect();
    (
        all.iter().sum::<f64>() / all.len() as f64,
        (rates.frr + rates.far_skilled) / 2.0,
    )
}

/// Global threshold for the test users: the EER threshold of the
/// validation scores, or 0 without a validation set.
pub fn pick_global_threshold(validation: Option<&[ScoredSample]>) -> Result<f64> {
    match validation {
        Some(v) => Ok(eer_global(v)?.1),
        None => Ok(0.0),
    }
}

/// `(threshold, FRR, FAR_skilled)` at every distinct score, ascending.
pub fn roc_points(samples: &[ScoredSample]) -> Vec<(f64, f64, f64)> {
    let g = sorted(scores_of(samples, SampleKind::Genuine));
    let f = sorted(scores_of(samples, SampleKind::Skilled));
    if g.is_empty() || f.is_empty() {
        return Vec::new();
    }
    let mut t: Vec<f64> = g.iter().chain(&f).copied().collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t.into_iter()
        .map(|t| {
            let frr = fraction(g.partition_point(|&x| x < t), g.len());
            let far = fraction(f.len() - f.partition_point(|&x| x < t), f.len());
            (t, frr, far)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: u32,
    pub eer: f64,
    pub eer_threshold: f64,
    pub auc: f64,
    pub frr: f64,
    pub far_skilled: f64,
}

/// All rates are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub frr: f64,
    pub far_random: Option<f64>,
    pub far_simple: Option<f64>,
    pub far_skilled: f64,
    pub eer_global: f64,
    pub eer_global_threshold: f64,
    pub eer_user: f64,
    pub mean_auc: f64,
    pub aer: f64,
    pub aer_genuine_skilled: f64,
    pub per_user: Vec<UserMetrics>,
}

pub fn evaluate(samples: &[ScoredSample], threshold: f64) -> Result<EvalReport> {
    let rates = rates_at_threshold(samples, threshold)?;
    let (eer_global, eer_global_threshold) = eer_global(samples)?;
    let mut per_user = Vec::new();
    for (user, s) in by_user(samples) {
        let (eer, eer_threshold) = eer_global_for(user, &s)?;
        let r = rates_at_threshold(&s, threshold)?;
        per_user.push(UserMetrics {
            user,
            eer,
            eer_threshold,
            auc: auc(
                &scores_of(&s, SampleKind::Genuine),
                &scores_of(&s, SampleKind::Skilled),
            )?,
            frr: r.frr,
            far_skilled: r.far_skilled,
        });
    }
    let n = per_user.len() as f64;
    let (aer, aer_genuine_skilled) = aer(&rates);
    Ok(EvalReport {
        threshold,
        frr: rates.frr,
        far_random: rates.far_random,
        far_simple: rates.far_simple,
        far_skilled: rates.far_skilled,
        eer_global,
        eer_global_threshold,
        eer_user: per_user.iter().map(|u| u.eer).sum::<f64>() / n,
        mean_auc: per_user.iter().map(|u| u.auc).sum::<f64>() / n,
        aer,
        aer_genuine_skilled,
        per_user,
    })
}

fn eer_global_for(user: u32, s: &[ScoredSample]) -> Result<(f64, f64)> {
    eer_global(s).map_err(|e| Error::Empty(format!("user {user}: {e}")))
}

/// Rounds a fraction to a percentage with two decimals.
pub fn percent(x: f64) -> f64 {
    (x * 10000.0).round() / 100.0
}

/// Headline metrics of a report, as percentages with two decimals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentSummary {
    pub threshold: f64,
    pub frr: f64,
    pub far_random: Option<f64>,
    pub far_simple: Option<f64>,
    pub far_skilled: f64,
    pub eer_global: f64,
    pub eer_user: f64,
    pub mean_auc: f64,
    pub aer: f64,
    pub aer_genuine_skilled: f64,
}

impl EvalReport {
    pub fn percentages(&self) -> PercentSummary {
        PercentSummary {
            threshold: self.threshold,
            frr: percent(self.frr),
            far_random: self.far_random.map(percent),
            far_simple: self.far_simple.map(percent),
            far_skilled: percent(self.far_skilled),
            eer_global: percent(self.eer_global),
            eer_user: percent(self.eer_user),
            mean_auc: percent(self.mean_auc),
            aer: percent(self.aer),
            aer_genuine_skilled: percent(self.aer_genuine_skilled),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ReportJson {
    percent: PercentSummary,
    raw: EvalReport,
}

pub fn report_to_json(report: &EvalReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ReportJson {
        percent: report.percentages(),
        raw: report.clone(),
    })?)
}

pub fn report_from_json(text: &str) -> Result<EvalReport> {
    Ok(serde_json::from_str::<ReportJson>(text)?.raw)
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    user: u32,
    sample: u32,
    kind: String,
    score: f64,
}

/// CSV with header `user,sample,kind,score`, preceded by a
/// `# config_hash=<hex>` line when `config_hash` is given.
pub fn write_scores<W: Write>(
    mut w: W,
    samples: &[ScoredSample],
    config_hash: Option<u64>,
) -> Result<()> {
    if let Some(h) = config_hash {
        writeln!(w, "{HASH_PREFIX}{h:016x}")?;
    }
    let mut csv = csv::Writer::from_writer(w);
    for s in samples {
        csv.serialize(ScoreRow {
            user: s.user,
            sample: s.sample,
            kind: s.kind.name().to_string(),
            score: s.score,
        })
        .map_err(csv_error)?;
    }
    csv.flush()?;
    Ok(())
}

const HASH_PREFIX: &str = "# config_hash=";

/// Reads a scores CSV and its optional config hash line.
pub fn read_scores<R: Read>(mut r: R) -> Result<(Vec<ScoredSample>, Option<u64>)> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let (hash, body) = match text.strip_prefix(HASH_PREFIX) {
        Some(rest) => {
            let (line, body) = rest.split_once('\n').unwrap_or((rest, ""));
            let h = u64::from_str_radix(line.trim(), 16)
                .map_err(|_| Error::Format(format!("bad config hash `{line}`")))?;
            (Some(h), body)
        }
        None => (None, text.as_str()),
    };
    let mut csv = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for row in csv.deserialize::<ScoreRow>() {
        let row = row.map_err(csv_error)?;
        let kind = SampleKind::parse(&row.kind)
            .ok_or_else(|| Error::Format(format!("unknown sample kind `{}`", row.kind)))?;
        out.push(ScoredSample {
            user: row.user,
            sample: row.sample,
            kind,
            score: row.score,
        });
    }
    check_finite(&out)?;
    Ok((out, hash))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("scores csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(user: u32, genuine: &[f64], skilled: &[f64]) -> Vec<ScoredSample> {
        let g = genuine.iter().map(|&s| (SampleKind::Genuine, s));
        let f = skilled.iter().map(|&s| (SampleKind::Skilled, s));
        g.chain(f)
            .enumerate()
            .map(|(i, (kind, score))| ScoredSample {
                user,
                sample: i as u32,
                kind,
                score,
            })
            .collect()
    }

    #[test]
    fn rates_examples() {
        let s = scored(0, &[0.9, 0.8], &[0.1, 0.85]);
        let r = rates_at_threshold(&s, 0.82).unwrap();
        assert_eq!((r.frr, r.far_skilled), (0.5, 0.5));
        assert_eq!(r.far_random, None);
        let low = rates_at_threshold(&s, -1.0).unwrap();
        assert_eq!((low.frr, low.far_skilled), (0.0, 1.0));
        let high = rates_at_threshold(&s, 2.0).unwrap();
        assert_eq!((high.frr, high.far_skilled), (1.0, 0.0));
        assert!(rates_at_threshold(&scored(0, &[1.0], &[]), 0.0).is_err());
    }

    #[test]
    fn eer_examples() {
        assert_eq!(
            eer_global(&scored(0, &[0.9, 0.8], &[0.1, 0.2])).unwrap().0,
            0.0
        );
        // t=0.75: FRR 1/3, FAR 1/3.
        let (eer, t) = eer_global(&scored(0, &[0.9, 0.8, 0.7], &[0.75, 0.2, 0.1])).unwrap();
        assert!((eer - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(t, 0.75);
        // Inverted: only t = 0.3 balances the rates, rejecting every genuine
        // sample and accepting every forgery.
        let (eer, t) = eer_global(&scored(0, &[0.1, 0.2], &[0.3, 0.4])).unwrap();
        assert_eq!((eer, t), (1.0, 0.3));
    }

    #[test]
    fn user_thresholds_and_auc_examples() {
        let mut s = scored(0, &[0.9, 0.8], &[0.1, 0.2]);
        s.extend(scored(1, &[5.0, 6.0], &[3.0, 4.0]));
        assert_eq!(eer_user_thresholds(&s).unwrap(), 0.0);
        assert!(eer_global(&s).unwrap().0 > 0.0);
        assert_eq!(mean_auc(&s).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
        assert_eq!(auc(&[1.0, 1.0], &[1.0]).unwrap(), 0.5);
    }

    #[test]
    fn per_user_eer_can_exceed_pooled_eer() {
        // User 0 sits at 1/2, user 1 at 1; pooled, t = 1 gives FRR 2/3 and
        // FAR 1/2, so uneven per-user counts let the pooled point win.
        let mut s = scored(0, &[0.0, 0.0], &[0.0]);
        s.extend(scored(1, &[1.0], &[2.0]));
        assert_eq!(eer_user_thresholds(&s).unwrap(), 0.75);
        let (eer, t) = eer_global(&s).unwrap();
        assert_eq!(t, 1.0);
        assert!((eer - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn aer_examples() {
        let r = Rates {
            frr: 4.63,
            far_random: Some(0.0),
            far_simple: Some(0.35),
            far_skilled: 7.17,
        };
        let (a, gs) = aer(&r);
        assert!(
            (a - 3.04).abs() < 0.01 && (gs - 5.90).abs() < 0.01,
            "{a} {gs}"
        );
        let r = Rates {
            frr: 1.0,
            far_random: Some(2.0),
            far_simple: Some(3.0),
            far_skilled: 4.0,
        };
        assert_eq!(aer(&r), (2.5, 2.5));
    }

    #[test]
    fn validation_threshold() {
        let v = scored(0, &[0.9, 0.8, 0.7], &[0.75, 0.2, 0.1]);
        assert_eq!(
            pick_global_threshold(Some(&v)).unwrap(),
            eer_global(&v).unwrap().1
        );
        assert_eq!(pick_global_threshold(None).unwrap(), 0.0);
    }

    #[test]
    fn report_and_scores_round_trip() {
        let mut s = scored(0, &[0.9, 0.8, 0.3], &[0.1, 0.85]);
        s.extend(scored(1, &[0.4, 0.7], &[0.2, 0.5]));
        s.push(ScoredSample {
            user: 1,
            sample: 9,
            kind: SampleKind::Random,
            score: -0.3,
        });
        let report = evaluate(&s, 0.5).unwrap();
        assert_eq!(report.per_user.len(), 2);
        assert_eq!(report.far_random, Some(0.0));
        let json = report_to_json(&report).unwrap();
        assert_eq!(report_from_json(&json).unwrap(), report);
        let mut buf = Vec::new();
        write_scores(&mut buf, &s, None).unwrap();
        assert!(buf.starts_with(b"user,sample,kind,score\n"));
        assert_eq!(read_scores(buf.as_slice()).unwrap(), (s.clone(), None));
        let mut buf = Vec::new();
        write_scores(&mut buf, &s, Some(0xabc)).unwrap();
        assert!(buf.starts_with(b"# config_hash=0000000000000abc\nuser,"));
        assert_eq!(read_scores(buf.as_slice()).unwrap(), (s, Some(0xabc)));
        assert_eq!(percent(0.046_349), 4.63);
    }
}
