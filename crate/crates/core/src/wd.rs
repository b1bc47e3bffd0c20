//! Writer-dependent classification: one class-weighted SVM per enrolled
//! user on CNN features, with the positive-class penalty scaled by the
//! negative-to-positive skew.
//!
//! Feature file: magic `SGFV` | version u32 | config hash u64 | count u32 |
//! dim u32 | records of (user u32, kind u8, sample u32, f32 LE x dim).
//!
//! Model file: magic `SGWD` | version u32 | config hash u64 | user u32 |
//! kernel u8 (0 linear, 1 rbf) | c_minus, c_plus, psi, gamma, bias f64 |
//! linear: dim u32, w f64 x dim; rbf: count u32, dim u32, then per support
//! vector a coefficient f64 and f32 LE x dim.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::SampleKind;
use crate::error::{Error, Result};
use crate::io::{read_f32s, read_f64, read_u32, read_u64, read_u8, write_f32s};
use crate::nn::{Mode, Network};
use crate::preprocess::{PreprocessConfig, ProcessedImage};
use crate::svm::{solve_dual, Kernel, SolverConfig};
use crate::training::center_crop_batches;

pub const FEATURE_MAGIC: &[u8; 4] = b"SGFV";
pub const MODEL_MAGIC: &[u8; 4] = b"SGWD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Linear,
    Rbf,
}

impl KernelKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Self::Linear),
            "rbf" => Some(Self::Rbf),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Rbf => "rbf",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WdConfig {
    pub kernel: KernelKind,
    pub c_minus: f64,
    pub gamma: f64,
    pub solver: SolverConfig,
}

impl Default for WdConfig {
    fn default() -> Self {
        WdConfig {
            kernel: KernelKind::Rbf,
            c_minus: 1.0,
            gamma: 2f64.powi(-11),
            solver: SolverConfig::default(),
        }
    }
}

impl WdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_minus > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::Config(
                "wd.c_minus and wd.gamma must be positive".into(),
            ));
        }
        if !(self.solver.tolerance > 0.0) {
            return Err(Error::Config("wd.tolerance must be positive".into()));
        }
        Ok(())
    }

    fn kernel(&self) -> Kernel {
        match self.kernel {
            KernelKind::Linear => Kernel::Linear,
            KernelKind::Rbf => Kernel::Rbf { gamma: self.gamma },
        }
    }
}

/// `psi = N / P` and `C+ = psi C-` for `P` positives and `N` negatives.
pub fn compute_skew(positives: usize, negatives: usize, c_minus: f64) -> Result<(f64, f64)> {
    if positives == 0 || negatives == 0 {
        return Err(Error::Config(format!(
            "skew needs at least one sample per class (P={positives}, N={negatives})"
        )));
    }
    let psi = negatives as f64 / positives as f64;
    Ok((psi, psi * c_minus))
}

#[derive(Clone, Debug, PartialEq)]
pub enum WdParams {
    Linear {
        w: Vec<f64>,
    },
    Rbf {
        gamma: f64,
        support: Vec<Vec<f32>>,
        /// `alpha_i y_i` per support vector.
        coef: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct WdModel {
    pub user: u32,
    pub c_minus: f64,
    pub c_plus: f64,
    pub psi: f64,
    pub bias: f64,
    pub params: WdParams,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

impl WdModel {
    pub fn kernel_kind(&self) -> KernelKind {
        match self.params {
            WdParams::Linear { .. } => KernelKind::Linear,
            WdParams::Rbf { .. } => KernelKind::Rbf,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.params {
            WdParams::Linear { w } => w.len(),
            WdParams::Rbf { support, .. } => support.first().map_or(0, Vec::len),
        }
    }

    /// `w.x + b` or `sum_i alpha_i y_i exp(-gamma |x - s_i|^2) + b`.
    pub fn decision_value(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "feature of dimension {} for a {}-dimensional model",
                x.len(),
                self.dim()
            )));
        }
        let v: f64 = match &self.params {
            WdParams::Linear { w } => w.iter().zip(x).map(|(a, &b)| a * f64::from(b)).sum(),
            WdParams::Rbf {
                gamma,
                support,
                coef,
            } => support
                .iter()
                .zip(coef)
                .map(|(s, c)| {
                    let d2: f64 = s
                        .iter()
                        .zip(x)
                        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                        .sum();
                    c * (-gamma * d2).exp()
                })
                .sum(),
        };
        Ok(v + self.bias)
    }
}

/// Trains one user's SVM: genuine references as positives, other users'
/// genuine signatures as negatives, `C+ = (N / P) C-`.
pub fn train_wd(
    user: u32,
    positives: &[&[f32]],
    negatives: &[&[f32]],
    cfg: &WdConfig,
) -> Result<WdModel> {
    cfg.validate()?;
    let (psi, c_plus) = compute_skew(positives.len(), negatives.len(), cfg.c_minus)?;
    let x: Vec<Vec<f64>> = positives
        .iter()
        .chain(negatives)
        .map(|v| to_f64(v))
        .collect();
    let mut y = vec![1.0; positives.len()];
    y.resize(x.len(), -1.0);
    let mut c = vec![c_plus; positives.len()];
    c.resize(x.len(), cfg.c_minus);

    let sol = solve_dual(&x, &y, &c, cfg.kernel(), &cfg.solver)?;
    let params = match cfg.kernel {
        KernelKind::Linear => {
            let dim = x[0].len();
            let mut w = vec![0.0; dim];
            for ((xi, yi), ai) in x.iter().zip(&y).zip(&sol.alpha) {
                if *ai > 0.0 {
                    for (wd, xd) in w.iter_mut().zip(xi) {
                        *wd += ai * yi * xd;
                    }
                }
            }
            WdParams::Linear { w }
        }
        KernelKind::Rbf => {
            let (support, coef) = positives
                .iter()
                .chain(negatives)
                .zip(y.iter().zip(&sol.alpha))
                .filter(|(_, (_, a))| **a > 0.0)
                .map(|(v, (yi, ai))| (v.to_vec(), ai * yi))
                .unzip();
            WdParams::Rbf {
                gamma: cfg.gamma,
                support,
                coef,
            }
        }
    };
    Ok(WdModel {
        user,
        c_minus: cfg.c_minus,
        c_plus,
        psi,
        bias: sol.bias,
        params,
    })
}

fn check_magic<R: Read>(r: &mut R, magic: &[u8; 4], what: &str) -> Result<u64> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!("not a {what} file")));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("{what} file version {version}")));
    }
    read_u64(r)
}

pub fn write_model<W: Write>(w: &mut W, model: &WdModel, config_hash: u64) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&config_hash.to_le_bytes())?;
    w.write_all(&model.user.to_le_bytes())?;
    let (tag, gamma) = match &model.params {
        WdParams::Linear { .. } => (0u8, 0.0),
        WdParams::Rbf { gamma, .. } => (1u8, *gamma),
    };
    w.write_all(&[tag])?;
    for v in [model.c_minus, model.c_plus, model.psi, gamma, model.bias] {
        w.write_all(&v.to_le_bytes())?;
    }
    match &model.params {
        WdParams::Linear { w: wv } => {
            w.write_all(&(wv.len() as u32).to_le_bytes())?;
            for v in wv {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        WdParams::Rbf { support, coef, .. } => {
            w.write_all(&(support.len() as u32).to_le_bytes())?;
            w.write_all(&(model.dim() as u32).to_le_bytes())?;
            for (s, c) in support.iter().zip(coef) {
                w.write_all(&c.to_le_bytes())?;
                write_f32s(w, s)?;
            }
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<(WdModel, u64)> {
    let hash = check_magic(r, MODEL_MAGIC, "writer-dependent model")?;
    let user = read_u32(r)?;
    let tag = read_u8(r)?;
    let mut h = [0f64; 5];
    for v in &mut h {
        *v = read_f64(r)?;
    }
    let [c_minus, c_plus, psi, gamma, bias] = h;
    let params = match tag {
        0 => {
            let dim = read_u32(r)? as usize;
            let w = (0..dim).map(|_| read_f64(r)).collect::<Result<_>>()?;
            WdParams::Linear { w }
        }
        1 => {
            let count = read_u32(r)? as usize;
            let dim = read_u32(r)? as usize;
            let mut support = Vec::with_capacity(count);
            let mut coef = Vec::with_capacity(count);
            for _ in 0..count {
                coef.push(read_f64(r)?);
                support.push(read_f32s(r, dim)?);
            }
            WdParams::Rbf {
                gamma,
                support,
                coef,
            }
        }
        t => return Err(Error::Format(format!("unknown kernel tag {t}"))),
    };
    Ok((
        WdModel {
            user,
            c_minus,
            c_plus,
            psi,
            bias,
            params,
        },
        hash,
    ))
}

pub fn save_model(path: &Path, model: &WdModel, config_hash: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model, config_hash)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(WdModel, u64)> {
    read_model(&mut BufReader::new(File::open(path)?))
}

/// One embedded signature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub user: u32,
    pub kind: SampleKind,
    pub sample: u32,
    pub values: Vec<f32>,
}

pub fn write_features<W: Write>(
    w: &mut W,
    records: &[FeatureRecord],
    config_hash: u64,
) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.values.len());
    if let Some(bad) = records.iter().find(|r| r.values.len() != dim) {
        return Err(Error::Shape(format!(
            "feature of dimension {} among {dim}-dimensional records",
            bad.values.len()
        )));
    }
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&config_hash.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for r in records {
        w.write_all(&r.user.to_le_bytes())?;
        w.write_all(&[r.kind.code()])?;
        w.write_all(&r.sample.to_le_bytes())?;
        write_f32s(w, &r.values)?;
    }
    Ok(())
}

pub fn read_features<R: Read>(r: &mut R) -> Result<(Vec<FeatureRecord>, u64)> {
    let hash = check_magic(r, FEATURE_MAGIC, "feature")?;
    let count = read_u32(r)? as usize;
    let dim = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let user = read_u32(r)?;
        let code = read_u8(r)?;
        let kind = SampleKind::from_code(code)
            .ok_or_else(|| Error::Format(format!("unknown sample kind {code}")))?;
        let sample = read_u32(r)?;
        let values = read_f32s(r, dim)?;
        out.push(FeatureRecord {
            user,
            kind,
            sample,
            values,
        });
    }
    Ok((out, hash))
}

pub fn save_features(path: &Path, records: &[FeatureRecord], config_hash: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(&mut w, records, config_hash)?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<(Vec<FeatureRecord>, u64)> {
    read_features(&mut BufReader::new(File::open(path)?))
}

/// FC7 activations of the center crops, in inference mode, `batch` images
/// at a time.
pub fn extract_features(
    net: &Network<f32>,
    images: &[ProcessedImage],
    pcfg: &PreprocessConfig,
    batch: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for x in center_crop_batches(images, pcfg, batch) {
        let phi = net.forward(&x?, Mode::Inference)?.phi;
        out.extend((0..phi.batch()).map(|i| phi.sample(i).to_vec()));
    }
    Ok(out)
}
