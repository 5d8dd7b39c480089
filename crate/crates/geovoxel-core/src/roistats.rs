//! ROI aggregation, best-layer selection, paired significance tests, and
//! model-difference maps over per-voxel metric vectors.

use crate::fmath;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(clippy::excessive_precision)]
pub mod special {
    //! Log-gamma, regularized incomplete beta, and the Student-t two-sided
    //! tail probability built on them.

    use crate::fmath;

    /// ln Γ(z) for z > 0, Lanczos approximation (g = 7, 9 terms).
    pub fn ln_gamma(z: f64) -> f64 {
        debug_assert!(z > 0.0);
        const COEFFS: [f64; 8] = [
            676.5203681218851,
            -1259.1392167224028,
            771.32342877765313,
            -176.61502916214059,
            12.507343278686905,
            -0.13857109526572012,
            9.9843695780195716e-6,
            1.5056327351493116e-7,
        ];
        let mut sum = 0.99999999999980993;
        for (i, &c) in COEFFS.iter().enumerate() {
            sum += c / (z + i as f64);
        }
        let t = z + 6.5;
        0.5 * fmath::ln(2.0 * core::f64::consts::PI) + (z - 0.5) * fmath::ln(t) - t
            + fmath::ln(sum)
    }

    /// Regularized incomplete beta I_x(a, b) via Lentz's continued fraction.
    pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
        debug_assert!(a > 0.0 && b > 0.0);
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let ln_front =
            ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * fmath::ln(x) + b * fmath::ln(1.0 - x);
        let front = fmath::exp(ln_front);
        if x < (a + 1.0) / (a + b + 2.0) {
            front * beta_cf(a, b, x) / a
        } else {
            1.0 - front * beta_cf(b, a, 1.0 - x) / b
        }
    }

    fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
        const MAX_ITER: usize = 300;
        const EPS: f64 = 1e-15;
        const FPMIN: f64 = 1e-300;
        let qab = a + b;
        let qap = a + 1.0;
        let qam = a - 1.0;
        let mut c = 1.0;
        let mut d = 1.0 - qab * x / qap;
        if fmath::abs(d) < FPMIN {
            d = FPMIN;
        }
        d = 1.0 / d;
        let mut h = d;
        for m in 1..=MAX_ITER {
            let m = m as f64;
            let m2 = 2.0 * m;
            let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
            d = 1.0 + aa * d;
            if fmath::abs(d) < FPMIN {
                d = FPMIN;
            }
            c = 1.0 + aa / c;
            if fmath::abs(c) < FPMIN {
                c = FPMIN;
            }
            d = 1.0 / d;
            h *= d * c;
            let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
            d = 1.0 + aa * d;
            if fmath::abs(d) < FPMIN {
                d = FPMIN;
            }
            c = 1.0 + aa / c;
            if fmath::abs(c) < FPMIN {
                c = FPMIN;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if fmath::abs(delta - 1.0) < EPS {
                break;
            }
        }
        h
    }

    /// Two-sided tail probability of Student's t with `df` degrees of
    /// freedom: p = I_x(df/2, 1/2) with x = df / (df + t²).
    pub fn student_t_two_sided_p(t: f64, df: usize) -> f64 {
        let nu = df as f64;
        let x = nu / (nu + t * t);
        reg_inc_beta(nu / 2.0, 0.5, x).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StatsError {
    LengthMismatch(String),
    EmptyRoi { roi_id: u32 },
    NoLayers,
    TooFewSubjects,
    DegenerateTest,
    InvalidAtlas(String),
}

impl core::fmt::Display for StatsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            StatsError::LengthMismatch(m) => write!(f, "length mismatch: {m}"),
            StatsError::EmptyRoi { roi_id } => {
                write!(f, "roi {roi_id} has no included voxels")
            }
            StatsError::NoLayers => write!(f, "no layers to select from"),
            StatsError::TooFewSubjects => write!(f, "paired test needs at least two subjects"),
            StatsError::DegenerateTest => {
                write!(f, "paired differences have zero variance")
            }
            StatsError::InvalidAtlas(m) => write!(f, "invalid atlas: {m}"),
        }
    }
}

impl core::error::Error for StatsError {}

/// One subject's noise-corrected R² per (model, layer), with the voxel
/// inclusion mask the metrics were computed under. Metrics must be finite on
/// included voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectResult {
    pub subject_id: String,
    pub included: Vec<bool>,
    corrected_r2: BTreeMap<(String, String), Vec<f64>>,
}

impl SubjectResult {
    pub fn new(subject_id: String, included: Vec<bool>) -> Self {
        SubjectResult {
            subject_id,
            included,
            corrected_r2: BTreeMap::new(),
        }
    }

    pub fn insert_corrected_r2(
        &mut self,
        model: String,
        layer: String,
        values: Vec<f64>,
    ) -> Result<(), StatsError> {
        if values.len() != self.included.len() {
            return Err(StatsError::LengthMismatch(format!(
                "{} metric values for {} voxels",
                values.len(),
                self.included.len()
            )));
        }
        for (v, (&inc, &m)) in self.included.iter().zip(&values).enumerate() {
            if inc && !m.is_finite() {
                return Err(StatsError::LengthMismatch(format!(
                    "non-finite metric on included voxel {v}"
                )));
            }
        }
        self.corrected_r2.insert((model, layer), values);
        Ok(())
    }

    pub fn corrected_r2(&self, model: &str, layer: &str) -> Option<&[f64]> {
        self.corrected_r2
            .get(&(String::from(model), String::from(layer)))
            .map(|v| v.as_slice())
    }
}

/// Voxel labels (0 = unassigned) with a name per nonzero ROI id.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiAtlas {
    pub labels: Vec<u32>,
    pub names: BTreeMap<u32, String>,
}

impl RoiAtlas {
    pub fn new(labels: Vec<u32>, names: BTreeMap<u32, String>) -> Result<Self, StatsError> {
        for &l in &labels {
            if l != 0 && !names.contains_key(&l) {
                return Err(StatsError::InvalidAtlas(format!("label {l} has no name")));
            }
        }
        if names.contains_key(&0) {
            return Err(StatsError::InvalidAtlas(
                "label 0 is reserved for unassigned voxels".into(),
            ));
        }
        Ok(RoiAtlas { labels, names })
    }

    pub fn roi_ids(&self) -> Vec<u32> {
        self.names.keys().copied().collect()
    }

    pub fn name(&self, roi_id: u32) -> Option<&str> {
        self.names.get(&roi_id).map(|s| s.as_str())
    }
}

/// Mean of `metric` over included voxels carrying the given ROI label.
pub fn roi_mean(
    metric: &[f64],
    mask: &[bool],
    atlas: &RoiAtlas,
    roi_id: u32,
) -> Result<f64, StatsError> {
    if metric.len() != mask.len() || metric.len() != atlas.labels.len() {
        return Err(StatsError::LengthMismatch(format!(
            "metric {} / mask {} / atlas {}",
            metric.len(),
            mask.len(),
            atlas.labels.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in 0..metric.len() {
        if mask[v] && atlas.labels[v] == roi_id {
            sum += metric[v];
            count += 1;
        }
    }
    if count == 0 {
        return Err(StatsError::EmptyRoi { roi_id });
    }
    Ok(sum / count as f64)
}

/// Index of the layer with the highest score; exact ties go to the earliest
/// layer in model order.
pub fn best_layer(scores: &[f64]) -> Result<usize, StatsError> {
    if scores.is_empty() {
        return Err(StatsError::NoLayers);
    }
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Paired two-sided Student t-test result.
#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub n: usize,
}

/// Two-sided paired t-test on `a - b` with sample (n-1) standard deviation.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(format!(
            "{} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::TooFewSubjects);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var <= 0.0 {
        return Err(StatsError::DegenerateTest);
    }
    let t = mean / fmath::sqrt(var / n as f64);
    let df = n - 1;
    Ok(TestResult {
        t,
        p: special::student_t_two_sided_p(t, df),
        df,
        n,
    })
}

/// Voxelwise `a - b` on included voxels; excluded voxels carry a quiet NaN.
pub fn difference_map(a: &[f64], b: &[f64], mask: &[bool]) -> Result<Vec<f64>, StatsError> {
    if a.len() != b.len() || a.len() != mask.len() {
        return Err(StatsError::LengthMismatch(format!(
            "a {} / b {} / mask {}",
            a.len(),
            b.len(),
            mask.len()
        )));
    }
    Ok((0..a.len())
        .map(|v| if mask[v] { a[v] - b[v] } else { f64::NAN })
        .collect())
}
