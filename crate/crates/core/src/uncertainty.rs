//! Monte-Carlo predictive inference with an epistemic/aleatoric split.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Biomarker, Normalizer, TrainingExample};
use crate::model::{Draw, Model};
use crate::mtr::N_TARGETS;
use crate::rng::{derive_seed, stream, substream, Rng};

pub const DEFAULT_Z: f64 = 1.96;
pub const DEFAULT_SAMPLES: usize = 50;

/// One stochastic forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSample {
    pub means: [f64; N_TARGETS],
    pub log_vars: [f64; N_TARGETS],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionWithUncertainty {
    pub mean: [f64; N_TARGETS],
    pub epistemic_var: [f64; N_TARGETS],
    pub aleatoric_var: [f64; N_TARGETS],
    pub n_samples: usize,
}

impl PredictionWithUncertainty {
    pub fn total_var(&self) -> [f64; N_TARGETS] {
        std::array::from_fn(|i| self.epistemic_var[i] + self.aleatoric_var[i])
    }
}

/// Log-variances used when the model has no variance head: the per-target
/// residual variance measured on validation data.
fn fallback_log_vars(model: &Model) -> Result<[f64; N_TARGETS]> {
    model
        .residual_var
        .map(|v| v.map(f64::ln))
        .ok_or(Error::Empty("residual variance estimate"))
}

/// `t` forward passes, each with a fresh weight sample.
pub fn mc_predict(model: &Model, ex: &TrainingExample, t: usize, rng: &mut Rng) -> Result<Vec<McSample>> {
    if t == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let fallback = if model.config.has_variance_head() { None } else { Some(fallback_log_vars(model)?) };
    (0..t)
        .map(|_| {
            let out = model.predict(ex, Draw::Sample(rng))?;
            Ok(McSample { means: out.means, log_vars: fallback.unwrap_or(out.log_vars) })
        })
        .collect()
}

/// Law of total variance over the samples: the unbiased variance of the
/// sampled means is epistemic, the average predicted variance aleatoric.
pub fn decompose(samples: &[McSample]) -> Result<PredictionWithUncertainty> {
    let t = samples.len();
    if t < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: t });
    }
    let n = t as f64;
    let mut mean = [0.0; N_TARGETS];
    let mut epistemic_var = [0.0; N_TARGETS];
    let mut aleatoric_var = [0.0; N_TARGETS];
    for i in 0..N_TARGETS {
        mean[i] = samples.iter().map(|s| s.means[i]).sum::<f64>() / n;
        // Shifted by the first draw so identical draws give exactly zero.
        let k = samples[0].means[i];
        let d: f64 = samples.iter().map(|s| s.means[i] - k).sum();
        let d2: f64 = samples.iter().map(|s| (s.means[i] - k).powi(2)).sum();
        epistemic_var[i] = ((d2 - d * d / n) / (n - 1.0)).max(0.0);
        aleatoric_var[i] = samples.iter().map(|s| s.log_vars[i].exp()).sum::<f64>() / n;
    }
    Ok(PredictionWithUncertainty { mean, epistemic_var, aleatoric_var, n_samples: t })
}

/// `mean ± z·√(epistemic + aleatoric)`, clamped to the normalized range.
pub fn band(p: &PredictionWithUncertainty, z: f64) -> ([f64; N_TARGETS], [f64; N_TARGETS]) {
    let total = p.total_var();
    let lower = std::array::from_fn(|i| (p.mean[i] - z * total[i].sqrt()).clamp(0.0, 1.0));
    let upper = std::array::from_fn(|i| (p.mean[i] + z * total[i].sqrt()).clamp(0.0, 1.0));
    (lower, upper)
}

/// Sampling stream for one patient, independent of evaluation order.
pub fn patient_rng(seed: u64, patient_id: &str) -> Rng {
    substream(derive_seed(seed, stream::PREDICT), patient_id)
}

pub fn predict_example(model: &Model, ex: &TrainingExample, t: usize, seed: u64) -> Result<PredictionWithUncertainty> {
    decompose(&mc_predict(model, ex, t, &mut patient_rng(seed, &ex.patient_id))?)
}

/// Fraction of targets inside the `z` band, per biomarker.
pub fn calibration_check(model: &Model, test: &[TrainingExample], t: usize, z: f64, seed: u64) -> Result<[f64; N_TARGETS]> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut hits = [0usize; N_TARGETS];
    for ex in test {
        let p = predict_example(model, ex, t, seed)?;
        let (lo, hi) = band(&p, z);
        for (i, y) in ex.target.to_array().iter().enumerate() {
            if (lo[i]..=hi[i]).contains(y) {
                hits[i] += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / test.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Normalized,
    Raw,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Normalized => "normalized",
            Unit::Raw => "raw",
        }
    }
}

/// One line of the predictions CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub patient_id: String,
    pub biomarker: String,
    pub mean: f64,
    pub epistemic_var: f64,
    pub aleatoric_var: f64,
    pub lower: f64,
    pub upper: f64,
    pub unit: Unit,
}

/// Normalized and raw-unit rows for every biomarker of one prediction. Raw
/// band endpoints are the denormalized normalized endpoints; raw variances
/// are scaled by the squared slope of the inverse map at the mean.
pub fn prediction_rows(patient_id: &str, p: &PredictionWithUncertainty, z: f64, norm: &Normalizer) -> Vec<PredictionRow> {
    let (lower, upper) = band(p, z);
    let mut rows = Vec::with_capacity(2 * N_TARGETS);
    for unit in [Unit::Normalized, Unit::Raw] {
        for b in Biomarker::ALL {
            let i = b.index();
            let row = match unit {
                Unit::Normalized => PredictionRow {
                    patient_id: patient_id.into(),
                    biomarker: b.display().into(),
                    mean: p.mean[i],
                    epistemic_var: p.epistemic_var[i],
                    aleatoric_var: p.aleatoric_var[i],
                    lower: lower[i],
                    upper: upper[i],
                    unit,
                },
                Unit::Raw => {
                    let s2 = norm.raw_slope(p.mean[i], b).powi(2);
                    PredictionRow {
                        patient_id: patient_id.into(),
                        biomarker: b.display().into(),
                        mean: norm.to_raw(p.mean[i], b),
                        epistemic_var: p.epistemic_var[i] * s2,
                        aleatoric_var: p.aleatoric_var[i] * s2,
                        lower: norm.to_raw(lower[i], b),
                        upper: norm.to_raw(upper[i], b),
                        unit,
                    }
                }
            };
            rows.push(row);
        }
    }
    rows
}

pub fn write_predictions<W: Write>(out: W, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sample(means: [f64; 4], log_vars: [f64; 4]) -> McSample {
        McSample { means, log_vars }
    }

    #[test]
    fn decompose_hand_values() {
        let s = [sample([0.4; 4], [0.0; 4]), sample([0.6; 4], [0.0; 4])];
        let p = decompose(&s).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(p.mean[i], 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(p.epistemic_var[i], 0.02, epsilon = 1e-15);
            assert_eq!(p.aleatoric_var[i], 1.0);
        }
        let same = decompose(&[sample([0.3, 0.1, 0.2, 0.9], [-2.0; 4]); 5]).unwrap();
        assert_eq!(same.epistemic_var, [0.0; 4]);
        assert!(matches!(decompose(&s[..1]), Err(Error::TooFewSamples { needed: 2, got: 1 })));
    }

    #[test]
    fn band_hand_values() {
        let p = PredictionWithUncertainty { mean: [0.5; 4], epistemic_var: [0.004; 4], aleatoric_var: [0.006; 4], n_samples: 2 };
        let (lo, hi) = band(&p, 2.0);
        for i in 0..4 {
            assert_abs_diff_eq!(lo[i], 0.3, epsilon = 1e-12);
            assert_abs_diff_eq!(hi[i], 0.7, epsilon = 1e-12);
        }
        let zero = PredictionWithUncertainty { epistemic_var: [0.0; 4], aleatoric_var: [0.0; 4], ..p };
        assert_eq!(band(&zero, 1.96), ([0.5; 4], [0.5; 4]));
        let mut prev = 0.0;
        for z in [0.0, 0.5, 1.0, 1.96, 3.0] {
            let (lo, hi) = band(&p, z);
            assert!(hi[0] - lo[0] >= prev);
            prev = hi[0] - lo[0];
        }
        let wide = band(&p, 100.0);
        assert_eq!(wide, ([0.0; 4], [1.0; 4]));
    }

    #[test]
    fn raw_rows_map_endpoints() {
        let norm = Normalizer::default();
        let p = PredictionWithUncertainty { mean: [0.5; 4], epistemic_var: [0.0001; 4], aleatoric_var: [0.0003; 4], n_samples: 3 };
        let rows = prediction_rows("P1", &p, 1.96, &norm);
        assert_eq!(rows.len(), 8);
        let raw = &rows[4];
        assert_eq!(raw.unit, Unit::Raw);
        assert_eq!(raw.biomarker, "SysBp");
        // SysBp spans 84..196.
        assert_abs_diff_eq!(raw.mean, 140.0, epsilon = 1e-9);
        assert_abs_diff_eq!(raw.epistemic_var, 0.0001 * 112.0 * 112.0, epsilon = 1e-9);
        assert_abs_diff_eq!(raw.lower, norm.denormalize(rows[0].lower, Biomarker::SysBp).unwrap(), epsilon = 1e-12);

        let mut buf = Vec::new();
        write_predictions(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("patient_id,biomarker,mean,epistemic_var,aleatoric_var,lower,upper,unit\n"));
        assert_eq!(text.lines().count(), 9);
        assert!(text.lines().nth(5).unwrap().ends_with(",raw"));
    }
}
