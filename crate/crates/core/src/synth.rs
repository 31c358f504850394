//! Reproducible synthetic cohorts with correlated targets, heteroscedastic
//! noise and a post-onset regime shift.
//!
//! Each patient carries a latent linear trajectory per biomarker (random
//! intercept plus random drift, in normalized units). A visit observes
//! `latent + noise_std ⊙ (L·z)` where `L` is the Cholesky factor of the
//! configured correlation matrix and
//! `noise_std = base_std + hetero_slope · latent`.

use std::io::Write;

use chrono::{Duration, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::{Binomial, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    default_onset, Biomarker, BiomarkerVector, Demographics, Gender, IncomeClass, Normalizer, PatientRecord, Race,
    Visit,
};
use crate::rng::{substream, stream, Rng};

pub type Matrix4 = [[f64; 4]; 4];

const MAX_RESAMPLE: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub visits_min: usize,
    pub visits_max: usize,
    /// Success probability of the geometric visit-count tail.
    pub visit_p: f64,
    /// Probability that a visit beyond the first pre/post pair is post-onset.
    pub post_fraction: f64,
    pub onset: NaiveDate,
    pub correlation: Matrix4,
    /// Population mean level per biomarker (normalized units).
    pub population_mean: [f64; 4],
    /// Between-patient std of the intercept (normalized units).
    pub intercept_std: f64,
    /// Between-patient std of the yearly drift (normalized units per year).
    pub drift_std: f64,
    pub base_std: f64,
    pub hetero_slope: f64,
    /// Post-onset mean offset per biomarker (normalized units).
    pub shift: [f64; 4],
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 304,
            visits_min: 2,
            visits_max: 30,
            visit_p: 0.1,
            post_fraction: 0.3,
            onset: default_onset(),
            correlation: [
                [1.0, 0.3, 0.2, 0.2],
                [0.3, 1.0, 0.4, 0.2],
                [0.2, 0.4, 1.0, 0.3],
                [0.2, 0.2, 0.3, 1.0],
            ],
            population_mean: [0.41, 0.18, 0.30, 0.25],
            intercept_std: 0.07,
            drift_std: 0.02,
            base_std: 0.02,
            hetero_slope: 0.08,
            shift: [0.03, 0.02, 0.04, -0.02],
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Config("synth.n_patients must be positive".into()));
        }
        if self.visits_min < 2 || self.visits_min > self.visits_max {
            return Err(Error::Config("synth visit bounds need 2 <= min <= max".into()));
        }
        if !(self.visit_p > 0.0 && self.visit_p <= 1.0) || !(0.0..=1.0).contains(&self.post_fraction) {
            return Err(Error::Config("synth probabilities must lie in (0, 1]".into()));
        }
        if self.hetero_slope < 0.0 || self.base_std < 0.0 || self.intercept_std < 0.0 || self.drift_std < 0.0 {
            return Err(Error::Config("synth standard deviations must be non-negative".into()));
        }
        cholesky_psd(&self.correlation).map(|_| ())
    }
}

/// Lower-triangular `L` with `L·Lᵀ = c`, for symmetric unit-diagonal PSD `c`.
pub fn cholesky_psd(c: &Matrix4) -> Result<Matrix4> {
    const TOL: f64 = 1e-10;
    for i in 0..4 {
        if (c[i][i] - 1.0).abs() > TOL {
            return Err(Error::Config("correlation diagonal must be 1".into()));
        }
        for j in 0..i {
            if (c[i][j] - c[j][i]).abs() > TOL {
                return Err(Error::Config("correlation matrix must be symmetric".into()));
            }
        }
    }
    let mut l = [[0.0; 4]; 4];
    for j in 0..4 {
        let d = c[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if d < -TOL {
            return Err(Error::NotPositiveSemiDefinite);
        }
        let pivot = d.max(0.0).sqrt();
        l[j][j] = pivot;
        for i in j + 1..4 {
            let s = c[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if pivot > TOL {
                l[i][j] = s / pivot;
            } else if s.abs() > 1e-8 {
                return Err(Error::NotPositiveSemiDefinite);
            }
        }
    }
    Ok(l)
}

/// `chol · eps`.
pub fn correlate(chol: &Matrix4, eps: [f64; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (i, row) in chol.iter().enumerate() {
        out[i] = row.iter().zip(eps).map(|(a, b)| a * b).sum();
    }
    out
}

pub fn sample_correlated_noise<R: rand::Rng + ?Sized>(rng: &mut R, chol: &Matrix4) -> [f64; 4] {
    let eps = [0; 4].map(|_| rng.sample::<f64, _>(StandardNormal));
    correlate(chol, eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitTruth {
    pub date: NaiveDate,
    pub latent_mean: [f64; 4],
    pub noise_std: [f64; 4],
    /// Observed values in normalized units.
    pub observed: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub visits: Vec<VisitTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub patients: Vec<PatientTruth>,
    /// Visits whose noise had to be clamped after exhausting resamples.
    pub clamped: usize,
}

impl GroundTruth {
    pub fn patient(&self, id: &str) -> Option<&PatientTruth> {
        self.patients.iter().find(|p| p.patient_id == id)
    }
}

fn in_unit_range(v: &[f64; 4]) -> bool {
    v.iter().all(|&x| x > 0.0 && x <= 1.0)
}

fn sample_demographics(rng: &mut Rng) -> Demographics {
    let gender = WeightedIndex::new([61.5, 38.5]).expect("weights");
    let race = WeightedIndex::new([88.2, 7.2, 4.6, 0.0]).expect("weights");
    let income = WeightedIndex::new([24.3, 36.8, 38.2, 0.7]).expect("weights");
    Demographics {
        gender: Gender::ALL[gender.sample(rng)],
        race: Race::ALL[race.sample(rng)],
        income_class: IncomeClass::ALL[income.sample(rng)],
        age: rng.random_range(45..=96),
    }
}

fn sample_dates(rng: &mut Rng, onset: NaiveDate, n: usize, pre: bool) -> Vec<NaiveDate> {
    // Pre-onset visits fall in the two years before onset (minus a gap);
    // pandemic-era visits between three and fifteen months after it.
    let (lo, hi) = if pre { (-790, -60) } else { (90, 480) };
    let mut days: Vec<i64> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
    days.sort_unstable();
    days.into_iter().map(|d| onset + Duration::days(d)).collect()
}

fn years_since(onset: NaiveDate, date: NaiveDate) -> f64 {
    (date - onset).num_days() as f64 / 365.25
}

/// Generates `config.n_patients` patients and their latent ground truth.
pub fn generate(config: &GeneratorConfig) -> Result<(Vec<PatientRecord>, GroundTruth)> {
    config.validate()?;
    let chol = cholesky_psd(&config.correlation)?;
    let norm = Normalizer::default();
    let mut rng = substream(config.seed, stream::DATA);
    let visit_tail = Geometric::new(config.visit_p).map_err(|e| Error::Config(e.to_string()))?;

    let mut records = Vec::with_capacity(config.n_patients);
    let mut truth = GroundTruth { patients: Vec::with_capacity(config.n_patients), clamped: 0 };

    for idx in 0..config.n_patients {
        let patient_id = format!("P{idx:05}");
        let demographics = sample_demographics(&mut rng);

        let n_visits = loop {
            let n = config.visits_min + visit_tail.sample(&mut rng) as usize;
            if n <= config.visits_max {
                break n;
            }
        };
        let extra = (n_visits - 2) as u64;
        let n_post = 1 + Binomial::new(extra, config.post_fraction)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(&mut rng) as usize;
        let n_pre = n_visits - n_post;

        let intercept = resample_in_range(&mut rng, &chol, |noise| {
            let mut v = [0.0; 4];
            for b in 0..4 {
                v[b] = config.population_mean[b] + config.intercept_std * noise[b];
            }
            v
        })
        .unwrap_or(config.population_mean);
        let drift_noise = sample_correlated_noise(&mut rng, &chol);

        let mut dates = sample_dates(&mut rng, config.onset, n_pre, true);
        dates.extend(sample_dates(&mut rng, config.onset, n_post, false));

        let mut visits = Vec::with_capacity(n_visits);
        let mut visit_truth = Vec::with_capacity(n_visits);
        for date in dates {
            let t = years_since(config.onset, date);
            let post = date >= config.onset;
            let mut latent = [0.0; 4];
            let mut noise_std = [0.0; 4];
            for b in 0..4 {
                latent[b] = intercept[b] + config.drift_std * drift_noise[b] * t + if post { config.shift[b] } else { 0.0 };
                noise_std[b] = config.base_std + config.hetero_slope * latent[b];
            }
            let observed = match resample_in_range(&mut rng, &chol, |noise| {
                let mut v = [0.0; 4];
                for b in 0..4 {
                    v[b] = latent[b] + noise_std[b] * noise[b];
                }
                v
            }) {
                Some(v) => v,
                None => {
                    truth.clamped += 1;
                    latent.map(|x| x.clamp(1e-6, 1.0))
                }
            };
            let raw = norm.denormalize_vector(&BiomarkerVector::from_array(observed))?;
            visits.push(Visit { date, biomarkers: raw });
            visit_truth.push(VisitTruth { date, latent_mean: latent, noise_std, observed });
        }

        records.push(PatientRecord { patient_id: patient_id.clone(), demographics, visits });
        truth.patients.push(PatientTruth { patient_id, visits: visit_truth });
    }
    Ok((records, truth))
}

fn resample_in_range(rng: &mut Rng, chol: &Matrix4, build: impl Fn([f64; 4]) -> [f64; 4]) -> Option<[f64; 4]> {
    (0..MAX_RESAMPLE).find_map(|_| {
        let v = build(sample_correlated_noise(rng, chol));
        in_unit_range(&v).then_some(v)
    })
}

/// Writes the ground-truth sidecar: one row per visit and biomarker, values
/// in normalized units.
pub fn write_ground_truth<W: Write>(out: W, truth: &GroundTruth) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["patient_id", "visit_date", "biomarker", "latent_mean", "noise_std"])?;
    for p in &truth.patients {
        for v in &p.visits {
            for b in Biomarker::ALL {
                w.write_record([
                    p.patient_id.clone(),
                    v.date.format("%Y-%m-%d").to_string(),
                    b.column().to_string(),
                    v.latent_mean[b.index()].to_string(),
                    v.noise_std[b.index()].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{filter_plausible, write_cohort};
    use rand::SeedableRng;

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    fn all_visits(truth: &GroundTruth) -> Vec<&VisitTruth> {
        truth.patients.iter().flat_map(|p| &p.visits).collect()
    }

    #[test]
    fn cholesky_reconstructs() {
        let c = GeneratorConfig::default().correlation;
        let l = cholesky_psd(&c).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let v: f64 = (0..4).map(|k| l[i][k] * l[j][k]).sum();
                assert!((v - c[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_accepts_singular_psd_and_rejects_indefinite() {
        let mut c = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                c[i][j] = if i == j { 1.0 } else { 0.0 };
            }
        }
        c[0][1] = 1.0;
        c[1][0] = 1.0;
        assert!(cholesky_psd(&c).is_ok());

        c[0][1] = 0.9;
        c[1][0] = 0.9;
        c[0][2] = 0.9;
        c[2][0] = 0.9;
        c[1][2] = -0.9;
        c[2][1] = -0.9;
        assert!(matches!(cholesky_psd(&c), Err(Error::NotPositiveSemiDefinite)));
        let cfg = GeneratorConfig { correlation: c, ..Default::default() };
        assert!(matches!(generate(&cfg), Err(Error::NotPositiveSemiDefinite)));
    }

    #[test]
    fn zero_eps_gives_zero_noise() {
        let l = cholesky_psd(&GeneratorConfig::default().correlation).unwrap();
        assert_eq!(correlate(&l, [0.0; 4]), [0.0; 4]);
    }

    #[test]
    fn identity_noise_is_uncorrelated() {
        let mut id = [[0.0; 4]; 4];
        for (i, row) in id.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let mut rng = Rng::seed_from_u64(1);
        let draws: Vec<[f64; 4]> = (0..10_000).map(|_| sample_correlated_noise(&mut rng, &id)).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                let xi: Vec<f64> = draws.iter().map(|d| d[i]).collect();
                let xj: Vec<f64> = draws.iter().map(|d| d[j]).collect();
                assert!(pearson(&xi, &xj).abs() < 0.05);
            }
        }
    }

    #[test]
    fn noise_covariance_matches_configuration() {
        let c = GeneratorConfig::default().correlation;
        let l = cholesky_psd(&c).unwrap();
        let mut rng = Rng::seed_from_u64(2);
        let n = 100_000;
        let mut cov = [[0.0; 4]; 4];
        for _ in 0..n {
            let d = sample_correlated_noise(&mut rng, &l);
            for i in 0..4 {
                for j in 0..4 {
                    cov[i][j] += d[i] * d[j] / n as f64;
                }
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                assert!((cov[i][j] - c[i][j]).abs() < 0.03, "{i},{j}: {}", cov[i][j]);
            }
        }
    }

    #[test]
    fn deterministic_csv() {
        let cfg = GeneratorConfig { n_patients: 40, seed: 7, ..Default::default() };
        let render = || {
            let (cohort, truth) = generate(&cfg).unwrap();
            let (mut a, mut b) = (Vec::new(), Vec::new());
            write_cohort(&mut a, &cohort).unwrap();
            write_ground_truth(&mut b, &truth).unwrap();
            (a, b)
        };
        assert_eq!(render(), render());
    }

    #[test]
    fn generated_cohort_survives_filtering() {
        let cfg = GeneratorConfig { n_patients: 300, seed: 3, ..Default::default() };
        let (cohort, truth) = generate(&cfg).unwrap();
        for p in &cohort {
            assert!(p.visits.len() >= 2 && p.visits.len() <= 30);
            assert!(p.visits.iter().any(|v| v.date < cfg.onset));
            assert!(p.visits.iter().any(|v| v.date >= cfg.onset));
        }
        let (kept, dropped) = filter_plausible(cohort.clone(), cfg.onset);
        assert_eq!(dropped, 0);
        assert_eq!(kept, cohort);
        for v in all_visits(&truth) {
            for b in 0..4 {
                let expected = cfg.base_std + cfg.hetero_slope * v.latent_mean[b];
                assert!((v.noise_std[b] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hba1c_bmi_correlation() {
        let mut correlation = GeneratorConfig::default().correlation;
        correlation[1][2] = 0.6;
        correlation[2][1] = 0.6;
        let cfg = GeneratorConfig { n_patients: 1500, correlation, seed: 5, ..Default::default() };
        let (cohort, _) = generate(&cfg).unwrap();
        let visits: Vec<_> = cohort.iter().flat_map(|p| &p.visits).collect();
        assert!(visits.len() >= 10_000, "{}", visits.len());
        let bmi: Vec<f64> = visits.iter().map(|v| v.biomarkers.bmi).collect();
        let a1c: Vec<f64> = visits.iter().map(|v| v.biomarkers.hba1c).collect();
        let r = pearson(&a1c, &bmi);
        assert!((0.5..=0.7).contains(&r), "r = {r}");
    }

    fn residual_level_slope(cfg: &GeneratorConfig) -> (f64, Vec<f64>) {
        let (_, truth) = generate(cfg).unwrap();
        let mut level = Vec::new();
        let mut resid = Vec::new();
        for v in all_visits(&truth) {
            for b in 0..4 {
                level.push(v.latent_mean[b]);
                resid.push(v.observed[b] - v.latent_mean[b]);
            }
        }
        let n = level.len() as f64;
        let abs: Vec<f64> = resid.iter().map(|r| r.abs()).collect();
        let ml = level.iter().sum::<f64>() / n;
        let ma = abs.iter().sum::<f64>() / n;
        let slope = level.iter().zip(&abs).map(|(l, a)| (l - ml) * (a - ma)).sum::<f64>()
            / level.iter().map(|l| (l - ml).powi(2)).sum::<f64>();

        // Residual std in 5 equal-count level bins.
        let mut idx: Vec<usize> = (0..level.len()).collect();
        idx.sort_by(|&a, &b| level[a].total_cmp(&level[b]));
        let bins = idx
            .chunks(idx.len().div_ceil(5))
            .map(|c| (c.iter().map(|&i| resid[i].powi(2)).sum::<f64>() / c.len() as f64).sqrt())
            .collect();
        (slope, bins)
    }

    #[test]
    fn homoscedastic_when_slope_zero() {
        let cfg = GeneratorConfig { n_patients: 1200, hetero_slope: 0.0, base_std: 0.04, seed: 8, ..Default::default() };
        let (slope, _) = residual_level_slope(&cfg);
        assert!(slope.abs() < 0.02, "slope = {slope}");
    }

    #[test]
    fn heteroscedastic_bins_increase() {
        let cfg = GeneratorConfig { n_patients: 1200, seed: 9, ..Default::default() };
        let (slope, bins) = residual_level_slope(&cfg);
        assert!(slope > 0.0);
        assert!(bins.windows(2).all(|w| w[1] > w[0]), "{bins:?}");
    }

    #[test]
    fn post_onset_shift() {
        let cfg = GeneratorConfig { n_patients: 1500, seed: 10, ..Default::default() };
        let (_, truth) = generate(&cfg).unwrap();
        let mut sums = [[0.0; 4]; 2];
        let mut counts = [0usize; 2];
        for v in all_visits(&truth) {
            let seg = usize::from(v.date >= cfg.onset);
            counts[seg] += 1;
            for b in 0..4 {
                sums[seg][b] += v.observed[b];
            }
        }
        assert!(counts[0] + counts[1] >= 10_000);
        for b in 0..4 {
            let diff = sums[1][b] / counts[1] as f64 - sums[0][b] / counts[0] as f64;
            assert!((diff - cfg.shift[b]).abs() < 0.02, "{b}: {diff}");
        }
    }
}
