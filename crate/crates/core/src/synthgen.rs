//! Synthetic dataset generator with planted ground truth.
//!
//! Critical electrodes of a subject share a 70-150 Hz latent burst source
//! that switches on per trial, so amplitude, NMF-prototype and connectivity
//! features all carry signal; they also sit in a designated language-region
//! subset. A configurable slice of non-critical electrodes forms a second,
//! independent coupled cluster with the same burst statistics but
//! non-language anatomy, which makes anatomy informative beyond the trial
//! score distribution. Background noise is 1/f-shaped, with a common-mode
//! component the CAR stage removes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    write_dataset, Dataset, Electrode, ElectrodeId, ElectrodeLabel, EsmEvent, EsmOutcome,
    Recording, Subject, SubjectId, Task, TrialEvent,
};
use crate::error::{Error, Result};
use crate::seed;
use crate::signal::HIGH_GAMMA_BAND;

/// Regions treated as language cortex when planting anatomy.
pub const LANGUAGE_REGIONS: [usize; 5] = [2, 7, 11, 15, 20];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "d_subjects")]
    pub n_subjects: usize,
    #[serde(default = "d_electrodes")]
    pub electrodes_per_subject: usize,
    #[serde(default = "d_critical_fraction")]
    pub critical_fraction: f64,
    /// Trials for a once-presented task; AR/WR/PN run twice this count.
    #[serde(default = "d_trials_per_task")]
    pub trials_per_task: usize,
    #[serde(default = "d_tasks")]
    pub tasks: Vec<Task>,
    #[serde(default = "d_sample_rate")]
    pub sample_rate: f64,
    /// Burst amplitude; 0 plants no signal at all.
    #[serde(default = "d_effect_size")]
    pub effect_size: f64,
    #[serde(default = "d_noise_std")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    /// Probability a non-critical electrode sits in a language region.
    #[serde(default = "d_language_rate")]
    pub language_region_rate: f64,
    /// Per-trial probability that a burst-capable electrode is active.
    #[serde(default = "d_burst_prob")]
    pub burst_prob: f64,
    /// Fraction of tested non-criticals in the coupled decoy cluster.
    #[serde(default = "d_coupled_fraction")]
    pub coupled_fraction: f64,
    /// Coupled-cluster burst amplitude relative to `effect_size`.
    #[serde(default = "d_coupled_gain")]
    pub coupled_gain: f64,
    #[serde(default = "d_untested_fraction")]
    pub untested_fraction: f64,
    #[serde(default)]
    pub invalid_fraction: f64,
}

fn d_subjects() -> usize {
    8
}
fn d_electrodes() -> usize {
    64
}
fn d_critical_fraction() -> f64 {
    0.17
}
fn d_trials_per_task() -> usize {
    2
}
fn d_tasks() -> Vec<Task> {
    Task::ALL.to_vec()
}
fn d_sample_rate() -> f64 {
    512.0
}
fn d_effect_size() -> f64 {
    1.0
}
fn d_noise_std() -> f64 {
    1.0
}
fn d_language_rate() -> f64 {
    0.35
}
fn d_burst_prob() -> f64 {
    0.65
}
fn d_coupled_fraction() -> f64 {
    0.2
}
fn d_coupled_gain() -> f64 {
    0.9
}
fn d_untested_fraction() -> f64 {
    0.05
}

impl Default for SynthConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::Config("need at least one subject".into()));
        }
        if !(0.0 < self.critical_fraction && self.critical_fraction < 1.0) {
            return Err(Error::Config(format!(
                "critical fraction {} outside (0, 1)",
                self.critical_fraction
            )));
        }
        if self.effect_size < 0.0 {
            return Err(Error::Config("effect size must be >= 0".into()));
        }
        if self.noise_std <= 0.0 {
            return Err(Error::Config("noise std must be positive".into()));
        }
        if self.sample_rate <= 0.0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if self.trials_per_task == 0 {
            return Err(Error::Config("need at least one trial per task".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("task list is empty".into()));
        }
        let mut tasks = self.tasks.clone();
        tasks.sort_unstable();
        tasks.dedup();
        if tasks.len() != self.tasks.len() {
            return Err(Error::Config("duplicate task in task list".into()));
        }
        for (name, v) in [
            ("language_region_rate", self.language_region_rate),
            ("burst_prob", self.burst_prob),
            ("coupled_fraction", self.coupled_fraction),
            ("untested_fraction", self.untested_fraction),
            ("invalid_fraction", self.invalid_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        let n_critical = (self.critical_fraction * self.electrodes_per_subject as f64).round();
        if n_critical < 2.0 {
            return Err(Error::Config(format!(
                "layout plants {n_critical} critical electrodes per subject; \
                 stimulation pairs need at least 2"
            )));
        }
        Ok(())
    }
}

/// A generated dataset plus the planted truth for oracle checks.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub dataset: Dataset,
    /// Per subject (same order as `dataset.subjects`): planted label of
    /// every valid electrode.
    pub planted: Vec<BTreeMap<ElectrodeId, ElectrodeLabel>>,
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Critical,
    Coupled,
    Plain,
}

/// 1/f-shaped Gaussian noise with unit standard deviation.
fn one_over_f_noise(t: usize, rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut spectrum = vec![Complex64::new(0.0, 0.0); t];
    for (k, s) in spectrum.iter_mut().enumerate().take(t / 2 + 1).skip(1) {
        let amp = 1.0 / (k as f64).sqrt();
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *s = Complex64::new(re * amp, im * amp);
    }
    for k in 1..t.div_ceil(2) {
        spectrum[t - k] = spectrum[k].conj();
    }
    if t % 2 == 0 && t >= 2 {
        spectrum[t / 2] = Complex64::new(spectrum[t / 2].re, 0.0);
    }
    let ifft = planner.plan_fft_inverse(t);
    ifft.process(&mut spectrum);
    normalize_unit_std(spectrum.iter().map(|c| c.re).collect())
}

/// Band-limited Gaussian noise inside the high-gamma band, unit std.
fn bandlimited_noise(
    t: usize,
    sample_rate: f64,
    rng: &mut ChaCha8Rng,
    planner: &mut FftPlanner<f64>,
) -> Vec<f64> {
    let df = sample_rate / t as f64;
    let mut spectrum = vec![Complex64::new(0.0, 0.0); t];
    for (k, s) in spectrum.iter_mut().enumerate().take(t / 2 + 1).skip(1) {
        let f = k as f64 * df;
        // draw unconditionally so the stream layout is shape-independent
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        if (HIGH_GAMMA_BAND.0..=HIGH_GAMMA_BAND.1).contains(&f) {
            *s = Complex64::new(re, im);
        }
    }
    for k in 1..t.div_ceil(2) {
        spectrum[t - k] = spectrum[k].conj();
    }
    if t % 2 == 0 && t >= 2 {
        spectrum[t / 2] = Complex64::new(spectrum[t / 2].re, 0.0);
    }
    let ifft = planner.plan_fft_inverse(t);
    ifft.process(&mut spectrum);
    normalize_unit_std(spectrum.iter().map(|c| c.re).collect())
}

fn normalize_unit_std(mut xs: Vec<f64>) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    for x in xs.iter_mut() {
        *x = (*x - mean) / sd;
    }
    xs
}

/// Raised-cosine ramps (10% each side) over the burst window.
fn burst_window(len: usize) -> Vec<f64> {
    let ramp = (len / 10).max(1);
    (0..len)
        .map(|i| {
            if i < ramp {
                0.5 * (1.0 - (std::f64::consts::PI * (ramp - i) as f64 / ramp as f64).cos())
            } else if i >= len - ramp {
                let j = len - i;
                0.5 * (1.0 - (std::f64::consts::PI * j as f64 / ramp as f64).cos())
            } else {
                1.0
            }
        })
        .collect()
}

fn generate_subject(cfg: &SynthConfig, subject_idx: usize) -> Result<(Subject, BTreeMap<ElectrodeId, ElectrodeLabel>)> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed::derive_indexed(cfg.seed, "subject", subject_idx as u64));
    let mut planner = FftPlanner::new();
    let n = cfg.electrodes_per_subject;
    let n_critical = (cfg.critical_fraction * n as f64).round() as usize;

    // role assignment off a seeded permutation
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let critical: Vec<usize> = order[..n_critical].to_vec();
    let pool = &order[n_critical..];
    let n_invalid = (cfg.invalid_fraction * n as f64).floor() as usize;
    let invalid: Vec<usize> = pool[..n_invalid.min(pool.len())].to_vec();
    let rest = &pool[invalid.len()..];
    let n_untested = ((cfg.untested_fraction * n as f64).floor() as usize).min(rest.len());
    let untested: Vec<usize> = rest[..n_untested].to_vec();
    let tested_noncrit: Vec<usize> = rest[n_untested..].to_vec();
    if tested_noncrit.len() < 2 {
        return Err(Error::Config(
            "layout leaves fewer than 2 tested non-critical electrodes".into(),
        ));
    }
    let n_coupled = (cfg.coupled_fraction * tested_noncrit.len() as f64).round() as usize;
    let coupled: Vec<usize> = tested_noncrit[..n_coupled].to_vec();

    let mut role = vec![Role::Plain; n];
    for &e in &critical {
        role[e] = Role::Critical;
    }
    for &e in &coupled {
        role[e] = Role::Coupled;
    }

    // anatomy: criticals in language regions, others mostly outside
    let non_language: Vec<usize> = (0..crate::features::N_REGIONS)
        .filter(|r| !LANGUAGE_REGIONS.contains(r))
        .collect();
    let mut region = vec![0usize; n];
    let mut gain = vec![0.0f64; n];
    for e in 0..n {
        region[e] = if role[e] == Role::Critical {
            LANGUAGE_REGIONS[rng.random_range(0..LANGUAGE_REGIONS.len())]
        } else if rng.random::<f64>() < cfg.language_region_rate {
            LANGUAGE_REGIONS[rng.random_range(0..LANGUAGE_REGIONS.len())]
        } else {
            non_language[rng.random_range(0..non_language.len())]
        };
        gain[e] = match role[e] {
            Role::Critical => (0.7 + 0.6 * rng.random::<f64>()) * cfg.effect_size,
            Role::Coupled => {
                (0.7 + 0.6 * rng.random::<f64>()) * cfg.effect_size * cfg.coupled_gain
            }
            Role::Plain => 0.0,
        } * cfg.noise_std;
    }

    let electrodes: Vec<Electrode> = (0..n)
        .map(|e| Electrode {
            id: e as ElectrodeId,
            region_index: region[e],
            valid: !invalid.contains(&e),
        })
        .collect();

    // stimulation pairs consistent with the planted labels
    let mut esm = Vec::new();
    let mut sorted_critical = critical.clone();
    sorted_critical.sort_unstable();
    for pair in sorted_critical.windows(2) {
        esm.push(EsmEvent {
            pair: (pair[0] as ElectrodeId, pair[1] as ElectrodeId),
            outcome: EsmOutcome::Arrest,
        });
    }
    let mut sorted_tested = tested_noncrit.clone();
    sorted_tested.sort_unstable();
    for pair in sorted_tested.windows(2) {
        esm.push(EsmEvent {
            pair: (pair[0] as ElectrodeId, pair[1] as ElectrodeId),
            outcome: EsmOutcome::NoArrest,
        });
    }

    let mut planted = BTreeMap::new();
    for e in 0..n {
        if invalid.contains(&e) {
            continue;
        }
        let label = if critical.contains(&e) {
            ElectrodeLabel::Critical
        } else if untested.contains(&e) {
            ElectrodeLabel::Untested
        } else {
            ElectrodeLabel::NonCritical
        };
        planted.insert(e as ElectrodeId, label);
    }

    // timing shared by every task recording
    let fs = cfg.sample_rate;
    let lead = (0.5 * fs).round() as usize;
    let spacing = fs.round() as usize;
    let post = (0.5 * fs).ceil() as usize;
    let pre = crate::signal::baseline_len(fs);
    let window = burst_window(post);

    let mut recordings = Vec::with_capacity(cfg.tasks.len());
    for &task in &cfg.tasks {
        let n_trials = cfg.trials_per_task * task.trial_weight();
        let t = lead + n_trials * spacing + lead;
        let onsets: Vec<usize> = (0..n_trials).map(|k| lead + k * spacing).collect();
        for &onset in &onsets {
            if onset < pre || onset + post > t {
                return Err(Error::Config(format!(
                    "trial layout infeasible: epoch around onset {onset} exceeds \
                     recording of {t} samples at {fs} Hz"
                )));
            }
        }

        let common = one_over_f_noise(t, &mut rng, &mut planner);
        let mut data = Array2::zeros((n, t));
        for e in 0..n {
            let noise = one_over_f_noise(t, &mut rng, &mut planner);
            let mut row = data.row_mut(e);
            for (i, v) in row.iter_mut().enumerate() {
                *v = cfg.noise_std * (noise[i] + 0.5 * common[i]);
            }
        }
        let latent_critical = bandlimited_noise(t, fs, &mut rng, &mut planner);
        let latent_coupled = bandlimited_noise(t, fs, &mut rng, &mut planner);

        for &onset in &onsets {
            for e in 0..n {
                let latent = match role[e] {
                    Role::Critical => &latent_critical,
                    Role::Coupled => &latent_coupled,
                    Role::Plain => continue,
                };
                let active = rng.random::<f64>() < cfg.burst_prob;
                if !active {
                    continue;
                }
                let mut row = data.row_mut(e);
                for (tau, &w) in window.iter().enumerate() {
                    row[onset + tau] += gain[e] * w * latent[onset + tau];
                }
            }
        }

        let events: Vec<TrialEvent> = onsets
            .iter()
            .enumerate()
            .map(|(k, &onset)| TrialEvent {
                trial_id: k as u32,
                task,
                word: format!("word{:02}", k % 50),
                onset_sample: onset,
            })
            .collect();

        recordings.push(Recording {
            task,
            samples: data.mapv(|v| v as f32),
            events,
        });
    }

    Ok((
        Subject {
            id: SubjectId::new(format!("s{subject_idx:02}"))?,
            electrodes,
            recordings,
            esm,
        },
        planted,
    ))
}

/// Generate an in-memory dataset with its planted truth.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let results: Vec<Result<(Subject, BTreeMap<ElectrodeId, ElectrodeLabel>)>> = (0..cfg
        .n_subjects)
        .into_par_iter()
        .map(|s| generate_subject(cfg, s))
        .collect();
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    let mut planted = Vec::with_capacity(cfg.n_subjects);
    for r in results {
        let (subject, labels) = r?;
        subjects.push(subject);
        planted.push(labels);
    }
    Ok(GeneratedDataset {
        dataset: Dataset {
            sample_rate: cfg.sample_rate,
            tasks: cfg.tasks.clone(),
            region_names: None,
            subjects,
        },
        planted,
    })
}

/// Generate and write a dataset directory.
pub fn generate_to_dir(cfg: &SynthConfig, out: &Path) -> Result<GeneratedDataset> {
    let generated = generate_dataset(cfg)?;
    write_dataset(&generated.dataset, out)?;
    Ok(generated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{derive_labels, load_dataset};

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_subjects: 2,
            electrodes_per_subject: 16,
            trials_per_task: 1,
            tasks: vec![Task::AuditoryRepetition, Task::WordReading],
            effect_size: 2.0,
            seed: 5,
            invalid_fraction: 0.1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generated_dataset_passes_load_validation() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let generated = generate_to_dir(&cfg, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, generated.dataset);
        assert_eq!(loaded.subjects.len(), 2);
        // invalid electrodes present but flagged
        let n_invalid: usize = loaded.subjects[0]
            .electrodes
            .iter()
            .filter(|e| !e.valid)
            .count();
        assert_eq!(n_invalid, 1);
    }

    #[test]
    fn derive_labels_reproduces_planted_map() {
        let cfg = small_cfg();
        let generated = generate_dataset(&cfg).unwrap();
        for (subject, planted) in generated.dataset.subjects.iter().zip(&generated.planted) {
            let derived = derive_labels(&subject.esm, &subject.electrodes).unwrap();
            assert_eq!(&derived, planted);
        }
    }

    #[test]
    fn generation_is_byte_identical_across_runs() {
        let cfg = small_cfg();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate_to_dir(&cfg, dir_a.path()).unwrap();
        generate_to_dir(&cfg, dir_b.path()).unwrap();
        for rel in [
            "manifest.json",
            "s00/AR.f32",
            "s00/AR.events.csv",
            "s01/WR.f32",
            "s00/esm.csv",
        ] {
            let a = std::fs::read(dir_a.path().join(rel)).unwrap();
            let b = std::fs::read(dir_b.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between runs");
        }
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = small_cfg();
        let mut cfg2 = small_cfg();
        cfg2.seed = 6;
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg2).unwrap();
        assert_ne!(
            a.dataset.subjects[0].recordings[0].samples,
            b.dataset.subjects[0].recordings[0].samples
        );
    }

    #[test]
    fn critical_count_matches_fraction() {
        let generated = generate_dataset(&SynthConfig {
            n_subjects: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let n_crit = generated.planted[0]
            .values()
            .filter(|&&l| l == ElectrodeLabel::Critical)
            .count();
        assert_eq!(n_crit, (0.17f64 * 64.0).round() as usize);
    }

    #[test]
    fn too_few_criticals_is_a_config_error() {
        let cfg = SynthConfig {
            electrodes_per_subject: 6,
            critical_fraction: 0.17,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn planted_bursts_live_in_band() {
        // critical electrodes should carry more 70-150 Hz power than plain
        let cfg = SynthConfig {
            n_subjects: 1,
            electrodes_per_subject: 16,
            trials_per_task: 2,
            tasks: vec![Task::AuditoryRepetition],
            effect_size: 5.0,
            burst_prob: 1.0,
            seed: 9,
            ..SynthConfig::default()
        };
        let generated = generate_dataset(&cfg).unwrap();
        let subject = &generated.dataset.subjects[0];
        let rec = &subject.recordings[0];
        let samples = rec.samples.mapv(|v| v as f64);
        let env = crate::signal::high_gamma_envelope(samples.view(), cfg.sample_rate).unwrap();
        let mean_env = |e: usize| env.row(e).sum() / env.ncols() as f64;
        let criticals: Vec<usize> = generated.planted[0]
            .iter()
            .filter(|(_, &l)| l == ElectrodeLabel::Critical)
            .map(|(&id, _)| id as usize)
            .collect();
        let plain: Vec<usize> = generated.planted[0]
            .iter()
            .filter(|(_, &l)| l == ElectrodeLabel::NonCritical)
            .map(|(&id, _)| id as usize)
            .collect();
        let crit_mean: f64 =
            criticals.iter().map(|&e| mean_env(e)).sum::<f64>() / criticals.len() as f64;
        let plain_mean: f64 = plain.iter().map(|&e| mean_env(e)).sum::<f64>() / plain.len() as f64;
        assert!(
            crit_mean > 1.5 * plain_mean,
            "critical envelope {crit_mean} vs plain {plain_mean}"
        );
    }
}
