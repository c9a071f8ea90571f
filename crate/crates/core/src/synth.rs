//! Seeded synthetic EHR cohorts shaped like an ICU heart-failure cohort.
//!
//! Every code belongs to a pool: one "HF profile" pool per code kind and a number
//! of background pools. Code embeddings are the pool centroid plus small isotropic
//! noise, so averaging a patient's codes keeps the pool mixture visible. Positive
//! patients draw from the HF pools more often and also borrow codes from a paired
//! background profile, with a per-kind strength that lets the signal be
//! concentrated in one kind of code.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ehr::{
    save_embeddings, write_cohort, CodeKind, EmbeddingStore, Label, MedicalCode, RawPatient,
    Visit,
};
use crate::error::{Error, Result};

/// Diagnosis codes injected at the heart-failure visit (ICD-9 428 family).
pub const HF_ICD9: [&str; 12] = [
    "4280", "4281", "42820", "42821", "42822", "42823", "42830", "42831", "42832", "42833",
    "42840", "4289",
];

const BACKGROUND_PROFILES: usize = 8;
/// Fraction of each kind's vocabulary reserved for the HF profile pool.
const HF_POOL_FRACTION: f64 = 0.1;
/// HF-pool usage shared by everyone (comorbid background).
const BASE_HF_RATE: f64 = 0.08;
/// Split of a positive patient's signal between HF-pool codes and codes borrowed
/// from the paired background profile. Borrowing moves paired profiles in opposite
/// directions, so that part of the signal is not linearly separable.
const LINEAR_SHARE: f64 = 0.3;
const CROSS_SHARE: f64 = 0.7;
/// Code-slot mix (diagnosis, procedure, prescription) within a visit.
const KIND_MIX: [f64; 3] = [0.3, 0.15, 0.55];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub positive_rate: f64,
    pub n_diag: usize,
    pub n_proc: usize,
    pub n_rx: usize,
    pub embed_dim: usize,
    /// Inclusive range of retained visits per patient.
    pub visits_per_patient: (usize, usize),
    /// Inclusive range of codes per visit.
    pub codes_per_visit: (usize, usize),
    pub signal_strength: f64,
    /// Relative signal carried by diagnosis, procedure and prescription codes.
    pub kind_signal: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            n_patients: 4760,
            positive_rate: 0.2871,
            n_diag: 817,
            n_proc: 517,
            n_rx: 3454,
            embed_dim: 32,
            visits_per_patient: (2, 6),
            codes_per_visit: (3, 15),
            signal_strength: 0.7,
            kind_signal: [0.5, 0.2, 1.0],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::invalid("n_patients", "must be positive"));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::invalid("positive_rate", "must lie in (0, 1)"));
        }
        if self.n_diag <= HF_ICD9.len() || self.n_proc == 0 || self.n_rx == 0 {
            return Err(Error::invalid(
                "vocabulary",
                format!("need n_diag > {} and positive n_proc, n_rx", HF_ICD9.len()),
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim", "must be positive"));
        }
        let (vlo, vhi) = self.visits_per_patient;
        if vlo < 2 || vlo > vhi {
            return Err(Error::invalid(
                "visits_per_patient",
                "range must be non-empty and start at 2 or more",
            ));
        }
        let (clo, chi) = self.codes_per_visit;
        if clo == 0 || clo > chi {
            return Err(Error::invalid("codes_per_visit", "range must be non-empty and positive"));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::invalid("signal_strength", "must lie in [0, 1]"));
        }
        if self.kind_signal.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("kind_signal", "weights must lie in [0, 1]"));
        }
        Ok(())
    }

    fn vocab_size(&self, kind: CodeKind) -> usize {
        match kind {
            CodeKind::Diagnosis => self.n_diag,
            CodeKind::Procedure => self.n_proc,
            CodeKind::Prescription => self.n_rx,
        }
    }

    pub fn n_positive(&self) -> usize {
        (self.positive_rate * self.n_patients as f64).round() as usize
    }
}

/// Generated cohort plus the generator's ground truth.
#[derive(Clone, Debug)]
pub struct SynthCohort {
    pub patients: Vec<RawPatient>,
    pub embeddings: EmbeddingStore,
    pub truth: Vec<(String, Label)>,
    /// Codes of the HF profile pools, per kind.
    pub hf_profile: Vec<MedicalCode>,
}

/// Paths written by [`SynthCohort::write_to`].
#[derive(Clone, Debug)]
pub struct SynthFiles {
    pub cohort: PathBuf,
    pub embeddings: PathBuf,
    pub truth: PathBuf,
}

struct KindVocab {
    kind: CodeKind,
    hf_pool: Vec<String>,
    background: Vec<Vec<String>>,
}

fn vocabulary(kind: CodeKind, size: usize) -> Vec<String> {
    match kind {
        CodeKind::Diagnosis => {
            let mut v: Vec<String> = HF_ICD9.iter().map(|s| s.to_string()).collect();
            let mut i = 0usize;
            while v.len() < size {
                let s = format!("{}", 10000 + i * 13);
                i += 1;
                if !s.starts_with("428") {
                    v.push(s);
                }
            }
            v
        }
        CodeKind::Procedure => (0..size).map(|i| format!("{:04}", 1 + 3 * i)).collect(),
        CodeKind::Prescription => (0..size)
            .map(|i| format!("{:011}", 338_000_000 + 10_007 * i))
            .collect(),
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn jitter(rng: &mut ChaCha8Rng, centroid: &[f64]) -> Vec<f64> {
    let norm = centroid.iter().map(|x| x * x).sum::<f64>().sqrt();
    // expected noise norm is a tenth of the centroid norm
    let sigma = 0.1 * norm / (centroid.len() as f64).sqrt();
    centroid
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(rng);
            c + sigma * z
        })
        .collect()
}

pub fn generate(config: &SynthConfig) -> Result<SynthCohort> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.embed_dim;

    let mut embeddings = EmbeddingStore::new(dim)?;
    let mut vocabs = Vec::new();
    let mut hf_profile = Vec::new();
    for kind in CodeKind::ALL {
        let mut codes = vocabulary(kind, config.vocab_size(kind));
        let hf_icd: Vec<String> = if kind == CodeKind::Diagnosis {
            codes.drain(..HF_ICD9.len()).collect()
        } else {
            Vec::new()
        };
        codes.shuffle(&mut rng);
        let n_hf = ((codes.len() as f64 * HF_POOL_FRACTION).round() as usize).max(1);
        let hf_pool: Vec<String> = codes.drain(..n_hf.min(codes.len())).collect();
        let mut background = vec![Vec::new(); BACKGROUND_PROFILES];
        for (i, c) in codes.into_iter().enumerate() {
            background[i % BACKGROUND_PROFILES].push(c);
        }
        // the label-defining ICD-9 codes share the HF centroid
        let hf_centroid = unit_gaussian(&mut rng, dim);
        for c in hf_pool.iter().chain(&hf_icd) {
            embeddings.insert(c.clone(), jitter(&mut rng, &hf_centroid))?;
        }
        for pool in &background {
            let centroid = unit_gaussian(&mut rng, dim);
            for c in pool {
                embeddings.insert(c.clone(), jitter(&mut rng, &centroid))?;
            }
        }
        hf_profile.extend(hf_pool.iter().map(|c| MedicalCode::new(kind, c.clone()).expect("code")));
        background.retain(|p| !p.is_empty());
        vocabs.push(KindVocab {
            kind,
            hf_pool,
            background,
        });
    }

    let mut is_positive = vec![false; config.n_patients];
    let mut order: Vec<usize> = (0..config.n_patients).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(config.n_positive()) {
        is_positive[i] = true;
    }

    let mut patients = Vec::with_capacity(config.n_patients);
    let mut truth = Vec::with_capacity(config.n_patients);
    for (p, &positive) in is_positive.iter().enumerate() {
        let patient_id = format!("P{:06}", p + 1);
        let profile = rng.random_range(0..BACKGROUND_PROFILES);
        let intensity: f64 = rng.random_range(0.0..1.0);
        let drive = |k: usize| {
            if positive {
                config.signal_strength * config.kind_signal[k] * (0.25 + 0.75 * intensity)
            } else {
                0.0
            }
        };
        let hf_rate = |k: usize| BASE_HF_RATE + LINEAR_SHARE * drive(k);
        let cross_rate = |k: usize| CROSS_SHARE * drive(k);
        let n_visits = rng.random_range(config.visits_per_patient.0..=config.visits_per_patient.1);
        let mut visits = Vec::new();
        for ord in 0..n_visits {
            let n_codes = rng.random_range(config.codes_per_visit.0..=config.codes_per_visit.1);
            let mut codes = Vec::with_capacity(n_codes);
            for _ in 0..n_codes {
                let k = pick_kind(&mut rng);
                let vocab = &vocabs[k];
                let u: f64 = rng.random_range(0.0..1.0);
                let nb = vocab.background.len();
                let pool = if u < hf_rate(k) {
                    &vocab.hf_pool
                } else if u < hf_rate(k) + cross_rate(k) {
                    &vocab.background[partner(profile) % nb]
                } else {
                    &vocab.background[profile % nb]
                };
                let value = pool[rng.random_range(0..pool.len())].clone();
                codes.push(MedicalCode::new(vocab.kind, value)?);
            }
            visits.push(Visit::new(format!("{patient_id}-V{ord}"), ord as u32, codes));
        }
        if positive {
            // the HF admission and possibly a follow-up; both are removed by labeling
            let extra = 1 + usize::from(rng.random_bool(0.5));
            for e in 0..extra {
                let ord = n_visits + e;
                let hf = HF_ICD9[rng.random_range(0..HF_ICD9.len())];
                let mut codes = vec![MedicalCode::new(CodeKind::Diagnosis, hf)?];
                for _ in 0..rng.random_range(config.codes_per_visit.0..=config.codes_per_visit.1) {
                    let vocab = &vocabs[pick_kind(&mut rng)];
                    let value = vocab.hf_pool[rng.random_range(0..vocab.hf_pool.len())].clone();
                    codes.push(MedicalCode::new(vocab.kind, value)?);
                }
                visits.push(Visit::new(format!("{patient_id}-V{ord}"), ord as u32, codes));
            }
        }
        let label = if positive { Label::Positive } else { Label::Negative };
        truth.push((patient_id.clone(), label));
        patients.push(RawPatient { patient_id, visits });
    }

    Ok(SynthCohort {
        patients,
        embeddings,
        truth,
        hf_profile,
    })
}

/// Profiles come in pairs; positives borrow codes from the paired profile.
fn partner(profile: usize) -> usize {
    profile ^ 1
}

fn pick_kind(rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    if u < KIND_MIX[0] {
        0
    } else if u < KIND_MIX[0] + KIND_MIX[1] {
        1
    } else {
        2
    }
}

impl SynthCohort {
    /// Writes `cohort.jsonl`, `embeddings.tsv` and `truth.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<SynthFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = SynthFiles {
            cohort: dir.join("cohort.jsonl"),
            embeddings: dir.join("embeddings.tsv"),
            truth: dir.join("truth.csv"),
        };
        let f = File::create(&files.cohort).map_err(|e| Error::io(&files.cohort, e))?;
        let mut w = BufWriter::new(f);
        write_cohort(&self.patients, &mut w)?;
        w.flush().map_err(|e| Error::io(&files.cohort, e))?;

        save_embeddings(&self.embeddings, &files.embeddings)?;

        let f = File::create(&files.truth).map_err(|e| Error::io(&files.truth, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(&files.truth, e);
        writeln!(w, "patient_id,label").map_err(io)?;
        for (id, label) in &self.truth {
            writeln!(w, "{id},{}", label.bit()).map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(files)
    }
}
