//! Patients, visits, medical codes and the averaged-embedding patient representation.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeKind {
    Diagnosis,
    Procedure,
    Prescription,
}

impl CodeKind {
    pub const ALL: [CodeKind; 3] = [
        CodeKind::Diagnosis,
        CodeKind::Procedure,
        CodeKind::Prescription,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CodeKind::Diagnosis => "diagnosis",
            CodeKind::Procedure => "procedure",
            CodeKind::Prescription => "prescription",
        }
    }
}

impl fmt::Display for CodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagnosis" | "diag" => Ok(CodeKind::Diagnosis),
            "procedure" | "proc" => Ok(CodeKind::Procedure),
            "prescription" | "rx" | "medication" => Ok(CodeKind::Prescription),
            other => Err(Error::invalid("kind", format!("unknown code kind {other:?}"))),
        }
    }
}

/// An ICD-9 or NDC token. Ordered by value first so that summation over a visit's
/// codes follows the lexicographic order of the tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MedicalCode {
    kind: CodeKind,
    value: String,
}

impl MedicalCode {
    pub fn new(kind: CodeKind, value: impl Into<String>) -> Result<Self> {
        let value = value.into();
        if value.is_empty() {
            return Err(Error::invalid("code", "medical code is empty"));
        }
        if value.chars().any(char::is_whitespace) {
            return Err(Error::invalid(
                "code",
                format!("medical code {value:?} contains whitespace"),
            ));
        }
        Ok(MedicalCode { kind, value })
    }

    pub fn kind(&self) -> CodeKind {
        self.kind
    }

    pub fn value(&self) -> &str {
        &self.value
    }
}

impl Ord for MedicalCode {
    fn cmp(&self, other: &Self) -> Ordering {
        self.value
            .cmp(&other.value)
            .then(self.kind.cmp(&other.kind))
    }
}

impl PartialOrd for MedicalCode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Visit {
    pub visit_id: String,
    pub ordinal: u32,
    pub codes: BTreeSet<MedicalCode>,
}

impl Visit {
    pub fn new(
        visit_id: impl Into<String>,
        ordinal: u32,
        codes: impl IntoIterator<Item = MedicalCode>,
    ) -> Self {
        Visit {
            visit_id: visit_id.into(),
            ordinal,
            codes: codes.into_iter().collect(),
        }
    }

    pub fn codes_of(&self, kind: CodeKind) -> impl Iterator<Item = &MedicalCode> {
        self.codes.iter().filter(move |c| c.kind == kind)
    }

    /// Copy of this visit keeping only codes of the given kinds.
    pub fn restricted_to(&self, kinds: &[CodeKind]) -> Visit {
        Visit {
            visit_id: self.visit_id.clone(),
            ordinal: self.ordinal,
            codes: self
                .codes
                .iter()
                .filter(|c| kinds.contains(&c.kind))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_bit(bit: u8) -> Result<Label> {
        match bit {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            b => Err(Error::invalid("label", format!("expected 0 or 1, got {b}"))),
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

/// A patient before labeling, as read from a cohort file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPatient {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
    pub label: Label,
}

impl PatientRecord {
    pub fn restricted_to(&self, kinds: &[CodeKind]) -> PatientRecord {
        PatientRecord {
            patient_id: self.patient_id.clone(),
            visits: self.visits.iter().map(|v| v.restricted_to(kinds)).collect(),
            label: self.label,
        }
    }

    /// Distinct codes over all retained visits.
    pub fn distinct_codes(&self) -> BTreeSet<&MedicalCode> {
        self.visits.iter().flat_map(|v| v.codes.iter()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientVector {
    pub patient_id: String,
    pub features: Vec<f64>,
    pub label: Label,
}

/// ICD-9 diagnosis prefixes that mark heart failure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HfCodeSet {
    prefixes: Vec<String>,
}

impl Default for HfCodeSet {
    fn default() -> Self {
        HfCodeSet {
            prefixes: vec!["428".to_string()],
        }
    }
}

impl HfCodeSet {
    pub fn new<S: Into<String>>(prefixes: impl IntoIterator<Item = S>) -> Result<Self> {
        let prefixes: Vec<String> = prefixes.into_iter().map(Into::into).collect();
        if prefixes.is_empty() || prefixes.iter().any(|p| p.is_empty()) {
            return Err(Error::invalid("hf_codes", "need at least one non-empty prefix"));
        }
        Ok(HfCodeSet { prefixes })
    }

    pub fn prefixes(&self) -> &[String] {
        &self.prefixes
    }

    /// Only diagnosis codes can mark HF; NDC tokens may share numeric prefixes.
    pub fn matches(&self, code: &MedicalCode) -> bool {
        code.kind == CodeKind::Diagnosis
            && self.prefixes.iter().any(|p| code.value.starts_with(p.as_str()))
    }

    pub fn visit_has_hf(&self, visit: &Visit) -> bool {
        visit.codes.iter().any(|c| self.matches(c))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExclusionReason {
    NoVisits,
    UnorderedVisits,
    TooFewVisits { retained: usize },
}

/// A patient that does not satisfy the cohort rules; callers drop it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CohortExclusion {
    pub patient_id: String,
    pub reason: ExclusionReason,
}

impl fmt::Display for CohortExclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.reason {
            ExclusionReason::NoVisits => write!(f, "{}: no visits", self.patient_id),
            ExclusionReason::UnorderedVisits => {
                write!(f, "{}: visit ordinals not strictly increasing", self.patient_id)
            }
            ExclusionReason::TooFewVisits { retained } => {
                write!(f, "{}: {retained} retained visit(s), need 2", self.patient_id)
            }
        }
    }
}

/// Minimum retained history for a patient to enter the cohort.
pub const MIN_VISITS: usize = 2;

/// Labels a patient and truncates its history at the first HF-coded visit.
///
/// Positive patients keep only the visits strictly before the first visit carrying
/// an HF code, so no HF code ever reaches the representation.
pub fn label_patient(
    patient_id: &str,
    raw_visits: &[Visit],
    hf_codes: &HfCodeSet,
) -> std::result::Result<PatientRecord, CohortExclusion> {
    let exclude = |reason| CohortExclusion {
        patient_id: patient_id.to_string(),
        reason,
    };
    if raw_visits.is_empty() {
        return Err(exclude(ExclusionReason::NoVisits));
    }
    if raw_visits.windows(2).any(|w| w[0].ordinal >= w[1].ordinal) {
        return Err(exclude(ExclusionReason::UnorderedVisits));
    }
    let first_hf = raw_visits.iter().position(|v| hf_codes.visit_has_hf(v));
    let (visits, label) = match first_hf {
        Some(i) => (&raw_visits[..i], Label::Positive),
        None => (raw_visits, Label::Negative),
    };
    if visits.len() < MIN_VISITS {
        return Err(exclude(ExclusionReason::TooFewVisits {
            retained: visits.len(),
        }));
    }
    Ok(PatientRecord {
        patient_id: patient_id.to_string(),
        visits: visits.to_vec(),
        label,
    })
}

/// Result of labeling a whole cohort.
#[derive(Debug, Default)]
pub struct LabeledCohort {
    pub records: Vec<PatientRecord>,
    pub excluded: Vec<CohortExclusion>,
}

pub fn label_cohort(raw: &[RawPatient], hf_codes: &HfCodeSet) -> LabeledCohort {
    let mut out = LabeledCohort::default();
    for p in raw {
        match label_patient(&p.patient_id, &p.visits, hf_codes) {
            Ok(r) => out.records.push(r),
            Err(e) => {
                log::debug!("excluded {e}");
                out.excluded.push(e);
            }
        }
    }
    out
}

/// Medical-code embeddings of a fixed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dimension: usize,
    table: HashMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::invalid("dimension", "must be positive"));
        }
        Ok(EmbeddingStore {
            dimension,
            table: HashMap::new(),
        })
    }

    pub fn insert(&mut self, code: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let code = code.into();
        if vector.len() != self.dimension {
            return Err(Error::invalid(
                "embedding",
                format!(
                    "{code}: {} values, store dimension is {}",
                    vector.len(),
                    self.dimension
                ),
            ));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding", format!("{code}: non-finite value")));
        }
        self.table.insert(code, vector);
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, code: &str) -> Option<&[f64]> {
        self.table.get(code).map(Vec::as_slice)
    }

    pub fn contains(&self, code: &str) -> bool {
        self.table.contains_key(code)
    }

    pub fn max_norm(&self) -> f64 {
        self.table
            .values()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Codes in lexicographic order.
    pub fn codes(&self) -> Vec<&str> {
        let mut codes: Vec<&str> = self.table.keys().map(String::as_str).collect();
        codes.sort_unstable();
        codes
    }

    /// Parses `code<TAB>v1 v2 ... vd` lines; the first line fixes the dimension.
    pub fn parse<R: BufRead>(reader: R, source: &str) -> Result<Self> {
        let mut store: Option<EmbeddingStore> = None;
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(source, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| Error::Parse {
                file: source.to_string(),
                line: lineno,
                reason,
            };
            let (code, rest) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `code<TAB>values`".into()))?;
            let values = rest
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad float {t:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(err(format!("non-finite value for {code}")));
            }
            let store = match &mut store {
                Some(s) => s,
                None => store.insert(
                    EmbeddingStore::new(values.len())
                        .map_err(|_| err("first line has no values".into()))?,
                ),
            };
            if values.len() != store.dimension {
                return Err(err(format!(
                    "{} values, expected dimension {}",
                    values.len(),
                    store.dimension
                )));
            }
            MedicalCode::new(CodeKind::Diagnosis, code).map_err(|e| err(e.to_string()))?;
            if store.table.insert(code.to_string(), values).is_some() {
                return Err(err(format!("duplicate code {code}")));
            }
        }
        store.ok_or_else(|| Error::Parse {
            file: source.to_string(),
            line: 0,
            reason: "embedding file is empty".into(),
        })
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for code in self.codes() {
            write!(w, "{code}\t")?;
            write_floats(&mut w, &self.table[code], ' ')?;
            writeln!(w)?;
        }
        Ok(())
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    EmbeddingStore::parse(BufReader::new(f), &path.display().to_string())
}

pub fn save_embeddings(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    store.write(&mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean embedding of the visit's codes that are present in the store, summed in
/// code order. `None` when no code is embeddable.
pub fn visit_vector(visit: &Visit, store: &EmbeddingStore) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; store.dimension];
    let mut count = 0usize;
    for code in &visit.codes {
        if let Some(v) = store.get(&code.value) {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let n = count as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Some(acc)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnrepresentablePatient {
    pub patient_id: String,
}

impl fmt::Display for UnrepresentablePatient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: no visit has an embeddable code", self.patient_id)
    }
}

/// Mean of the visit vectors, visits taken in ordinal order.
pub fn patient_representation(
    record: &PatientRecord,
    store: &EmbeddingStore,
) -> std::result::Result<PatientVector, UnrepresentablePatient> {
    let mut visits: Vec<&Visit> = record.visits.iter().collect();
    visits.sort_by_key(|v| v.ordinal);
    let mut acc = vec![0.0; store.dimension];
    let mut count = 0usize;
    for v in visits.into_iter().filter_map(|v| visit_vector(v, store)) {
        for (a, x) in acc.iter_mut().zip(&v) {
            *a += x;
        }
        count += 1;
    }
    if count == 0 {
        return Err(UnrepresentablePatient {
            patient_id: record.patient_id.clone(),
        });
    }
    let n = count as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(PatientVector {
        patient_id: record.patient_id.clone(),
        features: acc,
        label: record.label,
    })
}

/// How much of the cohort's code mass the embedding store covers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub code_occurrences: usize,
    pub unknown_occurrences: usize,
    pub distinct_unknown: usize,
    pub missing_visits: usize,
    pub dropped_patients: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Representation {
    pub vectors: Vec<PatientVector>,
    pub coverage: CoverageReport,
}

/// Represents every record, optionally restricted to some code kinds. Patients
/// whose visits are all unembeddable are dropped and listed in the coverage report.
pub fn represent_cohort(
    records: &[PatientRecord],
    store: &EmbeddingStore,
    kinds: &[CodeKind],
) -> Representation {
    let mut coverage = CoverageReport::default();
    let mut unknown = BTreeSet::new();
    let mut vectors = Vec::with_capacity(records.len());
    for record in records {
        let record = record.restricted_to(kinds);
        for visit in &record.visits {
            let mut any = false;
            for code in &visit.codes {
                coverage.code_occurrences += 1;
                if store.contains(&code.value) {
                    any = true;
                } else {
                    coverage.unknown_occurrences += 1;
                    unknown.insert(code.value.clone());
                }
            }
            if !any {
                coverage.missing_visits += 1;
            }
        }
        match patient_representation(&record, store) {
            Ok(v) => vectors.push(v),
            Err(e) => {
                log::warn!("dropping patient {e}");
                coverage.dropped_patients.push(e.patient_id);
            }
        }
    }
    coverage.distinct_unknown = unknown.len();
    Representation { vectors, coverage }
}

#[derive(Serialize, Deserialize)]
struct VisitLine {
    visit_id: String,
    ordinal: u32,
    #[serde(default)]
    diagnoses: Vec<String>,
    #[serde(default)]
    procedures: Vec<String>,
    #[serde(default)]
    prescriptions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CohortLine {
    patient_id: String,
    visits: Vec<VisitLine>,
}

impl VisitLine {
    fn into_visit(self) -> Result<Visit> {
        let mut codes = BTreeSet::new();
        for (kind, list) in [
            (CodeKind::Diagnosis, self.diagnoses),
            (CodeKind::Procedure, self.procedures),
            (CodeKind::Prescription, self.prescriptions),
        ] {
            for value in list {
                codes.insert(MedicalCode::new(kind, value)?);
            }
        }
        Ok(Visit {
            visit_id: self.visit_id,
            ordinal: self.ordinal,
            codes,
        })
    }

    fn from_visit(v: &Visit) -> Self {
        let list = |k| v.codes_of(k).map(|c| c.value.clone()).collect();
        VisitLine {
            visit_id: v.visit_id.clone(),
            ordinal: v.ordinal,
            diagnoses: list(CodeKind::Diagnosis),
            procedures: list(CodeKind::Procedure),
            prescriptions: list(CodeKind::Prescription),
        }
    }
}

/// Reads a JSON-lines cohort file.
pub fn parse_cohort<R: BufRead>(reader: R, source: &str) -> Result<Vec<RawPatient>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            file: source.to_string(),
            line: i + 1,
            reason,
        };
        let parsed: CohortLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let mut visits = parsed
            .visits
            .into_iter()
            .map(VisitLine::into_visit)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| err(e.to_string()))?;
        visits.sort_by_key(|v| v.ordinal);
        out.push(RawPatient {
            patient_id: parsed.patient_id,
            visits,
        });
    }
    Ok(out)
}

pub fn read_cohort(path: &Path) -> Result<Vec<RawPatient>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_cohort(BufReader::new(f), &path.display().to_string())
}

pub fn write_cohort<W: Write>(patients: &[RawPatient], mut w: W) -> Result<()> {
    for p in patients {
        let line = CohortLine {
            patient_id: p.patient_id.clone(),
            visits: p.visits.iter().map(VisitLine::from_visit).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io("<cohort>", e))?;
    }
    Ok(())
}

pub(crate) fn write_floats<W: Write>(w: &mut W, values: &[f64], sep: char) -> std::io::Result<()> {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            write!(w, "{sep}")?;
        }
        // `{}` on f64 prints the shortest string that parses back to the same value
        write!(w, "{v}")?;
    }
    Ok(())
}

/// Writes patient vectors as `patient_id<TAB>label<TAB>v1 v2 ...`.
pub fn write_vectors<W: Write>(vectors: &[PatientVector], mut w: W) -> std::io::Result<()> {
    for v in vectors {
        write!(w, "{}\t{}\t", v.patient_id, v.label.bit())?;
        write_floats(&mut w, &v.features, ' ')?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn parse_vectors<R: BufRead>(reader: R, source: &str) -> Result<Vec<PatientVector>> {
    let mut out: Vec<PatientVector> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            file: source.to_string(),
            line: i + 1,
            reason,
        };
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(label), Some(values)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(err("expected `id<TAB>label<TAB>values`".into()));
        };
        let label = label
            .parse::<u8>()
            .map_err(|e| err(e.to_string()))
            .and_then(|b| Label::from_bit(b).map_err(|e| err(e.to_string())))?;
        let features = values
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad float {t:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = out.first() {
            if first.features.len() != features.len() {
                return Err(err(format!(
                    "{} values, expected {}",
                    features.len(),
                    first.features.len()
                )));
            }
        }
        out.push(PatientVector {
            patient_id: id.to_string(),
            features,
            label,
        });
    }
    Ok(out)
}
