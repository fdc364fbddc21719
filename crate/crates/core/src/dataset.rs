//! Dataset format, loading, validation and ESM-derived electrode labels.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/manifest.json                subjects, electrode tables, shapes
//! <root>/<subject>/<task>.f32         row-major little-endian f32 [L x T]
//! <root>/<subject>/<task>.events.csv  trial_id,task,word,onset_sample
//! <root>/<subject>/esm.csv            electrode_a,electrode_b,outcome
//! ```
//!
//! Row `i` of a signal binary is the `i`-th entry of the subject's electrode
//! table. Electrodes flagged invalid are kept in the loaded dataset (and
//! validated) but are dropped from referencing, connectivity and labeling by
//! the preprocessing stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal;

/// Short unique subject token.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubjectId(String);

impl SubjectId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Validation("empty subject id".into()));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for SubjectId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub type ElectrodeId = u32;

/// The five speech tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "AR")]
    AuditoryRepetition,
    #[serde(rename = "AN")]
    AuditoryNaming,
    #[serde(rename = "SC")]
    SentenceCompletion,
    #[serde(rename = "WR")]
    WordReading,
    #[serde(rename = "PN")]
    PictureNaming,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::AuditoryRepetition,
        Task::AuditoryNaming,
        Task::SentenceCompletion,
        Task::WordReading,
        Task::PictureNaming,
    ];

    pub fn code(&self) -> &'static str {
        match self {
            Task::AuditoryRepetition => "AR",
            Task::AuditoryNaming => "AN",
            Task::SentenceCompletion => "SC",
            Task::WordReading => "WR",
            Task::PictureNaming => "PN",
        }
    }

    pub fn from_code(code: &str) -> Result<Self> {
        Task::ALL
            .iter()
            .find(|t| t.code() == code)
            .copied()
            .ok_or_else(|| Error::Validation(format!("unknown task code '{code}'")))
    }

    /// Trial multiplicity relative to the once-presented tasks: the word
    /// list appears once in AN and SC and twice in AR, WR and PN.
    pub fn trial_weight(&self) -> usize {
        match self {
            Task::AuditoryNaming | Task::SentenceCompletion => 1,
            _ => 2,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Electrode {
    pub id: ElectrodeId,
    pub region_index: usize,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EsmOutcome {
    Arrest,
    NoArrest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EsmEvent {
    pub pair: (ElectrodeId, ElectrodeId),
    pub outcome: EsmOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElectrodeLabel {
    Critical,
    NonCritical,
    Untested,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialEvent {
    pub trial_id: u32,
    pub task: Task,
    pub word: String,
    pub onset_sample: usize,
}

/// One continuous multi-channel recording with its event table.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub task: Task,
    /// `[L x T]` voltages; rows follow the subject's electrode table.
    pub samples: Array2<f32>,
    pub events: Vec<TrialEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: SubjectId,
    pub electrodes: Vec<Electrode>,
    pub recordings: Vec<Recording>,
    pub esm: Vec<EsmEvent>,
}

impl Subject {
    /// Row indices and electrode entries that survive the artifact flag.
    pub fn valid_electrodes(&self) -> Vec<(usize, &Electrode)> {
        self.electrodes
            .iter()
            .enumerate()
            .filter(|(_, e)| e.valid)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_rate: f64,
    pub tasks: Vec<Task>,
    pub region_names: Option<Vec<String>>,
    pub subjects: Vec<Subject>,
}

impl Dataset {
    /// Total number of electrode-trial pairs across valid electrodes.
    pub fn electrode_trial_count(&self) -> usize {
        self.subjects
            .iter()
            .map(|s| {
                let trials: usize = s.recordings.iter().map(|r| r.events.len()).sum();
                trials * s.valid_electrodes().len()
            })
            .sum()
    }
}

// ---------------------------------------------------------------------------
// manifest (on-disk description)

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    sample_rate: f64,
    tasks: Vec<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region_names: Option<Vec<String>>,
    subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSubject {
    id: SubjectId,
    electrodes: Vec<Electrode>,
    recordings: Vec<ManifestRecording>,
    esm: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecording {
    task: Task,
    signal: String,
    events: String,
    n_electrodes: usize,
    n_samples: usize,
}

#[derive(Debug, Deserialize)]
struct EventRow {
    trial_id: u32,
    task: String,
    word: String,
    onset_sample: usize,
}

#[derive(Debug, Deserialize)]
struct EsmRow {
    electrode_a: ElectrodeId,
    electrode_b: ElectrodeId,
    outcome: String,
}

fn read_signal_binary(path: &Path, l: usize, t: usize) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let expect = l * t * 4;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "{}: declared shape {l}x{t} needs {expect} bytes, file holds {} ({} floats)",
            path.display(),
            bytes.len(),
            bytes.len() / 4
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "{}: non-finite sample value {bad}",
            path.display()
        )));
    }
    Ok(Array2::from_shape_vec((l, t), values).expect("size checked"))
}

fn read_events_csv(path: &Path, task: Task, t: usize, sample_rate: f64) -> Result<Vec<TrialEvent>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let pre = signal::baseline_len(sample_rate);
    let post = (0.5 * sample_rate).ceil() as usize;
    let mut events = Vec::new();
    let mut seen = BTreeSet::new();
    for row in reader.deserialize::<EventRow>() {
        let row = row.map_err(csv_err(path))?;
        let row_task = Task::from_code(&row.task)?;
        if row_task != task {
            return Err(Error::Validation(format!(
                "{}: trial {} declares task {} in a {} recording",
                path.display(),
                row.trial_id,
                row.task,
                task
            )));
        }
        if !seen.insert(row.trial_id) {
            return Err(Error::Validation(format!(
                "{}: duplicate trial id {}",
                path.display(),
                row.trial_id
            )));
        }
        if row.onset_sample < pre || row.onset_sample + post > t {
            return Err(Error::Validation(format!(
                "{}: trial {}: epoch around onset {} does not fit recording of {t} samples",
                path.display(),
                row.trial_id,
                row.onset_sample
            )));
        }
        events.push(TrialEvent {
            trial_id: row.trial_id,
            task: row_task,
            word: row.word,
            onset_sample: row.onset_sample,
        });
    }
    Ok(events)
}

fn read_esm_csv(path: &Path, electrodes: &[Electrode]) -> Result<Vec<EsmEvent>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let known: BTreeSet<ElectrodeId> = electrodes.iter().map(|e| e.id).collect();
    let mut events = Vec::new();
    for row in reader.deserialize::<EsmRow>() {
        let row = row.map_err(csv_err(path))?;
        let outcome = match row.outcome.as_str() {
            "arrest" => EsmOutcome::Arrest,
            "no_arrest" => EsmOutcome::NoArrest,
            other => {
                return Err(Error::Validation(format!(
                    "{}: unknown stimulation outcome '{other}'",
                    path.display()
                )))
            }
        };
        if row.electrode_a == row.electrode_b {
            return Err(Error::Validation(format!(
                "{}: stimulation pair repeats electrode {}",
                path.display(),
                row.electrode_a
            )));
        }
        for id in [row.electrode_a, row.electrode_b] {
            if !known.contains(&id) {
                return Err(Error::Validation(format!(
                    "{}: stimulation pair references unknown electrode {id}",
                    path.display()
                )));
            }
        }
        events.push(EsmEvent {
            pair: (row.electrode_a, row.electrode_b),
            outcome,
        });
    }
    Ok(events)
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |e| Error::Format(format!("{}: {e}", path.display()))
}

fn validate_electrode_table(subject: &SubjectId, electrodes: &[Electrode]) -> Result<()> {
    if electrodes.len() < 2 {
        return Err(Error::Validation(format!(
            "subject {subject}: need at least 2 electrodes"
        )));
    }
    let mut ids = BTreeSet::new();
    for e in electrodes {
        if !ids.insert(e.id) {
            return Err(Error::Validation(format!(
                "subject {subject}: duplicate electrode id {}",
                e.id
            )));
        }
        if e.region_index >= crate::features::N_REGIONS {
            return Err(Error::Validation(format!(
                "subject {subject}: electrode {} region index {} outside [0, 25]",
                e.id, e.region_index
            )));
        }
    }
    Ok(())
}

/// Load and fully validate a dataset directory.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path).map_err(Error::io(&manifest_path))?,
    )
    .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;

    if manifest.sample_rate <= 0.0 {
        return Err(Error::Validation(format!(
            "sample rate must be positive, got {}",
            manifest.sample_rate
        )));
    }
    if let Some(names) = &manifest.region_names {
        if names.len() != crate::features::N_REGIONS {
            return Err(Error::Validation(format!(
                "region_names must list {} regions, got {}",
                crate::features::N_REGIONS,
                names.len()
            )));
        }
    }

    let mut subject_ids = BTreeSet::new();
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for ms in &manifest.subjects {
        if !subject_ids.insert(ms.id.clone()) {
            return Err(Error::Validation(format!("duplicate subject id {}", ms.id)));
        }
        validate_electrode_table(&ms.id, &ms.electrodes)?;

        let mut recordings = Vec::with_capacity(ms.recordings.len());
        for mr in &ms.recordings {
            if !manifest.tasks.contains(&mr.task) {
                return Err(Error::Validation(format!(
                    "subject {}: recording task {} missing from the manifest task list",
                    ms.id, mr.task
                )));
            }
            if mr.n_electrodes != ms.electrodes.len() {
                return Err(Error::Validation(format!(
                    "subject {}: recording {} declares {} electrodes, table has {}",
                    ms.id,
                    mr.task,
                    mr.n_electrodes,
                    ms.electrodes.len()
                )));
            }
            if mr.n_samples == 0 {
                return Err(Error::Validation(format!(
                    "subject {}: recording {} declares zero samples",
                    ms.id, mr.task
                )));
            }
            let samples =
                read_signal_binary(&root.join(&mr.signal), mr.n_electrodes, mr.n_samples)?;
            let events = read_events_csv(
                &root.join(&mr.events),
                mr.task,
                mr.n_samples,
                manifest.sample_rate,
            )?;
            recordings.push(Recording {
                task: mr.task,
                samples,
                events,
            });
        }

        let esm = read_esm_csv(&root.join(&ms.esm), &ms.electrodes)?;
        subjects.push(Subject {
            id: ms.id.clone(),
            electrodes: ms.electrodes.clone(),
            recordings,
            esm,
        });
    }

    Ok(Dataset {
        sample_rate: manifest.sample_rate,
        tasks: manifest.tasks,
        region_names: manifest.region_names,
        subjects,
    })
}

/// Write a dataset to `root` in the documented directory layout.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(Error::io(root))?;
    let mut manifest_subjects = Vec::with_capacity(dataset.subjects.len());
    for subject in &dataset.subjects {
        let sub_dir = root.join(subject.id.as_str());
        fs::create_dir_all(&sub_dir).map_err(Error::io(&sub_dir))?;

        let mut recordings = Vec::with_capacity(subject.recordings.len());
        for rec in &subject.recordings {
            let signal_rel = format!("{}/{}.f32", subject.id, rec.task);
            let events_rel = format!("{}/{}.events.csv", subject.id, rec.task);
            let signal_path = root.join(&signal_rel);
            let mut bytes = Vec::with_capacity(rec.samples.len() * 4);
            for &v in rec.samples.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(&signal_path, bytes).map_err(Error::io(&signal_path))?;

            let events_path = root.join(&events_rel);
            let mut w = csv::Writer::from_path(&events_path).map_err(csv_err(&events_path))?;
            w.write_record(["trial_id", "task", "word", "onset_sample"])
                .map_err(csv_err(&events_path))?;
            for e in &rec.events {
                w.write_record([
                    e.trial_id.to_string(),
                    e.task.code().to_string(),
                    e.word.clone(),
                    e.onset_sample.to_string(),
                ])
                .map_err(csv_err(&events_path))?;
            }
            w.flush().map_err(Error::io(&events_path))?;

            recordings.push(ManifestRecording {
                task: rec.task,
                signal: signal_rel,
                events: events_rel,
                n_electrodes: rec.samples.nrows(),
                n_samples: rec.samples.ncols(),
            });
        }

        let esm_rel = format!("{}/esm.csv", subject.id);
        let esm_path = root.join(&esm_rel);
        let mut w = csv::Writer::from_path(&esm_path).map_err(csv_err(&esm_path))?;
        w.write_record(["electrode_a", "electrode_b", "outcome"])
            .map_err(csv_err(&esm_path))?;
        for e in &subject.esm {
            let outcome = match e.outcome {
                EsmOutcome::Arrest => "arrest",
                EsmOutcome::NoArrest => "no_arrest",
            };
            w.write_record([e.pair.0.to_string(), e.pair.1.to_string(), outcome.to_string()])
                .map_err(csv_err(&esm_path))?;
        }
        w.flush().map_err(Error::io(&esm_path))?;

        manifest_subjects.push(ManifestSubject {
            id: subject.id.clone(),
            electrodes: subject.electrodes.clone(),
            recordings,
            esm: esm_rel,
        });
    }

    let manifest = Manifest {
        sample_rate: dataset.sample_rate,
        tasks: dataset.tasks.clone(),
        region_names: dataset.region_names.clone(),
        subjects: manifest_subjects,
    };
    let manifest_path = root.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("serializable manifest"),
    )
    .map_err(Error::io(&manifest_path))?;
    Ok(())
}

/// Read back the manifest bytes, used for cache keying.
pub fn manifest_bytes(root: &Path) -> Result<Vec<u8>> {
    let path = root.join("manifest.json");
    fs::read(&path).map_err(Error::io(&path))
}

/// Derive per-electrode labels from stimulation outcomes.
///
/// An electrode in any arrest pair is critical (arrest dominates conflicting
/// outcomes); one appearing only in no-arrest pairs is non-critical; one
/// never stimulated stays untested. Pairs touching artifact-flagged
/// electrodes are ignored alongside the electrodes themselves.
pub fn derive_labels(
    esm_events: &[EsmEvent],
    electrodes: &[Electrode],
) -> Result<BTreeMap<ElectrodeId, ElectrodeLabel>> {
    let known: BTreeMap<ElectrodeId, bool> =
        electrodes.iter().map(|e| (e.id, e.valid)).collect();
    let mut labels: BTreeMap<ElectrodeId, ElectrodeLabel> = electrodes
        .iter()
        .filter(|e| e.valid)
        .map(|e| (e.id, ElectrodeLabel::Untested))
        .collect();

    for event in esm_events {
        let (a, b) = event.pair;
        if a == b {
            return Err(Error::Validation(format!(
                "stimulation pair repeats electrode {a}"
            )));
        }
        for id in [a, b] {
            if !known.contains_key(&id) {
                return Err(Error::Validation(format!(
                    "stimulation pair references unknown electrode {id}"
                )));
            }
        }
        if !(known[&a] && known[&b]) {
            continue; // pair touched an artifact electrode
        }
        for id in [a, b] {
            let label = labels.get_mut(&id).expect("validated above");
            match event.outcome {
                EsmOutcome::Arrest => *label = ElectrodeLabel::Critical,
                EsmOutcome::NoArrest => {
                    if *label == ElectrodeLabel::Untested {
                        *label = ElectrodeLabel::NonCritical;
                    }
                }
            }
        }
    }
    Ok(labels)
}
