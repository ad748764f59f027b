//! Durable study state: an append-only JSON-lines log replayed on open.
//!
//! Every accepted study and choice is one line, written with a single
//! `write_all` before the request is acknowledged, so a killed process loses
//! nothing it has confirmed. A torn final line (no trailing newline) is
//! dropped on replay; any other unreadable line is an error.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::model::{compute_results, presented_left, ChoiceRecord, NextPair, PairTask, Side, Study, StudyManifest, StudyResults};
use crate::StudyError;

pub const LOG_FILE: &str = "study-log.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Entry {
    Study(Study),
    Choice(ChoiceRecord),
}

struct StudyState {
    study: Study,
    pair_index: HashMap<String, usize>,
    records: Vec<ChoiceRecord>,
    answered: HashMap<String, HashSet<usize>>,
}

impl StudyState {
    fn new(study: Study) -> Self {
        let pair_index = study.manifest.pairs.iter().enumerate().map(|(i, p)| (p.pair_id.clone(), i)).collect();
        Self { study, pair_index, records: Vec::new(), answered: HashMap::new() }
    }

    fn accept(&mut self, record: ChoiceRecord) -> Result<(), StudyError> {
        let &i = self
            .pair_index
            .get(&record.pair_id)
            .ok_or_else(|| StudyError::UnknownPair(record.pair_id.clone()))?;
        let answered = self.answered.entry(record.participant_id.clone()).or_default();
        if answered.contains(&i) {
            return Err(StudyError::Conflict { participant_id: record.participant_id, pair_id: record.pair_id });
        }
        answered.insert(i);
        self.records.push(record);
        Ok(())
    }

    fn completed(&self, participant: &str) -> usize {
        self.answered.get(participant).map_or(0, HashSet::len)
    }
}

struct Inner {
    studies: BTreeMap<String, StudyState>,
    log: File,
}

/// Thread-safe store; all mutations go through one lock and one file handle.
pub struct Store {
    inner: Mutex<Inner>,
    path: PathBuf,
}

fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl Store {
    /// Opens (creating if needed) the log in `data_dir` and replays it.
    pub fn open(data_dir: impl AsRef<Path>) -> Result<Self, StudyError> {
        let dir = data_dir.as_ref();
        fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let mut studies = BTreeMap::new();
        let mut keep = 0usize;
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            let mut offset = 0usize;
            for (n, line) in text.split_inclusive('\n').enumerate() {
                let complete = line.ends_with('\n');
                let body = line.trim_end_matches(['\n', '\r']);
                offset += line.len();
                if body.trim().is_empty() {
                    keep = offset;
                    continue;
                }
                let entry: Entry = match serde_json::from_str(body) {
                    Ok(e) => e,
                    Err(_) if !complete => {
                        tracing::warn!(line = n + 1, "dropping torn final log line");
                        break;
                    }
                    Err(e) => return Err(StudyError::CorruptLog { line: n + 1, message: e.to_string() }),
                };
                let corrupt = |m: String| StudyError::CorruptLog { line: n + 1, message: m };
                match entry {
                    Entry::Study(study) => {
                        studies.entry(study.study_id.clone()).or_insert_with(|| StudyState::new(study));
                    }
                    Entry::Choice(record) => {
                        let state = studies
                            .get_mut(&record.study_id)
                            .ok_or_else(|| corrupt(format!("choice for unknown study {:?}", record.study_id)))?;
                        state.accept(record).map_err(|e| corrupt(e.to_string()))?;
                    }
                }
                keep = offset;
            }
            if keep < text.len() {
                OpenOptions::new().write(true).open(&path)?.set_len(keep as u64)?;
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { inner: Mutex::new(Inner { studies, log }), path })
    }

    pub fn log_path(&self) -> &Path {
        &self.path
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn append(log: &mut File, entry: &Entry) -> Result<(), StudyError> {
        let mut line = serde_json::to_vec(entry).expect("log entry serializes");
        line.push(b'\n');
        log.write_all(&line)?;
        Ok(())
    }

    /// Returns the study id and whether the study was new.
    pub fn create_study(&self, manifest: StudyManifest) -> Result<(String, bool), StudyError> {
        manifest.validate()?;
        let study_id = manifest.content_id();
        let mut inner = self.lock();
        if inner.studies.contains_key(&study_id) {
            return Ok((study_id, false));
        }
        let study = Study { study_id: study_id.clone(), manifest, created_at: now_millis() };
        let entry = Entry::Study(study);
        Self::append(&mut inner.log, &entry)?;
        let Entry::Study(study) = entry else { unreachable!() };
        inner.studies.insert(study_id.clone(), StudyState::new(study));
        Ok((study_id, true))
    }

    pub fn study(&self, study_id: &str) -> Result<Study, StudyError> {
        let inner = self.lock();
        let state = inner.studies.get(study_id).ok_or_else(|| StudyError::UnknownStudy(study_id.to_owned()))?;
        Ok(state.study.clone())
    }

    pub fn study_ids(&self) -> Vec<String> {
        self.lock().studies.keys().cloned().collect()
    }

    /// The lowest-index pair this participant has not answered.
    pub fn next_pair(&self, study_id: &str, participant_id: &str) -> Result<NextPair, StudyError> {
        check_participant(participant_id)?;
        let inner = self.lock();
        let state = inner.studies.get(study_id).ok_or_else(|| StudyError::UnknownStudy(study_id.to_owned()))?;
        let pairs = &state.study.manifest.pairs;
        let answered = state.answered.get(participant_id);
        let completed = state.completed(participant_id);
        let total = pairs.len();
        let next = (0..total).find(|i| !answered.is_some_and(|a| a.contains(i)));
        Ok(match next {
            None => NextPair::Done { completed, total },
            Some(i) => {
                let p = &pairs[i];
                let left = presented_left(study_id, participant_id, &p.pair_id);
                let (l, r) = match left {
                    Side::A => (&p.image_a_id, &p.image_b_id),
                    Side::B => (&p.image_b_id, &p.image_a_id),
                };
                NextPair::Pair {
                    task: PairTask {
                        pair_id: p.pair_id.clone(),
                        pair_index: i,
                        prompt: p.prompt.clone(),
                        left_image_id: l.clone(),
                        right_image_id: r.clone(),
                        presented_left: left,
                    },
                    completed,
                    total,
                }
            }
        })
    }

    /// Appends a choice; a second choice for the same participant and pair is a conflict.
    pub fn record_choice(&self, study_id: &str, participant_id: &str, pair_id: &str, choice: Side) -> Result<ChoiceRecord, StudyError> {
        check_participant(participant_id)?;
        let mut guard = self.lock();
        let inner = &mut *guard;
        let state = inner.studies.get_mut(study_id).ok_or_else(|| StudyError::UnknownStudy(study_id.to_owned()))?;
        let &i = state.pair_index.get(pair_id).ok_or_else(|| StudyError::UnknownPair(pair_id.to_owned()))?;
        if state.answered.get(participant_id).is_some_and(|a| a.contains(&i)) {
            return Err(StudyError::Conflict { participant_id: participant_id.to_owned(), pair_id: pair_id.to_owned() });
        }
        let record = ChoiceRecord {
            study_id: study_id.to_owned(),
            participant_id: participant_id.to_owned(),
            pair_id: pair_id.to_owned(),
            choice,
            presented_left: presented_left(study_id, participant_id, pair_id),
            received_at: now_millis(),
        };
        let entry = Entry::Choice(record);
        Self::append(&mut inner.log, &entry)?;
        let Entry::Choice(record) = entry else { unreachable!() };
        state.accept(record.clone())?;
        Ok(record)
    }

    pub fn completed(&self, study_id: &str, participant_id: &str) -> Result<(usize, usize), StudyError> {
        let inner = self.lock();
        let state = inner.studies.get(study_id).ok_or_else(|| StudyError::UnknownStudy(study_id.to_owned()))?;
        Ok((state.completed(participant_id), state.study.manifest.pairs.len()))
    }

    pub fn results(&self, study_id: &str) -> Result<StudyResults, StudyError> {
        let inner = self.lock();
        let state = inner.studies.get(study_id).ok_or_else(|| StudyError::UnknownStudy(study_id.to_owned()))?;
        Ok(compute_results(&state.study, state.records.iter()))
    }
}

fn check_participant(participant_id: &str) -> Result<(), StudyError> {
    if participant_id.trim().is_empty() {
        return Err(StudyError::InvalidRequest("participant id must not be empty".into()));
    }
    Ok(())
}
