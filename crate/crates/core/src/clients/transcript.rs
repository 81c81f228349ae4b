//! Transcript recording and replay.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ClientError, ClientRequest, ClientResponse, LmClient, TemplateId};
use crate::error::{Error, Result};

/// One line of a transcript file. `ts` is a per-transcript sequence number, not wall time,
/// so identical runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub template_id: TemplateId,
    pub template_hash: String,
    pub request: ClientRequest,
    pub response: ClientResponse,
    pub ts: u64,
}

struct Sink {
    file: Option<File>,
    entries: Vec<TranscriptEntry>,
    next_ts: u64,
}

/// Wraps a client and records every successful exchange, in memory and optionally to a
/// JSONL file.
pub struct Journaled<C> {
    inner: C,
    path: Option<PathBuf>,
    sink: Mutex<Sink>,
}

impl<C: LmClient> Journaled<C> {
    pub fn in_memory(inner: C) -> Self {
        Journaled {
            inner,
            path: None,
            sink: Mutex::new(Sink {
                file: None,
                entries: Vec::new(),
                next_ts: 0,
            }),
        }
    }

    /// Appends to `path`, continuing its sequence numbers if it already has entries.
    pub fn to_file(inner: C, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let next_ts = if path.exists() {
            read_transcript(&path)?.iter().map(|e| e.ts + 1).max().unwrap_or(0)
        } else {
            0
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Journaled {
            inner,
            path: Some(path),
            sink: Mutex::new(Sink {
                file: Some(file),
                entries: Vec::new(),
                next_ts,
            }),
        })
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Entries recorded by this wrapper so far.
    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.sink.lock().expect("transcript lock").entries.clone()
    }
}

impl<C: LmClient> LmClient for Journaled<C> {
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }

    fn send(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
        let response = self.inner.send(request)?;
        let mut sink = self.sink.lock().expect("transcript lock");
        let entry = TranscriptEntry {
            template_id: request.template_id,
            template_hash: request.template_id.hash(),
            request: request.clone(),
            response: response.clone(),
            ts: sink.next_ts,
        };
        sink.next_ts += 1;
        if let Some(file) = sink.file.as_mut() {
            let line = serde_json::to_string(&entry).expect("serializable");
            writeln!(file, "{line}").map_err(|e| ClientError::Transport(format!("writing transcript: {e}")))?;
        }
        sink.entries.push(entry);
        Ok(response)
    }
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: TranscriptEntry =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, Some(i + 1), e.to_string()))?;
        out.push(entry);
    }
    Ok(out)
}

type ReplayKey = (TemplateId, String);

/// Answers requests from a recorded transcript. Identical requests are answered in the
/// order they were recorded; the last answer repeats once the queue runs dry.
pub struct ReplayClient {
    queues: Mutex<BTreeMap<ReplayKey, (VecDeque<ClientResponse>, ClientResponse)>>,
    fingerprint: String,
}

impl ReplayClient {
    pub fn new(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        let mut sorted: Vec<TranscriptEntry> = entries.into_iter().collect();
        sorted.sort_by_key(|e| e.ts);
        let mut queues: BTreeMap<ReplayKey, (VecDeque<ClientResponse>, ClientResponse)> = BTreeMap::new();
        for e in sorted {
            let key = key_of(&e.request);
            queues
                .entry(key)
                .and_modify(|(q, last)| {
                    q.push_back(e.response.clone());
                    *last = e.response.clone();
                })
                .or_insert_with(|| (VecDeque::from([e.response.clone()]), e.response));
        }
        ReplayClient {
            queues: Mutex::new(queues),
            fingerprint: "replay".into(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut client = ReplayClient::new(read_transcript(path)?);
        client.fingerprint = format!("replay:{}", path.display());
        Ok(client)
    }
}

fn key_of(request: &ClientRequest) -> ReplayKey {
    let slots = serde_json::to_string(&request.slots).expect("serializable");
    (request.template_id, slots)
}

impl LmClient for ReplayClient {
    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn max_in_flight(&self) -> usize {
        usize::MAX
    }

    fn send(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
        let mut queues = self.queues.lock().expect("replay lock");
        let (queue, last) = queues
            .get_mut(&key_of(request))
            .ok_or(ClientError::NotRecorded(request.template_id))?;
        Ok(queue.pop_front().unwrap_or_else(|| last.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{plan_query, MockClient};
    use super::*;

    #[test]
    fn record_then_replay_matches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let scene = r#"[{"id":3,"object_tag":"mug"},{"id":5,"object_tag":"chair"}]"#;
        let queries = ["a mug", "somewhere to sit", "a rocket"];
        let recorded: Vec<_> = {
            let j = Journaled::to_file(MockClient::default(), &path).unwrap();
            queries.iter().map(|q| plan_query(&j, scene, q).unwrap()).collect()
        };
        let entries = read_transcript(&path).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries.iter().map(|e| e.ts).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(entries.iter().all(|e| e.template_hash == TemplateId::PlanQuery.hash()));

        let replay = ReplayClient::from_file(&path).unwrap();
        let replayed: Vec<_> = queries.iter().map(|q| plan_query(&replay, scene, q).unwrap()).collect();
        assert_eq!(recorded, replayed);
        assert!(matches!(
            plan_query(&replay, scene, "unseen"),
            Err(ClientError::NotRecorded(TemplateId::PlanQuery))
        ));
    }

    #[test]
    fn appending_continues_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        for _ in 0..2 {
            let j = Journaled::to_file(MockClient::default(), &path).unwrap();
            plan_query(&j, "[]", "x").unwrap();
        }
        let ts: Vec<u64> = read_transcript(&path).unwrap().iter().map(|e| e.ts).collect();
        assert_eq!(ts, vec![0, 1]);
    }
}
