use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use base64::Engine;
use parking_lot::Mutex;

use crate::model::Event;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossReason {
    SendFailed,
    QueueDropped,
    OperatorError,
    StoreError,
    /// Queued on, or emitted by, a node at the moment it crashed.
    NodeCrashed,
}

impl fmt::Display for LossReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossReason::SendFailed => "SEND_FAILED",
            LossReason::QueueDropped => "QUEUE_DROPPED",
            LossReason::OperatorError => "OPERATOR_ERROR",
            LossReason::StoreError => "STORE_ERROR",
            LossReason::NodeCrashed => "NODE_CRASHED",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LostEvent {
    pub event: Event,
    pub dest: String,
    pub reason: LossReason,
    pub wall_millis: u64,
}

/// Append-only ledger of every event that was not delivered or not
/// processed.
#[derive(Default)]
pub struct LostEventLog {
    entries: Mutex<Vec<LostEvent>>,
    sink: Mutex<Option<BufWriter<File>>>,
}

impl LostEventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also appends each entry as a line to `path`.
    pub fn with_file(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: Mutex::new(Vec::new()),
            sink: Mutex::new(Some(BufWriter::new(file))),
        })
    }

    pub fn record(&self, event: &Event, dest: &str, reason: LossReason) {
        let wall_millis = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        tracing::debug!(%reason, dest, sid = %event.sid, ts = %event.ts, "event lost");
        if let Some(w) = self.sink.lock().as_mut() {
            let _ = writeln!(
                w,
                "{wall_millis}\t{reason}\t{dest}\t{}\t{}\t{}\t{}\t{}",
                event.sid,
                event.ts.millis,
                event.ts.seq,
                crate::source::encode_key(&event.key),
                base64::engine::general_purpose::STANDARD.encode(&event.value),
            );
            let _ = w.flush();
        }
        self.entries.lock().push(LostEvent {
            event: event.clone(),
            dest: dest.to_string(),
            reason,
            wall_millis,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, reason: LossReason) -> usize {
        self.entries.lock().iter().filter(|e| e.reason == reason).count()
    }

    pub fn entries(&self) -> Vec<LostEvent> {
        self.entries.lock().clone()
    }
}
