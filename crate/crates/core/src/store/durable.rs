//! Embedded durable store with simulated replicas.
//!
//! Data is laid out like a wide-column table: row = event key, column =
//! updater name. Each replica keeps an in-memory index and, when given a
//! directory, appends every write to a per-writer segment file
//! `replica-<r>/<writer>.seg`. Conflicting versions resolve by latest
//! write time.
//!
//! Segment record layout, all integers big-endian:
//!
//! ```text
//! [u8 codec][u16 key len][key][u16 updater len][updater]
//! [u64 write_time millis][u64 ttl millis, 0 = forever][u32 body len][body]
//! ```

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use parking_lot::Mutex;

use super::{Consistency, SlateKey};
use crate::error::StoreError;
use crate::workflow::Ttl;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredSlate {
    pub codec: u8,
    pub body: Vec<u8>,
    pub write_time: u64,
    pub ttl: Ttl,
}

impl StoredSlate {
    pub fn expired_at(&self, now: u64) -> bool {
        match self.ttl {
            Ttl::Forever => false,
            Ttl::Millis(ttl) => self.write_time.saturating_add(ttl) < now,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub key: SlateKey,
    pub slate: StoredSlate,
}

impl Record {
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.slate.codec);
        out.extend_from_slice(&(self.key.key.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.key.key);
        out.extend_from_slice(&(self.key.updater.len() as u16).to_be_bytes());
        out.extend_from_slice(self.key.updater.as_bytes());
        out.extend_from_slice(&self.slate.write_time.to_be_bytes());
        out.extend_from_slice(&self.slate.ttl.as_record_millis().to_be_bytes());
        out.extend_from_slice(&(self.slate.body.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.slate.body);
    }

    /// Reads one record. `Ok(None)` at a clean end of input; a truncated
    /// trailing record (torn write) also yields `Ok(None)`.
    pub fn decode(r: &mut impl Read) -> Result<Option<Record>, StoreError> {
        let mut codec = [0u8; 1];
        match r.read_exact(&mut codec) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let mut body = || -> io::Result<Record> {
            let n = read_u16(r)? as usize;
            let key = read_chunk(r, n)?;
            let n = read_u16(r)? as usize;
            let updater = read_chunk(r, n)?;
            let write_time = read_u64(r)?;
            let ttl = read_u64(r)?;
            let n = read_u32(r)? as usize;
            let body = read_chunk(r, n)?;
            let updater = String::from_utf8(updater)
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "updater name is not UTF-8"))?;
            Ok(Record {
                key: SlateKey::new(updater, key),
                slate: StoredSlate {
                    codec: codec[0],
                    body,
                    write_time,
                    ttl: Ttl::from_record_millis(ttl),
                },
            })
        };
        match body() {
            Ok(rec) => Ok(Some(rec)),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(None),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => Err(StoreError::Corrupt(e.to_string())),
            Err(e) => Err(e.into()),
        }
    }
}

fn read_chunk(r: &mut impl Read, len: usize) -> io::Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_be_bytes(b))
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_be_bytes(b))
}

/// Reads every complete record of one segment file starting at `offset`,
/// returning the records and the offset just past the last complete one.
pub fn read_segment(path: &Path, offset: u64) -> Result<(Vec<Record>, u64), StoreError> {
    let mut file = File::open(path)?;
    let len = file.metadata()?.len();
    if offset >= len {
        return Ok((Vec::new(), offset));
    }
    io::Seek::seek(&mut file, io::SeekFrom::Start(offset))?;
    let mut reader = CountingReader {
        inner: BufReader::new(file),
        pos: offset,
    };
    let mut out = Vec::new();
    let mut end = offset;
    while let Some(rec) = Record::decode(&mut reader)? {
        out.push(rec);
        end = reader.pos;
    }
    Ok((out, end))
}

struct CountingReader<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.pos += n as u64;
        Ok(n)
    }
}

type Rows = HashMap<Vec<u8>, HashMap<String, StoredSlate>>;

struct Replica {
    up: AtomicBool,
    state: Mutex<ReplicaState>,
}

struct ReplicaState {
    rows: Rows,
    dir: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
    own_segment: Option<PathBuf>,
    /// Read offsets into segment files written by other processes.
    tails: HashMap<PathBuf, u64>,
}

impl ReplicaState {
    fn apply(&mut self, rec: Record) {
        let row = self.rows.entry(rec.key.key).or_default();
        match row.get(&rec.key.updater) {
            Some(existing) if existing.write_time > rec.slate.write_time => {}
            _ => {
                row.insert(rec.key.updater, rec.slate);
            }
        }
    }

    fn lookup(&self, sk: &SlateKey) -> Option<&StoredSlate> {
        self.rows.get(&sk.key)?.get(&sk.updater)
    }

    /// Pulls records appended by other writers since the last refresh.
    fn refresh(&mut self) -> Result<(), StoreError> {
        let Some(dir) = self.dir.clone() else {
            return Ok(());
        };
        for path in segment_files(&dir)? {
            if Some(&path) == self.own_segment.as_ref() {
                continue;
            }
            let offset = self.tails.get(&path).copied().unwrap_or(0);
            let (records, end) = read_segment(&path, offset)?;
            for rec in records {
                self.apply(rec);
            }
            self.tails.insert(path, end);
        }
        Ok(())
    }
}

fn segment_files(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "seg") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// A replicated key-value store for compressed slates.
pub struct DurableStore {
    replicas: Vec<Replica>,
    consistency: Consistency,
}

impl DurableStore {
    /// A store held entirely in memory.
    pub fn in_memory(replicas: usize, consistency: Consistency) -> Self {
        assert!(replicas >= 1, "a store needs at least one replica");
        Self {
            replicas: (0..replicas)
                .map(|_| Replica {
                    up: AtomicBool::new(true),
                    state: Mutex::new(ReplicaState {
                        rows: HashMap::new(),
                        dir: None,
                        writer: None,
                        own_segment: None,
                        tails: HashMap::new(),
                    }),
                })
                .collect(),
            consistency,
        }
    }

    /// Opens (or creates) a file-backed store under `path`, loading every
    /// existing segment. New writes go to `<writer>.seg` in each replica
    /// directory.
    pub fn open(path: &Path, replicas: usize, consistency: Consistency, writer: &str) -> Result<Self, StoreError> {
        let store = Self::in_memory(replicas, consistency);
        for (i, replica) in store.replicas.iter().enumerate() {
            let dir = path.join(format!("replica-{i}"));
            fs::create_dir_all(&dir)?;
            let own = dir.join(format!("{writer}.seg"));
            let mut st = replica.state.lock();
            st.dir = Some(dir);
            st.refresh()?;
            // Our own segment is read once at open, then only appended to.
            if own.exists() {
                let (records, _) = read_segment(&own, 0)?;
                for rec in records {
                    st.apply(rec);
                }
            }
            st.tails.remove(&own);
            let file = OpenOptions::new().create(true).append(true).open(&own)?;
            st.writer = Some(BufWriter::new(file));
            st.own_segment = Some(own);
        }
        Ok(store)
    }

    pub fn replica_count(&self) -> usize {
        self.replicas.len()
    }

    pub fn consistency(&self) -> Consistency {
        self.consistency
    }

    /// Simulates a replica outage (or recovery).
    pub fn set_replica_up(&self, replica: usize, up: bool) {
        self.replicas[replica].up.store(up, Ordering::SeqCst);
    }

    /// Writes at the store's configured consistency level.
    pub fn write(&self, sk: &SlateKey, slate: StoredSlate) -> Result<(), StoreError> {
        self.write_at(sk, slate, self.consistency)
    }

    /// Applies the write to every reachable replica; succeeds when the ack
    /// count meets `level`.
    pub fn write_at(&self, sk: &SlateKey, slate: StoredSlate, level: Consistency) -> Result<(), StoreError> {
        let needed = level.required(self.replicas.len());
        let rec = Record { key: sk.clone(), slate };
        let mut encoded = Vec::new();
        let mut acks = 0;
        for replica in self.replicas.iter().filter(|r| r.up.load(Ordering::SeqCst)) {
            let mut st = replica.state.lock();
            if let Some(w) = st.writer.as_mut() {
                if encoded.is_empty() {
                    rec.encode(&mut encoded);
                }
                if w.write_all(&encoded).and_then(|_| w.flush()).is_err() {
                    continue;
                }
            }
            st.apply(rec.clone());
            acks += 1;
        }
        if acks >= needed {
            Ok(())
        } else {
            Err(StoreError::Unavailable { acks, needed })
        }
    }

    /// Reads at the configured consistency level. Expired slates read as
    /// absent.
    pub fn read(&self, sk: &SlateKey, now: u64) -> Result<Option<StoredSlate>, StoreError> {
        self.read_at(sk, now, self.consistency)
    }

    pub fn read_at(&self, sk: &SlateKey, now: u64, level: Consistency) -> Result<Option<StoredSlate>, StoreError> {
        let needed = level.required(self.replicas.len());
        let mut acks = 0;
        let mut best: Option<StoredSlate> = None;
        for replica in self.replicas.iter().filter(|r| r.up.load(Ordering::SeqCst)) {
            let mut st = replica.state.lock();
            if st.lookup(sk).is_none() {
                st.refresh()?;
            }
            acks += 1;
            if let Some(found) = st.lookup(sk) {
                if best.as_ref().is_none_or(|b| found.write_time >= b.write_time) {
                    best = Some(found.clone());
                }
            }
        }
        if acks < needed {
            return Err(StoreError::Unavailable { acks, needed });
        }
        Ok(best.filter(|s| !s.expired_at(now)))
    }

    /// Drops every slate whose TTL has lapsed. Returns the distinct keys
    /// removed from any replica.
    pub fn remove_expired(&self, now: u64) -> Vec<SlateKey> {
        let mut removed = std::collections::HashSet::new();
        for replica in &self.replicas {
            let mut st = replica.state.lock();
            st.rows.retain(|key, cols| {
                cols.retain(|updater, slate| {
                    let keep = !slate.expired_at(now);
                    if !keep {
                        removed.insert(SlateKey::new(updater.clone(), key.clone()));
                    }
                    keep
                });
                !cols.is_empty()
            });
        }
        let mut out: Vec<_> = removed.into_iter().collect();
        out.sort();
        out
    }

    /// Latest live version of every slate across reachable replicas.
    pub fn snapshot(&self, now: u64) -> Vec<(SlateKey, StoredSlate)> {
        let mut merged: HashMap<SlateKey, StoredSlate> = HashMap::new();
        for replica in self.replicas.iter().filter(|r| r.up.load(Ordering::SeqCst)) {
            let mut st = replica.state.lock();
            let _ = st.refresh();
            for (key, cols) in &st.rows {
                for (updater, slate) in cols {
                    let sk = SlateKey::new(updater.clone(), key.clone());
                    match merged.get(&sk) {
                        Some(b) if b.write_time > slate.write_time => {}
                        _ => {
                            merged.insert(sk, slate.clone());
                        }
                    }
                }
            }
        }
        let mut out: Vec<_> = merged.into_iter().filter(|(_, s)| !s.expired_at(now)).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// Offline reader for a store directory: the latest version of every slate
/// found in any replica's segment files.
pub fn dump_dir(path: &Path) -> Result<Vec<(SlateKey, StoredSlate)>, StoreError> {
    let mut merged: HashMap<SlateKey, StoredSlate> = HashMap::new();
    let mut replica_dirs: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    replica_dirs.sort();
    for dir in replica_dirs {
        for seg in segment_files(&dir)? {
            for rec in read_segment(&seg, 0)?.0 {
                match merged.get(&rec.key) {
                    Some(b) if b.write_time > rec.slate.write_time => {}
                    _ => {
                        merged.insert(rec.key, rec.slate);
                    }
                }
            }
        }
    }
    let mut out: Vec<_> = merged.into_iter().collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}
