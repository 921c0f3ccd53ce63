//! File replay sources: one event per line,
//! `sid TAB millis TAB seq TAB key TAB base64(value)`, sorted by
//! `(millis, seq)`. Keys are percent-encoded so tabs and newlines survive.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use percent_encoding::{percent_decode, percent_encode, AsciiSet, CONTROLS};

use crate::error::{Error, Result};
use crate::flow::{Pacer, SourceGate};
use crate::model::{Event, Timestamp};

const KEY_SET: &AsciiSet = &CONTROLS.add(b'%').add(b'/').add(b' ').add(b'?').add(b'#');

pub fn encode_key(key: &[u8]) -> String {
    percent_encode(key, KEY_SET).to_string()
}

pub fn decode_key(s: &str) -> Vec<u8> {
    percent_decode(s.as_bytes()).collect()
}

pub fn producer_for(sid: &str) -> String {
    format!("src:{sid}")
}

pub fn format_record(e: &Event) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}",
        e.sid,
        e.ts.millis,
        e.ts.seq,
        encode_key(&e.key),
        STANDARD.encode(&e.value)
    )
}

/// Parses one record. `producer` is set to `src:<sid>` unless given.
pub fn parse_record(line: &str, producer: Option<&str>) -> std::result::Result<Event, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 tab-separated fields, found {}", fields.len()));
    }
    if fields[0].is_empty() {
        return Err("empty stream id".into());
    }
    let millis = fields[1].parse::<u64>().map_err(|e| format!("bad millis: {e}"))?;
    let seq = fields[2].parse::<u64>().map_err(|e| format!("bad seq: {e}"))?;
    let value = STANDARD
        .decode(fields[4])
        .map_err(|e| format!("bad base64 value: {e}"))?;
    Ok(Event::new(
        fields[0],
        Timestamp::new(millis, seq),
        decode_key(fields[3]),
        value,
        producer.map(str::to_string).unwrap_or_else(|| producer_for(fields[0])),
    ))
}

/// Iterates a source file, failing at the first malformed line or the first
/// timestamp inversion.
pub struct FileSource<R> {
    lines: std::io::Lines<R>,
    path: String,
    line_no: usize,
    last: Option<Timestamp>,
    halted: bool,
}

impl FileSource<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::from_reader(
            BufReader::new(File::open(path)?),
            &path.display().to_string(),
        ))
    }
}

impl<R: BufRead> FileSource<R> {
    pub fn from_reader(reader: R, name: &str) -> Self {
        Self {
            lines: reader.lines(),
            path: name.to_string(),
            line_no: 0,
            last: None,
            halted: false,
        }
    }

    fn error(&mut self, message: String) -> Error {
        self.halted = true;
        Error::Source {
            path: self.path.clone(),
            line: self.line_no,
            message,
        }
    }
}

impl<R: BufRead> Iterator for FileSource<R> {
    type Item = Result<Event>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.halted {
            return None;
        }
        loop {
            self.line_no += 1;
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(self.error(e.to_string()))),
            };
            if line.is_empty() {
                continue;
            }
            let ev = match parse_record(&line, None) {
                Ok(ev) => ev,
                Err(m) => return Some(Err(self.error(m))),
            };
            if let Some(prev) = self.last {
                if ev.ts < prev {
                    let msg = format!("timestamp {} precedes {}", ev.ts, prev);
                    return Some(Err(self.error(msg)));
                }
            }
            self.last = Some(ev.ts);
            return Some(Ok(ev));
        }
    }
}

/// Reads a whole source file into memory.
pub fn read_source(path: &Path) -> Result<Vec<Event>> {
    FileSource::open(path)?.collect()
}

pub fn write_source(path: &Path, events: &[Event]) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for e in events {
        writeln!(w, "{}", format_record(e))?;
    }
    w.flush()?;
    Ok(())
}

/// Replays `events` into `sink`, obeying `gate` before each one. Returns
/// the number of events emitted.
pub fn replay<I>(events: I, gate: &SourceGate, mut sink: impl FnMut(Event)) -> Result<u64>
where
    I: IntoIterator<Item = Result<Event>>,
{
    let mut pacer = Pacer::default();
    let mut n = 0;
    for ev in events {
        let ev = ev?;
        pacer.wait(gate);
        sink(ev);
        n += 1;
    }
    Ok(n)
}
