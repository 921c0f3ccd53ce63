//! Length-prefixed binary frames for node-to-node and node-to-master
//! traffic. All integers are big-endian.
//!
//! ```text
//! frame      = [u32 len of (type + payload)][u8 type][payload]
//! EVENT      (1) = [u16 sid len][sid][u64 millis][u64 seq][u16 producer len][producer]
//!                  [u16 key len][key][u16 fn len][dest fn][u32 value len][value]
//! MEMBERSHIP (2) = [u64 epoch][u16 node count]([u16 len][addr])*
//! FAILURE    (3) = [u64 observed epoch][u16 len][addr]
//! SLATE_FETCH_FWD (4) = [u8 kind][u64 request id] then
//!                  kind 0 request:   [u16 updater len][updater][u16 key len][key]
//!                  kind 1 found:     [u32 len][body]
//!                  kind 2 not found: (nothing)
//!                  kind 3 error:     [u16 len][reason]
//! THROTTLE   (5) = [u8 paused][u16 stream count]([u16 len][stream])*
//! ```

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::model::{Event, Timestamp};

pub const MSG_EVENT: u8 = 1;
pub const MSG_MEMBERSHIP: u8 = 2;
pub const MSG_FAILURE_REPORT: u8 = 3;
pub const MSG_SLATE_FETCH_FWD: u8 = 4;
pub const MSG_THROTTLE: u8 = 5;

/// Upper bound on a single frame; larger length prefixes are rejected.
pub const MAX_FRAME: u32 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FetchKind {
    Request { updater: String, key: Vec<u8> },
    Found(Vec<u8>),
    NotFound,
    Error(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Event { event: Event, dest: String },
    Membership { epoch: u64, nodes: Vec<String> },
    FailureReport { epoch: u64, node: String },
    SlateFetch { request_id: u64, kind: FetchKind },
    Throttle { paused: bool, streams: Vec<String> },
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn short(&mut self, bytes: &[u8]) -> Result<()> {
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Wire(format!("field of {} bytes exceeds u16", bytes.len())))?;
        self.u16(len);
        self.0.extend_from_slice(bytes);
        Ok(())
    }
    fn long(&mut self, bytes: &[u8]) -> Result<()> {
        let len = u32::try_from(bytes.len()).map_err(|_| Error::Wire("field exceeds u32".into()))?;
        self.u32(len);
        self.0.extend_from_slice(bytes);
        Ok(())
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Wire("truncated payload".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn short(&mut self) -> Result<Vec<u8>> {
        let n = self.u16()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn long(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn text(&mut self) -> Result<String> {
        String::from_utf8(self.short()?).map_err(|_| Error::Wire("text field is not UTF-8".into()))
    }
    fn done(&self) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(Error::Wire(format!("{} trailing bytes", self.0.len())))
        }
    }
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Event { .. } => MSG_EVENT,
            Message::Membership { .. } => MSG_MEMBERSHIP,
            Message::FailureReport { .. } => MSG_FAILURE_REPORT,
            Message::SlateFetch { .. } => MSG_SLATE_FETCH_FWD,
            Message::Throttle { .. } => MSG_THROTTLE,
        }
    }

    /// Encodes a complete frame including the length prefix.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer(vec![0, 0, 0, 0]);
        w.u8(self.msg_type());
        match self {
            Message::Event { event, dest } => {
                w.short(event.sid.as_bytes())?;
                w.u64(event.ts.millis);
                w.u64(event.ts.seq);
                w.short(event.producer.as_bytes())?;
                w.short(&event.key)?;
                w.short(dest.as_bytes())?;
                w.long(&event.value)?;
            }
            Message::Membership { epoch, nodes } => {
                w.u64(*epoch);
                w.u16(u16::try_from(nodes.len()).map_err(|_| Error::Wire("too many nodes".into()))?);
                for n in nodes {
                    w.short(n.as_bytes())?;
                }
            }
            Message::FailureReport { epoch, node } => {
                w.u64(*epoch);
                w.short(node.as_bytes())?;
            }
            Message::SlateFetch { request_id, kind } => {
                let tag = match kind {
                    FetchKind::Request { .. } => 0,
                    FetchKind::Found(_) => 1,
                    FetchKind::NotFound => 2,
                    FetchKind::Error(_) => 3,
                };
                w.u8(tag);
                w.u64(*request_id);
                match kind {
                    FetchKind::Request { updater, key } => {
                        w.short(updater.as_bytes())?;
                        w.short(key)?;
                    }
                    FetchKind::Found(body) => w.long(body)?,
                    FetchKind::NotFound => {}
                    FetchKind::Error(reason) => w.short(reason.as_bytes())?,
                }
            }
            Message::Throttle { paused, streams } => {
                w.u8(u8::from(*paused));
                w.u16(u16::try_from(streams.len()).map_err(|_| Error::Wire("too many streams".into()))?);
                for s in streams {
                    w.short(s.as_bytes())?;
                }
            }
        }
        let len = (w.0.len() - 4) as u32;
        if len > MAX_FRAME {
            return Err(Error::Wire(format!("frame of {len} bytes exceeds limit")));
        }
        w.0[..4].copy_from_slice(&len.to_be_bytes());
        Ok(w.0)
    }

    /// Decodes the bytes following the length prefix.
    pub fn decode_body(body: &[u8]) -> Result<Message> {
        let mut r = Reader(body);
        let msg = match r.u8()? {
            MSG_EVENT => {
                let sid = r.text()?;
                let millis = r.u64()?;
                let seq = r.u64()?;
                let producer = r.text()?;
                let key = r.short()?;
                let dest = r.text()?;
                let value = r.long()?;
                Message::Event {
                    event: Event {
                        sid,
                        ts: Timestamp::new(millis, seq),
                        key,
                        value,
                        producer,
                    },
                    dest,
                }
            }
            MSG_MEMBERSHIP => {
                let epoch = r.u64()?;
                let count = r.u16()?;
                let nodes = (0..count).map(|_| r.text()).collect::<Result<_>>()?;
                Message::Membership { epoch, nodes }
            }
            MSG_FAILURE_REPORT => Message::FailureReport {
                epoch: r.u64()?,
                node: r.text()?,
            },
            MSG_SLATE_FETCH_FWD => {
                let tag = r.u8()?;
                let request_id = r.u64()?;
                let kind = match tag {
                    0 => FetchKind::Request {
                        updater: r.text()?,
                        key: r.short()?,
                    },
                    1 => FetchKind::Found(r.long()?),
                    2 => FetchKind::NotFound,
                    3 => FetchKind::Error(r.text()?),
                    t => return Err(Error::Wire(format!("unknown fetch kind {t}"))),
                };
                Message::SlateFetch { request_id, kind }
            }
            MSG_THROTTLE => {
                let paused = r.u8()? != 0;
                let count = r.u16()?;
                let streams = (0..count).map(|_| r.text()).collect::<Result<_>>()?;
                Message::Throttle { paused, streams }
            }
            t => return Err(Error::Wire(format!("unknown message type {t}"))),
        };
        r.done()?;
        Ok(msg)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.encode()?)?;
        w.flush()?;
        Ok(())
    }

    /// Reads one frame. `Ok(None)` on a clean end of stream.
    pub fn read_from(r: &mut impl Read) -> Result<Option<Message>> {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_be_bytes(len);
        if len == 0 || len > MAX_FRAME {
            return Err(Error::Wire(format!("bad frame length {len}")));
        }
        let mut body = vec![0u8; len as usize];
        r.read_exact(&mut body)?;
        Message::decode_body(&body).map(Some)
    }
}
