//! Binary and text encodings of checkpoints and write-ahead logs.
//!
//! Binary layout: 4-byte magic, u16 format version, then a body of
//! big-endian integers and u32-length-prefixed byte strings. The text dump
//! prints one operation per line (`seq issuer clock kind key operand`) and is
//! what golden-file tests compare.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::{Checkpoint, WalEntry};
use crate::model::{InstanceId, LogicalClock, ObjectId, OpKind, OpMode, Operation, StateKey, Ts, TsEntry, Value, VertexId};

pub const WAL_MAGIC: &[u8; 4] = b"CHCW";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CHCK";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("truncated input at offset {0}")]
    Truncated(usize),
    #[error("invalid tag {tag} at offset {at}")]
    BadTag { tag: u8, at: usize },
    #[error("invalid utf-8 at offset {0}")]
    BadUtf8(usize),
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

#[derive(Default)]
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
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }

    fn value(&mut self, v: &Value) {
        match v {
            Value::None => self.u8(0),
            Value::Int(i) => {
                self.u8(1);
                self.u64(*i as u64);
            }
            Value::List(items) => {
                self.u8(2);
                self.u32(items.len() as u32);
                for i in items {
                    self.value(i);
                }
            }
            Value::Map(m) => {
                self.u8(3);
                self.u32(m.len() as u32);
                for (k, v) in m {
                    self.bytes(k.as_bytes());
                    self.value(v);
                }
            }
            Value::Bytes(b) => {
                self.u8(4);
                self.bytes(b);
            }
        }
    }

    fn key(&mut self, k: &StateKey) {
        self.u16(k.vertex.0);
        match k.instance {
            Some(i) => {
                self.u8(1);
                self.u16(i.0);
            }
            None => self.u8(0),
        }
        self.bytes(&k.obj_key);
    }

    fn object(&mut self, o: &ObjectId) {
        self.u16(o.vertex.0);
        self.u8(o.per_flow as u8);
        self.bytes(&o.obj_key);
    }

    fn op(&mut self, op: &Operation) {
        match &op.kind {
            OpKind::Increment(d) => {
                self.u8(1);
                self.u64(*d as u64);
            }
            OpKind::Decrement(d) => {
                self.u8(2);
                self.u64(*d as u64);
            }
            OpKind::Push(v) => {
                self.u8(3);
                self.value(v);
            }
            OpKind::Pop => self.u8(4),
            OpKind::CompareAndUpdate { expected, new } => {
                self.u8(5);
                self.value(expected);
                self.value(new);
            }
            OpKind::Read => self.u8(6),
            OpKind::Write(v) => {
                self.u8(7);
                self.value(v);
            }
            OpKind::Custom { name, arg } => {
                self.u8(8);
                self.bytes(name.as_bytes());
                self.value(arg);
            }
        }
        self.key(&op.key);
        self.u8(matches!(op.mode, OpMode::Blocking) as u8);
        self.u64(op.clock.raw());
        self.u16(op.issuer.0);
        self.u64(op.seq);
        match op.tag {
            Some(t) => {
                self.u8(1);
                self.u32(t);
            }
            None => self.u8(0),
        }
        self.u8(op.cached as u8);
    }

    fn ts(&mut self, ts: &Ts) {
        self.u32(ts.entries.len() as u32);
        for (i, e) in &ts.entries {
            self.u16(i.0);
            self.u64(e.clock.raw());
            self.u64(e.seq);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() - self.pos < n {
            return Err(CodecError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn string(&mut self) -> Result<String, CodecError> {
        let at = self.pos;
        String::from_utf8(self.bytes()?).map_err(|_| CodecError::BadUtf8(at))
    }

    fn value(&mut self) -> Result<Value, CodecError> {
        let at = self.pos;
        Ok(match self.u8()? {
            0 => Value::None,
            1 => Value::Int(self.u64()? as i64),
            2 => {
                let n = self.u32()?;
                let mut items = Vec::new();
                for _ in 0..n {
                    items.push(self.value()?);
                }
                Value::List(items)
            }
            3 => {
                let n = self.u32()?;
                let mut m = BTreeMap::new();
                for _ in 0..n {
                    let k = self.string()?;
                    m.insert(k, self.value()?);
                }
                Value::Map(m)
            }
            4 => Value::Bytes(self.bytes()?),
            tag => return Err(CodecError::BadTag { tag, at }),
        })
    }

    fn key(&mut self) -> Result<StateKey, CodecError> {
        let vertex = VertexId(self.u16()?);
        let at = self.pos;
        let instance = match self.u8()? {
            0 => None,
            1 => Some(InstanceId(self.u16()?)),
            tag => return Err(CodecError::BadTag { tag, at }),
        };
        Ok(StateKey {
            vertex,
            instance,
            obj_key: self.bytes()?,
        })
    }

    fn object(&mut self) -> Result<ObjectId, CodecError> {
        Ok(ObjectId {
            vertex: VertexId(self.u16()?),
            per_flow: self.u8()? != 0,
            obj_key: self.bytes()?,
        })
    }

    fn op(&mut self) -> Result<Operation, CodecError> {
        let at = self.pos;
        let kind = match self.u8()? {
            1 => OpKind::Increment(self.u64()? as i64),
            2 => OpKind::Decrement(self.u64()? as i64),
            3 => OpKind::Push(self.value()?),
            4 => OpKind::Pop,
            5 => OpKind::CompareAndUpdate {
                expected: self.value()?,
                new: self.value()?,
            },
            6 => OpKind::Read,
            7 => OpKind::Write(self.value()?),
            8 => OpKind::Custom {
                name: self.string()?,
                arg: self.value()?,
            },
            tag => return Err(CodecError::BadTag { tag, at }),
        };
        let key = self.key()?;
        let mode = if self.u8()? == 1 { OpMode::Blocking } else { OpMode::NonBlocking };
        let clock = LogicalClock::from_raw(self.u64()?);
        let issuer = InstanceId(self.u16()?);
        let seq = self.u64()?;
        let tag = if self.u8()? == 1 { Some(self.u32()?) } else { None };
        let cached = self.u8()? != 0;
        Ok(Operation {
            kind,
            key,
            mode,
            clock,
            issuer,
            seq,
            tag,
            cached,
        })
    }

    fn ts(&mut self) -> Result<Ts, CodecError> {
        let n = self.u32()?;
        let mut ts = Ts::new();
        for _ in 0..n {
            let i = InstanceId(self.u16()?);
            let clock = LogicalClock::from_raw(self.u64()?);
            let seq = self.u64()?;
            ts.record(i, TsEntry { clock, seq });
        }
        Ok(ts)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<(), CodecError> {
        let m: [u8; 4] = self.take(4)?.try_into().unwrap();
        if &m != magic {
            return Err(CodecError::BadMagic(m));
        }
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(CodecError::BadVersion(v));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), CodecError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(CodecError::Trailing(n)),
        }
    }
}

pub fn encode_wal(entries: &[WalEntry]) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(WAL_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u32(entries.len() as u32);
    for e in entries {
        w.u64(e.seq);
        w.op(&e.op);
    }
    w.0
}

pub fn decode_wal(buf: &[u8]) -> Result<Vec<WalEntry>, CodecError> {
    let mut r = Reader { buf, pos: 0 };
    r.header(WAL_MAGIC)?;
    let n = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let seq = r.u64()?;
        out.push(WalEntry { seq, op: r.op()? });
    }
    r.finish()?;
    Ok(out)
}

pub fn encode_checkpoint(cp: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u64(cp.time);
    w.u64(cp.seq);
    w.ts(&cp.ts);
    w.u32(cp.shared_values.len() as u32);
    for (k, v) in &cp.shared_values {
        w.object(k);
        w.value(v);
    }
    w.0
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint, CodecError> {
    let mut r = Reader { buf, pos: 0 };
    r.header(CHECKPOINT_MAGIC)?;
    let time = r.u64()?;
    let seq = r.u64()?;
    let ts = r.ts()?;
    let n = r.u32()?;
    let mut shared_values = BTreeMap::new();
    for _ in 0..n {
        let k = r.object()?;
        shared_values.insert(k, r.value()?);
    }
    r.finish()?;
    Ok(Checkpoint {
        time,
        seq,
        shared_values,
        ts,
    })
}

/// One line per operation: `seq issuer clock kind key operand`.
pub fn dump_ops<'a>(ops: impl IntoIterator<Item = (u64, &'a Operation)>) -> String {
    let mut out = String::new();
    for (seq, op) in ops {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            seq,
            op.issuer,
            op.clock,
            op.kind.name(),
            op.key,
            op.kind.operand()
        );
    }
    out
}

pub fn dump_wal(entries: &[WalEntry]) -> String {
    dump_ops(entries.iter().map(|e| (e.seq, &e.op)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_ops() -> Vec<WalEntry> {
        let key = StateKey::shared(VertexId(2), vec![0, 1]);
        let flow_key = StateKey::per_flow(VertexId(2), InstanceId(4), vec![9]);
        let mut m = BTreeMap::new();
        m.insert("b1".to_string(), Value::Int(3));
        let kinds = vec![
            OpKind::Increment(5),
            OpKind::Decrement(-2),
            OpKind::Push(Value::List(vec![Value::Int(1), Value::Bytes(vec![7])])),
            OpKind::Pop,
            OpKind::CompareAndUpdate {
                expected: Value::None,
                new: Value::Map(m.clone()),
            },
            OpKind::Write(Value::Int(-9)),
            OpKind::Custom {
                name: "pick_least_loaded".into(),
                arg: Value::Map(m),
            },
        ];
        kinds
            .into_iter()
            .enumerate()
            .map(|(i, k)| {
                let key = if i % 2 == 0 { key.clone() } else { flow_key.clone() };
                let mut op = Operation::new(k, key, OpMode::NonBlocking, LogicalClock::new(1, i as u64).unwrap(), InstanceId(3))
                    .with_seq(i as u64 + 1);
                if i % 3 == 0 {
                    op = op.with_tag(0x0002_0001);
                }
                WalEntry { seq: 10 + i as u64, op }
            })
            .collect()
    }

    #[test]
    fn wal_roundtrip() {
        let entries = sample_ops();
        let bytes = encode_wal(&entries);
        assert_eq!(&bytes[..4], WAL_MAGIC);
        assert_eq!(decode_wal(&bytes).unwrap(), entries);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut cp = Checkpoint::empty();
        cp.time = 30_000_000;
        cp.seq = 77;
        cp.ts.record(InstanceId(1), TsEntry { clock: LogicalClock::new(0, 15).unwrap(), seq: 3 });
        cp.shared_values
            .insert(StateKey::shared(VertexId(1), vec![1]).object_id(), Value::Int(2));
        assert_eq!(decode_checkpoint(&encode_checkpoint(&cp)).unwrap(), cp);
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode_wal(&sample_ops());
        assert!(matches!(decode_wal(&bytes[..bytes.len() - 1]), Err(CodecError::Truncated(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_wal(&bad), Err(CodecError::BadVersion(_))));
        assert!(matches!(decode_checkpoint(&bytes), Err(CodecError::BadMagic(_))));
    }

    #[test]
    fn dump_golden() {
        let entries = sample_ops();
        let text = dump_wal(&entries[..2]);
        assert_eq!(
            text,
            "10 I3 1:0 increment V2/*/0001 5\n11 I3 1:1 decrement V2/I4/09 -2\n"
        );
    }
}
