//! Byte encodings for keys, values, ops, log record bodies, and state dumps.
//!
//! Everything is little-endian and length-prefixed. These layouts are load
//! bearing: recovery replays them, checkpoints embed them, and tests compare
//! dumps byte for byte, so any change here is a format break.
//!
//!   key        = namespace u8, name_len u16, name bytes
//!   params     = dim u32, dim * f64
//!   meta       = len u32, bytes
//!   op         = key, kind u8 (0 read | 1 write | 2 apply), payload
//!   log body   = epoch u64, txn_count u32,
//!                then per txn: txn_id u64, ts u64, op_count u16, ops
//!   dump       = entry_count u64, then per entry: key, value

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::store::{Namespace, ShardKey, ShardValue, MAX_KEY_NAME_LEN};
use crate::txn::StateOp;

const OP_READ: u8 = 0;
const OP_WRITE: u8 = 1;
const OP_APPLY: u8 = 2;

/// One committed transaction as it appears in the log: the admission stamp
/// plus its ops. Rejected transactions are never logged.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedTxn {
    pub txn_id: u64,
    pub ts: u64,
    pub ops: Vec<StateOp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub epoch_id: u64,
    pub txns: Vec<LoggedTxn>,
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::codec(format!("need {n} bytes, have {}", self.remaining())));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }
}

pub fn encode_key(buf: &mut Vec<u8>, key: &ShardKey) {
    buf.push(key.namespace().as_byte());
    buf.extend_from_slice(&(key.name().len() as u16).to_le_bytes());
    buf.extend_from_slice(key.name());
}

pub fn decode_key(r: &mut Reader) -> Result<ShardKey> {
    let ns = Namespace::from_byte(r.u8()?)?;
    let len = r.u16()? as usize;
    if len > MAX_KEY_NAME_LEN {
        return Err(Error::codec(format!("key name length {len} exceeds {MAX_KEY_NAME_LEN}")));
    }
    let name = r.bytes(len)?;
    ShardKey::new(ns, name).map_err(|e| Error::codec(e.to_string()))
}

pub fn encode_value(buf: &mut Vec<u8>, value: &ShardValue) {
    match value {
        ShardValue::Params(v) => {
            buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        ShardValue::Meta(b) => {
            buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
            buf.extend_from_slice(b);
        }
    }
}

/// The value's shape is implied by the key's namespace; the caller passes it.
pub fn decode_value(r: &mut Reader, ns: Namespace) -> Result<ShardValue> {
    match ns {
        Namespace::Params => {
            let dim = r.u32()? as usize;
            if r.remaining() < dim.saturating_mul(8) {
                return Err(Error::codec(format!("params dim {dim} overruns buffer")));
            }
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(r.f64()?);
            }
            Ok(ShardValue::Params(v))
        }
        Namespace::Meta => {
            let len = r.u32()? as usize;
            Ok(ShardValue::Meta(r.bytes(len)?.to_vec()))
        }
    }
}

pub fn encode_op(buf: &mut Vec<u8>, op: &StateOp) {
    encode_key(buf, op.key());
    match op {
        StateOp::Read { .. } => buf.push(OP_READ),
        StateOp::Write { value, .. } => {
            buf.push(OP_WRITE);
            encode_value(buf, value);
        }
        StateOp::Apply { delta, .. } => {
            buf.push(OP_APPLY);
            buf.extend_from_slice(&(delta.len() as u32).to_le_bytes());
            for x in delta {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
}

pub fn decode_op(r: &mut Reader) -> Result<StateOp> {
    let key = decode_key(r)?;
    match r.u8()? {
        OP_READ => Ok(StateOp::Read { key }),
        OP_WRITE => {
            let value = decode_value(r, key.namespace())?;
            Ok(StateOp::Write { key, value })
        }
        OP_APPLY => {
            let dim = r.u32()? as usize;
            if r.remaining() < dim.saturating_mul(8) {
                return Err(Error::codec(format!("apply dim {dim} overruns buffer")));
            }
            let mut delta = Vec::with_capacity(dim);
            for _ in 0..dim {
                delta.push(r.f64()?);
            }
            Ok(StateOp::Apply { key, delta })
        }
        other => Err(Error::codec(format!("unknown op kind {other}"))),
    }
}

pub fn encode_log_body(rec: &LogRecord) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(&rec.epoch_id.to_le_bytes());
    buf.extend_from_slice(&(rec.txns.len() as u32).to_le_bytes());
    for t in &rec.txns {
        buf.extend_from_slice(&t.txn_id.to_le_bytes());
        buf.extend_from_slice(&t.ts.to_le_bytes());
        buf.extend_from_slice(&(t.ops.len() as u16).to_le_bytes());
        for op in &t.ops {
            encode_op(&mut buf, op);
        }
    }
    buf
}

pub fn decode_log_body(body: &[u8]) -> Result<LogRecord> {
    let mut r = Reader::new(body);
    let epoch_id = r.u64()?;
    let n_txns = r.u32()? as usize;
    let mut txns = Vec::with_capacity(n_txns);
    for _ in 0..n_txns {
        let txn_id = r.u64()?;
        let ts = r.u64()?;
        let n_ops = r.u16()? as usize;
        let mut ops = Vec::with_capacity(n_ops);
        for _ in 0..n_ops {
            ops.push(decode_op(&mut r)?);
        }
        txns.push(LoggedTxn { txn_id, ts, ops });
    }
    if !r.done() {
        return Err(Error::codec(format!("{} trailing bytes after log body", r.remaining())));
    }
    Ok(LogRecord { epoch_id, txns })
}

/// Dump listings come out of `StateStore::dump` already key-ordered; encoding
/// preserves that order so equal states produce equal bytes.
pub fn encode_dump(entries: &[(ShardKey, Arc<ShardValue>)]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + entries.len() * 32);
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (key, value) in entries {
        encode_key(&mut buf, key);
        encode_value(&mut buf, value);
    }
    buf
}

pub fn decode_dump(buf: &[u8]) -> Result<Vec<(ShardKey, ShardValue)>> {
    let mut r = Reader::new(buf);
    let n = r.u64()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let key = decode_key(&mut r)?;
        let value = decode_value(&mut r, key.namespace())?;
        out.push((key, value));
    }
    if !r.done() {
        return Err(Error::codec(format!("{} trailing bytes after dump", r.remaining())));
    }
    Ok(out)
}
