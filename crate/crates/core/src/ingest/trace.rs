//! Replayable trace files: newline-delimited events, tab-separated fields.
//!
//! ```text
//!   sensor-1 <TAB> 42 <TAB> obs   <TAB> temp=1.5,hum=0.25 <TAB> label=1
//!   gateway  <TAB> 43 <TAB> query <TAB> temp=0,hum=0
//!   probe    <TAB> 44 <TAB> raw   <TAB> deadbeef
//! ```
//!
//! Floats use shortest round-trip formatting, so `decode(encode(e))`
//! reproduces the event bit for bit and re-encoding a decoded line
//! reproduces the line byte for byte. Feature names may not contain tab,
//! newline, comma, or `=`; source ids may not contain tab or newline.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::{EventBody, StreamEvent};

pub fn encode_event(e: &StreamEvent) -> Result<String> {
    if e.source.is_empty() || e.source.contains(['\t', '\n']) {
        return Err(Error::codec(format!("unencodable source id {:?}", e.source)));
    }
    let mut line = format!("{}\t{}\t", e.source, e.ts);
    match &e.body {
        EventBody::Observation { features, label } => {
            line.push_str("obs\t");
            line.push_str(&encode_features(features)?);
            if let Some(l) = label {
                line.push_str(&format!("\tlabel={l}"));
            }
        }
        EventBody::Query { features } => {
            line.push_str("query\t");
            line.push_str(&encode_features(features)?);
        }
        EventBody::Raw { payload } => {
            line.push_str("raw\t");
            for b in payload {
                line.push_str(&format!("{b:02x}"));
            }
        }
    }
    Ok(line)
}

pub fn decode_event(line: &str) -> Result<StreamEvent> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 4 {
        return Err(Error::codec(format!("{} fields, want at least 4", fields.len())));
    }
    let source = fields[0];
    if source.is_empty() {
        return Err(Error::codec("empty source id"));
    }
    let ts: u64 = fields[1].parse().map_err(|_| Error::codec(format!("bad ts {:?}", fields[1])))?;
    let body = match (fields[2], fields.len()) {
        ("obs", 4) => EventBody::Observation { features: decode_features(fields[3])?, label: None },
        ("obs", 5) => {
            let l = fields[4]
                .strip_prefix("label=")
                .ok_or_else(|| Error::codec(format!("expected label field, got {:?}", fields[4])))?;
            EventBody::Observation {
                features: decode_features(fields[3])?,
                label: Some(parse_value(l)?),
            }
        }
        ("query", 4) => EventBody::Query { features: decode_features(fields[3])? },
        ("raw", 4) => EventBody::Raw { payload: decode_hex(fields[3])? },
        (kind @ ("obs" | "query" | "raw"), n) => {
            return Err(Error::codec(format!("{kind} record with {n} fields")));
        }
        (kind, _) => return Err(Error::codec(format!("unknown event kind {kind:?}"))),
    };
    Ok(StreamEvent { source: source.to_string(), ts, body })
}

fn encode_features(features: &[(String, f64)]) -> Result<String> {
    let mut parts = Vec::with_capacity(features.len());
    for (name, v) in features {
        if name.is_empty() || name.contains(['\t', '\n', ',', '=']) {
            return Err(Error::codec(format!("unencodable feature name {name:?}")));
        }
        parts.push(format!("{name}={v}"));
    }
    Ok(parts.join(","))
}

fn decode_features(field: &str) -> Result<Vec<(String, f64)>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|pair| {
            let (name, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::codec(format!("feature {pair:?} has no '='")))?;
            if name.is_empty() {
                return Err(Error::codec(format!("feature {pair:?} has empty name")));
            }
            Ok((name.to_string(), parse_value(v)?))
        })
        .collect()
}

fn parse_value(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::codec(format!("bad float {s:?}")))
}

fn decode_hex(s: &str) -> Result<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return Err(Error::codec("odd-length hex payload"));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| Error::codec(format!("bad hex {:?}", &s[i..i + 2])))
        })
        .collect()
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        TraceWriter { out }
    }

    pub fn write_event(&mut self, e: &StreamEvent) -> Result<()> {
        let line = encode_event(e)?;
        writeln!(self.out, "{line}").map_err(|e| Error::codec(format!("trace write failed: {e}")))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::codec(format!("trace flush failed: {e}")))
    }
}

/// Iterator over events in a trace; errors carry the 1-based line number.
pub struct TraceReader<R: BufRead> {
    lines: Lines<R>,
    line_no: usize,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(input: R) -> Self {
        TraceReader { lines: input.lines(), line_no: 0 }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<StreamEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.lines.next()? {
            Ok(line) => line,
            Err(e) => return Some(Err(Error::codec(format!("trace read failed: {e}")))),
        };
        self.line_no += 1;
        if line.is_empty() {
            return self.next(); // tolerate a trailing blank line
        }
        Some(decode_event(&line).map_err(|e| Error::codec(format!("line {}: {e}", self.line_no))))
    }
}

pub fn write_trace(path: &Path, events: &[StreamEvent]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = TraceWriter::new(BufWriter::new(file));
    for e in events {
        w.write_event(e)?;
    }
    w.flush()
}

pub fn read_trace(path: &Path) -> Result<Vec<StreamEvent>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    TraceReader::new(BufReader::new(file)).collect()
}
