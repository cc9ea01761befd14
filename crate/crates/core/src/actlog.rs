//! Activation-log files.
//!
//! Line-delimited JSON. Line 1 is a [`LogHeader`]; every following line is
//! one [`ActivationRecord`] for a `(sample, layer)` pair. Pooled vectors are
//! stored as `f32` using shortest round-trip formatting, `sim` as `f64`.
//! Unknown keys anywhere are rejected.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::RealVector;
use crate::taxonomy::{Domain, Subtask};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub domain: Domain,
    pub subtasks: Vec<Subtask>,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogHeader {
    pub schema_version: u32,
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub protected_layers: BTreeSet<usize>,
    pub domains: Vec<DomainEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationRecord {
    pub sample_id: u64,
    pub layer: usize,
    pub domain: Domain,
    pub subtask: Subtask,
    /// Token-averaged cosine between the layer's input and output states.
    pub sim: f64,
    pub pooled_in: Vec<f32>,
    pub pooled_out: Vec<f32>,
}

impl ActivationRecord {
    pub fn pooled_in_vector(&self) -> RealVector {
        widen(&self.pooled_in)
    }

    pub fn pooled_out_vector(&self) -> RealVector {
        widen(&self.pooled_out)
    }
}

fn widen(xs: &[f32]) -> RealVector {
    RealVector::new(xs.iter().map(|&x| x as f64).collect()).expect("validated record vector")
}

impl LogHeader {
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        let bad = |f: &str, d: String| Err((f.to_string(), d));
        if self.schema_version != SCHEMA_VERSION {
            return bad("schema_version", format!("unsupported version {}", self.schema_version));
        }
        if self.num_layers == 0 {
            return bad("num_layers", "must be positive".into());
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim", "must be positive".into());
        }
        if let Some(&l) = self.protected_layers.iter().find(|&&l| l >= self.num_layers) {
            return bad(
                "protected_layers",
                format!("layer {l} outside [0, {})", self.num_layers),
            );
        }
        let mut seen_domains = HashSet::new();
        for entry in &self.domains {
            if !seen_domains.insert(entry.domain) {
                return bad("domains", format!("domain `{}` listed twice", entry.domain));
            }
            let mut seen = HashSet::new();
            for s in &entry.subtasks {
                if !seen.insert(*s) {
                    return bad("subtasks", format!("subtask `{s}` repeated in `{}`", entry.domain));
                }
                if s.domain() != entry.domain {
                    return bad(
                        "subtasks",
                        format!("subtask `{s}` does not belong to `{}`", entry.domain),
                    );
                }
            }
        }
        Ok(())
    }

    fn entry(&self, domain: Domain) -> Option<&DomainEntry> {
        self.domains.iter().find(|e| e.domain == domain)
    }
}

/// Per-file consistency state shared by the reader and the writer.
struct Checker<'h> {
    header: &'h LogHeader,
    pairs: HashSet<(u64, usize)>,
    samples: HashMap<u64, (Domain, Subtask)>,
}

impl<'h> Checker<'h> {
    fn new(header: &'h LogHeader) -> Self {
        Self {
            header,
            pairs: HashSet::new(),
            samples: HashMap::new(),
        }
    }

    fn check(&mut self, r: &ActivationRecord) -> std::result::Result<(), (String, String)> {
        let h = self.header;
        let bad = |f: &str, d: String| Err((f.to_string(), d));
        if r.layer >= h.num_layers {
            return bad("layer", format!("{} outside [0, {})", r.layer, h.num_layers));
        }
        if !r.sim.is_finite() || !(-1.0..=1.0).contains(&r.sim) {
            return bad("sim", format!("{} outside [-1, 1]", r.sim));
        }
        for (name, v) in [("pooled_in", &r.pooled_in), ("pooled_out", &r.pooled_out)] {
            if v.len() != h.hidden_dim {
                return bad(name, format!("dimension {} != hidden_dim {}", v.len(), h.hidden_dim));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return bad(name, "non-finite entry".into());
            }
        }
        let Some(entry) = h.entry(r.domain) else {
            return bad("domain", format!("`{}` not declared in header", r.domain));
        };
        if !entry.subtasks.contains(&r.subtask) {
            return bad("subtask", format!("`{}` not declared for `{}`", r.subtask, r.domain));
        }
        match self.samples.get(&r.sample_id) {
            Some(&(d, s)) if (d, s) != (r.domain, r.subtask) => {
                return bad("sample_id", format!("sample {} changes domain/subtask", r.sample_id));
            }
            Some(_) => {}
            None => {
                self.samples.insert(r.sample_id, (r.domain, r.subtask));
            }
        }
        if !self.pairs.insert((r.sample_id, r.layer)) {
            return bad(
                "layer",
                format!("duplicate (sample_id {}, layer {})", r.sample_id, r.layer),
            );
        }
        Ok(())
    }

    /// Distinct samples per domain must match the header counts.
    fn finish(&self) -> std::result::Result<(), (bool, String)> {
        let mut counts: BTreeMap<Domain, usize> = BTreeMap::new();
        for (d, _) in self.samples.values() {
            *counts.entry(*d).or_default() += 1;
        }
        for e in &self.header.domains {
            let got = counts.get(&e.domain).copied().unwrap_or(0);
            if got != e.sample_count {
                // fewer samples than declared reads as a cut-off file
                return Err((
                    got < e.sample_count,
                    format!("domain `{}` declares {} samples, found {got}", e.domain, e.sample_count),
                ));
            }
        }
        Ok(())
    }
}

/// Writes the header and every record, validating each one first. Returns
/// the number of records written.
pub fn write_log<W, I>(header: &LogHeader, records: I, sink: W) -> Result<usize>
where
    W: Write,
    I: IntoIterator,
    I::Item: Borrow<ActivationRecord>,
{
    header.validate().map_err(|(f, d)| Error::schema(Some(1), f, d))?;
    let mut out = std::io::BufWriter::new(sink);
    let line = serde_json::to_string(header).expect("header serializes");
    writeln!(out, "{line}").map_err(Error::SinkFailure)?;

    let mut checker = Checker::new(header);
    let mut count = 0;
    for rec in records {
        let rec = rec.borrow();
        checker
            .check(rec)
            .map_err(|(f, d)| Error::schema(Some(count + 2), f, d))?;
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(out, "{line}").map_err(Error::SinkFailure)?;
        count += 1;
    }
    checker
        .finish()
        .map_err(|(_, d)| Error::schema(None, "sample_count", d))?;
    out.flush().map_err(Error::SinkFailure)?;
    Ok(count)
}

/// Reads and fully validates a log. Nothing is returned unless every line
/// passes.
pub fn read_log<R: Read>(mut source: R) -> Result<(LogHeader, Vec<ActivationRecord>)> {
    let mut text = String::new();
    source.read_to_string(&mut text).map_err(|e| {
        if e.kind() == std::io::ErrorKind::InvalidData {
            Error::schema(None, "file", "not valid UTF-8")
        } else {
            Error::Io(e)
        }
    })?;
    if text.is_empty() {
        return Err(Error::TruncatedFile("empty file, no header".into()));
    }
    if !text.ends_with('\n') {
        return Err(Error::TruncatedFile("last line is not newline-terminated".into()));
    }
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().expect("nonempty");
    let header: LogHeader = serde_json::from_str(first).map_err(|e| Error::schema(Some(1), "header", e.to_string()))?;
    header.validate().map_err(|(f, d)| Error::schema(Some(1), f, d))?;

    let mut checker = Checker::new(&header);
    let mut records = Vec::new();
    for (lineno, line) in lines {
        let rec: ActivationRecord =
            serde_json::from_str(line).map_err(|e| Error::schema(Some(lineno), "record", e.to_string()))?;
        checker
            .check(&rec)
            .map_err(|(f, d)| Error::schema(Some(lineno), f, d))?;
        records.push(rec);
    }
    match checker.finish() {
        Ok(()) => {}
        Err((true, d)) => return Err(Error::TruncatedFile(d)),
        Err((false, d)) => return Err(Error::schema(None, "sample_count", d)),
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(samples: usize) -> LogHeader {
        LogHeader {
            schema_version: 1,
            model_id: "unit".into(),
            num_layers: 4,
            hidden_dim: 2,
            protected_layers: [0, 3].into(),
            domains: vec![DomainEntry {
                domain: Domain::Math,
                subtasks: vec![Subtask::MathCot, Subtask::MathVerify],
                sample_count: samples,
            }],
        }
    }

    fn record(sample_id: u64, layer: usize) -> ActivationRecord {
        ActivationRecord {
            sample_id,
            layer,
            domain: Domain::Math,
            subtask: Subtask::MathCot,
            sim: 0.123456789012345,
            pooled_in: vec![0.1, -2.5e-7],
            pooled_out: vec![1.0 / 3.0, 7.0],
        }
    }

    fn write(h: &LogHeader, recs: &[ActivationRecord]) -> Result<(usize, Vec<u8>)> {
        let mut buf = Vec::new();
        let n = write_log(h, recs, &mut buf)?;
        Ok((n, buf))
    }

    #[test]
    fn empty_stream_writes_header_only() {
        let (n, buf) = write(&header(0), &[]).unwrap();
        assert_eq!(n, 0);
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 1);
        let (h, recs) = read_log(&buf[..]).unwrap();
        assert_eq!(h, header(0));
        assert!(recs.is_empty());
    }

    #[test]
    fn single_record_round_trips() {
        let (n, buf) = write(&header(1), &[record(0, 2)]).unwrap();
        assert_eq!(n, 1);
        let (_, recs) = read_log(&buf[..]).unwrap();
        assert_eq!(recs, vec![record(0, 2)]);
    }

    #[test]
    fn header_keys_are_exact() {
        let (_, buf) = write(&header(0), &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "{\"schema_version\":1,\"model_id\":\"unit\",\"num_layers\":4,\"hidden_dim\":2,\
             \"protected_layers\":[0,3],\"domains\":[{\"domain\":\"math\",\
             \"subtasks\":[\"Math-CoT\",\"Math-Verify\"],\"sample_count\":0}]}\n"
        );
    }

    #[test]
    fn write_rejects_bad_dimension() {
        let mut r = record(0, 1);
        r.pooled_in.push(0.0);
        match write(&header(1), &[r]) {
            Err(Error::SchemaViolation { field, .. }) => assert_eq!(field, "pooled_in"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn write_reports_sink_failure() {
        struct Broken;
        impl Write for Broken {
            fn write(&mut self, _: &[u8]) -> std::io::Result<usize> {
                Err(std::io::Error::other("disk full"))
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let recs: Vec<ActivationRecord> = (0..200).map(|l| record(0, l % 4)).take(1).collect();
        let err = write_log(&header(1), &recs, Broken).unwrap_err();
        assert!(matches!(err, Error::SinkFailure(_)), "{err:?}");
    }

    fn read_text(text: &str) -> Result<(LogHeader, Vec<ActivationRecord>)> {
        read_log(text.as_bytes())
    }

    fn good_text(recs: &[ActivationRecord], samples: usize) -> String {
        String::from_utf8(write(&header(samples), recs).unwrap().1).unwrap()
    }

    #[test]
    fn read_rejects_sim_out_of_range() {
        let text = good_text(&[record(0, 1)], 1).replace("0.123456789012345", "1.5");
        match read_text(&text) {
            Err(Error::SchemaViolation { line, field, .. }) => {
                assert_eq!(line, Some(2));
                assert_eq!(field, "sim");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn read_rejects_duplicate_pair() {
        let text = good_text(&[record(0, 1)], 1);
        let dup = text.lines().nth(1).unwrap().to_string();
        let text = format!("{text}{dup}\n");
        match read_text(&text) {
            Err(Error::SchemaViolation { line, .. }) => assert_eq!(line, Some(3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn read_rejects_unknown_keys() {
        let text = good_text(&[record(0, 1)], 1).replace("\"sim\"", "\"extra\":1,\"sim\"");
        assert!(matches!(
            read_text(&text),
            Err(Error::SchemaViolation { line: Some(2), .. })
        ));
        let text = good_text(&[], 0).replace("\"model_id\"", "\"Model_Id\"");
        assert!(matches!(
            read_text(&text),
            Err(Error::SchemaViolation { line: Some(1), .. })
        ));
    }

    #[test]
    fn read_detects_truncation() {
        assert!(matches!(read_text(""), Err(Error::TruncatedFile(_))));
        let text = good_text(&[record(0, 1), record(1, 1)], 2);
        let cut = &text[..text.len() - 1];
        assert!(matches!(read_text(cut), Err(Error::TruncatedFile(_))));
        let first_two: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(matches!(read_text(&first_two), Err(Error::TruncatedFile(_))));
    }

    #[test]
    fn read_rejects_layer_out_of_range_and_foreign_subtask() {
        let mut r = record(0, 1);
        r.layer = 9;
        let text = good_text(&[record(0, 1)], 1).replace("\"layer\":1", "\"layer\":9");
        assert!(matches!(read_text(&text), Err(Error::SchemaViolation { .. })));
        r.layer = 1;
        r.subtask = Subtask::Captioning;
        assert!(matches!(write(&header(1), &[r]), Err(Error::SchemaViolation { .. })));
    }

    #[test]
    fn header_validation() {
        let mut h = header(0);
        h.protected_layers.insert(4);
        assert!(h.validate().is_err());
        let mut h = header(0);
        h.domains[0].subtasks.push(Subtask::MathCot);
        assert!(h.validate().is_err());
        let mut h = header(0);
        h.schema_version = 2;
        assert!(h.validate().is_err());
    }
}
