//! Little-endian binary containers.
//!
//! Embedding store layout:
//!
//! ```text
//! "EMB1" u32:count u32:dim
//! count × { u16:id_len id_bytes dim × f64 }
//! ["LBL1" u32:n  n × { u16:id_len id_bytes u16:label_len label_bytes }]
//! ["DUR1" u32:n  n × { u16:id_len id_bytes f64:seconds }]
//! ```
//!
//! Model containers start with their own 4-byte tag (`LTX1`, `PLDA`, `PSVM`)
//! followed by u32 dimensions and row-major f64 payloads.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::backends::PldaModel;
use crate::error::{Error, Result};
use crate::model::{Embedding, EmbeddingSet};
use crate::pipeline::LinearTransform;
use crate::psvm::PsvmModel;

const EMB_MAGIC: &[u8; 4] = b"EMB1";
const LABEL_TAG: &[u8; 4] = b"LBL1";
const DURATION_TAG: &[u8; 4] = b"DUR1";
const TRANSFORM_MAGIC: &[u8; 4] = b"LTX1";
const PLDA_MAGIC: &[u8; 4] = b"PLDA";
const PSVM_MAGIC: &[u8; 4] = b"PSVM";

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Binary(msg.into()))
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn tag(&mut self, t: &[u8; 4]) {
        self.buf.extend_from_slice(t);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: usize, what: &str) -> Result<()> {
        let v = u32::try_from(v).or_else(|_| err(format!("{what} {v} exceeds u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len()).or_else(|_| err(format!("string of {} bytes exceeds u16 length", s.len())))?;
        self.u16(len);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn matrix(&mut self, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }

    fn vector(&mut self, v: &DVector<f64>) {
        for x in v.iter() {
            self.f64(*x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return err(format!("truncated {what} at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return err(format!(
                "bad magic '{}', expected '{}'",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(expected)
            ));
        }
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).or_else(|_| err(format!("{what} is not valid UTF-8")))
    }

    fn vector(&mut self, n: usize, what: &str) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(n);
        for i in 0..n {
            v[i] = self.f64(what)?;
        }
        Ok(v)
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>> {
        // size check before allocating
        if (self.buf.len() - self.pos) / 8 < rows.saturating_mul(cols) {
            return err(format!("truncated {what} at byte {}", self.pos));
        }
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64(what)?;
            }
        }
        Ok(m)
    }

    fn finish(&self) -> Result<()> {
        if !self.at_end() {
            return err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

pub fn write_embeddings(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.tag(EMB_MAGIC);
    w.u32(set.len(), "record count")?;
    w.u32(set.dim(), "dimension")?;
    for r in set.records() {
        w.str(&r.segment_id)?;
        for v in &r.vector {
            w.f64(*v);
        }
    }
    if let Some(labels) = set.labels() {
        w.tag(LABEL_TAG);
        w.u32(set.len(), "label count")?;
        for r in set.records() {
            w.str(&r.segment_id)?;
            w.str(&labels[&r.segment_id])?;
        }
    }
    if let Some(durs) = set.durations() {
        w.tag(DURATION_TAG);
        w.u32(durs.len(), "duration count")?;
        for r in set.records() {
            if let Some(d) = durs.get(&r.segment_id) {
                w.str(&r.segment_id)?;
                w.f64(*d);
            }
        }
    }
    Ok(w.buf)
}

pub fn read_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut r = Reader::new(bytes);
    r.magic(EMB_MAGIC)?;
    let count = r.u32("record count")?;
    let dim = r.u32("dimension")?;
    let mut records = Vec::with_capacity(count.min(bytes.len() / 8 + 1));
    let mut seen = std::collections::HashSet::new();
    for i in 0..count {
        let id = r.str(&format!("id of record {i}"))?;
        if !seen.insert(id.clone()) {
            return err(format!("duplicate segment_id '{id}'"));
        }
        let what = format!("vector of record '{id}'");
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            v.push(r.f64(&what)?);
        }
        records.push(Embedding::new(id, v));
    }
    let mut set = EmbeddingSet::new(dim, records)?;
    let mut labels: Option<HashMap<String, String>> = None;
    let mut durations: Option<HashMap<String, f64>> = None;
    while !r.at_end() {
        let tag: [u8; 4] = r.take(4, "section tag")?.try_into().unwrap();
        let n = r.u32("section count")?;
        match &tag {
            LABEL_TAG if labels.is_none() => {
                let mut m = HashMap::with_capacity(n.min(bytes.len()));
                for _ in 0..n {
                    let id = r.str("label id")?;
                    let lab = r.str("label")?;
                    if m.insert(id.clone(), lab).is_some() {
                        return err(format!("duplicate label for '{id}'"));
                    }
                }
                labels = Some(m);
            }
            DURATION_TAG if durations.is_none() => {
                let mut m = HashMap::with_capacity(n.min(bytes.len()));
                for _ in 0..n {
                    let id = r.str("duration id")?;
                    let d = r.f64("duration")?;
                    if m.insert(id.clone(), d).is_some() {
                        return err(format!("duplicate duration for '{id}'"));
                    }
                }
                durations = Some(m);
            }
            other => {
                return err(format!(
                    "unexpected section '{}'",
                    String::from_utf8_lossy(other)
                ))
            }
        }
    }
    if let Some(l) = labels {
        set = set.with_labels(l)?;
    }
    if let Some(d) = durations {
        set = set.with_durations(d)?;
    }
    Ok(set)
}

pub fn write_transform(t: &LinearTransform) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.tag(TRANSFORM_MAGIC);
    w.u32(t.out_dim(), "output dimension")?;
    w.u32(t.in_dim(), "input dimension")?;
    w.matrix(t.matrix());
    w.vector(t.offset());
    Ok(w.buf)
}

pub fn read_transform(bytes: &[u8]) -> Result<LinearTransform> {
    let mut r = Reader::new(bytes);
    r.magic(TRANSFORM_MAGIC)?;
    let out_dim = r.u32("output dimension")?;
    let in_dim = r.u32("input dimension")?;
    let m = r.matrix(out_dim, in_dim, "matrix")?;
    let b = r.vector(out_dim, "offset")?;
    r.finish()?;
    LinearTransform::new(m, b)
}

pub fn write_plda(m: &PldaModel) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.tag(PLDA_MAGIC);
    w.u32(m.dim(), "dimension")?;
    w.vector(m.mean());
    w.matrix(m.between());
    w.matrix(m.within());
    Ok(w.buf)
}

pub fn read_plda(bytes: &[u8]) -> Result<PldaModel> {
    let mut r = Reader::new(bytes);
    r.magic(PLDA_MAGIC)?;
    let d = r.u32("dimension")?;
    let mu = r.vector(d, "mean")?;
    let b = r.matrix(d, d, "between covariance")?;
    let w = r.matrix(d, d, "within covariance")?;
    r.finish()?;
    PldaModel::new(mu, b, w)
}

pub fn write_psvm(m: &PsvmModel) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.tag(PSVM_MAGIC);
    w.u32(m.dim(), "dimension")?;
    w.matrix(&m.cross);
    w.matrix(&m.quadratic);
    w.vector(&m.linear);
    w.f64(m.bias);
    for u in m.duration_weights {
        w.f64(u);
    }
    Ok(w.buf)
}

pub fn read_psvm(bytes: &[u8]) -> Result<PsvmModel> {
    let mut r = Reader::new(bytes);
    r.magic(PSVM_MAGIC)?;
    let d = r.u32("dimension")?;
    let cross = r.matrix(d, d, "cross matrix")?;
    let quadratic = r.matrix(d, d, "quadratic matrix")?;
    let linear = r.vector(d, "linear vector")?;
    let bias = r.f64("bias")?;
    let mut u = [0.0; 3];
    for x in &mut u {
        *x = r.f64("duration weight")?;
    }
    r.finish()?;
    PsvmModel::new(cross, quadratic, linear, bias, u)
}
