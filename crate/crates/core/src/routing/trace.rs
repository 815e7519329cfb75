use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One routed query (or token) as written to `trace.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    /// Scene descriptor id: one per image.
    pub batch: u64,
    pub query: usize,
    /// Selected scene routes, highest probability first. Empty without a scene router.
    pub routes: Vec<usize>,
    pub pool: Vec<usize>,
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
    /// Routing distribution over all experts before masking.
    pub e_full: Vec<f64>,
    /// Scene-route distribution; zeros when the policy has no scene router.
    #[serde(default)]
    pub g: Vec<f64>,
    /// Latent scene type of the generating image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<usize>,
    /// Latent instance type of the query.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub itype: Option<usize>,
    /// Task loss of the query's mixed output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

impl TraceRecord {
    /// Routing distribution restricted to the pool and renormalized.
    pub fn pool_distribution(&self) -> Vec<f64> {
        let mass: f64 = self.pool.iter().map(|&k| self.e_full[k]).sum();
        self.pool.iter().map(|&k| self.e_full[k] / mass).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    n_experts: usize,
    records: Vec<TraceRecord>,
    counts: Vec<u64>,
}

impl RoutingTrace {
    pub fn new(n_experts: usize) -> Self {
        RoutingTrace {
            n_experts,
            records: Vec::new(),
            counts: vec![0; n_experts],
        }
    }

    pub fn push(&mut self, record: TraceRecord) -> Result<()> {
        if record.e_full.len() != self.n_experts {
            return Err(Error::dim("trace", format!("e_full of length {}", self.n_experts), record.e_full.len()));
        }
        if record.weights.len() != record.experts.len() {
            return Err(Error::dim("trace", record.experts.len(), record.weights.len()));
        }
        for &k in record.experts.iter().chain(&record.pool) {
            if k >= self.n_experts {
                return Err(Error::Input(format!("expert index {k} outside [0, {})", self.n_experts)));
            }
        }
        for &k in &record.experts {
            self.counts[k] += 1;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn extend(&mut self, other: RoutingTrace) -> Result<()> {
        for r in other.records {
            self.push(r)?;
        }
        Ok(())
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn records_mut(&mut self) -> &mut [TraceRecord] {
        &mut self.records
    }

    /// Assignment count per expert (multiset union of all selections).
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// Records grouped by scene descriptor id, in first-appearance order.
    pub fn batches(&self) -> Vec<(u64, Vec<&TraceRecord>)> {
        let mut out: Vec<(u64, Vec<&TraceRecord>)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((b, rs)) if *b == r.batch => rs.push(r),
                _ => out.push((r.batch, vec![r])),
            }
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Reads a trace; the expert count is taken from the first record.
    /// `origin` only labels error messages.
    pub fn read_jsonl<R: Read>(r: R, origin: &Path) -> Result<Self> {
        let mut trace: Option<RoutingTrace> = None;
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fmt = |msg: String| Error::Format {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| fmt(e.to_string()))?;
            let t = trace.get_or_insert_with(|| RoutingTrace::new(rec.e_full.len()));
            t.push(rec).map_err(|e| fmt(e.to_string()))?;
        }
        trace.ok_or_else(|| Error::Empty(origin.display().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(f, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_jsonl(f)
    }
}
