//! Tab-separated training metrics, one record per step, flushed as written.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use mambamim_core::train::StepRecord;

pub const HEADER: &str = "step\tlr\tloss";

pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(out, "{HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn record(&mut self, r: &StepRecord) -> io::Result<()> {
        writeln!(self.out, "{}\t{:e}\t{:e}", r.step, r.lr, r.loss)?;
        self.out.flush()
    }
}

impl MetricsWriter<File> {
    pub fn create(path: &Path) -> io::Result<Self> {
        Self::new(File::create(path)?)
    }
}

/// Parses a metrics file back into records.
pub fn read_metrics(path: &Path) -> anyhow::Result<Vec<StepRecord>> {
    use anyhow::{bail, Context};
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(f).lines();
    if lines.next().transpose()?.as_deref() != Some(HEADER) {
        bail!("{}: missing metrics header", path.display());
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let cols: Vec<&str> = line.split('\t').collect();
        let [step, lr, loss] = cols[..] else {
            bail!("{}:{}: expected 3 columns", path.display(), n + 2);
        };
        out.push(StepRecord {
            step: step.parse().with_context(|| format!("{}:{}", path.display(), n + 2))?,
            lr: lr.parse().with_context(|| format!("{}:{}", path.display(), n + 2))?,
            loss: loss.parse().with_context(|| format!("{}:{}", path.display(), n + 2))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let recs = [StepRecord { step: 1, lr: 1e-4, loss: 0.123456789012345 }, StepRecord { step: 2, lr: 0.0, loss: 1.0 / 3.0 }];
        let mut w = MetricsWriter::create(&path).unwrap();
        for r in &recs {
            w.record(r).unwrap();
        }
        drop(w);
        assert_eq!(read_metrics(&path).unwrap(), recs);
    }
}
