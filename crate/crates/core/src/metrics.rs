//! Metrics CSV: two rows per epoch (`train`, `test`) with columns
//!
//! ```text
//! epoch,split,loss,accuracy,jsd_0..jsd_{k-1},alpha_0..alpha_{k-1}
//! ```
//!
//! `jsd_i` and `alpha_i` belong to the i-th student crucial layer of the
//! pairing. Floats are written in Rust's shortest round-trip form, so reading
//! a file back yields the exact values written.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::engine::EpochResult;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::config("split", format!("expected train or test, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub jsd: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Train and test rows for every epoch.
pub fn records_from_results(results: &[EpochResult]) -> Vec<MetricsRecord> {
    results
        .iter()
        .flat_map(|r| {
            let jsd: Vec<f64> = r.per_layer_jsd.values().copied().collect();
            let alpha: Vec<f64> = r.per_layer_alpha.values().copied().collect();
            [
                MetricsRecord {
                    epoch: r.epoch,
                    split: Split::Train,
                    loss: r.train_loss,
                    accuracy: r.train_accuracy,
                    jsd: jsd.clone(),
                    alpha: alpha.clone(),
                },
                MetricsRecord {
                    epoch: r.epoch,
                    split: Split::Test,
                    loss: r.test_loss,
                    accuracy: r.test_accuracy,
                    jsd,
                    alpha,
                },
            ]
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format {
            offset: 0,
            reason: format!("csv: {other:?}"),
        },
    }
}

fn header(k: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "split", "loss", "accuracy"].iter().map(|s| s.to_string()).collect();
    h.extend((0..k).map(|i| format!("jsd_{i}")));
    h.extend((0..k).map(|i| format!("alpha_{i}")));
    h
}

/// Writes `records`; every record must carry the same number of layers.
pub fn write_metrics<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let k = records.first().map_or(0, |r| r.jsd.len());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(k)).map_err(csv_err)?;
    for r in records {
        if r.jsd.len() != k || r.alpha.len() != k {
            return Err(Error::LengthMismatch(r.jsd.len().max(r.alpha.len()), k));
        }
        let mut row = vec![r.epoch.to_string(), r.split.to_string(), r.loss.to_string(), r.accuracy.to_string()];
        row.extend(r.jsd.iter().chain(&r.alpha).map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field<T: FromStr>(value: &str, column: &str, line: u64) -> Result<T> {
    value.parse().map_err(|_| Error::Format {
        offset: line as usize,
        reason: format!("line {line}: cannot parse `{value}` in column {column}"),
    })
}

/// Reads a metrics file written by [`write_metrics`]. Error offsets are
/// line numbers.
pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let head: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if head.len() < 4 || !head.len().is_multiple_of(2) {
        return Err(Error::Format {
            offset: 1,
            reason: format!("unexpected header with {} columns", head.len()),
        });
    }
    let k = (head.len() - 4) / 2;
    if head != header(k) {
        return Err(Error::Format {
            offset: 1,
            reason: format!("unexpected header {}", head.join(",")),
        });
    }
    let mut records = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map_or(0, |p| p.line());
        let f = |i: usize| row.get(i).unwrap_or_default();
        let floats = |range: std::ops::Range<usize>| -> Result<Vec<f64>> {
            range.map(|i| parse_field(f(i), &head[i], line)).collect()
        };
        records.push(MetricsRecord {
            epoch: parse_field(f(0), "epoch", line)?,
            split: parse_field(f(1), "split", line)?,
            loss: parse_field(f(2), "loss", line)?,
            accuracy: parse_field(f(3), "accuracy", line)?,
            jsd: floats(4..4 + k)?,
            alpha: floats(4 + k..4 + 2 * k)?,
        });
    }
    Ok(records)
}

/// Long ("tidy") form: one row per (epoch, split, metric) with columns
/// `epoch,split,metric,value`.
pub fn write_long_format<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "split", "metric", "value"]).map_err(csv_err)?;
    for r in records {
        let epoch = r.epoch.to_string();
        let split = r.split.to_string();
        let mut emit = |metric: &str, value: f64| w.write_record([epoch.as_str(), &split, metric, &value.to_string()]);
        emit("loss", r.loss).map_err(csv_err)?;
        emit("accuracy", r.accuracy).map_err(csv_err)?;
        for (i, v) in r.jsd.iter().enumerate() {
            emit(&format!("jsd_{i}"), *v).map_err(csv_err)?;
        }
        for (i, v) in r.alpha.iter().enumerate() {
            emit(&format!("alpha_{i}"), *v).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<MetricsRecord> {
        vec![
            MetricsRecord {
                epoch: 1,
                split: Split::Train,
                loss: 0.1 + 0.2,
                accuracy: 2.0 / 3.0,
                jsd: vec![1e-300, 0.5],
                alpha: vec![0.1, f64::MIN_POSITIVE],
            },
            MetricsRecord {
                epoch: 1,
                split: Split::Test,
                loss: 1.0,
                accuracy: 0.0,
                jsd: vec![0.0, 0.25],
                alpha: vec![0.1, 1.0],
            },
        ]
    }

    #[test]
    fn round_trip_is_lossless() {
        let mut buf = Vec::new();
        write_metrics(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,split,loss,accuracy,jsd_0,jsd_1,alpha_0,alpha_1\n"));
        assert_eq!(read_metrics(buf.as_slice()).unwrap(), sample());
    }

    #[test]
    fn ragged_records_rejected() {
        let mut records = sample();
        records[1].jsd.pop();
        assert!(write_metrics(Vec::new(), &records).is_err());
    }

    #[test]
    fn long_format_has_one_row_per_cell() {
        let mut buf = Vec::new();
        write_long_format(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 6);
        assert!(text.contains("1,test,jsd_1,0.25"));
    }

    #[test]
    fn bad_header_rejected() {
        assert!(read_metrics("epoch,split,loss\n".as_bytes()).is_err());
        assert!(read_metrics("epoch,split,loss,accuracy,jsd_0\n".as_bytes()).is_err());
    }
}
