use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_HEADER: [&str; 8] = [
    "epoch", "step", "total", "triplet", "ce", "align", "val_rank1", "wall_time",
];

/// One optimization step. `val_rank1` is filled on the last step of an epoch
/// when a validation split is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub triplet: f64,
    pub ce: f64,
    pub align: f64,
    pub val_rank1: Option<f64>,
    pub wall_time: f64,
}

pub fn write_log_csv(rows: &[TrainLogRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if rows.is_empty() {
        w.write_record(LOG_HEADER).map_err(|e| csv_error(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log_csv(path: impl AsRef<Path>) -> Result<Vec<TrainLogRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r
        .headers()
        .map_err(|e| Error::MalformedLog(format!("{}: {e}", path.display())))?;
    if headers.iter().ne(LOG_HEADER) {
        return Err(Error::MalformedLog(format!(
            "{}: expected columns {}, found {}",
            path.display(),
            LOG_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| {
                Error::MalformedLog(format!("{} data row {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::MalformedLog(format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_header() {
        let rows = vec![
            TrainLogRow {
                epoch: 0,
                step: 0,
                total: 1.5,
                triplet: 0.5,
                ce: 1.0,
                align: 0.25,
                val_rank1: None,
                wall_time: 0.01,
            },
            TrainLogRow {
                epoch: 0,
                step: 1,
                total: 1.25,
                triplet: 0.25,
                ce: 1.0,
                align: 0.125,
                val_rank1: Some(0.5),
                wall_time: 0.02,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        write_log_csv(&rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,step,total,triplet,ce,align,val_rank1,wall_time\n"));
        assert!(text.contains("0,0,1.5,0.5,1.0,0.25,,0.01"));
        assert_eq!(read_log_csv(&p).unwrap(), rows);

        write_log_csv(&[], &p).unwrap();
        assert!(read_log_csv(&p).unwrap().is_empty());
    }

    #[test]
    fn malformed_logs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "epoch,step,total\n0,0,1\n").unwrap();
        assert!(matches!(read_log_csv(&p), Err(Error::MalformedLog(_))));
        std::fs::write(
            &p,
            "epoch,step,total,triplet,ce,align,val_rank1,wall_time\n0,0,x,0,0,0,,0\n",
        )
        .unwrap();
        assert!(matches!(read_log_csv(&p), Err(Error::MalformedLog(_))));
        assert!(matches!(read_log_csv(dir.path().join("none.csv")), Err(Error::Io { .. })));
    }
}
