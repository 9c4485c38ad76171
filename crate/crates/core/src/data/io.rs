use std::io::Write;
use std::path::Path;

use super::TrafficTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads a traffic CSV: a header row of sensor ids, then one row per time
/// step with one non-negative volume per sensor.
///
/// Error positions are 1-based: `row` counts data rows (the header is row 0)
/// and `col` counts columns.
pub fn load_traffic_csv(path: &Path, interval_minutes: u32) -> Result<TrafficTensor> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    let ids: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Ingestion {
            row: 0,
            col: 0,
            msg: e.to_string(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    let n = ids.len();
    if n == 0 || (n == 1 && ids[0].is_empty()) {
        return Err(Error::Ingestion {
            row: 0,
            col: 1,
            msg: "missing header of sensor ids".into(),
        });
    }

    // Time-major while reading, transposed at the end.
    let mut rows: Vec<f64> = Vec::new();
    let mut steps = 0;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Ingestion {
            row,
            col: 0,
            msg: e.to_string(),
        })?;
        if rec.len() != n {
            return Err(Error::Ingestion {
                row,
                col: rec.len().min(n) + 1,
                msg: format!("ragged row: {} cells, header has {n}", rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let col = j + 1;
            let v: f64 = cell.parse().map_err(|_| Error::Ingestion {
                row,
                col,
                msg: format!("non-numeric cell `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingestion {
                    row,
                    col,
                    msg: format!("non-finite volume `{cell}`"),
                });
            }
            if v < 0.0 {
                return Err(Error::Ingestion {
                    row,
                    col,
                    msg: format!("negative volume {v}"),
                });
            }
            rows.push(v);
        }
        steps += 1;
    }
    if steps == 0 {
        return Err(Error::Ingestion {
            row: 1,
            col: 1,
            msg: "no data rows".into(),
        });
    }
    log::info!(
        "loaded {} x {steps} traffic tensor from {}",
        n,
        path.display()
    );

    let mut values = vec![0.0; n * steps];
    for t in 0..steps {
        for s in 0..n {
            values[s * steps + t] = rows[t * n + s];
        }
    }
    TrafficTensor::new(
        Tensor::new([n, steps], values)?,
        interval_minutes,
        Some(ids),
    )
}

/// Writes a traffic tensor in the layout [`load_traffic_csv`] reads. Values
/// use the shortest representation that parses back to the same `f64`.
pub fn write_traffic_csv(x: &TrafficTensor, path: &Path) -> Result<()> {
    let n = x.num_nodes();
    let t_total = x.num_steps();
    let mut buf = String::with_capacity(n * t_total * 8);
    buf.push_str(&x.sensor_ids().join(","));
    buf.push('\n');
    for t in 0..t_total {
        for s in 0..n {
            if s > 0 {
                buf.push(',');
            }
            buf.push_str(&x.value(s, t).to_string());
        }
        buf.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}
