use std::fs::File;
use std::path::Path;

use super::{DataError, MultivariateSeries, Result};
use crate::tensor::Tensor;

const DATE_HEADERS: [&str; 4] = ["date", "time", "timestamp", "datetime"];

fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a comma-separated file with an optional header row and an
/// optional leading timestamp column; every other column is a channel.
///
/// The first row is taken as a header when any of its channel cells is
/// not a number. The first column is a timestamp column when its header
/// is one of `date`/`time`/`timestamp`/`datetime`, or when its first data
/// cell is not a number.
pub fn load_csv(path: impl AsRef<Path>) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut rows: Vec<Vec<String>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| DataError::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        rows.push(rec.iter().map(str::to_owned).collect());
    }
    let Some(first) = rows.first() else {
        return Err(DataError::TooFewRows {
            path: path.to_path_buf(),
            found: 0,
        });
    };
    let width = first.len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(DataError::RaggedRow {
                path: path.to_path_buf(),
                row: i + 1,
                found: r.len(),
                expected: width,
            });
        }
    }

    let has_header = first.iter().skip(1).any(|c| parse_number(c).is_none())
        || (width == 1 && parse_number(&first[0]).is_none());
    let (header, data_rows) = if has_header {
        (Some(&rows[0]), &rows[1..])
    } else {
        (None, &rows[..])
    };
    if data_rows.len() < 2 {
        return Err(DataError::TooFewRows {
            path: path.to_path_buf(),
            found: data_rows.len(),
        });
    }
    let date_col = width > 1
        && match header {
            Some(h) if DATE_HEADERS.contains(&h[0].to_ascii_lowercase().as_str()) => true,
            _ => parse_number(&data_rows[0][0]).is_none(),
        };
    let first_channel = usize::from(date_col);
    let channels = width - first_channel;
    let line_offset = usize::from(has_header) + 1;

    let t = data_rows.len();
    let mut values = vec![0.0; channels * t];
    for (ti, row) in data_rows.iter().enumerate() {
        for c in 0..channels {
            let cell = &row[first_channel + c];
            values[c * t + ti] = parse_number(cell).ok_or_else(|| DataError::NonNumeric {
                path: path.to_path_buf(),
                row: ti + line_offset,
                column: first_channel + c + 1,
                value: cell.clone(),
            })?;
        }
    }
    let channel_names = match header {
        Some(h) => h[first_channel..].to_vec(),
        None => (1..=channels).map(|i| format!("ch{i}")).collect(),
    };
    let tensor = Tensor::new(vec![channels, t], values).map_err(|e| DataError::Series(e.to_string()))?;
    let mut series = MultivariateSeries::new(tensor, channel_names)?;
    if date_col {
        series.timestamps = Some(data_rows.iter().map(|r| r[0].clone()).collect());
    }
    Ok(series)
}

/// Writes `date,<channels...>` rows. Without timestamps the step index is
/// written in the `date` column.
pub fn write_csv(series: &MultivariateSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |e: csv::Error| DataError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let mut header = vec!["date".to_string()];
    header.extend(series.channel_names.iter().cloned());
    w.write_record(&header).map_err(io_err)?;
    for t in 0..series.len() {
        let mut rec = Vec::with_capacity(series.channels() + 1);
        rec.push(match &series.timestamps {
            Some(ts) => ts[t].clone(),
            None => t.to_string(),
        });
        for c in 0..series.channels() {
            rec.push(format!("{}", series.values.at(c, t)));
        }
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}
