use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::SequencePair;
use crate::error::{Error, Result};

/// Longest run of missing samples that is filled by linear interpolation.
pub const MAX_GAP: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySchema {
    pub name: String,
    pub channels: Vec<String>,
}

impl ModalitySchema {
    pub fn kinematics() -> Self {
        Self::grid("kinematics", "theta", &["hip", "knee", "ankle", "foot", "pelvis"])
    }

    pub fn kinetics() -> Self {
        Self::grid("kinetics", "tau", &["hip", "knee", "ankle"])
    }

    pub fn grf() -> Self {
        ModalitySchema {
            name: "grf".into(),
            channels: ["x", "y", "z"].iter().map(|a| format!("grf_{a}")).collect(),
        }
    }

    fn grid(name: &str, prefix: &str, joints: &[&str]) -> Self {
        let channels = joints
            .iter()
            .flat_map(|j| ["x", "y", "z"].map(|a| format!("{prefix}_{j}_{a}")))
            .collect();
        ModalitySchema {
            name: name.into(),
            channels,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "kinematics" => Ok(Self::kinematics()),
            "kinetics" => Ok(Self::kinetics()),
            "grf" => Ok(Self::grf()),
            other => Err(Error::Config(format!(
                "unknown modality '{other}' (expected kinematics, kinetics or grf)"
            ))),
        }
    }
}

/// `subject_id, profile, <x channels>, <y channels>`.
pub fn canonical_header(schema_x: &ModalitySchema, schema_y: &ModalitySchema) -> Vec<String> {
    let mut h = vec!["subject_id".to_string(), "profile".to_string()];
    h.extend(schema_x.channels.iter().cloned());
    h.extend(schema_y.channels.iter().cloned());
    h
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub windows: usize,
    pub dropped_samples: usize,
    pub rejected_windows: usize,
    pub interpolated_samples: usize,
}

/// Rewrites a CSV with differently named columns into the canonical header.
/// `column_map` maps canonical names to source names; unmapped canonical
/// columns are looked up under their own name.
pub fn convert_to_canonical(
    input: &Path,
    output: &Path,
    schema_x: &ModalitySchema,
    schema_y: &ModalitySchema,
    column_map: &HashMap<String, String>,
) -> Result<()> {
    let mut reader = csv::Reader::from_path(input).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let canonical = canonical_header(schema_x, schema_y);
    let source_idx = canonical
        .iter()
        .map(|c| {
            let src = column_map.get(c).unwrap_or(c);
            headers
                .iter()
                .position(|h| h == src)
                .ok_or_else(|| Error::Data(format!("source column '{src}' not found")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut writer = csv::Writer::from_path(output).map_err(csv_err)?;
    writer.write_record(&canonical).map_err(csv_err)?;
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        writer
            .write_record(source_idx.iter().map(|&i| &row[i]))
            .map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

struct Stream {
    subject: String,
    profile: usize,
    rows: Vec<Vec<f64>>,
}

/// Fills interior and edge gaps of at most [`MAX_GAP`] samples. Returns the
/// per-sample mask of values that remain missing and the number filled.
fn fill_gaps(column: &mut [f64]) -> (Vec<bool>, usize) {
    let n = column.len();
    let mut missing = vec![false; n];
    let mut filled = 0;
    let mut i = 0;
    while i < n {
        if !column[i].is_nan() {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && column[i].is_nan() {
            i += 1;
        }
        let run = i - start;
        if run > MAX_GAP {
            missing[start..i].iter_mut().for_each(|m| *m = true);
            continue;
        }
        let left = start.checked_sub(1).map(|j| column[j]);
        let right = (i < n).then(|| column[i]);
        for (off, j) in (start..i).enumerate() {
            column[j] = match (left, right) {
                (Some(a), Some(b)) => a + (b - a) * (off + 1) as f64 / (run + 1) as f64,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => f64::NAN,
            };
        }
        if left.is_none() && right.is_none() {
            missing[start..i].iter_mut().for_each(|m| *m = true);
        } else {
            filled += run;
        }
    }
    (missing, filled)
}

/// Reads a canonical-header CSV and cuts each (subject, profile) stream into
/// non-overlapping windows of `window_len` samples. Values are left in raw
/// units; normalization happens per fold on the training split.
pub fn ingest_csv(
    path: &Path,
    schema_x: &ModalitySchema,
    schema_y: &ModalitySchema,
    window_len: usize,
) -> Result<(Vec<SequencePair>, IngestReport)> {
    if window_len == 0 {
        return Err(Error::Config("window length must be >= 1".into()));
    }
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("missing column '{name}' in {}", path.display())))
    };
    let subject_col = col("subject_id")?;
    let profile_col = col("profile")?;
    let channel_cols = schema_x
        .channels
        .iter()
        .chain(&schema_y.channels)
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let dx = schema_x.channels.len();

    let mut streams: Vec<Stream> = Vec::new();
    let mut index: HashMap<(String, usize), usize> = HashMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let subject = record[subject_col].trim().to_string();
        let profile: usize = record[profile_col].trim().parse().map_err(|_| {
            Error::Data(format!(
                "row {}: profile '{}' is not a non-negative integer",
                line + 2,
                &record[profile_col]
            ))
        })?;
        let values = channel_cols
            .iter()
            .map(|&c| {
                let field = record[c].trim();
                if field.is_empty() || field.eq_ignore_ascii_case("nan") {
                    Ok(f64::NAN)
                } else {
                    field
                        .parse::<f64>()
                        .map_err(|_| Error::Data(format!("row {}: '{field}' is not a number", line + 2)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let key = (subject.clone(), profile);
        let slot = *index.entry(key).or_insert_with(|| {
            streams.push(Stream {
                subject,
                profile,
                rows: Vec::new(),
            });
            streams.len() - 1
        });
        streams[slot].rows.push(values);
    }

    let mut report = IngestReport::default();
    let mut pairs = Vec::new();
    for stream in streams {
        let n = stream.rows.len();
        let channels = channel_cols.len();
        let mut data = Array2::from_shape_fn((n, channels), |(i, k)| stream.rows[i][k]);
        let mut missing = vec![false; n];
        for k in 0..channels {
            let mut column = data.column(k).to_vec();
            let (m, filled) = fill_gaps(&mut column);
            report.interpolated_samples += filled;
            for (i, v) in column.into_iter().enumerate() {
                data[[i, k]] = v;
                missing[i] |= m[i];
            }
        }
        let count = n / window_len;
        report.dropped_samples += n - count * window_len;
        for w in 0..count {
            let rows = w * window_len..(w + 1) * window_len;
            if missing[rows.clone()].iter().any(|&m| m) {
                report.rejected_windows += 1;
                log::warn!(
                    "rejecting window {w} of subject {} profile {}: gap longer than {MAX_GAP} samples",
                    stream.subject,
                    stream.profile
                );
                continue;
            }
            let block = data.slice(ndarray::s![rows, ..]);
            pairs.push(SequencePair {
                x: block.slice(ndarray::s![.., ..dx]).to_owned(),
                y: block.slice(ndarray::s![.., dx..]).to_owned(),
                subject_id: stream.subject.clone(),
                profile: stream.profile,
            });
            report.windows += 1;
        }
    }
    Ok((pairs, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn schema_channel_counts() {
        assert_eq!(ModalitySchema::kinematics().channels.len(), 15);
        assert_eq!(ModalitySchema::kinetics().channels.len(), 9);
        assert_eq!(ModalitySchema::grf().channels.len(), 3);
        assert!(ModalitySchema::by_name("emg").is_err());
    }

    #[test]
    fn gap_filling() {
        let mut c = vec![0.0, f64::NAN, f64::NAN, 3.0];
        let (missing, filled) = fill_gaps(&mut c);
        assert_eq!(c, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!((missing.iter().any(|&m| m), filled), (false, 2));
        let mut long = vec![1.0; 10];
        long[2..8].iter_mut().for_each(|v| *v = f64::NAN);
        let (missing, _) = fill_gaps(&mut long);
        assert_eq!(missing.iter().filter(|&&m| m).count(), 6);
    }

    fn write_csv(rows: usize, gap: Option<(usize, usize)>) -> tempfile::NamedTempFile {
        let sx = ModalitySchema::grf();
        let sy = ModalitySchema::kinetics();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{}", canonical_header(&sx, &sy).join(",")).unwrap();
        for i in 0..rows {
            let mut fields = vec!["S01".to_string(), "4".to_string()];
            for k in 0..12 {
                let missing = gap.is_some_and(|(a, b)| (a..b).contains(&i) && k == 0);
                fields.push(if missing {
                    String::new()
                } else {
                    format!("{}", i * 12 + k)
                });
            }
            writeln!(f, "{}", fields.join(",")).unwrap();
        }
        f
    }

    #[test]
    fn exact_and_remainder_windows() {
        let f = write_csv(600, None);
        let (pairs, report) = ingest_csv(f.path(), &ModalitySchema::grf(), &ModalitySchema::kinetics(), 300).unwrap();
        assert_eq!((pairs.len(), report.dropped_samples), (2, 0));
        assert_eq!(pairs[0].x.dim(), (300, 3));
        assert_eq!(pairs[0].y.dim(), (300, 9));
        assert_eq!(pairs[1].x[[0, 0]], 300.0 * 12.0);
        assert_eq!(pairs[0].profile, 4);

        let f = write_csv(650, None);
        let (pairs, report) = ingest_csv(f.path(), &ModalitySchema::grf(), &ModalitySchema::kinetics(), 300).unwrap();
        assert_eq!((pairs.len(), report.dropped_samples), (2, 50));
    }

    #[test]
    fn long_gap_rejects_only_its_window() {
        let f = write_csv(600, Some((10, 20)));
        let (pairs, report) = ingest_csv(f.path(), &ModalitySchema::grf(), &ModalitySchema::kinetics(), 300).unwrap();
        assert_eq!((pairs.len(), report.rejected_windows), (1, 1));
        let f = write_csv(600, Some((10, 13)));
        let (pairs, report) = ingest_csv(f.path(), &ModalitySchema::grf(), &ModalitySchema::kinetics(), 300).unwrap();
        assert_eq!((pairs.len(), report.interpolated_samples), (2, 3));
        assert_eq!(pairs[0].x[[11, 0]], 11.0 * 12.0);
    }

    #[test]
    fn missing_channel_is_an_error() {
        let f = write_csv(10, None);
        let err = ingest_csv(f.path(), &ModalitySchema::kinematics(), &ModalitySchema::grf(), 5);
        assert!(matches!(err, Err(Error::Data(_))));
    }
}
