//! CSV formats.
//!
//! Logged data: header `x0,...,x{d-1},action,propensity,reward`. Rows whose
//! reward field is empty are reward-free samples. Supervised data: header
//! `x0,...,x{d-1},label`. Reals are written as `{:.16e}`.

use std::io::{Read, Write};

use super::{DataError, LoggedKnownSample, LoggedUnknownSample, SupervisedDataset};

#[derive(Clone, Copy, Debug, Default)]
pub struct ReadOptions {
    /// Accept rewards outside `[-1, 0]`.
    pub allow_general_rewards: bool,
}

/// Contents of a logged-data file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoggedData {
    pub dim: usize,
    pub known: Vec<LoggedKnownSample>,
    pub unknown: Vec<LoggedUnknownSample>,
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn feature_header(dim: usize) -> Vec<String> {
    (0..dim).map(|i| format!("x{i}")).collect()
}

/// Writes known-reward rows first, then reward-free rows.
pub fn write_logged<W: Write>(
    out: W,
    dim: usize,
    known: &[LoggedKnownSample],
    unknown: &[LoggedUnknownSample],
) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header = feature_header(dim);
    header.extend(["action", "propensity", "reward"].map(String::from));
    w.write_record(&header)?;
    let mut row = |context: &[f64],
                   action: usize,
                   propensity: f64,
                   reward: Option<f64>|
     -> Result<(), DataError> {
        if context.len() != dim {
            return Err(DataError::DimensionMismatch {
                expected: dim,
                actual: context.len(),
            });
        }
        let mut fields: Vec<String> = context.iter().map(|v| fmt_real(*v)).collect();
        fields.push(action.to_string());
        fields.push(fmt_real(propensity));
        fields.push(reward.map(fmt_real).unwrap_or_default());
        w.write_record(&fields)?;
        Ok(())
    };
    for s in known {
        row(&s.context, s.action, s.propensity, Some(s.reward))?;
    }
    for s in unknown {
        row(&s.context, s.action, s.propensity, None)?;
    }
    w.flush()?;
    Ok(())
}

fn malformed(line: usize, message: impl Into<String>) -> DataError {
    DataError::Malformed {
        line,
        message: message.into(),
    }
}

fn parse_real(field: &str, line: usize, name: &str) -> Result<f64, DataError> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| malformed(line, format!("{name} `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(malformed(line, format!("{name} `{field}` is not finite")));
    }
    Ok(v)
}

fn parse_index(field: &str, line: usize, name: &str) -> Result<usize, DataError> {
    field.trim().parse().map_err(|_| {
        malformed(
            line,
            format!("{name} `{field}` is not a non-negative integer"),
        )
    })
}

fn check_feature_header(header: &csv::StringRecord, trailing: &[&str]) -> Result<usize, DataError> {
    let dim = header
        .len()
        .checked_sub(trailing.len())
        .ok_or_else(|| malformed(1, "header is too short"))?;
    for (i, name) in header.iter().enumerate() {
        let expected = if i < dim {
            format!("x{i}")
        } else {
            trailing[i - dim].to_string()
        };
        if name.trim() != expected {
            return Err(malformed(
                1,
                format!("header column {i} is `{name}`, expected `{expected}`"),
            ));
        }
    }
    Ok(dim)
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input)
}

pub fn read_logged<R: Read>(input: R, options: ReadOptions) -> Result<LoggedData, DataError> {
    let mut r = reader(input);
    let dim = check_feature_header(r.headers()?, &["action", "propensity", "reward"])?;
    let mut data = LoggedData {
        dim,
        ..LoggedData::default()
    };
    for record in r.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            malformed(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != dim + 3 {
            return Err(malformed(
                line,
                format!("expected {} fields, found {}", dim + 3, record.len()),
            ));
        }
        let context = (0..dim)
            .map(|i| parse_real(&record[i], line, &format!("x{i}")))
            .collect::<Result<Vec<_>, _>>()?;
        let action = parse_index(&record[dim], line, "action")?;
        let propensity = parse_real(&record[dim + 1], line, "propensity")?;
        if !(propensity > 0.0 && propensity <= 1.0) {
            return Err(DataError::InvalidPropensity {
                line,
                value: propensity,
            });
        }
        let reward_field = record[dim + 2].trim();
        if reward_field.is_empty() {
            data.unknown.push(LoggedUnknownSample {
                context,
                action,
                propensity,
            });
        } else {
            let reward = parse_real(reward_field, line, "reward")?;
            if !options.allow_general_rewards && !(-1.0..=0.0).contains(&reward) {
                return Err(DataError::RewardOutOfRange {
                    line,
                    value: reward,
                });
            }
            data.known.push(LoggedKnownSample {
                context,
                action,
                propensity,
                reward,
            });
        }
    }
    Ok(data)
}

pub fn write_supervised<W: Write>(out: W, ds: &SupervisedDataset) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header = feature_header(ds.dim());
    header.push("label".into());
    w.write_record(&header)?;
    for (x, label) in ds.features().iter().zip(ds.labels()) {
        let mut fields: Vec<String> = x.iter().map(|v| fmt_real(*v)).collect();
        fields.push(label.to_string());
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a supervised dataset. `classes` defaults to `max label + 1`.
pub fn read_supervised<R: Read>(
    input: R,
    classes: Option<usize>,
) -> Result<SupervisedDataset, DataError> {
    let mut r = reader(input);
    let dim = check_feature_header(r.headers()?, &["label"])?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            malformed(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != dim + 1 {
            return Err(malformed(
                line,
                format!("expected {} fields, found {}", dim + 1, record.len()),
            ));
        }
        features.push(
            (0..dim)
                .map(|i| parse_real(&record[i], line, &format!("x{i}")))
                .collect::<Result<Vec<_>, _>>()?,
        );
        labels.push(parse_index(&record[dim], line, "label")?);
    }
    let classes = classes.unwrap_or_else(|| labels.iter().map(|l| l + 1).max().unwrap_or(0));
    SupervisedDataset::new(features, labels, classes)
}
