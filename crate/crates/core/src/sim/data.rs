//! CSV datasets the scenarios are sampled from.
//!
//! | file | header |
//! |------|--------|
//! | one per price day | `interval_index,price_usd_per_kwh` (exactly T rows) |
//! | disconnects | `interval_index` |
//! | SoC pairs | `initial_kwh,desired_kwh` |
//! | inflexibilities | `alpha_usd_per_h2` |

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::InputError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SocPair {
    pub initial_kwh: f64,
    pub desired_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetBundle {
    /// $/kWh, one vector of T prices per day.
    pub price_days: Vec<Vec<f64>>,
    /// Desired disconnection interval indices.
    pub disconnect_samples: Vec<usize>,
    pub soc_pairs: Vec<SocPair>,
    /// $/h²
    pub alpha_samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub prices: Vec<PathBuf>,
    pub disconnects: PathBuf,
    pub soc_pairs: PathBuf,
    pub alphas: PathBuf,
}

impl DatasetPaths {
    /// Resolves relative paths against `base`.
    pub fn relative_to(&self, base: &Path) -> DatasetPaths {
        let fix = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        DatasetPaths {
            prices: self.prices.iter().map(fix).collect(),
            disconnects: fix(&self.disconnects),
            soc_pairs: fix(&self.soc_pairs),
            alphas: fix(&self.alphas),
        }
    }
}

#[derive(Deserialize)]
struct PriceRow {
    interval_index: usize,
    price_usd_per_kwh: f64,
}

#[derive(Deserialize)]
struct DisconnectRow {
    interval_index: usize,
}

#[derive(Deserialize)]
struct AlphaRow {
    alpha_usd_per_h2: f64,
}

/// Parsed rows with their 1-based line numbers.
fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, InputError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| InputError::Io {
        path: name.clone(),
        reason: e.to_string(),
    })?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<T>() {
        match rec {
            Ok(row) => {
                // The header is line 1.
                rows.push((rows.len() + 2, row));
            }
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize);
                return Err(InputError::data(&name, line, e.to_string()));
            }
        }
    }
    if rows.is_empty() {
        return Err(InputError::data(&name, None, "no data rows"));
    }
    Ok(rows)
}

fn load_price_day(path: &Path, horizon: usize) -> Result<Vec<f64>, InputError> {
    let name = path.display().to_string();
    let rows: Vec<(usize, PriceRow)> = read_rows(path)?;
    if rows.len() != horizon {
        return Err(InputError::data(
            &name,
            None,
            format!("expected {horizon} price rows, got {}", rows.len()),
        ));
    }
    rows.into_iter()
        .enumerate()
        .map(|(k, (line, row))| {
            if row.interval_index != k {
                return Err(InputError::data(
                    &name,
                    Some(line),
                    format!("interval_index {} out of order (expected {k})", row.interval_index),
                ));
            }
            if !row.price_usd_per_kwh.is_finite() {
                return Err(InputError::data(&name, Some(line), "price must be finite"));
            }
            Ok(row.price_usd_per_kwh)
        })
        .collect()
}

/// Loads and validates a dataset bundle for stations with `horizon`
/// intervals and batteries of `battery_capacity` kWh.
pub fn load_datasets(
    paths: &DatasetPaths,
    horizon: usize,
    battery_capacity: f64,
) -> Result<DatasetBundle, InputError> {
    if paths.prices.is_empty() {
        return Err(InputError::invalid("prices", "at least one price file is required"));
    }
    let price_days = paths
        .prices
        .iter()
        .map(|p| load_price_day(p, horizon))
        .collect::<Result<Vec<_>, _>>()?;

    let name = paths.disconnects.display().to_string();
    let disconnect_samples = read_rows::<DisconnectRow>(&paths.disconnects)?
        .into_iter()
        .map(|(line, r)| {
            if r.interval_index > horizon {
                Err(InputError::data(
                    &name,
                    Some(line),
                    format!("interval_index {} exceeds horizon {horizon}", r.interval_index),
                ))
            } else {
                Ok(r.interval_index)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;

    let name = paths.soc_pairs.display().to_string();
    let soc_pairs = read_rows::<SocPair>(&paths.soc_pairs)?
        .into_iter()
        .map(|(line, p)| {
            let ok = p.initial_kwh.is_finite()
                && p.desired_kwh.is_finite()
                && 0.0 <= p.initial_kwh
                && p.initial_kwh <= p.desired_kwh
                && p.desired_kwh <= battery_capacity;
            if ok {
                Ok(p)
            } else {
                Err(InputError::data(
                    &name,
                    Some(line),
                    format!(
                        "need 0 <= initial <= desired <= {battery_capacity}, got ({}, {})",
                        p.initial_kwh, p.desired_kwh
                    ),
                ))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;

    let name = paths.alphas.display().to_string();
    let alpha_samples = read_rows::<AlphaRow>(&paths.alphas)?
        .into_iter()
        .map(|(line, r)| {
            if r.alpha_usd_per_h2.is_finite() && r.alpha_usd_per_h2 >= 0.0 {
                Ok(r.alpha_usd_per_h2)
            } else {
                Err(InputError::data(&name, Some(line), "alpha must be finite and >= 0"))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(DatasetBundle {
        price_days,
        disconnect_samples,
        soc_pairs,
        alpha_samples,
    })
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()
}

/// Writes the bundle in the loader's format under `dir` and returns the
/// relative file names.
pub fn write_datasets(bundle: &DatasetBundle, dir: &Path) -> std::io::Result<DatasetPaths> {
    std::fs::create_dir_all(dir)?;
    let mut prices = Vec::with_capacity(bundle.price_days.len());
    for (d, day) in bundle.price_days.iter().enumerate() {
        let name = PathBuf::from(format!("prices_day{d:02}.csv"));
        write_csv(
            &dir.join(&name),
            "interval_index,price_usd_per_kwh",
            day.iter().enumerate().map(|(k, p)| format!("{k},{p:.5}")),
        )?;
        prices.push(name);
    }
    let paths = DatasetPaths {
        prices,
        disconnects: "disconnects.csv".into(),
        soc_pairs: "soc_pairs.csv".into(),
        alphas: "alphas.csv".into(),
    };
    write_csv(
        &dir.join(&paths.disconnects),
        "interval_index",
        bundle.disconnect_samples.iter().map(|k| k.to_string()),
    )?;
    write_csv(
        &dir.join(&paths.soc_pairs),
        "initial_kwh,desired_kwh",
        bundle
            .soc_pairs
            .iter()
            .map(|p| format!("{:.3},{:.3}", p.initial_kwh, p.desired_kwh)),
    )?;
    write_csv(
        &dir.join(&paths.alphas),
        "alpha_usd_per_h2",
        bundle.alpha_samples.iter().map(|a| format!("{a:.3}")),
    )?;
    Ok(paths)
}
