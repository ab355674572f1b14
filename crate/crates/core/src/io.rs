//! CSV persistence of dataset splits.
//!
//! One row per sample with columns
//! `theta_omega0, theta_phi0, x_0 .. x_99, split, friction`; doubles carry 17
//! significant digits. A calibration triple occupies two consecutive rows
//! (`calib_real` then `calib_sim`) sharing the label.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::Checkpoint;
use crate::simulate::{CalibTriple, DatasetBundle, LabeledObservation, Observation, ParameterVector};

pub const SBI_FILE: &str = "sbi.csv";
pub const U_FILE: &str = "u.csv";
pub const OT_FILE: &str = "ot.csv";
pub const CALIB_FILE: &str = "calib.csv";
pub const TEST_FILE: &str = "test.csv";

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub theta: ParameterVector,
    pub x: Observation,
    pub split: String,
    pub friction: f64,
}

pub fn header() -> Vec<String> {
    let mut h = vec!["theta_omega0".to_string(), "theta_phi0".to_string()];
    h.extend((0..Observation::LEN).map(|k| format!("x_{k}")));
    h.push("split".into());
    h.push("friction".into());
    h
}

fn fmt(v: f64) -> String {
    crate::nets::fmt_f64(v)
}

pub fn write_rows(path: &Path, rows: &[SampleRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header())?;
    for r in rows {
        let mut rec = Vec::with_capacity(Observation::LEN + 4);
        rec.push(fmt(r.theta.omega0));
        rec.push(fmt(r.theta.phi0));
        rec.extend(r.x.as_slice().iter().map(|&v| fmt(v)));
        rec.push(r.split.clone());
        rec.push(fmt(r.friction));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<SampleRow>> {
    if !path.exists() {
        return Err(Error::MissingDependency(path.display().to_string()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let expected = header();
    let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if got != expected {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    let num = |s: &str, what: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Format(format!("{}: bad {what} value {s:?}", path.display())))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let theta = ParameterVector::new(num(&rec[0], "theta")?, num(&rec[1], "theta")?)?;
        let x = (0..Observation::LEN)
            .map(|k| num(&rec[2 + k], "x"))
            .collect::<Result<Vec<_>>>()?;
        rows.push(SampleRow {
            theta,
            x: Observation::new(x)?,
            split: rec[2 + Observation::LEN].to_string(),
            friction: num(&rec[3 + Observation::LEN], "friction")?,
        });
    }
    Ok(rows)
}

fn labeled_rows(obs: &[LabeledObservation], split: &str) -> Vec<SampleRow> {
    obs.iter()
        .map(|o| SampleRow {
            theta: o.theta,
            x: o.x.clone(),
            split: split.to_string(),
            friction: o.friction,
        })
        .collect()
}

fn to_labeled(rows: Vec<SampleRow>, split: &str) -> Result<Vec<LabeledObservation>> {
    rows.into_iter()
        .map(|r| {
            if r.split != split {
                return Err(Error::Format(format!("expected split {split:?}, found {:?}", r.split)));
            }
            Ok(LabeledObservation {
                theta: r.theta,
                x: r.x,
                friction: r.friction,
            })
        })
        .collect()
}

pub fn write_labeled(path: &Path, obs: &[LabeledObservation], split: &str) -> Result<()> {
    write_rows(path, &labeled_rows(obs, split))
}

pub fn read_labeled(path: &Path, split: &str) -> Result<Vec<LabeledObservation>> {
    to_labeled(read_rows(path)?, split)
}

pub fn write_calib(path: &Path, calib: &[CalibTriple]) -> Result<()> {
    let rows: Vec<SampleRow> = calib
        .iter()
        .flat_map(|t| {
            [
                SampleRow {
                    theta: t.theta,
                    x: t.x_real.clone(),
                    split: "calib_real".into(),
                    friction: t.friction,
                },
                SampleRow {
                    theta: t.theta,
                    x: t.x_sim.clone(),
                    split: "calib_sim".into(),
                    friction: 0.0,
                },
            ]
        })
        .collect();
    write_rows(path, &rows)
}

pub fn read_calib(path: &Path) -> Result<Vec<CalibTriple>> {
    let rows = read_rows(path)?;
    if rows.len() % 2 != 0 {
        return Err(Error::Format("calibration rows must come in pairs".into()));
    }
    rows.chunks(2)
        .enumerate()
        .map(|(i, pair)| {
            let (real, sim) = (&pair[0], &pair[1]);
            if real.split != "calib_real" || sim.split != "calib_sim" || real.theta != sim.theta {
                return Err(Error::Format(format!("malformed calibration pair {i}")));
            }
            Ok(CalibTriple {
                id: i as u64,
                theta: real.theta,
                x_real: real.x.clone(),
                x_sim: sim.x.clone(),
                friction: real.friction,
            })
        })
        .collect()
}

/// Writes the five split files into `dir`.
pub fn save_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_labeled(&dir.join(SBI_FILE), &bundle.d_sbi, "sbi")?;
    write_labeled(&dir.join(U_FILE), &bundle.d_u, "u")?;
    write_labeled(&dir.join(OT_FILE), &bundle.d_ot, "ot")?;
    write_calib(&dir.join(CALIB_FILE), &bundle.d_calib)?;
    write_labeled(&dir.join(TEST_FILE), &bundle.d_test, "test")?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    Ok(DatasetBundle {
        d_sbi: read_labeled(&dir.join(SBI_FILE), "sbi")?,
        d_u: read_labeled(&dir.join(U_FILE), "u")?,
        d_ot: read_labeled(&dir.join(OT_FILE), "ot")?,
        d_calib: read_calib(&dir.join(CALIB_FILE))?,
        d_test: read_labeled(&dir.join(TEST_FILE), "test")?,
    })
}

pub fn load_test(dir: &Path) -> Result<Vec<LabeledObservation>> {
    read_labeled(&dir.join(TEST_FILE), "test")
}

/// Saves a checkpoint tagged with the configuration hash.
pub fn save_checkpoint(path: &Path, ckpt: Checkpoint, config_hash: &str) -> Result<()> {
    ckpt.with_config_hash(config_hash).save(path)
}

/// Loads a checkpoint and rejects one produced under another configuration.
pub fn load_checkpoint(path: &Path, config_hash: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingDependency(path.display().to_string()));
    }
    let ckpt = Checkpoint::load(path)?;
    match ckpt.config_hash.as_deref() {
        Some(h) if h == config_hash => Ok(ckpt),
        other => Err(Error::Format(format!(
            "{} was produced under config {:?}, current config is {config_hash}",
            path.display(),
            other
        ))),
    }
}
