use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Flat JSON serialisation of a network:
/// `{"kind": ..., "shapes": [[r, c], ...], "values": [...]}` with every value
/// written to 17 significant digits so reloads are bit-exact.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub kind: String,
    pub shapes: Vec<[usize; 2]>,
    pub values: Vec<f64>,
    /// Hash of the experiment configuration that produced the network.
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// Formats a double with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl Checkpoint {
    pub fn from_parameters(kind: &str, params: Vec<&Matrix>) -> Self {
        Self {
            kind: kind.to_string(),
            shapes: params.iter().map(|m| [m.rows(), m.cols()]).collect(),
            values: params
                .iter()
                .flat_map(|m| m.as_slice().iter().copied())
                .collect(),
            config_hash: None,
        }
    }

    pub fn with_config_hash(mut self, hash: &str) -> Self {
        self.config_hash = Some(hash.to_string());
        self
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "checkpoint kind {:?}, expected {kind:?}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Splits `values` back into matrices following `shapes`.
    pub fn matrices(&self) -> Result<Vec<Matrix>> {
        let total: usize = self.shapes.iter().map(|[r, c]| r * c).sum();
        if total != self.values.len() {
            return Err(Error::Format(format!(
                "shapes describe {total} values, found {}",
                self.values.len()
            )));
        }
        let mut offset = 0;
        self.shapes
            .iter()
            .map(|&[r, c]| {
                let m = Matrix::from_vec(r, c, self.values[offset..offset + r * c].to_vec());
                offset += r * c;
                m
            })
            .collect()
    }

    pub fn to_json_string(&self) -> String {
        let mut s = String::with_capacity(self.values.len() * 26 + 256);
        s.push_str("{\"kind\": ");
        s.push_str(&serde_json::to_string(&self.kind).expect("string"));
        if let Some(h) = &self.config_hash {
            s.push_str(", \"config_hash\": ");
            s.push_str(&serde_json::to_string(h).expect("string"));
        }
        s.push_str(", \"shapes\": [");
        for (i, [r, c]) in self.shapes.iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            let _ = write!(s, "[{r}, {c}]");
        }
        s.push_str("], \"values\": [");
        for (i, v) in self.values.iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            s.push_str(&fmt_f64(*v));
        }
        s.push_str("]}\n");
        s
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        ckpt.matrices()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}
