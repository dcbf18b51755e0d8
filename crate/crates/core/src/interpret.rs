//! Feature importance from the weighting layers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GesmeNet, SampleBatch};
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// Averaged weighting-layer outputs and masks.
///
/// Columns are the spatio-temporal features followed by the weather features;
/// the spatial view covers spatio-temporal features only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub features: Vec<String>,
    pub st_features: usize,
    pub zones: Vec<String>,
    /// `[b × F]`, row `k` is slot `t − b + k`; averaged over samples and zones.
    pub temporal: Vec<Vec<f64>>,
    /// `[N × F_st]`, averaged over samples and lags.
    pub spatial: Vec<Vec<f64>>,
    /// `[b × F]` mean |σ(W)| of the weighting masks (zones averaged).
    pub weight_temporal: Vec<Vec<f64>>,
}

impl ImportanceReport {
    pub fn compute<T: Scalar>(net: &GesmeNet<T>, batch: &SampleBatch<T>, zone_ids: &[String]) -> Result<Self> {
        let w = net
            .weighting
            .as_ref()
            .ok_or_else(|| Error::usage("the model was trained without feature weighting; no importance to report"))?;
        let ro = &net.roster;
        let (n, b, f, fw) = (ro.zones, ro.lookback, ro.f_st(), ro.f_w());
        if zone_ids.len() != n {
            return Err(Error::usage(format!("{} zone ids for {n} zones", zone_ids.len())));
        }
        let r = batch.rows();
        if r == 0 {
            return Err(Error::usage("importance needs at least one sample"));
        }
        let mut tape = Tape::new();
        let p = net.params.bind_frozen(&mut tape);
        let x = net.inputs(&mut tape, batch)?;
        let x = net.weighted(&mut tape, &p, x)?;
        let st = tape.value(x.st).data();
        let weather = tape.value(x.weather).data();

        let mut temporal = vec![vec![0.0; f + fw]; b];
        let mut spatial = vec![vec![0.0; f]; n];
        for s in 0..r {
            for z in 0..n {
                for j in 0..f {
                    for k in 0..b {
                        let v = st[((s * n + z) * f + j) * b + k].to_f64_lossy();
                        temporal[k][j] += v / (r * n) as f64;
                        spatial[z][j] += v / (r * b) as f64;
                    }
                }
            }
            for k in 0..b {
                for j in 0..fw {
                    temporal[k][f + j] += weather[(s * b + k) * fw + j].to_f64_lossy() / r as f64;
                }
            }
        }

        let st_mask = w.st.mask(&net.params);
        let w_mask = w.weather.mask(&net.params);
        let mut weight_temporal = vec![vec![0.0; f + fw]; b];
        for z in 0..n {
            for j in 0..f {
                for k in 0..b {
                    weight_temporal[k][j] += st_mask[(z * f + j) * b + k].abs() / n as f64;
                }
            }
        }
        for k in 0..b {
            for j in 0..fw {
                weight_temporal[k][f + j] = w_mask[k * fw + j].abs();
            }
        }
        Ok(Self {
            features: ro.st_features.iter().chain(&ro.weather_features).cloned().collect(),
            st_features: f,
            zones: zone_ids.to_vec(),
            temporal,
            spatial,
            weight_temporal,
        })
    }

    /// Mean |σ(W)| per spatio-temporal feature over lags and zones.
    pub fn st_weight_means(&self) -> Vec<(String, f64)> {
        let b = self.weight_temporal.len() as f64;
        (0..self.st_features)
            .map(|j| {
                (
                    self.features[j].clone(),
                    self.weight_temporal.iter().map(|row| row[j]).sum::<f64>() / b,
                )
            })
            .collect()
    }

    fn matrix_csv(head: &str, labels: &[String], cols: &[String], m: &[Vec<f64>]) -> String {
        let mut s = head.to_string();
        for c in cols {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
        for (label, row) in labels.iter().zip(m) {
            s.push_str(label);
            for v in row {
                write!(s, ",{v:.6}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    fn lag_labels(&self) -> Vec<String> {
        let b = self.temporal.len();
        (0..b).map(|k| format!("t-{}", b - k)).collect()
    }

    /// Writes `temporal.csv`, `spatial.csv` and `weights.csv`; returns their paths.
    pub fn write_csvs(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let lags = self.lag_labels();
        let files = [
            ("temporal.csv", Self::matrix_csv("lag", &lags, &self.features, &self.temporal)),
            (
                "spatial.csv",
                Self::matrix_csv("zone", &self.zones, &self.features[..self.st_features], &self.spatial),
            ),
            ("weights.csv", Self::matrix_csv("lag", &lags, &self.features, &self.weight_temporal)),
        ];
        let mut out = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body)?;
            out.push(p);
        }
        Ok(out)
    }
}
