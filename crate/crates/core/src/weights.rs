//! Row-normalised spatial coupling weights.
//!
//! Power-law schemes take the decay on the bounded scale `theta in (0, 1)`;
//! the exponent applied to distances or graph orders is
//! `rho = theta / (1 - theta)`. `rho -> 0` gives equal weights and
//! `rho -> inf` concentrates all weight on the nearest areas.

use serde::{Deserialize, Serialize};

use crate::data::SpatialStructure;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightScheme {
    DistancePowerLaw { theta: f64 },
    GraphPowerLaw { theta: f64 },
    BinaryContiguity,
    Uniform,
}

/// Which decay base a power-law scheme uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayBase {
    Distance,
    GraphOrder,
}

pub fn rho_from_theta(theta: f64) -> f64 {
    theta / (1.0 - theta)
}

impl WeightScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightScheme::DistancePowerLaw { theta } | WeightScheme::GraphPowerLaw { theta } => {
                if theta > 0.0 && theta < 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "power-law theta must lie in (0, 1), got {theta}"
                    )))
                }
            }
            _ => Ok(()),
        }
    }

    pub fn power_law(base: DecayBase, theta: f64) -> Self {
        match base {
            DecayBase::Distance => WeightScheme::DistancePowerLaw { theta },
            DecayBase::GraphOrder => WeightScheme::GraphPowerLaw { theta },
        }
    }
}

/// `n x n` row-normalised weights with zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    n: usize,
    w: Vec<f64>,
    /// Rows left all-zero because the area has no reachable neighbour.
    pub warnings: Vec<String>,
}

impl WeightMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("weight matrix must be square".into()));
        }
        Ok(Self {
            n,
            w: rows.into_iter().flatten().collect(),
            warnings: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.n..(i + 1) * self.n]
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).iter().sum()
    }

    /// CSV with a header of area labels and one labelled row per area.
    pub fn to_csv(&self, areas: &[String]) -> String {
        let mut out = String::from("area");
        for a in areas {
            out.push(',');
            out.push_str(a);
        }
        out.push('\n');
        for (i, a) in areas.iter().enumerate() {
            out.push_str(a);
            for v in self.row(i) {
                out.push(',');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Weights together with their derivative with respect to `rho`.
#[derive(Debug, Clone)]
pub struct WeightsWithDerivative {
    pub weights: WeightMatrix,
    pub d_rho: Vec<f64>,
}

impl WeightsWithDerivative {
    pub fn d_rho_row(&self, i: usize) -> &[f64] {
        let n = self.weights.n;
        &self.d_rho[i * n..(i + 1) * n]
    }
}

pub fn build_weights(scheme: &WeightScheme, spatial: &SpatialStructure) -> Result<WeightMatrix> {
    scheme.validate()?;
    let n = spatial.n();
    if n < 2 {
        return Err(Error::Spatial("weights need at least two areas".into()));
    }
    match *scheme {
        WeightScheme::Uniform => {
            let v = 1.0 / (n as f64 - 1.0);
            let w = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { v }).collect();
            Ok(WeightMatrix {
                n,
                w,
                warnings: Vec::new(),
            })
        }
        WeightScheme::BinaryContiguity => {
            let order = spatial
                .graph_order()
                .ok_or_else(|| Error::Spatial("binary contiguity needs an adjacency matrix".into()))?;
            let mut w = vec![0.0; n * n];
            let mut warnings = Vec::new();
            for i in 0..n {
                let k = (0..n).filter(|&j| order.get(i, j) == Some(1)).count();
                if k == 0 {
                    warnings.push(format!("area {} has no neighbours; its weight row is zero", spatial.areas()[i]));
                    continue;
                }
                for j in 0..n {
                    if order.get(i, j) == Some(1) {
                        w[i * n + j] = 1.0 / k as f64;
                    }
                }
            }
            Ok(WeightMatrix { n, w, warnings })
        }
        WeightScheme::DistancePowerLaw { theta } => {
            Ok(power_law(DecayBase::Distance, rho_from_theta(theta), spatial, false)?.weights)
        }
        WeightScheme::GraphPowerLaw { theta } => {
            Ok(power_law(DecayBase::GraphOrder, rho_from_theta(theta), spatial, false)?.weights)
        }
    }
}

/// Power-law weights `w_ij ∝ b_ij^(-rho)` for decay base `b`, with `dw/drho`.
pub fn power_law_with_derivative(
    base: DecayBase,
    rho: f64,
    spatial: &SpatialStructure,
) -> Result<WeightsWithDerivative> {
    power_law(base, rho, spatial, true)
}

fn power_law(
    base: DecayBase,
    rho: f64,
    spatial: &SpatialStructure,
    derivative: bool,
) -> Result<WeightsWithDerivative> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::InvalidParameter(format!("decay exponent must be finite and >= 0, got {rho}")));
    }
    let n = spatial.n();
    if n < 2 {
        return Err(Error::Spatial("weights need at least two areas".into()));
    }
    // log of the decay base for each off-diagonal pair; None = excluded.
    let log_base: Vec<Option<f64>> = match base {
        DecayBase::Distance => {
            let d = spatial
                .distances()
                .ok_or_else(|| Error::Spatial("distance power law needs a distance matrix".into()))?;
            let mut out = vec![None; n * n];
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    if d[i][j] == 0.0 {
                        return Err(Error::Spatial(format!(
                            "zero distance between distinct areas {} and {}",
                            spatial.areas()[i],
                            spatial.areas()[j]
                        )));
                    }
                    out[i * n + j] = Some(d[i][j].ln());
                }
            }
            out
        }
        DecayBase::GraphOrder => {
            let m = spatial
                .graph_order()
                .ok_or_else(|| Error::Spatial("graph power law needs an adjacency matrix".into()))?;
            (0..n * n)
                .map(|k| {
                    let (i, j) = (k / n, k % n);
                    if i == j {
                        None
                    } else {
                        m.get(i, j).map(|o| f64::from(o).ln())
                    }
                })
                .collect()
        }
    };

    let mut w = vec![0.0; n * n];
    let mut d_rho = if derivative { vec![0.0; n * n] } else { Vec::new() };
    let mut warnings = Vec::new();
    for i in 0..n {
        let row = &log_base[i * n..(i + 1) * n];
        // log-sum-exp over -rho * ln b keeps large rho and small distances finite.
        let max = row
            .iter()
            .flatten()
            .map(|lb| -rho * lb)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            warnings.push(format!(
                "area {} has no reachable neighbour; its weight row is zero",
                spatial.areas()[i]
            ));
            continue;
        }
        let mut total = 0.0;
        for (j, lb) in row.iter().enumerate() {
            if let Some(lb) = lb {
                let e = (-rho * lb - max).exp();
                w[i * n + j] = e;
                total += e;
            }
        }
        let mut mean_log = 0.0;
        for j in 0..n {
            w[i * n + j] /= total;
            if let Some(lb) = row[j] {
                mean_log += w[i * n + j] * lb;
            }
        }
        if derivative {
            for j in 0..n {
                if let Some(lb) = row[j] {
                    d_rho[i * n + j] = w[i * n + j] * (mean_log - lb);
                }
            }
        }
    }
    Ok(WeightsWithDerivative {
        weights: WeightMatrix { n, w, warnings },
        d_rho,
    })
}
