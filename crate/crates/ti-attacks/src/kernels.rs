//! Construction of the normalized `(2k+1) x (2k+1)` weight matrices used to
//! smooth gradients: uniform, linear (separable triangular) and Gaussian with
//! `sigma = k / sqrt(3)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::KernelMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Uniform,
    Linear,
    Gaussian,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelKind::Uniform => write!(f, "uniform"),
            KernelKind::Linear => write!(f, "linear"),
            KernelKind::Gaussian => write!(f, "gaussian"),
        }
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(KernelKind::Uniform),
            "linear" => Ok(KernelKind::Linear),
            "gaussian" => Ok(KernelKind::Gaussian),
            other => Err(Error::invalid(format!(
                "unknown kernel kind '{other}' (expected uniform, linear or gaussian)"
            ))),
        }
    }
}

/// A normalized smoothing kernel: non-negative weights summing to 1,
/// centrally symmetric, with weight non-increasing away from the centre for
/// the linear and Gaussian kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    kind: KernelKind,
    k: usize,
    matrix: KernelMatrix,
}

impl Kernel {
    pub fn build(kind: KernelKind, k: usize) -> Kernel {
        match kind {
            KernelKind::Uniform => Kernel::uniform(k),
            KernelKind::Linear => Kernel::linear(k),
            KernelKind::Gaussian => Kernel::gaussian(k),
        }
    }

    /// `W[i][j] = 1 / (2k+1)^2`.
    pub fn uniform(k: usize) -> Kernel {
        let side = 2 * k + 1;
        let value = 1.0 / (side * side) as f64;
        Kernel {
            kind: KernelKind::Uniform,
            k,
            matrix: KernelMatrix::new(side, vec![value; side * side]).unwrap(),
        }
    }

    /// Separable triangular weights `(1 - |i|/(k+1)) * (1 - |j|/(k+1))`,
    /// normalized to sum 1.
    pub fn linear(k: usize) -> Kernel {
        let weights = build_weights(k, |i, j| {
            let s = (k + 1) as f64;
            (1.0 - (i.abs() as f64) / s) * (1.0 - (j.abs() as f64) / s)
        });
        Kernel {
            kind: KernelKind::Linear,
            k,
            matrix: normalize(k, weights),
        }
    }

    /// Gaussian sampled at integer offsets with `sigma = k / sqrt(3)`,
    /// normalized to sum 1 (the `1/(2*pi*sigma^2)` prefactor cancels).
    ///
    /// `k = 0` leaves `sigma` undefined and returns the 1x1 identity kernel
    /// by convention, so that every kind degenerates to its vanilla attack.
    pub fn gaussian(k: usize) -> Kernel {
        if k == 0 {
            return Kernel {
                kind: KernelKind::Gaussian,
                k: 0,
                matrix: KernelMatrix::identity(),
            };
        }
        let sigma2 = (k as f64) * (k as f64) / 3.0;
        let weights = build_weights(k, |i, j| {
            let r2 = (i * i + j * j) as f64;
            (-r2 / (2.0 * sigma2)).exp()
        });
        Kernel {
            kind: KernelKind::Gaussian,
            k,
            matrix: normalize(k, weights),
        }
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    /// Half-width (maximal shift in pixels).
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn side(&self) -> usize {
        2 * self.k + 1
    }

    pub fn matrix(&self) -> &KernelMatrix {
        &self.matrix
    }

    /// CSV rendering, one row per line, full round-trip precision.
    pub fn to_csv(&self) -> String {
        let side = self.side();
        let mut out = String::new();
        for row in 0..side {
            let cells: Vec<String> = (0..side)
                .map(|col| {
                    let k = self.k as isize;
                    format!("{}", self.matrix.get(row as isize - k, col as isize - k))
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn build_weights(k: usize, f: impl Fn(isize, isize) -> f64) -> Vec<f64> {
    let k = k as isize;
    let mut weights = Vec::with_capacity(((2 * k + 1) * (2 * k + 1)) as usize);
    for i in -k..=k {
        for j in -k..=k {
            weights.push(f(i, j));
        }
    }
    weights
}

fn normalize(k: usize, mut weights: Vec<f64>) -> KernelMatrix {
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    KernelMatrix::new(2 * k + 1, weights).unwrap()
}
