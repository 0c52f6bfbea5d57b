//! Two-basis tomography of heralded pairs and the fidelity lower bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::RandomSource;
use crate::state::{Basis, BellLabel};

/// Joint outcome counts for pairs sharing one Bell label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TomographyStats {
    /// Z-basis counts indexed by `2a + b`: 00, 01, 10, 11.
    pub z: [u64; 4],
    pub x_same: u64,
    pub x_diff: u64,
    /// Product of the readout fidelities of the two measuring devices.
    pub m: f64,
    pub label: BellLabel,
}

impl TomographyStats {
    pub fn new(label: BellLabel, m: f64) -> Self {
        Self {
            z: [0; 4],
            x_same: 0,
            x_diff: 0,
            m,
            label,
        }
    }

    pub fn accumulate(&mut self, basis: Basis, a: u8, b: u8) {
        debug_assert!(a <= 1 && b <= 1);
        match basis {
            Basis::Z => self.z[(2 * a + b) as usize] += 1,
            Basis::X if a == b => self.x_same += 1,
            Basis::X => self.x_diff += 1,
        }
    }

    pub fn n_z(&self) -> u64 {
        self.z.iter().sum()
    }

    pub fn n_x(&self) -> u64 {
        self.x_same + self.x_diff
    }

    pub fn pairs(&self) -> u64 {
        self.n_z() + self.n_x()
    }

    fn z_frac(&self, count: u64) -> f64 {
        count as f64 / self.n_z().max(1) as f64
    }

    pub fn rho_z_diff(&self) -> f64 {
        self.z_frac(self.z[1] + self.z[2])
    }

    pub fn rho_z_11(&self) -> f64 {
        self.z_frac(self.z[0])
    }

    pub fn rho_z_44(&self) -> f64 {
        self.z_frac(self.z[3])
    }

    pub fn rho_x_same(&self) -> f64 {
        self.x_same as f64 / self.n_x().max(1) as f64
    }

    pub fn rho_x_diff(&self) -> f64 {
        self.x_diff as f64 / self.n_x().max(1) as f64
    }

    /// Re-expresses ψ⁻ statistics in the ψ⁺ frame: a Z on one side swaps
    /// same and different X outcomes and leaves Z outcomes alone.
    pub fn folded(&self) -> Self {
        match self.label {
            BellLabel::PsiPlus => *self,
            BellLabel::PsiMinus => Self {
                x_same: self.x_diff,
                x_diff: self.x_same,
                label: BellLabel::PsiPlus,
                ..*self
            },
        }
    }

    /// Adds counts of another set expressed in the same frame.
    pub fn merge(&mut self, other: &Self) {
        debug_assert_eq!(self.label, other.label);
        for (a, b) in self.z.iter_mut().zip(other.z) {
            *a += b;
        }
        self.x_same += other.x_same;
        self.x_diff += other.x_diff;
    }
}

/// `M·½(ρZdiff + ρXsame − ρXdiff − 2√(ρ11 ρ44))` with the X terms exchanged
/// for ψ⁻. `None` until both bases have been measured at least once.
pub fn fidelity_bound(stats: &TomographyStats) -> Option<f64> {
    if stats.n_z() == 0 || stats.n_x() == 0 {
        return None;
    }
    let (agree, disagree) = match stats.label {
        BellLabel::PsiPlus => (stats.rho_x_same(), stats.rho_x_diff()),
        BellLabel::PsiMinus => (stats.rho_x_diff(), stats.rho_x_same()),
    };
    let inner = stats.rho_z_diff() + agree - disagree
        - 2.0 * (stats.rho_z_11() * stats.rho_z_44()).sqrt();
    Some(stats.m * 0.5 * inner)
}

/// Strict alternation: even pairs in Z, odd pairs in X.
pub fn basis_for_pair(index: u64) -> Basis {
    if index % 2 == 0 {
        Basis::Z
    } else {
        Basis::X
    }
}

/// Heralded pairs per simulated second.
pub fn rate(heralds: u64, elapsed_secs: f64) -> Result<f64> {
    if !(elapsed_secs.is_finite() && elapsed_secs > 0.0) {
        return Err(Error::invalid(
            "elapsed",
            format!("must be positive, got {elapsed_secs}"),
        ));
    }
    Ok(heralds as f64 / elapsed_secs)
}

/// Statistics of a whole run, split by herald label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tomography {
    pub psi_plus: TomographyStats,
    pub psi_minus: TomographyStats,
    /// Pairs dropped because a device could not be read out.
    pub discarded: u64,
}

impl Tomography {
    pub fn new(m: f64) -> Self {
        Self {
            psi_plus: TomographyStats::new(BellLabel::PsiPlus, m),
            psi_minus: TomographyStats::new(BellLabel::PsiMinus, m),
            discarded: 0,
        }
    }

    pub fn record(&mut self, label: BellLabel, basis: Basis, a: u8, b: u8) {
        match label {
            BellLabel::PsiPlus => self.psi_plus.accumulate(basis, a, b),
            BellLabel::PsiMinus => self.psi_minus.accumulate(basis, a, b),
        }
    }

    /// Both label sets in the ψ⁺ frame.
    pub fn combined(&self) -> TomographyStats {
        let mut all = self.psi_plus;
        all.merge(&self.psi_minus.folded());
        all
    }

    pub fn pairs(&self) -> u64 {
        self.psi_plus.pairs() + self.psi_minus.pairs()
    }

    pub fn bound(&self) -> Option<f64> {
        fidelity_bound(&self.combined())
    }

    /// Parametric bootstrap standard error of [`Tomography::bound`].
    pub fn bound_stderr(&self, resamples: usize, seed: u64) -> Option<f64> {
        bootstrap_stderr(&self.combined(), resamples, seed)
    }
}

/// Resamples Z counts from their multinomial and X counts from their binomial
/// at the observed frequencies and returns the spread of the bound.
pub fn bootstrap_stderr(stats: &TomographyStats, resamples: usize, seed: u64) -> Option<f64> {
    fidelity_bound(stats)?;
    if resamples < 2 {
        return None;
    }
    let mut rng = RandomSource::new(seed);
    let (n_z, n_x) = (stats.n_z(), stats.n_x());
    let mut values = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut s = *stats;
        let mut left = n_z;
        let mut mass = 1.0;
        for i in 0..3 {
            let p = stats.z[i] as f64 / n_z as f64;
            let draw = if mass > 0.0 {
                rng.binomial(left, (p / mass).min(1.0))
            } else {
                0
            };
            s.z[i] = draw;
            left -= draw;
            mass -= p;
        }
        s.z[3] = left;
        s.x_same = rng.binomial(n_x, stats.x_same as f64 / n_x as f64);
        s.x_diff = n_x - s.x_same;
        values.push(fidelity_bound(&s).expect("non-empty"));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    Some(var.sqrt())
}
