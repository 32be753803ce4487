//! E-J power law of the superconducting layer.

use serde::{Deserialize, Serialize};

use super::SolverError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawParams {
    /// Electric-field criterion (V/m).
    pub e_c: f64,
    /// Critical current density (A/m^2).
    pub j_c: f64,
    pub n_index: f64,
}

impl Default for PowerLawParams {
    /// 1 uV/cm, 5e10 A/m^2, n = 21.
    fn default() -> Self {
        Self {
            e_c: 1e-4,
            j_c: 5e10,
            n_index: 21.0,
        }
    }
}

impl PowerLawParams {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.e_c.is_finite() && self.e_c > 0.0) {
            return Err(SolverError::InvalidInput(format!("E_c must be positive, got {}", self.e_c)));
        }
        if !(self.j_c.is_finite() && self.j_c > 0.0) {
            return Err(SolverError::InvalidInput(format!("J_c must be positive, got {}", self.j_c)));
        }
        if !(self.n_index.is_finite() && self.n_index > 1.0) {
            return Err(SolverError::InvalidInput(format!(
                "n-index must exceed 1, got {}",
                self.n_index
            )));
        }
        Ok(())
    }

    /// `E = E_c sign(J) |J / J_c|^n`; odd in `J`, so `E J >= 0`.
    #[inline]
    pub fn efield(&self, j: f64) -> f64 {
        if j == 0.0 {
            return 0.0;
        }
        self.e_c * j.signum() * (j.abs() / self.j_c).powf(self.n_index)
    }

    /// `dE/dJ = n E_c / J_c |J / J_c|^(n-1)`.
    #[inline]
    pub fn efield_derivative(&self, j: f64) -> f64 {
        self.n_index * self.e_c / self.j_c * (j.abs() / self.j_c).powf(self.n_index - 1.0)
    }

    /// Local dissipation density `E J` (W/m^3).
    #[inline]
    pub fn dissipation_density(&self, j: f64) -> f64 {
        self.efield(j) * j
    }
}

pub fn power_law_efield(j: f64, params: &PowerLawParams) -> f64 {
    params.efield(j)
}
