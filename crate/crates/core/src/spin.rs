//! Electron-nuclear spin Hamiltonian for an S = 3/2 electron coupled to an
//! I = 1/2 nucleus, its eigen-decomposition and the derived transition
//! frequencies.
//!
//! The product basis is ordered `|m_s⟩ ⊗ |m_I⟩` with
//! `m_s ∈ {+3/2, +1/2, −1/2, −3/2}` and `m_I ∈ {+1/2, −1/2}`, so basis index
//! `2·i_s + i_I`. All energies are in MHz.
//!
//! Zeeman coefficients enter the Hamiltonian as energy-per-field factors:
//! `γ_e·B·S_z + γ_n·B·I_z`. Their sign convention is left to the caller;
//! every reported transition frequency is an absolute value.

use std::fmt;
use std::str::FromStr;

use nalgebra::{SMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension of the `S = 3/2 ⊗ I = 1/2` product space.
pub const DIM: usize = 8;
const S: f64 = 1.5;

pub type HamiltonianMatrix = SMatrix<f64, DIM, DIM>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElectronProjection {
    PlusThreeHalves,
    PlusHalf,
    MinusHalf,
    MinusThreeHalves,
}

impl ElectronProjection {
    pub const ALL: [ElectronProjection; 4] = [
        ElectronProjection::PlusThreeHalves,
        ElectronProjection::PlusHalf,
        ElectronProjection::MinusHalf,
        ElectronProjection::MinusThreeHalves,
    ];

    pub fn value(self) -> f64 {
        match self {
            ElectronProjection::PlusThreeHalves => 1.5,
            ElectronProjection::PlusHalf => 0.5,
            ElectronProjection::MinusHalf => -0.5,
            ElectronProjection::MinusThreeHalves => -1.5,
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn from_value(m: f64) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.value() == m)
    }
}

impl fmt::Display for ElectronProjection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ElectronProjection::PlusThreeHalves => "+3/2",
            ElectronProjection::PlusHalf => "+1/2",
            ElectronProjection::MinusHalf => "-1/2",
            ElectronProjection::MinusThreeHalves => "-3/2",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NuclearProjection {
    Up,
    Down,
}

impl NuclearProjection {
    pub const ALL: [NuclearProjection; 2] = [NuclearProjection::Up, NuclearProjection::Down];

    pub fn value(self) -> f64 {
        match self {
            NuclearProjection::Up => 0.5,
            NuclearProjection::Down => -0.5,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for NuclearProjection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NuclearProjection::Up => "+1/2",
            NuclearProjection::Down => "-1/2",
        })
    }
}

fn basis_index(ms: ElectronProjection, mi: NuclearProjection) -> usize {
    2 * ms.index() + mi.index()
}

fn basis_label(index: usize) -> (ElectronProjection, NuclearProjection) {
    (ElectronProjection::ALL[index / 2], NuclearProjection::ALL[index % 2])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Manifold {
    Ground,
    Excited,
}

/// Diagonal hyperfine tensor in MHz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperfineTensor {
    pub a_xx: f64,
    pub a_yy: f64,
    pub a_zz: f64,
    /// Isotropic part, kept only for bookkeeping.
    pub a_iso: Option<f64>,
    /// Dipolar term, kept only for bookkeeping.
    pub t_dipolar: Option<f64>,
}

impl HyperfineTensor {
    pub fn new(a_xx: f64, a_yy: f64, a_zz: f64) -> Self {
        Self {
            a_xx,
            a_yy,
            a_zz,
            a_iso: None,
            t_dipolar: None,
        }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// Tensor of the Si_II nuclear spin used for readout (MHz).
    pub fn si_ii() -> Self {
        Self {
            a_xx: 9.00,
            a_yy: 9.03,
            a_zz: 8.660,
            a_iso: None,
            t_dipolar: Some(-0.130),
        }
    }

    pub fn a_perp(&self) -> f64 {
        0.5 * (self.a_xx + self.a_yy)
    }

    pub fn a_par(&self) -> f64 {
        self.a_zz
    }

    pub fn trace_third(&self) -> f64 {
        (self.a_xx + self.a_yy + self.a_zz) / 3.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("A_xx", self.a_xx), ("A_yy", self.a_yy), ("A_zz", self.a_zz)] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} is not finite")));
            }
        }
        if let Some(iso) = self.a_iso {
            if (iso - self.trace_third()).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "A_iso = {iso} differs from (A_xx + A_yy + A_zz)/3 = {}",
                    self.trace_third()
                )));
            }
        }
        Ok(())
    }
}

/// Scalar parameters of the spin Hamiltonian. Spin quantum numbers are fixed
/// at S = 3/2 and I = 1/2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinSystem {
    pub d_ground_mhz: f64,
    pub d_excited_mhz: f64,
    pub gamma_e_mhz_per_t: f64,
    pub gamma_n_mhz_per_t: f64,
    pub b_t: f64,
}

impl SpinSystem {
    pub fn zero_field_splitting(&self, manifold: Manifold) -> f64 {
        match manifold {
            Manifold::Ground => self.d_ground_mhz,
            Manifold::Excited => self.d_excited_mhz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("D_ground", self.d_ground_mhz),
            ("D_excited", self.d_excited_mhz),
            ("gamma_e", self.gamma_e_mhz_per_t),
            ("gamma_n", self.gamma_n_mhz_per_t),
            ("B", self.b_t),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} is not finite")));
            }
        }
        if self.b_t < 0.0 {
            return Err(Error::invalid("B must be non-negative"));
        }
        Ok(())
    }
}

/// Builds the 8×8 real symmetric Hamiltonian
/// `D(S_z² + S(S+1)/3) + γ_e B S_z + A_⊥(S_x I_x + S_y I_y) + A_∥ S_z I_z + γ_n B I_z`.
///
/// The transverse term is written as `A_⊥/2 (S₊I₋ + S₋I₊)`, which is real.
pub fn build_hamiltonian(
    sys: &SpinSystem,
    hf: &HyperfineTensor,
    manifold: Manifold,
) -> Result<HamiltonianMatrix> {
    sys.validate()?;
    hf.validate()?;
    let d = sys.zero_field_splitting(manifold);
    let b = sys.b_t;
    let a_perp = hf.a_perp();
    let a_par = hf.a_par();
    let offset = S * (S + 1.0) / 3.0;

    let mut h = HamiltonianMatrix::zeros();
    for ms in ElectronProjection::ALL {
        for mi in NuclearProjection::ALL {
            let (m, n) = (ms.value(), mi.value());
            let i = basis_index(ms, mi);
            h[(i, i)] = d * (m * m + offset)
                + sys.gamma_e_mhz_per_t * b * m
                + a_par * m * n
                + sys.gamma_n_mhz_per_t * b * n;
        }
    }
    // S₊I₋ couples |m_s, ↓⟩ to |m_s + 1, ↑⟩.
    for k in 1..4 {
        let lower = ElectronProjection::ALL[k];
        let upper = ElectronProjection::ALL[k - 1];
        let m = lower.value();
        let element = 0.5 * a_perp * (S * (S + 1.0) - m * (m + 1.0)).sqrt();
        let i = basis_index(lower, NuclearProjection::Down);
        let j = basis_index(upper, NuclearProjection::Up);
        h[(i, j)] = element;
        h[(j, i)] = element;
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Level {
    pub energy_mhz: f64,
    pub electron: ElectronProjection,
    pub nuclear: NuclearProjection,
    /// Squared overlap with the dominant product state.
    pub overlap: f64,
}

#[derive(Clone, Debug)]
pub struct EnergyLevels {
    /// Sorted ascending in energy.
    pub levels: Vec<Level>,
    /// Column `k` is the eigenvector of `levels[k]`.
    pub eigenvectors: HamiltonianMatrix,
    pub trace: f64,
}

impl EnergyLevels {
    /// True when each label is carried by exactly one level with overlap above 1/2
    /// by more than round-off.
    pub fn high_field_labels(&self) -> bool {
        let mut seen = [false; DIM];
        for l in &self.levels {
            let idx = basis_index(l.electron, l.nuclear);
            if l.overlap <= 0.5 + 1e-9 || seen[idx] {
                return false;
            }
            seen[idx] = true;
        }
        true
    }

    pub fn level(&self, ms: ElectronProjection, mi: NuclearProjection) -> Result<&Level> {
        if !self.high_field_labels() {
            return Err(Error::Labeling(
                "levels do not map one-to-one onto product states with overlap > 0.5".into(),
            ));
        }
        self.levels
            .iter()
            .find(|l| l.electron == ms && l.nuclear == mi)
            .ok_or_else(|| Error::Labeling(format!("no level labelled |{ms}, {mi}⟩")))
    }

    pub fn energy(&self, ms: ElectronProjection, mi: NuclearProjection) -> Result<f64> {
        self.level(ms, mi).map(|l| l.energy_mhz)
    }
}

/// Full symmetric eigendecomposition with levels labelled by their maximal
/// squared overlap with a product state (ties go to the lower basis index).
pub fn eigen_levels(h: &HamiltonianMatrix) -> EnergyLevels {
    let eig = SymmetricEigen::new(*h);
    let mut order: Vec<usize> = (0..DIM).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut eigenvectors = HamiltonianMatrix::zeros();
    let mut levels = Vec::with_capacity(DIM);
    for (col, &k) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        eigenvectors.set_column(col, &v);
        let mut best = 0;
        let mut best_w = v[0] * v[0];
        for i in 1..DIM {
            let w = v[i] * v[i];
            if w > best_w {
                best = i;
                best_w = w;
            }
        }
        let (electron, nuclear) = basis_label(best);
        levels.push(Level {
            energy_mhz: eig.eigenvalues[k],
            electron,
            nuclear,
            overlap: best_w,
        });
    }
    EnergyLevels {
        levels,
        eigenvectors,
        trace: h.trace(),
    }
}

/// Nuclear flip frequency `|E(m_s, ↑) − E(m_s, ↓)|` inside one electron manifold.
pub fn nuclear_transition_frequency(levels: &EnergyLevels, ms: ElectronProjection) -> Result<f64> {
    let up = levels.energy(ms, NuclearProjection::Up)?;
    let down = levels.energy(ms, NuclearProjection::Down)?;
    Ok((up - down).abs())
}

/// The `+1/2 → +3/2` and `−1/2 → −3/2` electron transition frequencies for a
/// fixed nuclear projection, in that order.
pub fn electron_transition_frequencies(
    levels: &EnergyLevels,
    mi: NuclearProjection,
) -> Result<[f64; 2]> {
    use ElectronProjection::*;
    let plus = levels.energy(PlusThreeHalves, mi)? - levels.energy(PlusHalf, mi)?;
    let minus = levels.energy(MinusThreeHalves, mi)? - levels.energy(MinusHalf, mi)?;
    Ok([plus.abs(), minus.abs()])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Species {
    #[serde(rename = "Si29")]
    Si29,
    #[serde(rename = "C13")]
    C13,
}

impl FromStr for Species {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "Si29" | "29Si" | "si29" => Ok(Species::Si29),
            "C13" | "13C" | "c13" => Ok(Species::C13),
            other => Err(Error::UnknownSpecies(other.to_string())),
        }
    }
}

impl fmt::Display for Species {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Species::Si29 => "Si29",
            Species::C13 => "C13",
        })
    }
}

/// Signed nuclear gyromagnetic ratios in MHz/T.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GyromagneticTable {
    #[serde(rename = "Si29_MHz_per_T")]
    pub si29: f64,
    #[serde(rename = "C13_MHz_per_T")]
    pub c13: f64,
}

impl Default for GyromagneticTable {
    fn default() -> Self {
        Self {
            si29: -8.465,
            c13: 10.708,
        }
    }
}

impl GyromagneticTable {
    pub fn gamma(&self, species: Species) -> f64 {
        match species {
            Species::Si29 => self.si29,
            Species::C13 => self.c13,
        }
    }
}

/// Bare Larmor frequency `|γ_n|·B` in MHz.
pub fn larmor_frequency(species: Species, b_t: f64, table: &GyromagneticTable) -> Result<f64> {
    if !b_t.is_finite() || b_t < 0.0 {
        return Err(Error::invalid("B must be finite and non-negative"));
    }
    Ok(table.gamma(species).abs() * b_t)
}
