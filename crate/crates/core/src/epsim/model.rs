use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Two-variable Aliev-Panfilov parameters in model units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApParams {
    pub k: f64,
    pub a_healthy: f64,
    pub eps0: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub diffusion: f64,
}

impl Default for ApParams {
    fn default() -> Self {
        Self { k: 8.0, a_healthy: 0.15, eps0: 0.002, mu1: 0.2, mu2: 0.3, diffusion: 0.1 }
    }
}

/// Per-node excitability threshold `a` and the abnormal-tissue mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueField {
    pub excitability: Vec<f64>,
    pub scar_mask: Vec<bool>,
}

impl TissueField {
    pub fn healthy(nodes: usize, a: f64) -> Self {
        Self { excitability: vec![a; nodes], scar_mask: vec![false; nodes] }
    }

    /// Derives the scar mask as the nodes whose excitability exceeds `healthy`.
    pub fn from_excitability(excitability: Vec<f64>, healthy: f64) -> Result<Self> {
        if let Some(bad) = excitability.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::Stimulus(format!("excitability {bad} outside (0, 1)")));
        }
        let scar_mask = excitability.iter().map(|&a| a > healthy).collect();
        Ok(Self { excitability, scar_mask })
    }

    pub fn len(&self) -> usize {
        self.excitability.len()
    }

    pub fn is_empty(&self) -> bool {
        self.excitability.is_empty()
    }
}

/// Right-hand side of the Aliev-Panfilov system:
///
/// ```text
/// du/dt = D·L(u) + k·u·(1−u)·(u−a) − u·v + i_stim
/// dv/dt = (ε0 + μ1·v/(u+μ2)) · (−v − k·u·(u−a−1))
/// ```
pub fn ap_rhs(
    u: &[f64],
    v: &[f64],
    tissue: &TissueField,
    laplacian: &CsrMatrix,
    i_stim: &[f64],
    p: &ApParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = u.len();
    if v.len() != n || i_stim.len() != n || tissue.len() != n || laplacian.rows != n {
        return Err(Error::shape(format!(
            "ap_rhs: u {n}, v {}, i_stim {}, tissue {}, laplacian {}",
            v.len(),
            i_stim.len(),
            tissue.len(),
            laplacian.rows
        )));
    }
    let mut du = vec![0.0; n];
    let mut dv = vec![0.0; n];
    ap_rhs_into(u, v, &tissue.excitability, laplacian, i_stim, p, &mut du, &mut dv);
    Ok((du, dv))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn ap_rhs_into(
    u: &[f64],
    v: &[f64],
    a: &[f64],
    laplacian: &CsrMatrix,
    i_stim: &[f64],
    p: &ApParams,
    du: &mut [f64],
    dv: &mut [f64],
) {
    laplacian.mul_vec(u, du);
    for i in 0..u.len() {
        let (ui, vi, ai) = (u[i], v[i], a[i]);
        du[i] = p.diffusion * du[i] + p.k * ui * (1.0 - ui) * (ui - ai) - ui * vi + i_stim[i];
        dv[i] = (p.eps0 + p.mu1 * vi / (ui + p.mu2)) * (-vi - p.k * ui * (ui - ai - 1.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resting_state_is_a_fixed_point() {
        let l = CsrMatrix::from_triplets(2, 2, &[(0, 0, -1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, -1.0)]);
        let t = TissueField::healthy(2, 0.15);
        let (du, dv) = ap_rhs(&[0.0; 2], &[0.0; 2], &t, &l, &[0.0; 2], &ApParams::default()).unwrap();
        assert_eq!(du, vec![0.0; 2]);
        assert_eq!(dv, vec![0.0; 2]);
    }

    #[test]
    fn single_node_matches_hand_evaluation() {
        let l = CsrMatrix::from_triplets(1, 1, &[]);
        let t = TissueField::from_excitability(vec![0.15], 0.15).unwrap();
        let p = ApParams::default();
        let (du, dv) = ap_rhs(&[0.2], &[0.1], &t, &l, &[0.0], &p).unwrap();
        // 8·0.2·0.8·0.05 − 0.02 = 0.044
        let du_ref = 8.0 * 0.2 * (1.0 - 0.2) * (0.2 - 0.15) - 0.2 * 0.1;
        // (0.002 + 0.2·0.1/0.5)·(−0.1 − 8·0.2·(0.2 − 1.15)) = 0.042·1.42
        let dv_ref = (0.002 + 0.2 * 0.1 / (0.2 + 0.3)) * (-0.1 - 8.0 * 0.2 * (0.2 - 0.15 - 1.0));
        assert!((du[0] - du_ref).abs() < 1e-15);
        assert!((dv[0] - dv_ref).abs() < 1e-15);
        assert!((du[0] - 0.044).abs() < 1e-12);
        assert!((dv[0] - 0.05964).abs() < 1e-12);
    }

    #[test]
    fn constant_potential_has_no_diffusion() {
        let g = crate::geometry::build_graph(&crate::geometry::MeshGeometry::grid(4, 4, 1.0)).unwrap();
        let l = g.laplacian();
        let n = g.node_count;
        let t = TissueField::healthy(n, 0.15);
        let p = ApParams::default();
        let (du, _) = ap_rhs(&vec![0.5; n], &vec![0.0; n], &t, &l, &vec![0.0; n], &p).unwrap();
        let reaction = 8.0 * 0.5 * 0.5 * (0.5 - 0.15);
        assert!(du.iter().all(|&d| d == reaction));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let l = CsrMatrix::from_triplets(2, 2, &[]);
        let t = TissueField::healthy(2, 0.15);
        assert!(ap_rhs(&[0.0; 3], &[0.0; 2], &t, &l, &[0.0; 2], &ApParams::default()).is_err());
    }
}
