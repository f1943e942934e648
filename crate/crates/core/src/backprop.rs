//! Backward pass at the spike-train level.
//!
//! For a layer `k` fed by layer `k−1`, differentiating the T-PSP relation
//! through `o ≈ a/ν` gives one linear equation per post-synaptic neuron `l`
//! and pre-synaptic neuron `i`:
//!
//! ```text
//! Ω_ll·P_li = Φ_li + Σ_p Θ_lp·P_pi
//! Ω_ll = 1 − (Σ_j w_lj ∂e_lj/∂o_l + Σ_p w_lp ∂e_lp/∂o_l) / ν_k
//! Φ_li = w_li ∂e_li/∂o_i / ν_{k−1}
//! Θ_lp = w_lp ∂e_lp/∂o_p / ν_k            (Θ_ll = 0)
//! ```
//!
//! with `P_li = ∂a^k_l/∂a^{k−1}_i`. Feedforward layers have `Θ = 0`, which
//! leaves the closed form `P = Ω⁻¹Φ`. Errors travel downward as
//! `δ^{k−1} = Pᵀ δ^k`.
//!
//! The same operator `Ω − Θ` couples the weight gradients of a recurrent
//! layer: nudging `w_ij` moves `a_i` by `e_ij`, which the intra-layer
//! connections spread to the other neurons of the layer. The gradient is
//! `∂E/∂w_ij = s_i·e_ij` with `(Ω − Θ)ᵀ s = δ`. For feedforward layers this
//! reduces to `δ_i·e_ij/Ω_ii`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{Lu, SingularMatrix};
use crate::matrix::Matrix;
use crate::params::NeuronParams;
use crate::spike::Episode;
use crate::spsp::SpsapTableau;
use crate::topology::Topology;

/// Denominators this close to zero are treated as singular.
pub const SINGULAR_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Solver {
    /// Dense LU with partial pivoting.
    #[default]
    Exact,
    /// First-order expansion `(Ω − Θ)⁻¹ ≈ Ω⁻¹ + Ω⁻¹ΘΩ⁻¹`.
    Taylor,
}

/// `(Ω − Θ)·P = Φ` for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSystem {
    pub layer: usize,
    /// Diagonal of Ω.
    pub omega: Vec<f64>,
    pub theta: Matrix,
    pub phi: Matrix,
}

impl LayerSystem {
    /// `Ω − Θ` as a dense matrix.
    pub fn operator(&self) -> Matrix {
        let n = self.omega.len();
        Matrix::from_fn(n, n, |i, j| if i == j { self.omega[i] - self.theta[(i, j)] } else { -self.theta[(i, j)] })
    }

    /// `‖(Ω − Θ)·P − Φ‖∞`
    pub fn residual(&self, p: &Matrix) -> f64 {
        self.operator().matmul(p).sub(&self.phi).norm_inf()
    }

    fn check_diagonal(&self) -> Result<()> {
        match self.omega.iter().position(|w| !(w.abs() > SINGULAR_TOLERANCE)) {
            Some(l) => Err(Error::Singular {
                layer: self.layer,
                detail: format!("Ω[{l}] = {:e}", self.omega[l]),
            }),
            None => Ok(()),
        }
    }

    fn factor(&self) -> Result<Lu> {
        Lu::factor(&self.operator()).map_err(|SingularMatrix { column, pivot }| Error::Singular {
            layer: self.layer,
            detail: format!("pivot {pivot:e} in column {column}"),
        })
    }
}

/// `∂E/∂w` for every weight matrix, shaped like the topology.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    /// `ff[k - 1]` matches `W^{k,k-1}`.
    pub ff: Vec<Matrix>,
    pub rec: Vec<Option<Matrix>>,
}

impl GradientSet {
    pub fn zeros(topology: &Topology) -> Self {
        Self {
            ff: topology.ff_weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            rec: topology
                .recurrent
                .iter()
                .map(|r| r.as_ref().map(|r| Matrix::zeros(r.weights.rows(), r.weights.cols())))
                .collect(),
        }
    }

    pub fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.ff.iter().chain(self.rec.iter().flatten())
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().all(Matrix::is_finite)
    }

    /// Largest absolute difference over all entries; panics on shape
    /// mismatch.
    pub fn max_abs_diff(&self, other: &GradientSet) -> f64 {
        assert_eq!(self.ff.len(), other.ff.len());
        let ff = self.ff.iter().zip(&other.ff).map(|(a, b)| a.max_abs_diff(b));
        let rec = self.rec.iter().zip(&other.rec).map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) => a.max_abs_diff(b),
            (None, None) => 0.0,
            _ => panic!("recurrent layout differs"),
        });
        ff.chain(rec).fold(0.0, f64::max)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            ff: self.ff.iter().map(|m| m.scale(s)).collect(),
            rec: self.rec.iter().map(|m| m.as_ref().map(|m| m.scale(s))).collect(),
        }
    }
}

/// `δ_i = (o_i − y_i)/ν` at the output layer.
pub fn output_delta(counts: &[f64], labels: &[f64], threshold: f64) -> Vec<f64> {
    assert_eq!(counts.len(), labels.len(), "counts and labels differ in length");
    counts.iter().zip(labels).map(|(o, y)| (o - y) / threshold).collect()
}

/// Input spike counts enter as-is, so the input layer uses a unit scale.
fn pre_scale(params: &NeuronParams, k: usize) -> f64 {
    if k >= 2 {
        1.0 / params.threshold(k - 1)
    } else {
        1.0
    }
}

/// Ω, Θ and Φ for layer `k ≥ 1`. Θ is zero for feedforward layers.
pub fn assemble_system(tableau: &SpsapTableau, topology: &Topology, params: &NeuronParams, k: usize) -> LayerSystem {
    let lt = tableau.layer(k);
    let w = topology.ff(k);
    let n = topology.size(k);
    let inv_nu = 1.0 / params.threshold(k);
    let inv_nu_pre = pre_scale(params, k);

    let mut omega = vec![0.0; n];
    let mut theta = Matrix::zeros(n, n);
    let phi = Matrix::from_fn(n, w.cols(), |l, i| w[(l, i)] * inv_nu_pre * lt.ff.de_dpre[(l, i)]);

    for l in 0..n {
        let mut post_sum: f64 = w.row(l).iter().zip(lt.ff.de_dpost.row(l)).map(|(w, d)| w * d).sum();
        if let (Some(rec), Some(block)) = (topology.rec(k), &lt.rec) {
            post_sum += rec.weights.row(l).iter().zip(block.de_dpost.row(l)).map(|(w, d)| w * d).sum::<f64>();
            for p in 0..n {
                if p != l {
                    theta[(l, p)] = rec.weights[(l, p)] * inv_nu * block.de_dpre[(l, p)];
                }
            }
        }
        omega[l] = 1.0 - inv_nu * post_sum;
    }
    LayerSystem { layer: k, omega, theta, phi }
}

/// Ω, Θ, Φ of a recurrent layer.
pub fn assemble_recurrent_system(
    tableau: &SpsapTableau,
    topology: &Topology,
    params: &NeuronParams,
    k: usize,
) -> Result<LayerSystem> {
    if !topology.is_recurrent(k) {
        return Err(Error::NotRecurrent(k));
    }
    Ok(assemble_system(tableau, topology, params, k))
}

/// `P = (Ω − Θ)⁻¹·Φ` by LU factorization.
pub fn solve_p_exact(system: &LayerSystem) -> Result<Matrix> {
    Ok(system.factor()?.solve_matrix(&system.phi))
}

/// `P ≈ (Ω⁻¹ + Ω⁻¹ΘΩ⁻¹)·Φ`, no factorization.
pub fn solve_p_taylor(system: &LayerSystem) -> Result<Matrix> {
    system.check_diagonal()?;
    let n = system.omega.len();
    // X = Ω⁻¹Φ, then P = X + Ω⁻¹ΘX.
    let x = Matrix::from_fn(n, system.phi.cols(), |l, i| system.phi[(l, i)] / system.omega[l]);
    let theta_x = system.theta.matmul(&x);
    Ok(Matrix::from_fn(n, x.cols(), |l, i| x[(l, i)] + theta_x[(l, i)] / system.omega[l]))
}

/// Closed form for a feedforward layer:
/// `P_li = (w_li ∂e_li/∂o_i / ν_{k−1}) / (1 − Σ_j w_lj ∂e_lj/∂o_l / ν_k)`.
pub fn feedforward_p(tableau: &SpsapTableau, topology: &Topology, params: &NeuronParams, k: usize) -> Result<Matrix> {
    let lt = tableau.layer(k);
    let w = topology.ff(k);
    let inv_nu = 1.0 / params.threshold(k);
    let inv_nu_pre = pre_scale(params, k);
    let mut p = Matrix::zeros(w.rows(), w.cols());
    for l in 0..w.rows() {
        let denom = 1.0 - inv_nu * w.row(l).iter().zip(lt.ff.de_dpost.row(l)).map(|(w, d)| w * d).sum::<f64>();
        if !(denom.abs() > SINGULAR_TOLERANCE) {
            return Err(Error::Singular {
                layer: k,
                detail: format!("denominator {denom:e} at neuron {l}"),
            });
        }
        for i in 0..w.cols() {
            p[(l, i)] = w[(l, i)] * inv_nu_pre * lt.ff.de_dpre[(l, i)] / denom;
        }
    }
    Ok(p)
}

/// `δ = Pᵀ·δ_next`
pub fn propagate_delta(p: &Matrix, delta_next: &[f64]) -> Vec<f64> {
    p.tr_mul_vec(delta_next)
}

/// `s = (Ω − Θ)⁻ᵀ·δ`, the per-neuron factor of every incoming weight's
/// gradient.
pub fn error_signal(system: &LayerSystem, delta: &[f64], solver: Solver) -> Result<Vec<f64>> {
    let is_diagonal = system.theta.as_slice().iter().all(|&t| t == 0.0);
    if is_diagonal || solver == Solver::Taylor {
        system.check_diagonal()?;
        let x: Vec<f64> = delta.iter().zip(&system.omega).map(|(d, w)| d / w).collect();
        if is_diagonal {
            return Ok(x);
        }
        // Ω⁻¹δ + Ω⁻¹ΘᵀΩ⁻¹δ
        let theta_t_x = system.theta.tr_mul_vec(&x);
        return Ok(x.iter().zip(&theta_t_x).zip(&system.omega).map(|((x, t), w)| x + t / w).collect());
    }
    Ok(system.factor()?.solve_transpose_vec(delta))
}

/// `∂E/∂w_ij = s_i·e_ij` on every existing synapse, with `s` from
/// [`error_signal`]. `deltas[k]` is the error vector of layer `k ≥ 1`.
pub fn weight_gradients(
    tableau: &SpsapTableau,
    topology: &Topology,
    params: &NeuronParams,
    deltas: &[Vec<f64>],
    solver: Solver,
) -> Result<GradientSet> {
    let mut grads = GradientSet::zeros(topology);
    for k in 1..topology.num_layers() {
        let system = assemble_system(tableau, topology, params, k);
        let s = error_signal(&system, &deltas[k], solver)?;
        fill_layer_gradients(&mut grads, tableau, topology, k, &s);
    }
    Ok(grads)
}

fn fill_layer_gradients(grads: &mut GradientSet, tableau: &SpsapTableau, topology: &Topology, k: usize, s: &[f64]) {
    let lt = tableau.layer(k);
    let g = &mut grads.ff[k - 1];
    for l in 0..g.rows() {
        for (gv, &e) in g.row_mut(l).iter_mut().zip(lt.ff.e.row(l)) {
            *gv = s[l] * e;
        }
    }
    if let (Some(rec), Some(block), Some(g)) = (topology.rec(k), &lt.rec, grads.rec[k].as_mut()) {
        let n = g.rows();
        for l in 0..n {
            for p in 0..n {
                g[(l, p)] = if rec.mask.contains(l, p) { s[l] * block.e[(l, p)] } else { 0.0 };
            }
        }
    }
}

/// Full backward pass for one simulated sample.
pub fn backward(
    episode: &Episode,
    tableau: &SpsapTableau,
    topology: &Topology,
    params: &NeuronParams,
    labels: &[f64],
    solver: Solver,
) -> Result<GradientSet> {
    backward_from_counts(&episode.output_counts_f64(), tableau, topology, params, labels, solver)
}

/// Backward pass from real-valued output counts.
pub fn backward_from_counts(
    output_counts: &[f64],
    tableau: &SpsapTableau,
    topology: &Topology,
    params: &NeuronParams,
    labels: &[f64],
    solver: Solver,
) -> Result<GradientSet> {
    let out = topology.output_layer();
    if output_counts.len() != topology.size(out) || labels.len() != topology.size(out) {
        return Err(Error::Shape {
            context: "output counts / labels",
            expected: topology.size(out),
            actual: if output_counts.len() != topology.size(out) { output_counts.len() } else { labels.len() },
        });
    }
    let mut grads = GradientSet::zeros(topology);
    let mut delta = output_delta(output_counts, labels, params.threshold(out));

    for k in (1..=out).rev() {
        let system = assemble_system(tableau, topology, params, k);
        let recurrent = topology.is_recurrent(k);

        let (s, p) = match (recurrent, solver) {
            (true, Solver::Exact) => {
                let lu = system.factor()?;
                let s = lu.solve_transpose_vec(&delta);
                let p = (k > 1).then(|| lu.solve_matrix(&system.phi));
                (s, p)
            }
            (true, Solver::Taylor) => {
                let s = error_signal(&system, &delta, solver)?;
                let p = if k > 1 { Some(solve_p_taylor(&system)?) } else { None };
                (s, p)
            }
            (false, _) => {
                let s = error_signal(&system, &delta, solver)?;
                let p = if k > 1 { Some(feedforward_p(tableau, topology, params, k)?) } else { None };
                (s, p)
            }
        };

        fill_layer_gradients(&mut grads, tableau, topology, k, &s);
        if let Some(p) = p {
            delta = propagate_delta(&p, &delta);
        }
    }

    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients"));
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spsp::{LayerTableau, SpsapBlock};
    use crate::topology::{LayerSpec, RecurrentWeights};

    fn scalar_system(omega: f64, theta: f64, phi: f64) -> LayerSystem {
        // N = 1 cannot hold an off-diagonal Θ, so embed the scalar case as
        // Θ acting through a 1x1 operator by hand.
        LayerSystem {
            layer: 1,
            omega: vec![omega],
            theta: Matrix::from_rows(&[[theta]]),
            phi: Matrix::from_rows(&[[phi]]),
        }
    }

    #[test]
    fn output_delta_cases() {
        assert_eq!(output_delta(&[3.0, 4.0], &[3.0, 4.0], 10.0), vec![0.0, 0.0]);
        assert_eq!(output_delta(&[5.0], &[35.0], 10.0), vec![-3.0]);
        assert_eq!(output_delta(&[8.0], &[38.0], 10.0), output_delta(&[5.0], &[35.0], 10.0));
    }

    #[test]
    fn scalar_exact_and_taylor() {
        let sys = scalar_system(2.0, 0.5, 3.0);
        let p = solve_p_exact(&sys).unwrap();
        assert!((p[(0, 0)] - 2.0).abs() < 1e-15);
        let t = solve_p_taylor(&sys).unwrap();
        assert!((t[(0, 0)] - 1.875).abs() < 1e-15);
    }

    #[test]
    fn zero_theta_is_diagonal_scaling() {
        let sys = LayerSystem {
            layer: 2,
            omega: vec![2.0, 0.5],
            theta: Matrix::zeros(2, 2),
            phi: Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]),
        };
        let exact = solve_p_exact(&sys).unwrap();
        let taylor = solve_p_taylor(&sys).unwrap();
        let expected = Matrix::from_rows(&[[0.5, 1.0, 1.5], [8.0, 10.0, 12.0]]);
        assert_eq!(exact, expected);
        assert_eq!(taylor, expected);
    }

    #[test]
    fn singular_operator_names_the_layer() {
        let sys = LayerSystem {
            layer: 3,
            omega: vec![1.0, 1.0],
            theta: Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]),
            phi: Matrix::identity(2),
        };
        assert!(matches!(solve_p_exact(&sys), Err(Error::Singular { layer: 3, .. })));
        let zero_diag = LayerSystem { omega: vec![0.0, 1.0], ..sys };
        assert!(matches!(solve_p_taylor(&zero_diag), Err(Error::Singular { layer: 3, .. })));
    }

    #[test]
    fn propagate_delta_cases() {
        let p = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(propagate_delta(&p, &[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(propagate_delta(&Matrix::identity(2), &[0.3, -1.0]), vec![0.3, -1.0]);
        assert_eq!(propagate_delta(&p, &[1.0, -1.0]), vec![-2.0, -2.0]);
    }

    /// input(1) → hidden(1) → output(1), with hand-set tableau entries.
    fn chain(w_hidden: f64, de_pre: f64, de_post: f64) -> (Topology, SpsapTableau, NeuronParams) {
        let mut t = Topology::new(vec![LayerSpec::input(1), LayerSpec::feedforward(1), LayerSpec::feedforward(1)])
            .unwrap();
        t.ff_mut(1)[(0, 0)] = 0.7;
        t.ff_mut(2)[(0, 0)] = w_hidden;
        let block = |e: f64| SpsapBlock {
            e: Matrix::from_rows(&[[e]]),
            de_dpre: Matrix::from_rows(&[[de_pre]]),
            de_dpost: Matrix::from_rows(&[[de_post]]),
        };
        let tab = SpsapTableau::from_layers(
            &t,
            vec![LayerTableau { ff: block(1.5), rec: None }, LayerTableau { ff: block(0.8), rec: None }],
        )
        .unwrap();
        (t, tab, NeuronParams::for_layers(3))
    }

    #[test]
    fn feedforward_scalar_case() {
        let (t, tab, p) = chain(2.0, 0.5, 0.5);
        let got = feedforward_p(&tab, &t, &p, 2).unwrap();
        // (2·0.5/10) / (1 − 2·0.5/10)
        assert!((got[(0, 0)] - 0.1 / 0.9).abs() < 1e-15);
        assert!((got[(0, 0)] - 0.1111).abs() < 1e-4);
    }

    #[test]
    fn feedforward_without_post_dependence_is_plain_chain_rule() {
        let (t, tab, p) = chain(2.0, 0.5, 0.0);
        let got = feedforward_p(&tab, &t, &p, 2).unwrap();
        assert_eq!(got[(0, 0)], 2.0 * 0.5 / 10.0);
        let delta = vec![vec![], vec![0.0], vec![-3.0]];
        let g = weight_gradients(&tab, &t, &p, &delta, Solver::Exact).unwrap();
        assert_eq!(g.ff[1][(0, 0)], -3.0 * 0.8);
    }

    #[test]
    fn feedforward_singular_denominator() {
        // 1 − 10·1/10 = 0
        let (t, tab, p) = chain(10.0, 0.5, 1.0);
        assert!(matches!(feedforward_p(&tab, &t, &p, 2), Err(Error::Singular { layer: 2, .. })));
    }

    #[test]
    fn zero_delta_gives_zero_gradients() {
        let (t, tab, p) = chain(2.0, 0.5, 0.5);
        let g = backward_from_counts(&[4.0], &tab, &t, &p, &[4.0], Solver::Exact).unwrap();
        assert!(g.matrices().all(|m| m.max_abs() == 0.0));
    }

    #[test]
    fn assemble_rejects_feedforward_layer() {
        let (t, tab, p) = chain(2.0, 0.5, 0.5);
        assert_eq!(assemble_recurrent_system(&tab, &t, &p, 1), Err(Error::NotRecurrent(1)));
    }

    #[test]
    fn all_zero_weights_give_identity_omega() {
        let t = Topology::new(vec![LayerSpec::input(2), LayerSpec::feedforward(2), LayerSpec::recurrent(3, 1.0)])
            .unwrap();
        let ones = |r, c| SpsapBlock {
            e: Matrix::from_fn(r, c, |_, _| 1.0),
            de_dpre: Matrix::from_fn(r, c, |_, _| 1.0),
            de_dpost: Matrix::from_fn(r, c, |_, _| 1.0),
        };
        let tab = SpsapTableau::from_layers(
            &t,
            vec![LayerTableau { ff: ones(2, 2), rec: None }, LayerTableau { ff: ones(3, 2), rec: Some(ones(3, 3)) }],
        )
        .unwrap();
        let sys = assemble_recurrent_system(&tab, &t, &NeuronParams::for_layers(3), 2).unwrap();
        assert_eq!(sys.omega, vec![1.0; 3]);
        assert_eq!(sys.theta.max_abs(), 0.0);
        assert_eq!(sys.phi.max_abs(), 0.0);
    }

    #[test]
    fn recurrent_layer_with_zero_weights_matches_feedforward_closed_form() {
        let mut t = Topology::new(vec![LayerSpec::input(2), LayerSpec::feedforward(2), LayerSpec::recurrent(2, 1.0)])
            .unwrap();
        *t.ff_mut(2) = Matrix::from_rows(&[[0.4, -0.9], [1.2, 0.3]]);
        t.recurrent[2] = Some(RecurrentWeights::zeros(crate::topology::SynapseMask::off_diagonal(2)));
        let block = |r, c, s: f64| SpsapBlock {
            e: Matrix::from_fn(r, c, |i, j| s * (1.0 + i as f64 + 0.5 * j as f64)),
            de_dpre: Matrix::from_fn(r, c, |i, j| s * (0.3 + 0.1 * i as f64 + 0.2 * j as f64)),
            de_dpost: Matrix::from_fn(r, c, |i, j| s * (0.2 + 0.05 * i as f64 + 0.1 * j as f64)),
        };
        let tab = SpsapTableau::from_layers(
            &t,
            vec![
                LayerTableau { ff: block(2, 2, 1.0), rec: None },
                LayerTableau { ff: block(2, 2, 1.0), rec: Some(block(2, 2, 0.7)) },
            ],
        )
        .unwrap();
        let p = NeuronParams::for_layers(3);
        let sys = assemble_recurrent_system(&tab, &t, &p, 2).unwrap();
        let exact = solve_p_exact(&sys).unwrap();
        let closed = feedforward_p(&tab, &t, &p, 2).unwrap();
        assert!(exact.max_abs_diff(&closed) <= 1e-12);
    }
}
