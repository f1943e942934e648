//! Slow, independent reference implementations.
//!
//! Nothing here shares code with the production path beyond the data types:
//! S-PSPs are summed pair by pair, sensitivities come from one stacked dense
//! system per layer, and weight gradients are computed in forward mode, one
//! weight at a time. The surrogate network replaces the spiking forward pass
//! with a smooth fixed point whose S-PSP partials are known exactly, so its
//! loss can be finite-differenced.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backprop::{backward_from_counts, GradientSet, LayerSystem, Solver};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::NeuronParams;
use crate::spike::SpikeTrain;
use crate::spsp::{LayerTableau, SpsapBlock, SpsapTableau};
use crate::topology::{LayerSpec, RecurrentWeights, SynapseMask, Topology};

/// Kernel written out from its definition.
fn kernel(dt_ms: f64, params: &NeuronParams) -> f64 {
    if dt_ms < 0.0 {
        return 0.0;
    }
    let c = 1.0 / (1.0 - params.tau_s / params.tau_m);
    c * (libm::exp(-dt_ms / params.tau_m) - libm::exp(-dt_ms / params.tau_s))
}

/// S-PSP as a double loop over every (post, pre) spike pair. A pre-synaptic
/// spike counts toward post spike `f` if it arrives no later than `f` and no
/// earlier than the end of the refractory period after spike `f − 1`.
pub fn brute_spsp(pre: &SpikeTrain, post: &SpikeTrain, params: &NeuronParams) -> f64 {
    let delay = params.synaptic_delay;
    let dead = params.refractory.max(params.sim_step);
    let post_ms: Vec<f64> = post.times_ms(params.sim_step).collect();
    let mut e = 0.0;
    for (f, &t_f) in post_ms.iter().enumerate() {
        let opens = if f == 0 { f64::NEG_INFINITY } else { post_ms[f - 1] + dead };
        for tau in pre.times_ms(params.sim_step) {
            let arrival = tau + delay;
            if arrival <= t_f + 1e-9 && arrival >= opens - 1e-9 {
                e += kernel(t_f - arrival, params);
            }
        }
    }
    e
}

/// Output spike steps of one neuron driven by weighted input trains, from
/// the kernel sum since the last reset rather than the two-trace recursion.
pub fn brute_single_neuron(
    inputs: &[SpikeTrain],
    weights: &[f64],
    params: &NeuronParams,
    threshold: f64,
    steps: u32,
) -> SpikeTrain {
    let delay = params.delay_steps();
    let refractory = params.refractory_steps();
    let mut fired = Vec::new();
    let mut integrating_from = 0u32;
    for t in 0..steps {
        if t < integrating_from {
            continue;
        }
        let mut u = 0.0;
        for (train, &w) in inputs.iter().zip(weights) {
            for &s in train.steps() {
                let arrival = s + delay;
                if arrival >= integrating_from && arrival <= t {
                    u += w * kernel((t - arrival) as f64 * params.sim_step, params);
                }
            }
        }
        if u >= threshold {
            fired.push(t);
            integrating_from = t + refractory.max(1);
        }
    }
    SpikeTrain::from_steps(fired).expect("steps are increasing")
}

/// Textbook Gaussian elimination with partial pivoting on an augmented
/// copy. Returns `None` when a pivot vanishes.
pub fn gauss_solve(a: &Matrix, b: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let m = b.cols();
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a.row(i).to_vec();
            row.extend_from_slice(b.row(i));
            row
        })
        .collect();
    let scale = a.max_abs().max(1.0);
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))?;
        if aug[piv][col].abs() <= 1e-14 * scale {
            return None;
        }
        aug.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = aug[r][col] / aug[col][col];
                if f != 0.0 {
                    for c in col..n + m {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
    }
    Some(Matrix::from_fn(n, m, |i, j| aug[i][n + j] / aug[i][i]))
}

/// `A⁻¹` by Gauss–Jordan.
pub fn inverse(a: &Matrix) -> Option<Matrix> {
    gauss_solve(a, &Matrix::identity(a.rows()))
}

/// `‖A‖∞·‖A⁻¹‖∞`, infinite for singular matrices.
pub fn condition_inf(a: &Matrix) -> f64 {
    inverse(a).map_or(f64::INFINITY, |inv| a.norm_inf() * inv.norm_inf())
}

fn inv_nu_pre(params: &NeuronParams, k: usize) -> f64 {
    if k == 1 {
        1.0
    } else {
        1.0 / params.threshold(k - 1)
    }
}

/// Coefficient of `∂a_l/∂a_l` on the right-hand side of the differentiated
/// T-PSP equation of layer `k`, summed term by term.
fn self_feedback(tableau: &SpsapTableau, topology: &Topology, params: &NeuronParams, k: usize, l: usize) -> f64 {
    let lt = tableau.layer(k);
    let nu = params.threshold(k);
    let mut sum = 0.0;
    for j in 0..topology.size(k - 1) {
        sum += topology.ff(k)[(l, j)] * lt.ff.de_dpost[(l, j)] / nu;
    }
    if let (Some(rec), Some(block)) = (topology.rec(k), lt.rec.as_ref()) {
        for p in 0..topology.size(k) {
            if rec.mask.contains(l, p) {
                sum += rec.weights[(l, p)] * block.de_dpost[(l, p)] / nu;
            }
        }
    }
    sum
}

/// Coefficient of `∂a_p/∂·` in neuron `l`'s equation through the recurrent
/// synapse `p → l`.
fn lateral(tableau: &SpsapTableau, topology: &Topology, params: &NeuronParams, k: usize, l: usize, p: usize) -> f64 {
    match (topology.rec(k), tableau.layer(k).rec.as_ref()) {
        (Some(rec), Some(block)) if l != p && rec.mask.contains(l, p) => {
            rec.weights[(l, p)] * block.de_dpre[(l, p)] / params.threshold(k)
        }
        _ => 0.0,
    }
}

/// Every `P^k = ∂a^k/∂a^{k−1}` for `k ≥ 2`, each from a single dense system
/// in the `N_k·N_{k−1}` unknowns `P_li`. Index `k − 2` holds layer `k`.
pub fn naive_sensitivities(tableau: &SpsapTableau, topology: &Topology, params: &NeuronParams) -> Result<Vec<Matrix>> {
    let mut out = Vec::new();
    for k in 2..topology.num_layers() {
        let (n, m) = (topology.size(k), topology.size(k - 1));
        let idx = |l: usize, i: usize| l * m + i;
        let mut a = Matrix::zeros(n * m, n * m);
        let mut b = Matrix::zeros(n * m, 1);
        for l in 0..n {
            let diag = self_feedback(tableau, topology, params, k, l);
            for i in 0..m {
                let row = idx(l, i);
                a[(row, row)] += 1.0 - diag;
                for p in 0..n {
                    let c = lateral(tableau, topology, params, k, l, p);
                    if c != 0.0 {
                        a[(row, idx(p, i))] -= c;
                    }
                }
                b[(row, 0)] = topology.ff(k)[(l, i)] * tableau.layer(k).ff.de_dpre[(l, i)] * inv_nu_pre(params, k);
            }
        }
        let x = gauss_solve(&a, &b).ok_or_else(|| Error::Singular {
            layer: k,
            detail: "stacked sensitivity system".into(),
        })?;
        out.push(Matrix::from_fn(n, m, |l, i| x[(idx(l, i), 0)]));
    }
    Ok(out)
}

/// Weight gradients in forward mode: for every weight `w` of layer `k`,
/// solve for `∂a^k/∂w` and contract with that layer's error. Errors travel
/// down through [`naive_sensitivities`].
pub fn naive_gradients(
    output_counts: &[f64],
    labels: &[f64],
    tableau: &SpsapTableau,
    topology: &Topology,
    params: &NeuronParams,
) -> Result<GradientSet> {
    let out = topology.output_layer();
    let sens = naive_sensitivities(tableau, topology, params)?;
    let mut deltas: Vec<Vec<f64>> = vec![Vec::new(); topology.num_layers()];
    deltas[out] = output_counts
        .iter()
        .zip(labels)
        .map(|(o, y)| (o - y) / params.threshold(out))
        .collect();
    for k in (2..=out).rev() {
        let p = &sens[k - 2];
        deltas[k - 1] = (0..p.cols())
            .map(|i| (0..p.rows()).map(|l| p[(l, i)] * deltas[k][l]).sum())
            .collect();
    }

    let mut grads = GradientSet::zeros(topology);
    for k in 1..=out {
        let n = topology.size(k);
        let mut op = Matrix::zeros(n, n);
        for l in 0..n {
            op[(l, l)] = 1.0 - self_feedback(tableau, topology, params, k, l);
            for p in 0..n {
                op[(l, p)] -= lateral(tableau, topology, params, k, l, p);
            }
        }
        let lt = tableau.layer(k);
        let dw = |i: usize, e: f64| -> Result<f64> {
            let mut rhs = Matrix::zeros(n, 1);
            rhs[(i, 0)] = e;
            let da = gauss_solve(&op, &rhs).ok_or_else(|| Error::Singular {
                layer: k,
                detail: "forward-mode system".into(),
            })?;
            Ok((0..n).map(|l| deltas[k][l] * da[(l, 0)]).sum())
        };
        for i in 0..n {
            for j in 0..topology.size(k - 1) {
                grads.ff[k - 1][(i, j)] = dw(i, lt.ff.e[(i, j)])?;
            }
        }
        if let (Some(rec), Some(block)) = (topology.rec(k), lt.rec.as_ref()) {
            for i in 0..n {
                for p in 0..n {
                    if rec.mask.contains(i, p) {
                        grads.rec[k].as_mut().unwrap()[(i, p)] = dw(i, block.e[(i, p)])?;
                    }
                }
            }
        }
    }
    Ok(grads)
}

/// Random `(Ω − Θ)·P = Φ` with `Ω ∈ [1, 2]`, a dense off-diagonal `Θ` scaled
/// so that `‖Ω⁻¹Θ‖∞ = q`, and `Φ ∈ [−1, 1]`. For `q < 1` the condition
/// number is below `4(1 + q)/(1 − q)`.
pub fn random_layer_system(rng: &mut impl Rng, n: usize, pre: usize, q: f64) -> LayerSystem {
    let omega: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..2.0)).collect();
    let mut theta = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { rng.gen_range(-1.0..1.0) });
    let norm = (0..n)
        .map(|i| theta.row(i).iter().map(|t| t.abs()).sum::<f64>() / omega[i])
        .fold(0.0, f64::max);
    if norm > 0.0 {
        theta = theta.scale(q / norm);
    }
    let phi = Matrix::from_fn(n, pre, |_, _| rng.gen_range(-1.0..1.0));
    LayerSystem { layer: 1, omega, theta, phi }
}

/// `‖Ω⁻¹Θ‖∞`
pub fn taylor_ratio(system: &LayerSystem) -> f64 {
    (0..system.omega.len())
        .map(|i| system.theta.row(i).iter().map(|t| t.abs()).sum::<f64>() / system.omega[i].abs())
        .fold(0.0, f64::max)
}

/// Neumann remainder bound on `‖P_taylor − P_exact‖∞`:
/// `q²/(1 − q)·‖Ω⁻¹Φ‖∞`.
pub fn taylor_bound(system: &LayerSystem) -> f64 {
    let q = taylor_ratio(system);
    let scaled = (0..system.omega.len())
        .map(|i| system.phi.row(i).iter().map(|p| p.abs()).sum::<f64>() / system.omega[i].abs())
        .fold(0.0, f64::max);
    q * q / (1.0 - q) * scaled
}

/// Random topology with the given layer specs, masks filled at their
/// density and weights drawn from `U[−scale, scale]`.
pub fn random_topology(rng: &mut impl Rng, layers: Vec<LayerSpec>, scale: f64) -> Result<Topology> {
    let mut t = Topology::new(layers)?.init_weights(rng.gen())?;
    for w in &mut t.ff_weights {
        for v in w.as_mut_slice() {
            *v *= scale;
        }
    }
    for rec in t.recurrent.iter_mut().flatten() {
        for v in rec.weights.as_mut_slice() {
            *v *= scale;
        }
    }
    Ok(t)
}

/// Tableau with random non-negative entries on existing synapses. `post`
/// scales `∂e/∂o_post`, which controls how far `Ω` sits from the identity.
pub fn random_tableau(rng: &mut impl Rng, topology: &Topology, post: f64) -> Result<SpsapTableau> {
    let mut block = |rows: usize, cols: usize, mask: Option<&SynapseMask>| {
        let mut b = SpsapBlock::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                if mask.is_some_and(|m| !m.contains(i, j)) {
                    continue;
                }
                b.e[(i, j)] = rng.gen_range(0.0..5.0);
                b.de_dpre[(i, j)] = rng.gen_range(0.0..1.0);
                b.de_dpost[(i, j)] = post * rng.gen_range(0.0..1.0);
            }
        }
        b
    };
    let layers = (1..topology.num_layers())
        .map(|k| LayerTableau {
            ff: block(topology.size(k), topology.size(k - 1), None),
            rec: topology.rec(k).map(|r| block(topology.size(k), topology.size(k), Some(&r.mask))),
        })
        .collect();
    SpsapTableau::from_layers(topology, layers)
}

/// Smooth stand-in for the spiking network. Each synapse has an S-PSP
/// `e = c·o_pre·(1 + b·o_post)` with a fixed coefficient `c ≥ 0` and a
/// shared gain `b`, and the activations solve
/// `a_l = Σ_j w_lj e_lj + Σ_p w_lp e_lp` with `o = a/ν` (inputs are rates).
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateNet {
    pub topology: Topology,
    pub params: NeuronParams,
    /// Shaped like `topology.ff_weights`.
    pub coef_ff: Vec<Matrix>,
    pub coef_rec: Vec<Option<Matrix>>,
    pub post_gain: f64,
}

pub const SURROGATE_DAMPING: f64 = 0.5;
pub const SURROGATE_TOLERANCE: f64 = 1e-12;
pub const SURROGATE_MAX_ITERATIONS: usize = 10_000;

/// Converged activations of every layer, index 0 holding the input rates.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateState {
    pub activations: Vec<Vec<f64>>,
    pub loss: f64,
}

impl SurrogateState {
    pub fn output_counts(&self, net: &SurrogateNet) -> Vec<f64> {
        let out = net.topology.output_layer();
        let nu = net.params.threshold(out);
        self.activations[out].iter().map(|a| a / nu).collect()
    }
}

impl SurrogateNet {
    /// Random net with `sizes[0]` inputs; layers listed in `recurrent` get
    /// a full off-diagonal recurrent block. A zero-size recurrent layer
    /// request is ignored.
    pub fn random(seed: u64, sizes: &[usize], recurrent: &[usize]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<LayerSpec> = sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| match k {
                0 => LayerSpec::input(n),
                _ if recurrent.contains(&k) && n > 1 => LayerSpec::recurrent(n, 1.0),
                _ => LayerSpec::feedforward(n),
            })
            .collect();
        let mut topology = Topology::new(layers)?;
        let thresholds: Vec<f64> = (1..sizes.len()).map(|_| rng.gen_range(4.0..8.0)).collect();
        let params = NeuronParams::default().with_thresholds(thresholds);

        let mut coef_ff = Vec::new();
        for k in 1..sizes.len() {
            let (n, m) = (sizes[k], sizes[k - 1]);
            *topology.ff_mut(k) = Matrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
            coef_ff.push(Matrix::from_fn(n, m, |_, _| rng.gen_range(0.2..1.0)));
        }
        let mut coef_rec = vec![None; sizes.len()];
        for k in 1..sizes.len() {
            if topology.is_recurrent(k) {
                let n = sizes[k];
                let mask = SynapseMask::off_diagonal(n);
                let mut rec = RecurrentWeights::zeros(mask.clone());
                let mut c = Matrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        if mask.contains(i, j) {
                            rec.weights[(i, j)] = rng.gen_range(-0.5..0.5);
                            c[(i, j)] = rng.gen_range(0.2..1.0);
                        }
                    }
                }
                topology.recurrent[k] = Some(rec);
                coef_rec[k] = Some(c);
            }
        }
        Ok(Self {
            topology,
            params,
            coef_ff,
            coef_rec,
            post_gain: rng.gen_range(0.02..0.08),
        })
    }

    /// `F(a)` for layer `k` given the converged rates of layer `k − 1`.
    fn layer_map(&self, k: usize, o_pre: &[f64], a: &[f64]) -> Vec<f64> {
        let nu = self.params.threshold(k);
        let b = self.post_gain;
        let w = self.topology.ff(k);
        let c = &self.coef_ff[k - 1];
        (0..a.len())
            .map(|l| {
                let post = 1.0 + b * a[l] / nu;
                let mut s: f64 = (0..o_pre.len()).map(|j| w[(l, j)] * c[(l, j)] * o_pre[j]).sum::<f64>() * post;
                if let (Some(rec), Some(cr)) = (self.topology.rec(k), &self.coef_rec[k]) {
                    for p in 0..a.len() {
                        if rec.mask.contains(l, p) {
                            s += rec.weights[(l, p)] * cr[(l, p)] * (a[p] / nu) * post;
                        }
                    }
                }
                s
            })
            .collect()
    }

    /// `I − ∂F/∂a` for layer `k`.
    fn layer_jacobian(&self, k: usize, o_pre: &[f64], a: &[f64]) -> Matrix {
        let tableau = self.layer_tableau(k, o_pre, a);
        let n = a.len();
        let nu = self.params.threshold(k);
        let w = self.topology.ff(k);
        Matrix::from_fn(n, n, |l, p| {
            if l == p {
                let mut s: f64 = (0..o_pre.len()).map(|j| w[(l, j)] * tableau.ff.de_dpost[(l, j)]).sum();
                if let (Some(rec), Some(block)) = (self.topology.rec(k), &tableau.rec) {
                    s += (0..n).map(|q| rec.weights[(l, q)] * block.de_dpost[(l, q)]).sum::<f64>();
                }
                1.0 - s / nu
            } else {
                match (self.topology.rec(k), &tableau.rec) {
                    (Some(rec), Some(block)) => -rec.weights[(l, p)] * block.de_dpre[(l, p)] / nu,
                    _ => 0.0,
                }
            }
        })
    }

    /// S-PSPs and their exact partials at the given activations.
    fn layer_tableau(&self, k: usize, o_pre: &[f64], a: &[f64]) -> LayerTableau {
        let nu = self.params.threshold(k);
        let b = self.post_gain;
        let fill = |c: &Matrix, pre: &dyn Fn(usize) -> f64| {
            let mut block = SpsapBlock::zeros(c.rows(), c.cols());
            for l in 0..c.rows() {
                let o_post = a[l] / nu;
                for j in 0..c.cols() {
                    let cj = c[(l, j)];
                    block.e[(l, j)] = cj * pre(j) * (1.0 + b * o_post);
                    block.de_dpre[(l, j)] = cj * (1.0 + b * o_post);
                    block.de_dpost[(l, j)] = cj * pre(j) * b;
                }
            }
            block
        };
        LayerTableau {
            ff: fill(&self.coef_ff[k - 1], &|j| o_pre[j]),
            rec: self.coef_rec[k].as_ref().map(|c| fill(c, &|p| a[p] / nu)),
        }
    }

    fn pre_rates(&self, k: usize, activations: &[Vec<f64>]) -> Vec<f64> {
        if k == 1 {
            activations[0].clone()
        } else {
            let nu = self.params.threshold(k - 1);
            activations[k - 1].iter().map(|a| a / nu).collect()
        }
    }

    /// Exact tableau at a converged state.
    pub fn tableau(&self, state: &SurrogateState) -> Result<SpsapTableau> {
        let layers = (1..self.topology.num_layers())
            .map(|k| self.layer_tableau(k, &self.pre_rates(k, &state.activations), &state.activations[k]))
            .collect();
        SpsapTableau::from_layers(&self.topology, layers)
    }

    /// Largest `|a − F(a)|` over all layers.
    pub fn residual(&self, state: &SurrogateState) -> f64 {
        (1..self.topology.num_layers())
            .map(|k| {
                let a = &state.activations[k];
                let f = self.layer_map(k, &self.pre_rates(k, &state.activations), a);
                a.iter().zip(&f).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

/// Damped fixed-point iteration layer by layer, followed by Newton steps to
/// bring the residual to rounding level.
pub fn surrogate_forward(net: &SurrogateNet, input_rates: &[f64], labels: &[f64]) -> Result<SurrogateState> {
    let mut activations = vec![input_rates.to_vec()];
    for k in 1..net.topology.num_layers() {
        let o_pre = net.pre_rates(k, &activations);
        let mut a = vec![0.0; net.topology.size(k)];
        let mut converged = false;
        let mut change = f64::INFINITY;
        for _ in 0..SURROGATE_MAX_ITERATIONS {
            let f = net.layer_map(k, &o_pre, &a);
            change = 0.0;
            for (x, y) in a.iter_mut().zip(&f) {
                let next = (1.0 - SURROGATE_DAMPING) * *x + SURROGATE_DAMPING * y;
                change = f64::max(change, (next - *x).abs() / x.abs().max(1.0));
                *x = next;
            }
            if !change.is_finite() {
                break;
            }
            if change <= SURROGATE_TOLERANCE {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence {
                iterations: SURROGATE_MAX_ITERATIONS,
                residual: change,
            });
        }
        for _ in 0..3 {
            let f = net.layer_map(k, &o_pre, &a);
            let r = Matrix::from_fn(a.len(), 1, |l, _| f[l] - a[l]);
            let Some(step) = gauss_solve(&net.layer_jacobian(k, &o_pre, &a), &r) else {
                break;
            };
            for (l, x) in a.iter_mut().enumerate() {
                *x += step[(l, 0)];
            }
        }
        activations.push(a);
    }
    let mut state = SurrogateState { activations, loss: 0.0 };
    let o = state.output_counts(net);
    if labels.len() != o.len() {
        return Err(Error::Shape {
            context: "surrogate labels",
            expected: o.len(),
            actual: labels.len(),
        });
    }
    state.loss = 0.5 * o.iter().zip(labels).map(|(o, y)| (o - y) * (o - y)).sum::<f64>();
    Ok(state)
}

/// Central differences `(E(w + h) − E(w − h))/2h` on every existing weight.
pub fn finite_diff_gradient(net: &SurrogateNet, input_rates: &[f64], labels: &[f64], h: f64) -> Result<GradientSet> {
    let mut grads = GradientSet::zeros(&net.topology);
    let mut probe = net.clone();
    let central = |probe: &mut SurrogateNet, get: &dyn Fn(&mut SurrogateNet) -> &mut f64| -> Result<f64> {
        let w0 = *get(probe);
        *get(probe) = w0 + h;
        let plus = surrogate_forward(probe, input_rates, labels)?;
        *get(probe) = w0 - h;
        let minus = surrogate_forward(probe, input_rates, labels)?;
        *get(probe) = w0;
        // Difference the outputs before squaring to keep rounding low.
        let (op, om) = (plus.output_counts(probe), minus.output_counts(probe));
        let de: f64 = op
            .iter()
            .zip(&om)
            .zip(labels)
            .map(|((p, m), y)| 0.5 * (p - m) * (p + m - 2.0 * y))
            .sum();
        Ok(de / (2.0 * h))
    };
    for k in 1..net.topology.num_layers() {
        let (n, m) = (net.topology.size(k), net.topology.size(k - 1));
        for i in 0..n {
            for j in 0..m {
                grads.ff[k - 1][(i, j)] = central(&mut probe, &|p| &mut p.topology.ff_mut(k)[(i, j)])?;
            }
        }
        if let Some(rec) = net.topology.rec(k) {
            for i in 0..n {
                for j in 0..n {
                    if rec.mask.contains(i, j) {
                        grads.rec[k].as_mut().unwrap()[(i, j)] =
                            central(&mut probe, &|p| &mut p.topology.rec_mut(k).unwrap().weights[(i, j)])?;
                    }
                }
            }
        }
    }
    Ok(grads)
}

/// Surrogate instance with inputs and labels.
#[derive(Debug, Clone)]
pub struct SurrogateCase {
    pub net: SurrogateNet,
    pub input_rates: Vec<f64>,
    pub labels: Vec<f64>,
}

/// Random case with up to 3 layers of at most 5 neurons, at least one of
/// them recurrent. Coefficients are redrawn until the fixed point
/// converges.
pub fn random_surrogate_case(seed: u64) -> Result<SurrogateCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..100u64 {
        let depth = rng.gen_range(2..=3);
        let sizes: Vec<usize> = (0..depth).map(|k| rng.gen_range(if k == 0 { 1 } else { 2 }..=5)).collect();
        let rec_layer = rng.gen_range(1..depth);
        let mut recurrent = vec![rec_layer];
        if depth == 3 && rng.gen_bool(0.5) {
            recurrent.push(3 - rec_layer);
        }
        let net = SurrogateNet::random(seed.wrapping_mul(1000).wrapping_add(attempt), &sizes, &recurrent)?;
        let input_rates: Vec<f64> = (0..sizes[0]).map(|_| rng.gen_range(1.0..10.0)).collect();
        let labels: Vec<f64> = (0..sizes[depth - 1]).map(|_| rng.gen_range(0.0..5.0)).collect();
        if surrogate_forward(&net, &input_rates, &labels).is_ok() {
            return Ok(SurrogateCase { net, input_rates, labels });
        }
    }
    Err(Error::NoConvergence {
        iterations: SURROGATE_MAX_ITERATIONS,
        residual: f64::NAN,
    })
}

/// Elementwise relative error `|a − b|/max(|a|, |b|)` over entries where
/// the reference exceeds `floor` in magnitude; returns the worst entry.
pub fn max_relative_error(reference: &GradientSet, other: &GradientSet, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (r, o) in reference.matrices().zip(other.matrices()) {
        for (&a, &b) in r.as_slice().iter().zip(o.as_slice()) {
            if a.abs() > floor {
                worst = worst.max((a - b).abs() / a.abs().max(b.abs()));
            }
        }
    }
    worst
}

/// Tolerances of [`run_gradcheck`].
pub const GRADCHECK_RESIDUAL: f64 = 1e-9;
pub const GRADCHECK_FD_RTOL: f64 = 1e-4;
pub const GRADCHECK_NAIVE_TOL: f64 = 1e-10;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub systems: usize,
    pub surrogates: usize,
    /// Worst `‖(Ω − Θ)P − Φ‖∞ / (1 + ‖Φ‖∞)`.
    pub max_residual: f64,
    /// Worst Taylor deviation as a fraction of its bound, over instances
    /// with `‖Ω⁻¹Θ‖∞ ≤ 0.2`.
    pub max_taylor_ratio: f64,
    pub max_fd_rel: f64,
    pub max_naive_diff: f64,
    pub failures: Vec<alloc::string::String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub systems: usize,
    pub max_size: usize,
    pub surrogates: usize,
    /// Perturbs the production gradients by one part in a thousand, as a
    /// negative control.
    pub inject_bug: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            systems: 100,
            max_size: 50,
            surrogates: 25,
            inject_bug: false,
        }
    }
}

/// Random linear systems against their residual and the Taylor bound, then
/// surrogate nets against finite differences and the forward-mode oracle.
pub fn run_gradcheck(options: &GradcheckOptions) -> GradcheckReport {
    use crate::backprop::{solve_p_exact, solve_p_taylor};

    let mut report = GradcheckReport {
        seed: options.seed,
        systems: options.systems,
        surrogates: options.surrogates,
        max_residual: 0.0,
        max_taylor_ratio: 0.0,
        max_fd_rel: 0.0,
        max_naive_diff: 0.0,
        failures: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    for i in 0..options.systems {
        let n = rng.gen_range(1..=options.max_size.max(1));
        let pre = rng.gen_range(1..=options.max_size.max(1));
        let q = if i % 2 == 0 { rng.gen_range(0.0..0.2) } else { rng.gen_range(0.0..0.9) };
        let sys = random_layer_system(&mut rng, n, pre, q);
        match solve_p_exact(&sys) {
            Ok(p) => {
                let r = sys.residual(&p) / (1.0 + sys.phi.norm_inf());
                report.max_residual = report.max_residual.max(r);
                if r > GRADCHECK_RESIDUAL {
                    report.failures.push(format!("system {i}: residual {r:e}"));
                }
                if taylor_ratio(&sys) <= 0.2 {
                    let t = solve_p_taylor(&sys).expect("diagonal is at least 1");
                    let dev = t.max_abs_diff(&p);
                    let bound = taylor_bound(&sys);
                    let ratio = if bound > 0.0 { dev / bound } else if dev == 0.0 { 0.0 } else { f64::INFINITY };
                    report.max_taylor_ratio = report.max_taylor_ratio.max(ratio);
                    // Rounding can exceed a vanishing bound by a few ulps.
                    if dev > bound * (1.0 + 1e-9) + 1e-14 {
                        report.failures.push(format!("system {i}: Taylor deviation {dev:e} > bound {bound:e}"));
                    }
                }
            }
            Err(e) => report.failures.push(format!("system {i}: {e}")),
        }
    }

    for i in 0..options.surrogates {
        let case_seed = options.seed.wrapping_add(i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        if let Err(e) = check_surrogate(case_seed, options.inject_bug, &mut report) {
            report.failures.push(format!("surrogate {i}: {e}"));
        }
    }
    report
}

fn check_surrogate(seed: u64, inject_bug: bool, report: &mut GradcheckReport) -> Result<()> {
    let case = random_surrogate_case(seed)?;
    let net = &case.net;
    let state = surrogate_forward(net, &case.input_rates, &case.labels)?;
    let tableau = net.tableau(&state)?;
    let counts = state.output_counts(net);
    let mut grads = backward_from_counts(&counts, &tableau, &net.topology, &net.params, &case.labels, Solver::Exact)?;
    if inject_bug {
        grads = grads.scale(1.0 + 1e-3);
    }
    let fd = finite_diff_gradient(net, &case.input_rates, &case.labels, GRADCHECK_STEP)?;
    let naive = naive_gradients(&counts, &case.labels, &tableau, &net.topology, &net.params)?;

    let rel = max_relative_error(&grads, &fd, GRADCHECK_FLOOR);
    let scale = grads.matrices().map(Matrix::max_abs).fold(1.0, f64::max);
    let naive_diff = grads.max_abs_diff(&naive) / scale;
    report.max_fd_rel = report.max_fd_rel.max(rel);
    report.max_naive_diff = report.max_naive_diff.max(naive_diff);
    if rel > GRADCHECK_FD_RTOL {
        report.failures.push(format!("seed {seed}: finite-difference relative error {rel:e}"));
    }
    if naive_diff > GRADCHECK_NAIVE_TOL {
        report.failures.push(format!("seed {seed}: forward-mode difference {naive_diff:e}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backprop::{assemble_system, feedforward_p, solve_p_exact};

    #[test]
    fn brute_spsp_single_pair() {
        let p = NeuronParams::default();
        let pre = SpikeTrain::from_steps(vec![0]).unwrap();
        let post = SpikeTrain::from_steps(vec![6]).unwrap();
        assert!((brute_spsp(&pre, &post, &p) - 0.4452427).abs() < 1e-7);
        assert_eq!(brute_spsp(&SpikeTrain::new(), &post, &p), 0.0);
        assert_eq!(brute_spsp(&pre, &SpikeTrain::new(), &p), 0.0);
    }

    #[test]
    fn gauss_matches_hand_solution() {
        let a = Matrix::from_rows(&[[0.0, 2.0], [1.0, 1.0]]);
        let b = Matrix::from_rows(&[[4.0], [3.0]]);
        let x = gauss_solve(&a, &b).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15 && (x[(1, 0)] - 2.0).abs() < 1e-15);
        assert!(gauss_solve(&Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]), &b).is_none());
    }

    #[test]
    fn naive_scalar_net_matches_hand_algebra() {
        // 1-1-1 chain, ν = 10: P = w·∂e/∂o_pre/ν / (1 − w·∂e/∂o_post/ν)
        let mut t = Topology::new(vec![LayerSpec::input(1), LayerSpec::feedforward(1), LayerSpec::feedforward(1)]).unwrap();
        *t.ff_mut(1) = Matrix::from_rows(&[[1.0]]);
        *t.ff_mut(2) = Matrix::from_rows(&[[2.0]]);
        let params = NeuronParams::for_layers(3);
        let block = |e: f64| SpsapBlock {
            e: Matrix::from_rows(&[[e]]),
            de_dpre: Matrix::from_rows(&[[0.5]]),
            de_dpost: Matrix::from_rows(&[[0.5]]),
        };
        let tab = SpsapTableau::from_layers(
            &t,
            vec![LayerTableau { ff: block(1.0), rec: None }, LayerTableau { ff: block(1.0), rec: None }],
        )
        .unwrap();
        let p = naive_sensitivities(&tab, &t, &params).unwrap();
        assert!((p[0][(0, 0)] - 0.1 / 0.9).abs() < 1e-15);
    }

    #[test]
    fn naive_matches_production_on_random_nets() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sizes: Vec<usize> = (0..3).map(|_| rng.gen_range(1..=5)).collect();
            let layers = vec![
                LayerSpec::input(sizes[0]),
                if sizes[1] > 1 { LayerSpec::recurrent(sizes[1], 0.5) } else { LayerSpec::feedforward(sizes[1]) },
                LayerSpec::feedforward(sizes[2]),
            ];
            let t = random_topology(&mut rng, layers, 0.5).unwrap();
            let params = NeuronParams::for_layers(3);
            let tab = random_tableau(&mut rng, &t, 1.0).unwrap();
            let naive = naive_sensitivities(&tab, &t, &params).unwrap();
            let fast = feedforward_p(&tab, &t, &params, 2).unwrap();
            assert!(naive[0].max_abs_diff(&fast) < 1e-10, "seed {seed}");
            let exact = solve_p_exact(&assemble_system(&tab, &t, &params, 2)).unwrap();
            assert!(naive[0].max_abs_diff(&exact) < 1e-10, "seed {seed}");

            let counts: Vec<f64> = (0..sizes[2]).map(|_| rng.gen_range(0.0..40.0)).collect();
            let labels: Vec<f64> = (0..sizes[2]).map(|_| rng.gen_range(0.0..40.0)).collect();
            let g = backward_from_counts(&counts, &tab, &t, &params, &labels, Solver::Exact).unwrap();
            let n = naive_gradients(&counts, &labels, &tab, &t, &params).unwrap();
            assert!(g.max_abs_diff(&n) < 1e-10, "seed {seed}: {}", g.max_abs_diff(&n));
        }
    }

    #[test]
    fn random_system_has_requested_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sys = random_layer_system(&mut rng, 6, 3, 0.15);
        assert!((taylor_ratio(&sys) - 0.15).abs() < 1e-12);
        assert!(condition_inf(&sys.operator()) < 4.0 * 1.15 / 0.85 + 1e-9);
    }

    #[test]
    fn zero_weight_surrogate_is_silent() {
        let mut net = SurrogateNet::random(1, &[2, 3], &[1]).unwrap();
        *net.topology.ff_mut(1) = Matrix::zeros(3, 2);
        for w in net.topology.rec_mut(1).unwrap().weights.as_mut_slice() {
            *w = 0.0;
        }
        let s = surrogate_forward(&net, &[3.0, 4.0], &[1.0, 2.0, 2.0]).unwrap();
        assert!(s.activations[1].iter().all(|&a| a == 0.0));
        assert_eq!(s.loss, 4.5);
    }

    #[test]
    fn surrogate_fixed_point_residual_is_tiny() {
        for seed in 0..20 {
            let case = random_surrogate_case(seed).unwrap();
            let s = surrogate_forward(&case.net, &case.input_rates, &case.labels).unwrap();
            assert!(case.net.residual(&s) <= 1e-12, "seed {seed}: {}", case.net.residual(&s));
        }
    }

    #[test]
    fn finite_differences_vanish_at_the_optimum() {
        let case = random_surrogate_case(3).unwrap();
        let s = surrogate_forward(&case.net, &case.input_rates, &case.labels).unwrap();
        let labels = s.output_counts(&case.net);
        let g = finite_diff_gradient(&case.net, &case.input_rates, &labels, 1e-5).unwrap();
        assert!(g.matrices().all(|m| m.max_abs() < 10.0 * 1e-10));
    }

    #[test]
    fn gradcheck_passes_and_negative_control_fails() {
        let small = GradcheckOptions {
            seed: 5,
            systems: 10,
            max_size: 12,
            surrogates: 5,
            inject_bug: false,
        };
        let report = run_gradcheck(&small);
        assert!(report.passed(), "{:?}", report.failures);
        let bugged = run_gradcheck(&GradcheckOptions { inject_bug: true, ..small });
        assert!(!bugged.passed());
    }
}
