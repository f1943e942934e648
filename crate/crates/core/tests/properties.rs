use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spiketrain_core::backprop::{
    assemble_recurrent_system, assemble_system, backward_from_counts, feedforward_p, solve_p_exact, Solver,
};
use spiketrain_core::encode::{make_synthetic_rate_task, SyntheticTask};
use spiketrain_core::optimize::{train, TrainConfig};
use spiketrain_core::oracle::{brute_single_neuron, brute_spsp, random_tableau, random_topology};
use spiketrain_core::simulate::{psp_kernel, psp_kernel_peak, run_forward, run_forward_probe};
use spiketrain_core::spsp::{compute_spsp, compute_tableau};
use spiketrain_core::topology::{validate, RecurrentWeights};
use spiketrain_core::{LayerSpec, Matrix, NeuronParams, SpikeTrain, Topology};

fn train_strategy(max_step: u32, max_len: usize) -> impl Strategy<Value = SpikeTrain> {
    prop::collection::vec(0..max_step, 0..max_len).prop_map(SpikeTrain::from_unsorted)
}

fn single_layer(inputs: usize, outputs: usize, weights: Vec<f64>) -> Topology {
    let mut t = Topology::new(vec![LayerSpec::input(inputs), LayerSpec::feedforward(outputs)]).unwrap();
    *t.ff_mut(1) = Matrix::from_vec(outputs, inputs, weights);
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn spsp_matches_brute_force(pre in train_strategy(200, 40), post in train_strategy(200, 15), refr in 0u32..5) {
        let p = NeuronParams { refractory: refr as f64, ..NeuronParams::default() };
        let fast = compute_spsp(&pre, &post, &p);
        let slow = brute_spsp(&pre, &post, &p);
        prop_assert!((fast - slow).abs() <= 1e-12 * (1.0 + slow.abs()), "{fast} vs {slow}");
    }

    #[test]
    fn spsp_grows_with_added_pre_spikes(pre in train_strategy(150, 20), extra in 0u32..150, post in train_strategy(150, 10)) {
        let p = NeuronParams::default();
        let mut more = pre.steps().to_vec();
        more.push(extra);
        let more = SpikeTrain::from_unsorted(more);
        prop_assert!(compute_spsp(&more, &post, &p) >= compute_spsp(&pre, &post, &p) - 1e-15);
    }

    #[test]
    fn spsp_is_invariant_to_joint_time_scaling(pre in train_strategy(100, 15), post in train_strategy(100, 8)) {
        let p = NeuronParams::default();
        let doubled = NeuronParams { tau_m: 128.0, tau_s: 16.0, refractory: 4.0, synaptic_delay: 2.0, ..NeuronParams::default() };
        let stretch = |t: &SpikeTrain| SpikeTrain::from_steps(t.steps().iter().map(|s| 2 * s).collect()).unwrap();
        let a = compute_spsp(&pre, &post, &p);
        let b = compute_spsp(&stretch(&pre), &stretch(&post), &doubled);
        prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn subthreshold_potential_is_a_kernel_sum(
        inputs in prop::collection::vec(train_strategy(120, 12), 3),
        weights in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let p = NeuronParams::for_layers(2).with_thresholds(vec![1e9]);
        let t = single_layer(3, 1, weights.clone());
        let mut worst = 0.0f64;
        run_forward_probe(&t, &p, &inputs, 120.0, 0.0, |step, _, states| {
            let mut u = 0.0;
            for (train, w) in inputs.iter().zip(&weights) {
                for &s in train.steps() {
                    if s < step {
                        u += w * psp_kernel((step - s - 1) as f64, &p);
                    }
                }
            }
            worst = worst.max((states[0].potential() - u).abs());
        }).unwrap();
        prop_assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn trace_simulator_matches_kernel_simulator(
        inputs in prop::collection::vec(train_strategy(300, 60), 4),
        weights in prop::collection::vec(-2.0f64..6.0, 4),
        refr in 0u32..4,
    ) {
        let p = NeuronParams { refractory: refr as f64, ..NeuronParams::for_layers(2) };
        let t = single_layer(4, 1, weights.clone());
        let ep = run_forward(&t, &p, &inputs, 300.0).unwrap();
        let slow = brute_single_neuron(&inputs, &weights, &p, 10.0, 300);
        prop_assert_eq!(ep.trains[1][0].steps(), slow.steps());
    }

    #[test]
    fn output_before_a_step_ignores_later_input(
        inputs in prop::collection::vec(train_strategy(200, 40), 3),
        cut in 10u32..190,
        seed in any::<u64>(),
    ) {
        let t = Topology::new(vec![LayerSpec::input(3), LayerSpec::recurrent(4, 0.5), LayerSpec::feedforward(2)])
            .unwrap().init_weights(seed).unwrap();
        let t = scale_weights(t, 8.0);
        let p = NeuronParams::for_layers(3);
        let full = run_forward(&t, &p, &inputs, 200.0).unwrap();
        let truncated: Vec<SpikeTrain> = inputs.iter()
            .map(|tr| SpikeTrain::from_steps(tr.steps().iter().copied().filter(|&s| s < cut).collect()).unwrap())
            .collect();
        let part = run_forward(&t, &p, &truncated, 200.0).unwrap();
        for k in 1..3 {
            for (a, b) in full.trains[k].iter().zip(&part.trains[k]) {
                let early = |tr: &SpikeTrain| tr.steps().iter().copied().filter(|&s| s <= cut).collect::<Vec<_>>();
                prop_assert_eq!(early(a), early(b));
            }
        }
    }

    #[test]
    fn refractory_period_separates_spikes(
        inputs in prop::collection::vec(train_strategy(300, 150), 5),
        refr in 0u32..6,
        seed in any::<u64>(),
    ) {
        let t = scale_weights(
            Topology::new(vec![LayerSpec::input(5), LayerSpec::recurrent(6, 0.4)]).unwrap().init_weights(seed).unwrap(),
            20.0,
        );
        let p = NeuronParams { refractory: refr as f64, ..NeuronParams::for_layers(2) };
        let ep = run_forward(&t, &p, &inputs, 300.0).unwrap();
        for tr in &ep.trains[1] {
            if let Some(gap) = tr.min_interval() {
                prop_assert!(gap >= refr.max(1), "gap {gap} < {refr}");
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_output_error(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_topology(&mut rng, vec![LayerSpec::input(3), LayerSpec::recurrent(4, 0.5), LayerSpec::feedforward(3)], 0.5).unwrap();
        let p = NeuronParams::for_layers(3);
        let tab = random_tableau(&mut rng, &t, 1.0).unwrap();
        let labels = vec![5.0, 35.0, 5.0];
        let counts: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..40.0)).collect();
        let doubled: Vec<f64> = counts.iter().zip(&labels).map(|(o, y)| y + 2.0 * (o - y)).collect();
        let g1 = backward_from_counts(&counts, &tab, &t, &p, &labels, Solver::Exact).unwrap();
        let g2 = backward_from_counts(&doubled, &tab, &t, &p, &labels, Solver::Exact).unwrap();
        let scale = g1.matrices().map(Matrix::max_abs).fold(1.0, f64::max);
        prop_assert!(g2.max_abs_diff(&g1.scale(2.0)) <= 1e-12 * scale);
    }
}

fn scale_weights(mut t: Topology, s: f64) -> Topology {
    for w in &mut t.ff_weights {
        *w = w.scale(s);
    }
    for r in t.recurrent.iter_mut().flatten() {
        r.weights = r.weights.scale(s);
    }
    t
}

#[test]
fn single_strong_spike_fires_once() {
    let p = NeuronParams::for_layers(2);
    let w = 1.1 * 10.0 / psp_kernel_peak(&p);
    let t = single_layer(1, 1, vec![w]);
    let input = vec![SpikeTrain::from_steps(vec![0]).unwrap()];
    let ep = run_forward(&t, &p, &input, 200.0).unwrap();
    assert_eq!(ep.trains[1][0].count(), 1);
    assert_eq!(brute_single_neuron(&input, &[w], &p, 10.0, 200).count(), 1);
}

#[test]
fn zeroed_recurrence_degenerates_to_feedforward() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let ff = random_topology(&mut rng, vec![LayerSpec::input(4), LayerSpec::feedforward(5), LayerSpec::feedforward(3)], 1.0).unwrap();
        let mut rec = Topology::new(vec![LayerSpec::input(4), LayerSpec::recurrent(5, 0.5), LayerSpec::feedforward(3)]).unwrap();
        rec.ff_weights = ff.ff_weights.clone();
        rec.recurrent[1] = Some(RecurrentWeights::zeros(spiketrain_core::SynapseMask::off_diagonal(5)));
        let p = NeuronParams::for_layers(3).with_thresholds(vec![5.0, 5.0]);
        let tab_ff = random_tableau(&mut rng, &ff, 0.5).unwrap();
        let tab_rec = spiketrain_core::spsp::SpsapTableau::from_layers(
            &rec,
            (1..3).map(|k| {
                let mut lt = tab_ff.layer(k).clone();
                if k == 1 {
                    let mut b = spiketrain_core::spsp::SpsapBlock::zeros(5, 5);
                    b.e = Matrix::from_fn(5, 5, |i, j| if i == j { 0.0 } else { rng.gen_range(0.0..3.0) });
                    b.de_dpre = Matrix::from_fn(5, 5, |_, _| rng.gen_range(0.0..1.0));
                    b.de_dpost = Matrix::from_fn(5, 5, |_, _| rng.gen_range(0.0..1.0));
                    lt.rec = Some(b);
                }
                lt
            }).collect(),
        ).unwrap();
        let exact = solve_p_exact(&assemble_recurrent_system(&tab_rec, &rec, &p, 1).unwrap()).unwrap();
        let closed = feedforward_p(&tab_ff, &ff, &p, 1).unwrap();
        assert!(exact.max_abs_diff(&closed) <= 1e-12);
        let labels = [35.0, 5.0, 5.0];
        let counts = [3.0, 12.0, 40.0];
        let gf = backward_from_counts(&counts, &tab_ff, &ff, &p, &labels, Solver::Exact).unwrap();
        let gr = backward_from_counts(&counts, &tab_rec, &rec, &p, &labels, Solver::Exact).unwrap();
        for k in 0..2 {
            assert!(gf.ff[k].max_abs_diff(&gr.ff[k]) <= 1e-12);
        }
    }
}

#[test]
fn assembled_entries_follow_the_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let t = random_topology(&mut rng, vec![LayerSpec::input(3), LayerSpec::recurrent(3, 1.0), LayerSpec::feedforward(3)], 1.0).unwrap();
    let p = NeuronParams::for_layers(3).with_thresholds(vec![7.0, 12.0]);
    let tab = random_tableau(&mut rng, &t, 1.0).unwrap();
    for k in 1..3 {
        let sys = assemble_system(&tab, &t, &p, k);
        let lt = tab.layer(k);
        let nu = p.threshold(k);
        let nu_pre = if k == 1 { 1.0 } else { p.threshold(k - 1) };
        for l in 0..3 {
            let mut s = 0.0;
            for j in 0..3 {
                s += t.ff(k)[(l, j)] * lt.ff.de_dpost[(l, j)];
                assert!((sys.phi[(l, j)] - t.ff(k)[(l, j)] * lt.ff.de_dpre[(l, j)] / nu_pre).abs() < 1e-15);
            }
            if let Some(rec) = t.rec(k) {
                let b = lt.rec.as_ref().unwrap();
                for q in 0..3 {
                    s += rec.weights[(l, q)] * b.de_dpost[(l, q)];
                    let theta = if q == l { 0.0 } else { rec.weights[(l, q)] * b.de_dpre[(l, q)] / nu };
                    assert!((sys.theta[(l, q)] - theta).abs() < 1e-15);
                }
            }
            assert!((sys.omega[l] - (1.0 - s / nu)).abs() < 1e-14);
        }
    }
}

#[test]
fn silent_episode_and_zero_weights_give_zero_gradients() {
    let t = Topology::new(vec![LayerSpec::input(3), LayerSpec::recurrent(4, 0.5), LayerSpec::feedforward(2)]).unwrap();
    let p = NeuronParams::for_layers(3);
    let ep = run_forward(&t, &p, &vec![SpikeTrain::new(); 3], 50.0).unwrap();
    let tab = compute_tableau(&ep, &t, &p).unwrap();
    let g = backward_from_counts(&[0.0, 0.0], &tab, &t, &p, &[35.0, 5.0], Solver::Exact).unwrap();
    assert!(g.matrices().all(|m| m.max_abs() == 0.0));
}

#[test]
fn masks_survive_training() {
    let task = SyntheticTask { samples_per_class: 5, duration_ms: 200.0, ..SyntheticTask::default() };
    let data = make_synthetic_rate_task(&task, 2).unwrap();
    let t = Topology::new(vec![LayerSpec::input(30), LayerSpec::recurrent(12, 0.3), LayerSpec::feedforward(4)])
        .unwrap()
        .init_weights(2)
        .unwrap();
    let p = NeuronParams::for_layers(3);
    let cfg = TrainConfig { epochs: 3, learning_rate: 0.05, ..TrainConfig::default() };
    let (trained, _) = train(&data.train, None, &t, &p, &cfg, |_, _| {}).unwrap();
    assert!(validate(&trained, &p).is_empty());
    let before = t.rec(1).unwrap();
    let after = trained.rec(1).unwrap();
    assert_eq!(before.mask, after.mask);
    assert!(before.weights.max_abs_diff(&after.weights) > 0.0);
}

#[test]
fn single_sample_loss_settles() {
    let task = SyntheticTask { samples_per_class: 5, ..SyntheticTask::default() };
    let data = make_synthetic_rate_task(&task, 4).unwrap();
    let one = &data.train[..1];
    let t = Topology::new(vec![LayerSpec::input(30), LayerSpec::recurrent(20, 0.2), LayerSpec::feedforward(4)])
        .unwrap()
        .init_weights(4)
        .unwrap();
    let p = NeuronParams::for_layers(3);
    let cfg = TrainConfig { epochs: 50, learning_rate: 0.01, ..TrainConfig::default() };
    let (_, hist) = train(one, None, &t, &p, &cfg, |_, _| {}).unwrap();
    let tail: Vec<f64> = hist[40..].iter().map(|m| m.train_loss).collect();
    assert!(hist[49].train_loss < hist[0].train_loss, "{:?}", hist.iter().map(|m| m.train_loss).collect::<Vec<_>>());
    for w in tail.windows(2) {
        assert!(w[1] <= w[0] * 1.05 + 1.0, "{tail:?}");
    }
}

#[test]
fn training_is_reproducible() {
    let task = SyntheticTask { samples_per_class: 5, duration_ms: 200.0, ..SyntheticTask::default() };
    let data = make_synthetic_rate_task(&task, 6).unwrap();
    let t = Topology::new(vec![LayerSpec::input(30), LayerSpec::recurrent(10, 0.3), LayerSpec::feedforward(4)])
        .unwrap()
        .init_weights(6)
        .unwrap();
    let p = NeuronParams::for_layers(3);
    let cfg = TrainConfig { epochs: 3, seed: 6, ..TrainConfig::default() };
    let a = train(&data.train, Some(&data.test), &t, &p, &cfg, |_, _| {}).unwrap();
    let b = train(&data.train, Some(&data.test), &t, &p, &cfg, |_, _| {}).unwrap();
    assert_eq!(a, b);
}

#[test]
fn poisson_mean_count_matches_binomial() {
    let total: usize = (0..1000u64)
        .map(|seed| spiketrain_core::encode::poisson_encode(&[255], 400, 0.25, seed)[0].count())
        .sum();
    let mean = total as f64 / 1000.0;
    assert!((99.0..=101.0).contains(&mean), "mean {mean}");
}
