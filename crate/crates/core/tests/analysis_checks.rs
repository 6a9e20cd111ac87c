use ldn_core::analysis::{
    check_stability_bound, effective_operator, envelope_contraction_test, global_dependency_l, grad_check,
    grad_check_with_fault, Dependency, EffectiveOperator,
};
use ldn_core::kernels::{build_kernel, KernelOutput, KernelParams, MaskMode, PsiMlp};
use ldn_core::model::ModelConfig;
use ldn_core::tensor::{Fault, OpKind};
use ldn_core::{Matrix, SeededRng};

fn random_kernel(rng: &mut SeededRng, t_len: usize, d: usize, mode: MaskMode) -> (Matrix, KernelOutput) {
    let m = 4;
    let p = KernelParams {
        rho: rng.uniform(-3.0, 3.0),
        log_sigma_g: rng.uniform(-0.5, 2.5),
        psi: PsiMlp {
            u: rng.normal_matrix(m, d, 0.7),
            v: rng.normal_matrix(m, d, 0.7),
            w: rng.normal_matrix(m, 1, 1.5),
            b: rng.uniform(-1.0, 1.0),
        },
        mask_mode: mode,
    };
    let h = rng.normal_matrix(t_len, d, 2.0);
    let k = build_kernel(&h, &p).unwrap();
    (h, k)
}

/// Graph distance by breadth-first search over positive off-diagonal weights.
fn distances(w: &Matrix) -> Vec<Vec<usize>> {
    let n = w.rows();
    (0..n)
        .map(|src| {
            let mut dist = vec![usize::MAX; n];
            dist[src] = 0;
            let mut frontier = vec![src];
            while let Some(u) = frontier.pop() {
                for v in 0..n {
                    if w.get(u, v) > 0.0 && dist[v] == usize::MAX {
                        dist[v] = dist[u] + 1;
                        frontier.insert(0, v);
                    }
                }
            }
            dist
        })
        .collect()
}

#[test]
fn envelope_trials() {
    let mut rng = SeededRng::new(2024);
    for trial in 0..100 {
        let t_len = 1 + rng.below(16);
        let mode = if trial % 3 == 0 {
            MaskMode::Causal
        } else {
            MaskMode::Bidirectional
        };
        let (h, k) = random_kernel(&mut rng, t_len, 4, mode);
        assert!(check_stability_bound(&k).satisfied);
        let r = envelope_contraction_test(&h, &k, 50).unwrap();
        assert!(r.passed(), "trial {trial}: {:?}", r.violation);
        assert_eq!(r.max_trace.len(), 51);
        assert_eq!(r.l2_ratio.len(), 50);
    }
}

#[test]
fn constant_state_envelope_is_flat() {
    let mut rng = SeededRng::new(3);
    let (_, k) = random_kernel(&mut rng, 9, 3, MaskMode::Bidirectional);
    let h = Matrix::from_fn(9, 3, |_, c| c as f64 - 0.7);
    let r = envelope_contraction_test(&h, &k, 30).unwrap();
    for (hi, lo) in r.max_trace.iter().zip(&r.min_trace) {
        for c in 0..3 {
            assert_eq!(hi[c], c as f64 - 0.7);
            assert_eq!(lo[c], c as f64 - 0.7);
        }
    }
}

#[test]
fn long_diffusion_reaches_consensus() {
    let mut rng = SeededRng::new(8);
    let (h, mut k) = random_kernel(&mut rng, 12, 3, MaskMode::Bidirectional);
    k.delta_t_eff = 0.5;
    let r = envelope_contraction_test(&h, &k, 500).unwrap();
    assert!(r.passed());
    assert!(r.final_gap() < 1e-6, "gap {}", r.final_gap());
}

#[test]
fn operators_are_row_stochastic_and_nonnegative() {
    let mut rng = SeededRng::new(11);
    for _ in 0..50 {
        let t_len = 1 + rng.below(20);
        let mode = if rng.below(2) == 0 {
            MaskMode::Causal
        } else {
            MaskMode::Bidirectional
        };
        let (_, k) = random_kernel(&mut rng, t_len, 3, mode);
        let op = effective_operator(&k).unwrap();
        assert!(op.row_stochastic_error() <= 1e-12);
        assert!(op.a.data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn bidirectional_kernels_connect_in_one_step() {
    let mut rng = SeededRng::new(12);
    for _ in 0..30 {
        let t_len = 2 + rng.below(20);
        let (_, k) = random_kernel(&mut rng, t_len, 3, MaskMode::Bidirectional);
        let dep = global_dependency_l(&effective_operator(&k).unwrap(), 2 * t_len).unwrap();
        assert_eq!(dep.power(), Some(1));
        assert_eq!(dep.next_positive, Some(true));
    }
}

#[test]
fn causal_kernels_never_connect() {
    let mut rng = SeededRng::new(13);
    for _ in 0..30 {
        let t_len = 2 + rng.below(20);
        let (_, k) = random_kernel(&mut rng, t_len, 3, MaskMode::Causal);
        let dep = global_dependency_l(&effective_operator(&k).unwrap(), 2 * t_len).unwrap();
        assert_eq!(dep.outcome, Dependency::NotWithin { l_max: 2 * t_len });
        assert_eq!(dep.upper_zeros, t_len * (t_len - 1) / 2);
        assert!(!dep.underflow);
    }
}

#[test]
fn path_graph_power_equals_diameter() {
    for t_len in 2..=9 {
        let w = Matrix::from_fn(t_len, t_len, |t, s| if t.abs_diff(s) == 1 { 0.5 } else { 0.0 });
        let k = KernelOutput::from_weights(w.clone(), 0.4).unwrap();
        let op = effective_operator(&k).unwrap();
        let dep = global_dependency_l(&op, 2 * t_len).unwrap();
        let diameter = distances(&w).iter().flatten().cloned().max().unwrap();
        assert_eq!(dep.power(), Some(diameter));
        assert_eq!(dep.next_positive, Some(true));

        // brute-force: entry (i, j) of A^k is positive exactly when distance ≤ k
        let dist = distances(&w);
        let mut p = op.a.clone();
        for k in 1..=diameter {
            for i in 0..t_len {
                for j in 0..t_len {
                    assert_eq!(p.get(i, j) > 0.0, dist[i][j] <= k, "T={t_len} k={k} ({i},{j})");
                }
            }
            p = p.matmul(&op.a).unwrap();
        }
    }
    let w4 = Matrix::from_fn(4, 4, |t, s| if t.abs_diff(s) == 1 { 0.5 } else { 0.0 });
    let op = effective_operator(&KernelOutput::from_weights(w4, 0.5).unwrap()).unwrap();
    assert_eq!(global_dependency_l(&op, 8).unwrap().power(), Some(3));
    assert_eq!(
        global_dependency_l(&op, 2).unwrap().outcome,
        Dependency::NotWithin { l_max: 2 }
    );
}

#[test]
fn underflow_is_flagged() {
    let op = EffectiveOperator {
        a: Matrix::from_rows(&[[1e-200, 0.0], [0.0, 1e-200]]),
    };
    let dep = global_dependency_l(&op, 3).unwrap();
    assert!(dep.underflow);
    assert!(global_dependency_l(&op, 0).is_err());
}

#[test]
fn stability_checker_examples() {
    let good = KernelOutput::from_weights(Matrix::from_rows(&[[0.0, 1.0], [0.25, 0.0]]), 0.7).unwrap();
    let r = check_stability_bound(&good);
    assert!(r.satisfied && r.bound.unwrap() >= 1.0);

    let bad = KernelOutput::from_weights(Matrix::from_rows(&[[0.0, 2.0], [0.5, 0.0]]), 0.6).unwrap();
    let r = check_stability_bound(&bad);
    assert_eq!(r.bound, Some(0.5));
    assert!(!r.satisfied);
    assert!(effective_operator(&bad).is_err());

    let op =
        effective_operator(&KernelOutput::from_weights(Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]), 0.5).unwrap())
            .unwrap();
    assert_eq!(op.a, Matrix::filled(2, 2, 0.5));
}

fn small_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 10,
        d: 8,
        layers: 2,
        t_max: 8,
        num_classes: 3,
        psi_hidden: 4,
        ..ModelConfig::default()
    }
}

fn flagged(fault: Fault) -> Vec<String> {
    let r = grad_check_with_fault(&small_model(), 6, 0, 1e-5, 1e-4, Some(fault)).unwrap();
    r.failures().iter().map(|t| t.name.clone()).collect()
}

#[test]
fn corrupted_bias_rule_is_caught_exactly() {
    let names = flagged(Fault {
        op: OpKind::AddColBias,
        input: 1,
        factor: 1.5,
    });
    assert_eq!(
        names,
        [
            "layers.0.local.b1",
            "layers.0.local.b2",
            "layers.1.local.b1",
            "layers.1.local.b2"
        ]
    );
}

#[test]
fn corrupted_decay_rule_is_caught_exactly() {
    let names = flagged(Fault {
        op: OpKind::GaussianDecay,
        input: 0,
        factor: 1.01,
    });
    assert_eq!(
        names,
        [
            "layers.0.diff.log_sigma_g",
            "layers.0.attn.log_sigma_g",
            "layers.1.diff.log_sigma_g",
            "layers.1.attn.log_sigma_g"
        ]
    );
}

#[test]
fn clean_check_passes_and_reports_every_tensor() {
    let r = grad_check(&small_model(), 6, 0, 1e-5, 1e-4).unwrap();
    assert!(r.passed(), "{:?}", r.failures());
    assert_eq!(r.tensors.len(), 1 + 2 * (12 + 6) + 2);
    assert!(grad_check(&small_model(), 9, 0, 1e-5, 1e-4).is_err());
}
