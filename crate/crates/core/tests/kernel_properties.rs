mod common;

use common::tape_check;
use ldn_core::kernels::{build_kernel, kernel_on_tape, KernelParams, KernelVars, MaskMode, PsiMlp};
use ldn_core::{Matrix, SeededRng};
use proptest::prelude::*;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Scalar-by-scalar kernel construction, independent of the tape.
fn oracle(h: &Matrix, p: &KernelParams) -> (Vec<Vec<f64>>, f64) {
    let t_len = h.rows();
    let m = p.psi.u.rows();
    let sigma = p.log_sigma_g.exp();
    let mut w = vec![vec![0.0; t_len]; t_len];
    for t in 0..t_len {
        for s in 0..t_len {
            let open = match p.mask_mode {
                MaskMode::Bidirectional => t != s,
                MaskMode::Causal => s < t,
            };
            if !open {
                continue;
            }
            let mut z = p.psi.b;
            for j in 0..m {
                let mut a = 0.0;
                for k in 0..h.cols() {
                    a += p.psi.u.get(j, k) * h.get(t, k) + p.psi.v.get(j, k) * h.get(s, k);
                }
                z += p.psi.w.get(j, 0) * a.tanh();
            }
            let dist = t as f64 - s as f64;
            let decay = (-dist * dist / (2.0 * sigma * sigma)).exp();
            w[t][s] = softplus(decay * sigmoid(z));
        }
    }
    let r = w
        .iter()
        .map(|row| row.iter().sum::<f64>())
        .fold(0.0, f64::max)
        .max(1e-12);
    for row in &mut w {
        for x in row.iter_mut() {
            *x /= r;
        }
    }
    (w, sigmoid(p.rho.clamp(-30.0, 30.0)))
}

fn random_params(rng: &mut SeededRng, d: usize, m: usize, mode: MaskMode, spread: f64) -> KernelParams {
    KernelParams {
        rho: rng.uniform(-3.0, 3.0),
        log_sigma_g: rng.uniform(-0.5, 2.5),
        psi: PsiMlp {
            u: rng.normal_matrix(m, d, spread),
            v: rng.normal_matrix(m, d, spread),
            w: rng.normal_matrix(m, 1, 2.0 * spread),
            b: rng.uniform(-1.0, 1.0),
        },
        mask_mode: mode,
    }
}

fn mode_of(causal: bool) -> MaskMode {
    if causal {
        MaskMode::Causal
    } else {
        MaskMode::Bidirectional
    }
}

#[test]
fn matches_scalar_oracle() {
    for seed in 0..20 {
        let mut rng = SeededRng::new(seed);
        let t_len = 1 + rng.below(12);
        let mode = mode_of(seed % 2 == 0);
        let p = random_params(&mut rng, 5, 3, mode, 0.7);
        let h = rng.normal_matrix(t_len, 5, 1.0);
        let ker = build_kernel(&h, &p).unwrap();
        let (w, dt) = oracle(&h, &p);
        for t in 0..t_len {
            for s in 0..t_len {
                assert!(
                    (ker.weights.get(t, s) - w[t][s]).abs() <= 1e-12,
                    "seed {seed} ({t},{s})"
                );
            }
            let sum: f64 = w[t].iter().sum();
            assert!((ker.row_sums[t] - sum).abs() <= 1e-12);
        }
        assert!((ker.delta_t_eff - dt).abs() <= 1e-15);
    }
}

#[test]
fn two_token_hand_values() {
    let flat = |mode| KernelParams {
        rho: 0.0,
        log_sigma_g: 0.0,
        psi: PsiMlp {
            u: Matrix::zeros(2, 3),
            v: Matrix::zeros(2, 3),
            w: Matrix::zeros(2, 1),
            b: 0.0,
        },
        mask_mode: mode,
    };
    let h = Matrix::from_rows(&[[0.3, -1.0, 2.0], [1.0, 0.5, 0.0]]);
    let raw = 0.5 * (-0.5f64).exp();
    let (w, _) = oracle(&h, &flat(MaskMode::Bidirectional));
    assert_eq!(w, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    assert!((softplus(raw) - 0.856_232_291_811_266_8).abs() < 1e-15);

    let ker = build_kernel(&h, &flat(MaskMode::Causal)).unwrap();
    assert_eq!(ker.weights, Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]));
    assert_eq!(ker.row_sums, vec![0.0, 1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn structural_invariants(seed in any::<u64>(), t_len in 1usize..=32, causal in any::<bool>()) {
        let mut rng = SeededRng::new(seed);
        let mode = mode_of(causal);
        let p = random_params(&mut rng, 6, 4, mode, 1.0);
        let h = rng.normal_matrix(t_len, 6, 2.0);
        let ker = build_kernel(&h, &p).unwrap();

        for t in 0..t_len {
            prop_assert_eq!(ker.weights.get(t, t), 0.0);
            for s in 0..t_len {
                prop_assert!(ker.weights.get(t, s) >= 0.0);
                if causal && s >= t {
                    prop_assert_eq!(ker.weights.get(t, s), 0.0);
                }
            }
        }
        let max = ker.max_row_sum();
        if t_len == 1 {
            prop_assert_eq!(max, 0.0);
        } else {
            prop_assert!((1.0 - 1e-9..=1.0 + 1e-12).contains(&max), "max row sum {}", max);
        }
        prop_assert!(ker.delta_t_eff > 0.0 && ker.delta_t_eff < 1.0);
        prop_assert!(ker.delta_t_eff * max < 1.0);

        let lap = ker.laplacian();
        for t in 0..t_len {
            let s: f64 = lap.row(t).iter().sum();
            prop_assert!(s.abs() <= 1e-9, "row {} sums to {}", t, s);
        }
    }

    #[test]
    fn gate_is_symmetric_when_u_equals_v(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let mut p = random_params(&mut rng, 4, 3, MaskMode::Bidirectional, 1.0);
        p.psi.v = p.psi.u.clone();
        p.log_sigma_g = 30.0;
        let h = rng.normal_matrix(5, 4, 1.0);
        let w = build_kernel(&h, &p).unwrap().weights;
        for t in 0..5 {
            for s in 0..5 {
                prop_assert!((w.get(t, s) - w.get(s, t)).abs() <= 1e-15);
            }
        }
    }
}

/// Scalar function of every kernel output, differentiated with respect to H
/// and all kernel parameters.
#[test]
fn gradients_match_finite_differences() {
    for seed in 0..6 {
        let mut rng = SeededRng::new(100 + seed);
        let t_len = 3 + rng.below(4);
        let (d, m) = (4, 3);
        let mode = mode_of(seed % 3 == 2);
        let p = random_params(&mut rng, d, m, mode, 0.8);
        let h = rng.normal_matrix(t_len, d, 1.0);
        let rw = rng.normal_matrix(t_len, t_len, 1.0);
        let rs = rng.normal_matrix(t_len, 1, 1.0);
        let inputs = vec![
            h,
            p.psi.u.clone(),
            p.psi.v.clone(),
            p.psi.w.clone(),
            Matrix::scalar(p.psi.b),
            Matrix::scalar(p.rho),
            Matrix::scalar(p.log_sigma_g),
        ];
        let worst = tape_check(&inputs, |tape, v| {
            let vars = KernelVars {
                u: v[1],
                v: v[2],
                w: v[3],
                b: v[4],
                rho: v[5],
                log_sigma_g: v[6],
                mode,
            };
            let k = kernel_on_tape(tape, v[0], &vars)?;
            let a = tape.mul_const(k.weights, rw.clone())?;
            let a = tape.sum_all(a);
            let b = tape.mul_const(k.row_sums, rs.clone())?;
            let b = tape.sum_all(b);
            let ab = tape.add(a, b)?;
            let c = tape.scale_by(ab, k.delta_t)?;
            tape.add(c, k.delta_t)
        });
        assert!(worst.rel_err <= 1e-4, "seed {seed}: {worst:?}");
    }
}
