#![allow(dead_code)]

use ldn_core::analysis::relative_error;
use ldn_core::tensor::{Tape, Var};
use ldn_core::{Matrix, Result};

pub const EPS: f64 = 1e-5;

/// Worst entry of a tape gradient check.
#[derive(Debug)]
pub struct Worst {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Backward pass of `build` against central differences over every entry of
/// every input. `build` maps leaves to a scalar loss node.
pub fn tape_check(inputs: &[Matrix], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Worst {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();

    let eval = |xs: &[Matrix]| -> f64 {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = xs.iter().map(|m| t.leaf(m.clone())).collect();
        let l = build(&mut t, &vs).unwrap();
        t.value(l).item()
    };

    let mut worst = Worst {
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_err: 0.0,
    };
    for (i, m) in inputs.iter().enumerate() {
        let g = grads.get(vars[i]);
        assert_eq!(g.shape(), m.shape());
        for k in 0..m.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[k] = m.data()[k] + EPS;
            let plus = eval(&xs);
            xs[i].data_mut()[k] = m.data()[k] - EPS;
            let minus = eval(&xs);
            let numeric = (plus - minus) / (2.0 * EPS);
            let analytic = g.data()[k];
            let err = relative_error(analytic, numeric);
            if err > worst.rel_err {
                worst = Worst {
                    input: i,
                    index: k,
                    analytic,
                    numeric,
                    rel_err: err,
                };
            }
        }
    }
    worst
}

/// Reduces any node to a scalar with fixed random weights so every output
/// entry contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: &Matrix) -> Result<Var> {
    let y = tape.mul_const(x, weights.clone())?;
    Ok(tape.sum_all(y))
}
