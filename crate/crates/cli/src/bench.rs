//! Forward-pass timing of diffusion layers over a range of sequence lengths.

use std::time::Instant;

use ldn_core::kernels::MaskMode;
use ldn_core::layer::{layer_forward, LayerParams};
use ldn_core::SeededRng;
use serde::Serialize;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    #[serde(rename = "T")]
    pub t: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub d: usize,
    pub layers: usize,
    pub psi_hidden: usize,
    pub t_list: Vec<usize>,
    pub repeats: usize,
    /// Number of independent sequences timed together across the rayon pool;
    /// `None` times one sequence on the calling thread.
    pub parallel_batch: Option<usize>,
    pub seed: u64,
}

/// Nearest-rank percentile of sorted samples: the value at rank `ceil(p·n)`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn summarize(t: usize, samples: &mut [f64]) -> BenchRow {
    samples.sort_by(f64::total_cmp);
    BenchRow {
        t,
        median_ms: median(samples),
        p10_ms: percentile(samples, 0.10),
        p90_ms: percentile(samples, 0.90),
    }
}

/// Times the layer stack and reports milliseconds per layer.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchRow>, CliError> {
    if spec.repeats < 3 {
        return Err(CliError::Input(format!(
            "bench needs at least 3 repeats, got {}",
            spec.repeats
        )));
    }
    if spec.t_list.is_empty() || spec.t_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Input(
            "bench T list must be non-empty and strictly ascending".into(),
        ));
    }
    if spec.d == 0 || spec.layers == 0 || spec.psi_hidden == 0 || spec.t_list[0] == 0 {
        return Err(CliError::Input("bench sizes must be at least 1".into()));
    }
    if spec.parallel_batch == Some(0) {
        return Err(CliError::Input("parallel batch must be at least 1".into()));
    }
    let mut rng = SeededRng::new(spec.seed);
    let params: Vec<LayerParams> = (0..spec.layers)
        .map(|_| LayerParams::init(&mut rng, spec.d, spec.psi_hidden, MaskMode::Bidirectional, false))
        .collect();

    let mut rows = Vec::new();
    for &t in &spec.t_list {
        let batch = spec.parallel_batch.unwrap_or(1);
        let inputs: Vec<_> = (0..batch)
            .map(|_| (rng.normal_matrix(t, spec.d, 1.0), rng.normal_matrix(t, spec.d, 1.0)))
            .collect();
        let stack = |h0: &ldn_core::Matrix, e: &ldn_core::Matrix| -> Result<(), CliError> {
            let mut h = h0.clone();
            for p in &params {
                h = layer_forward(&h, e, p, false)?;
            }
            std::hint::black_box(&h);
            Ok(())
        };
        let mut samples = Vec::with_capacity(spec.repeats);
        for _ in 0..spec.repeats {
            let start = Instant::now();
            match spec.parallel_batch {
                None => stack(&inputs[0].0, &inputs[0].1)?,
                Some(_) => {
                    use rayon::prelude::*;
                    inputs.par_iter().try_for_each(|(h, e)| stack(h, e))?
                }
            }
            samples.push(start.elapsed().as_secs_f64() * 1e3 / spec.layers as f64);
        }
        rows.push(summarize(t, &mut samples));
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("T,median_ms,p10_ms,p90_ms\n");
    for r in rows {
        out.push_str(&format!("{},{:.4},{:.4},{:.4}\n", r.t, r.median_ms, r.p10_ms, r.p90_ms));
    }
    out
}
