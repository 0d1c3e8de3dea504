//! Central-difference gradient verification. The forward runs in fp32; the
//! difference quotient is formed in f64. Relative error uses a floor in the
//! denominator so near-zero pairs do not divide by noise; a wrong gradient
//! rule still shows up as an O(1) error.

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

/// 2^-10, the power of two nearest 1e-3. Probes aligned to this grid are
/// perturbed exactly in fp32, which keeps the quotient noise-free.
pub const DEFAULT_EPS: f32 = 0.0009765625;
const DENOM_FLOOR: f64 = 0.2;

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Checks d(loss)/d(input element) for every listed input against central
/// differences. `build` must be deterministic: it is re-run twice per
/// checked element with one value nudged by ±eps.
pub fn check_grads<F>(inputs: &[Tensor], eps: f32, build: F) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item() as f64)
    };

    // analytic gradients from one backward pass
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (ti, input) in inputs.iter().enumerate() {
        let zero;
        let analytic = match Graph::grad_of(&grads, vars[ti]) {
            Some(t) => t,
            None => {
                zero = Tensor::zeros(input.shape());
                &zero
            }
        };
        for ei in 0..input.len() {
            let orig = input.data()[ei];
            let mut probe: Vec<Tensor> = inputs.to_vec();
            let mut t = input.clone();
            t.data_mut()[ei] = orig + eps;
            probe[ti] = t;
            let lp = eval(&probe)?;
            let mut t = input.clone();
            t.data_mut()[ei] = orig - eps;
            probe[ti] = t;
            let lm = eval(&probe)?;
            let fd = (lp - lm) / (2.0 * eps as f64);
            let an = analytic.data()[ei] as f64;
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(DENOM_FLOOR);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(FdReport { max_rel_err: max_rel, checked })
}
