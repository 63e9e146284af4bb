//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Lower bound on the error denominator. Central differences of an O(1) loss
/// carry up to about 1e-10 of rounding noise, so gradients that vanish exactly
/// (a key bias under softmax) would otherwise score as noise over noise.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Which coordinates of each input get a finite-difference probe.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// The two largest-magnitude analytic entries plus `n` random ones.
    Sample(usize),
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn new(name: impl Into<String>, max_rel_err: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_rel_err,
            passed: max_rel_err <= tolerance,
        }
    }
}

/// Compares the tape gradient of `f` against central differences for every
/// input. Each input's error is `max|analytic - numeric| / max(max|analytic|,
/// max|numeric|, SCALE_FLOOR)` over its probed coordinates; the largest is
/// returned.
pub fn max_relative_error<F>(inputs: &[Tensor], f: F, eps: f64, probe: Probe, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let coords = probe_coords(grad, probe, &mut rng);
        let mut num_max: f64 = 0.0;
        let mut ana_max: f64 = 0.0;
        let mut diff_max: f64 = 0.0;
        for k in coords {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[k];
            num_max = num_max.max(numeric.abs());
            ana_max = ana_max.max(a.abs());
            diff_max = diff_max.max((a - numeric).abs());
        }
        let rel = diff_max / num_max.max(ana_max).max(SCALE_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn probe_coords<R: Rng>(grad: &Tensor, probe: Probe, rng: &mut R) -> Vec<usize> {
    let n = grad.numel();
    match probe {
        Probe::All => (0..n).collect(),
        Probe::Sample(extra) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| grad.data()[b].abs().total_cmp(&grad.data()[a].abs()));
            let mut picked: Vec<usize> = order.into_iter().take(2).collect();
            for k in sample(rng, n, extra.min(n)) {
                if !picked.contains(&k) {
                    picked.push(k);
                }
            }
            picked
        }
    }
}

type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Weighted sum `Σ out ⊙ w` with a fixed random weight tensor, so every
/// output entry contributes a distinct cotangent.
fn weighted(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone().reshape(tape.shape(out).to_vec())?);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Gradient checks for every differentiable primitive on small random shapes.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&str, Vec<Tensor>, Vec<usize>, LossFn)> = Vec::new();
    let sym = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng);
    let pos = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(shape.to_vec(), 0.5, 2.0, rng);

    macro_rules! unary {
        ($name:expr, $input:expr, $body:expr) => {{
            let x: Tensor = $input;
            let shape = x.shape().to_vec();
            cases.push(($name, vec![x], shape, Box::new($body)));
        }};
    }
    macro_rules! binary {
        ($name:expr, $a:expr, $b:expr, $out:expr, $body:expr) => {{
            cases.push(($name, vec![$a, $b], $out, Box::new($body)));
        }};
    }

    binary!("add", sym(&[3, 4], &mut rng), sym(&[3, 4], &mut rng), vec![3, 4], |t: &mut Tape, v: &[Var]| t.add(v[0], v[1]));
    binary!("sub", sym(&[3, 4], &mut rng), sym(&[3, 4], &mut rng), vec![3, 4], |t: &mut Tape, v: &[Var]| t.sub(v[0], v[1]));
    binary!("mul", sym(&[3, 4], &mut rng), sym(&[3, 4], &mut rng), vec![3, 4], |t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]));
    binary!("div", sym(&[3, 4], &mut rng), pos(&[3, 4], &mut rng), vec![3, 4], |t: &mut Tape, v: &[Var]| t.div(v[0], v[1]));
    binary!("maximum", sym(&[3, 4], &mut rng), sym(&[3, 4], &mut rng), vec![3, 4], |t: &mut Tape, v: &[Var]| t.maximum(v[0], v[1]));
    binary!("minimum", sym(&[3, 4], &mut rng), sym(&[3, 4], &mut rng), vec![3, 4], |t: &mut Tape, v: &[Var]| t.minimum(v[0], v[1]));
    binary!("add_row", sym(&[3, 4], &mut rng), sym(&[4], &mut rng), vec![3, 4], |t: &mut Tape, v: &[Var]| t.add_row(v[0], v[1]));
    binary!("add_col", sym(&[3, 4], &mut rng), sym(&[3], &mut rng), vec![3, 4], |t: &mut Tape, v: &[Var]| t.add_col(v[0], v[1]));
    binary!("matmul", sym(&[3, 5], &mut rng), sym(&[5, 2], &mut rng), vec![3, 2], |t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]));
    binary!("concat_rows", sym(&[2, 3], &mut rng), sym(&[4, 3], &mut rng), vec![6, 3], |t: &mut Tape, v: &[Var]| t.concat(v, 0));
    binary!("concat_cols", sym(&[3, 2], &mut rng), sym(&[3, 4], &mut rng), vec![3, 6], |t: &mut Tape, v: &[Var]| t.concat(v, 1));
    cases.push((
        "layer_norm",
        vec![sym(&[4, 6], &mut rng), pos(&[6], &mut rng), sym(&[6], &mut rng)],
        vec![4, 6],
        Box::new(|t: &mut Tape, v: &[Var]| t.layer_norm(v[0], v[1], v[2])),
    ));
    unary!("scale", sym(&[3, 4], &mut rng), |t: &mut Tape, v: &[Var]| t.scale(v[0], -1.7));
    unary!("add_scalar", sym(&[3, 4], &mut rng), |t: &mut Tape, v: &[Var]| t.add_scalar(v[0], 0.3));
    unary!("exp", sym(&[3, 4], &mut rng), |t: &mut Tape, v: &[Var]| t.exp(v[0]));
    unary!("log", pos(&[3, 4], &mut rng), |t: &mut Tape, v: &[Var]| t.log(v[0]));
    unary!("powf", pos(&[3, 4], &mut rng), |t: &mut Tape, v: &[Var]| t.powf(v[0], 2.5));
    unary!("abs", sym(&[3, 4], &mut rng), |t: &mut Tape, v: &[Var]| t.abs(v[0]));
    unary!("sigmoid", sym(&[3, 4], &mut rng), |t: &mut Tape, v: &[Var]| t.sigmoid(v[0]));
    unary!("gelu", sym(&[3, 4], &mut rng), |t: &mut Tape, v: &[Var]| t.gelu(v[0]));
    unary!("relu", sym(&[3, 4], &mut rng), |t: &mut Tape, v: &[Var]| t.relu(v[0]));
    unary!("clamp", sym(&[3, 4], &mut rng), |t: &mut Tape, v: &[Var]| t.clamp(v[0], -0.5, 0.5));
    unary!("softmax_rows", sym(&[3, 5], &mut rng), |t: &mut Tape, v: &[Var]| t.softmax_rows(v[0]));
    cases.push(("sum", vec![sym(&[3, 4], &mut rng)], vec![1], Box::new(|t: &mut Tape, v: &[Var]| t.sum(v[0]))));
    cases.push(("mean", vec![sym(&[3, 4], &mut rng)], vec![1], Box::new(|t: &mut Tape, v: &[Var]| t.mean(v[0]))));
    cases.push((
        "transpose",
        vec![sym(&[3, 4], &mut rng)],
        vec![4, 3],
        Box::new(|t: &mut Tape, v: &[Var]| t.transpose(v[0])),
    ));
    cases.push((
        "reshape",
        vec![sym(&[3, 4], &mut rng)],
        vec![2, 6],
        Box::new(|t: &mut Tape, v: &[Var]| t.reshape(v[0], [2, 6])),
    ));
    cases.push((
        "narrow_rows",
        vec![sym(&[5, 3], &mut rng)],
        vec![2, 3],
        Box::new(|t: &mut Tape, v: &[Var]| t.narrow(v[0], 0, 1, 2)),
    ));
    cases.push((
        "narrow_cols",
        vec![sym(&[3, 5], &mut rng)],
        vec![3, 3],
        Box::new(|t: &mut Tape, v: &[Var]| t.narrow(v[0], 1, 2, 3)),
    ));
    cases.push((
        "gather_rows",
        vec![sym(&[5, 3], &mut rng)],
        vec![4, 3],
        Box::new(|t: &mut Tape, v: &[Var]| t.gather_rows(v[0], &[4, 0, 0, 2])),
    ));
    cases.push((
        "scatter_rows",
        vec![sym(&[3, 2], &mut rng)],
        vec![5, 2],
        Box::new(|t: &mut Tape, v: &[Var]| t.scatter_rows(v[0], &[4, 1, 2], 5)),
    ));
    cases.push((
        "im2col3x3",
        vec![sym(&[2, 12], &mut rng)],
        vec![18, 12],
        Box::new(|t: &mut Tape, v: &[Var]| t.im2col3x3(v[0], 2, 3, 4)),
    ));

    let mut reports = Vec::with_capacity(cases.len());
    for (i, (name, inputs, out_shape, body)) in cases.into_iter().enumerate() {
        let w = Tensor::uniform(out_shape, -1.0, 1.0, &mut rng);
        let f = |t: &mut Tape, v: &[Var]| {
            let out = body(t, v)?;
            weighted(t, out, &w)
        };
        let err = max_relative_error(&inputs, f, DEFAULT_EPS, Probe::All, seed ^ i as u64)?;
        reports.push(GradReport::new(name, err, DEFAULT_TOLERANCE));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for r in primitive_suite(7).unwrap() {
            assert!(r.passed, "{} rel err {:e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn softmax_gradient_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform([4, 6], -2.0, 2.0, &mut rng);
        let w = Tensor::uniform([4, 6], -1.0, 1.0, &mut rng);
        let err = max_relative_error(
            &[x],
            |t, v| {
                let s = t.softmax_rows(v[0])?;
                weighted(t, s, &w)
            },
            DEFAULT_EPS,
            Probe::All,
            0,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err:e}");
    }

    #[test]
    fn matmul_gradient_of_sum_is_b_transpose_broadcast() {
        let a = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new([3, 2], vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.0]).unwrap();
        let mut tape = Tape::new();
        let va = tape.param(a);
        let vb = tape.constant(b.clone());
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(va).unwrap();
        // row sums of B, repeated for each row of A
        let expected = [-0.5, 2.0, 4.5, -0.5, 2.0, 4.5];
        assert_eq!(g.data(), &expected);
    }
}
