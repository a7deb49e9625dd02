//! Central-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values on fresh tapes, so it
//! shares nothing with the backward rules it is checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used throughout the test suite.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor so that near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, element index)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Numeric gradient of a scalar function of several tensors.
pub fn central_difference<F>(mut f: F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros_like(&inputs[i]);
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = f(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = f(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares tape gradients of `build` against central differences.
///
/// `build` receives a tape with one leaf per input and must return a scalar.
pub fn check<F>(build: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros_like(t)))
        .collect();

    let numeric = central_difference(
        |xs| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            let out = build(&mut t, &vs)?;
            t.value(out).item()
        },
        inputs,
        step,
    )?;
    Ok(compare(&analytic, &numeric))
}

/// Elementwise comparison of two gradient sets.
pub fn compare(analytic: &[Tensor], numeric: &[Tensor]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let rel = relative_error(av, nv);
            report.max_abs_err = report.max_abs_err.max((av - nv).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    report
}
/// Deterministic inputs in `[-1, 1)`, kept away from zero so that relu
/// checks never straddle its kink.
fn sample(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let v = ((i as f64 + 1.0) * 12.9898 + salt as f64 * 78.233).sin() * 43758.5453;
            let u = v - v.floor();
            let x = 2.0 * u - 1.0;
            if x.abs() < 0.05 { x + 0.1 } else { x }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// `Σ x ⊙ w` for a fixed `w`, so upstream gradients are not uniform.
fn weighted(t: &mut Tape, x: Var, salt: u64) -> Result<Var> {
    let w = sample(t.value(x).shape(), salt);
    let p = t.mul_const(x, &w)?;
    t.sum(p)
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Central-difference reports for every differentiable tape operation.
pub fn op_suite(step: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let m23 = || vec![sample(&[2, 3], 1), sample(&[2, 3], 2)];
    let cases: Vec<(&'static str, Vec<Tensor>, Build)> = vec![
        ("matmul", vec![sample(&[2, 3], 3), sample(&[3, 4], 4)], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted(t, y, 5)
        })),
        ("add", m23(), Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            weighted(t, y, 6)
        })),
        ("sub", m23(), Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted(t, y, 7)
        })),
        ("mul", m23(), Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted(t, y, 8)
        })),
        ("scalar broadcast", vec![sample(&[2, 3], 9), sample(&[1], 10)], Box::new(|t, v| {
            let s = t.sum(v[1])?;
            let y = t.mul(v[0], s)?;
            let y = t.add(y, s)?;
            weighted(t, y, 11)
        })),
        ("scale", m23(), Box::new(|t, v| {
            let y = t.scale(v[0], -1.7)?;
            weighted(t, y, 12)
        })),
        ("add_const", m23(), Box::new(|t, v| {
            let y = t.add_const(v[0], &sample(&[2, 3], 13))?;
            let y = t.mul(y, v[1])?;
            weighted(t, y, 14)
        })),
        ("mul_const", m23(), Box::new(|t, v| {
            let y = t.mul_const(v[0], &sample(&[2, 3], 15))?;
            weighted(t, y, 16)
        })),
        ("masked_fill", m23(), Box::new(|t, v| {
            let y = t.masked_fill(v[0], &[true, false, true, true, false, true], -3.0)?;
            weighted(t, y, 17)
        })),
        ("relu", m23(), Box::new(|t, v| {
            let y = t.relu(v[0])?;
            weighted(t, y, 18)
        })),
        ("sum", m23(), Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            t.sum(y)
        })),
        ("sum_axis", m23(), Box::new(|t, v| {
            let a = t.sum_axis(v[0], 0)?;
            let b = t.sum_axis(v[1], 1)?;
            let wa = weighted(t, a, 19)?;
            let wb = weighted(t, b, 20)?;
            t.add(wa, wb)
        })),
        ("mean_axis", m23(), Box::new(|t, v| {
            let a = t.mean_axis(v[0], 0)?;
            let b = t.mean_axis(v[1], 1)?;
            let wa = weighted(t, a, 21)?;
            let wb = weighted(t, b, 22)?;
            t.add(wa, wb)
        })),
        ("transpose", m23(), Box::new(|t, v| {
            let y = t.transpose(v[0])?;
            weighted(t, y, 23)
        })),
        ("concat", m23(), Box::new(|t, v| {
            let a = t.concat(&[v[0], v[1]], 0)?;
            let b = t.concat(&[v[0], v[1]], 1)?;
            let wa = weighted(t, a, 24)?;
            let wb = weighted(t, b, 25)?;
            t.add(wa, wb)
        })),
        ("narrow", m23(), Box::new(|t, v| {
            let y = t.narrow(v[0], 1, 1, 2)?;
            weighted(t, y, 26)
        })),
        ("softmax", m23(), Box::new(|t, v| {
            let y = t.softmax(v[0], 1)?;
            weighted(t, y, 27)
        })),
        ("log_softmax", m23(), Box::new(|t, v| {
            let y = t.log_softmax(v[0], 1)?;
            weighted(t, y, 28)
        })),
        ("layer_norm", vec![sample(&[2, 4], 29), sample(&[4], 30), sample(&[4], 31)], Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
            weighted(t, y, 32)
        })),
        ("gather_rows", vec![sample(&[4, 3], 33)], Box::new(|t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2])?;
            weighted(t, y, 34)
        })),
        ("pick", m23(), Box::new(|t, v| {
            let y = t.pick(v[0], &[2, 0])?;
            weighted(t, y, 35)
        })),
        ("cross_entropy", vec![sample(&[3, 4], 36)], Box::new(|t, v| {
            t.cross_entropy(v[0], &[1, 0, 3], 0)
        })),
        ("dropout", m23(), Box::new(|t, v| {
            use rand::SeedableRng;
            let mut rng = rand::rngs::StdRng::seed_from_u64(37);
            let y = t.dropout(v[0], 0.5, true, &mut rng)?;
            weighted(t, y, 38)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, build)| Ok((name, check(build, &inputs, step)?)))
        .collect()
}

