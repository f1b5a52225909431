//! Central finite-difference checks of the tape's reverse pass.
//!
//! Only forward evaluations are used to build the numeric gradient, so the
//! check is independent of the backward implementation it validates.

use rand::{Rng as _, SeedableRng};

use super::{ImgShape, Matrix, MlpConfig, ParamStore, RadianceMlp, Tape, Var};
use crate::error::Result;
use crate::rng::Rng;

/// Relative error with a floor on the denominator so that vanishing
/// gradients are compared in absolute terms.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[f64]) -> Result<Var> + 'a;

/// Compares the reverse pass of `build` (a function of a flat input vector)
/// with central differences, for the scalar `sum(out * R)` with random `R`.
pub fn check_fn(name: &str, x: &[f64], build: &Build<'_>, indices: &[usize], h: f64, seed: u64) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let out = build(&mut tape, x)?;
    let (rows, cols) = tape.value(out).shape();
    let mut rng = Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let seed_m = Matrix::from_vec(rows, cols, weights.clone())?;
    let grads = tape.backward(&[(out, &seed_m)], x.len())?;

    let objective = |x: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let o = build(&mut t, x)?;
        Ok(t.value(o).data.iter().zip(&weights).map(|(a, b)| a * b).sum())
    };
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for &i in indices {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = objective(&xp)?;
        xp[i] = orig - h;
        let fm = objective(&xp)?;
        xp[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(rel_error(grads.params[i], numeric));
    }
    Ok(CheckResult {
        name: name.to_string(),
        checked: indices.len(),
        max_rel_error: worst,
    })
}

fn randn(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero (for the relu kink).
fn away_from_zero(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.5);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Runs the check on every primitive of the tape.
pub fn check_primitives(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut results = Vec::new();
    let all = |n: usize| (0..n).collect::<Vec<_>>();

    let unary: Vec<(&str, fn(&mut Tape<f64>, Var) -> Result<Var>, f64, f64)> = vec![
        ("relu", |t, x| t.relu(x), 0.0, 0.0),
        ("softplus", |t, x| t.softplus(x), -3.0, 3.0),
        ("sigmoid", |t, x| t.sigmoid(x), -3.0, 3.0),
        ("sin", |t, x| t.sin(x), -3.0, 3.0),
        ("cos", |t, x| t.cos(x), -3.0, 3.0),
        ("exp", |t, x| t.exp(x), -2.0, 2.0),
        ("log1p", |t, x| t.log1p(x), 0.0, 4.0),
        ("scale", |t, x| t.scale(x, -1.75), -2.0, 2.0),
        ("sum", |t, x| t.sum(x), -2.0, 2.0),
    ];
    for (name, op, lo, hi) in unary {
        let x = if name == "relu" {
            away_from_zero(&mut rng, 12)
        } else {
            randn(&mut rng, 12, lo, hi)
        };
        let build = move |t: &mut Tape<f64>, p: &[f64]| -> Result<Var> {
            let v = t.param(p, 0, 3, 4)?;
            op(t, v)
        };
        results.push(check_fn(name, &x, &build, &all(12), h, seed)?);
    }

    let binary: Vec<(&str, fn(&mut Tape<f64>, Var, Var) -> Result<Var>)> = vec![
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
    ];
    for (name, op) in binary {
        let x = randn(&mut rng, 24, -2.0, 2.0);
        let build = move |t: &mut Tape<f64>, p: &[f64]| -> Result<Var> {
            let a = t.param(p, 0, 3, 4)?;
            let b = t.param(p, 12, 3, 4)?;
            op(t, a, b)
        };
        results.push(check_fn(name, &x, &build, &all(24), h, seed)?);
    }

    let x = randn(&mut rng, 4 * 3 + 3 * 5 + 5, -1.0, 1.0);
    let build = |t: &mut Tape<f64>, p: &[f64]| -> Result<Var> {
        let x = t.param(p, 0, 4, 3)?;
        let w = t.param(p, 12, 3, 5)?;
        let b = t.param(p, 27, 1, 5)?;
        t.affine(x, w, b)
    };
    results.push(check_fn("affine", &x, &build, &all(32), h, seed)?);

    let x = randn(&mut rng, 4 * 3 + 3 * 2, -1.0, 1.0);
    let build = |t: &mut Tape<f64>, p: &[f64]| -> Result<Var> {
        let a = t.param(p, 0, 4, 3)?;
        let b = t.param(p, 12, 3, 2)?;
        t.matmul(a, b)
    };
    results.push(check_fn("matmul", &x, &build, &all(18), h, seed)?);

    let x = randn(&mut rng, 12 + 4, -1.0, 1.0);
    let build = |t: &mut Tape<f64>, p: &[f64]| -> Result<Var> {
        let a = t.param(p, 0, 4, 3)?;
        let c = t.param(p, 12, 4, 1)?;
        t.mul_col(a, c)
    };
    results.push(check_fn("mul_col", &x, &build, &all(16), h, seed)?);

    let x = randn(&mut rng, 6 + 9, -1.0, 1.0);
    let build = |t: &mut Tape<f64>, p: &[f64]| -> Result<Var> {
        let a = t.param(p, 0, 3, 2)?;
        let b = t.param(p, 6, 3, 3)?;
        let c = t.concat(a, b)?;
        t.slice(c, 1, 3)
    };
    results.push(check_fn("concat_slice", &x, &build, &all(15), h, seed)?);

    let shape = ImgShape::new(2, 4, 6);
    let (cin, cout) = (3, 2);
    let nx = shape.pixels() * cin;
    let nw = 9 * cin * cout;
    let x = randn(&mut rng, nx + nw + cout, -1.0, 1.0);
    let build = move |t: &mut Tape<f64>, p: &[f64]| -> Result<Var> {
        let x = t.param(p, 0, shape.pixels(), cin)?;
        let w = t.param(p, nx, 9 * cin, cout)?;
        let b = t.param(p, nx + nw, 1, cout)?;
        t.conv3x3(x, w, b, shape)
    };
    results.push(check_fn("conv3x3", &x, &build, &all(nx + nw + cout), h, seed)?);

    let x = randn(&mut rng, shape.pixels() * 2, -1.0, 1.0);
    let build = move |t: &mut Tape<f64>, p: &[f64]| -> Result<Var> {
        let x = t.param(p, 0, shape.pixels(), 2)?;
        let d = t.down2(x, shape)?;
        let u = t.up2(d, shape.half())?;
        let s = t.sin(u)?;
        t.mul(s, x)
    };
    results.push(check_fn("down2_up2", &x, &build, &all(shape.pixels() * 2), h, seed)?);

    Ok(results)
}

/// Finite-difference check of a randomly initialized radiance MLP on
/// `rows` random inputs, probing `probes` parameters spread over all layers.
pub fn check_mlp(config: MlpConfig, rows: usize, probes: usize, seed: u64) -> Result<CheckResult> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::seed_from_u64(seed);
    let mlp = RadianceMlp::new(config, &mut store, &mut rng)?;
    let n = store.len();
    let pts = randn(&mut rng, rows * config.input_dim, -1.0, 1.0);
    let dirs = randn(&mut rng, rows * config.dir_dim, -1.0, 1.0);
    let mut flat = store.params.clone();
    flat.extend_from_slice(&pts);
    let build = |t: &mut Tape<f64>, p: &[f64]| -> Result<Var> {
        let s = ParamStore {
            params: p[..n].to_vec(),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        };
        let x = t.param(p, n, rows, config.input_dim)?;
        let d = t.input(Matrix::from_vec(rows, config.dir_dim, dirs.clone())?)?;
        let out = mlp.forward(t, &s, x, d)?;
        t.concat(out.sigma, out.rgb)
    };
    let total = flat.len();
    let mut indices: Vec<usize> = (0..probes).map(|k| (k * total) / probes + (k * 7919) % 13).collect();
    indices.retain(|&i| i < total);
    // last layers and the inputs are always probed
    indices.extend((n - 8)..n);
    indices.extend(n..(n + 4).min(total));
    check_fn("mlp", &flat, &build, &indices, 1e-6, seed)
}
