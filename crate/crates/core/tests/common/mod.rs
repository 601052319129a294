#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use raad::tensor::gradcheck::{check_gradients, GradCheck};
use raad::{Result, Tape, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;
pub const SHAPES_PER_OP: usize = 20;
const EPS: f64 = 1e-6;

pub struct OpCheck {
    pub op: &'static str,
    pub shape: Vec<usize>,
    pub result: GradCheck,
}

fn random(r: &mut SplitMix64, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
}

/// Values at least 0.05 away from zero so ReLU kinks stay outside the stencil.
fn away_from_zero(r: &mut SplitMix64, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.gen_range(0.05..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced 0.01 apart so top-k membership is stable under perturbation.
fn distinct(r: &mut SplitMix64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, r.gen_range(0..=i));
    }
    let data = idx.iter().map(|&i| i as f64 * 0.01 - 0.3).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Squared distance of `y` to a fixed random target, so every output entry has a distinct upstream gradient.
fn readout(tape: &mut Tape, y: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(y, t)?;
    let s = tape.square(d)?;
    tape.sum(s)
}

fn out_shape(program: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Vec<usize> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = program(&mut tape, &vars).unwrap();
    tape.shape(y).to_vec()
}

fn check(
    r: &mut SplitMix64,
    op: &'static str,
    inputs: Vec<Tensor>,
    program: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> OpCheck {
    let shape = inputs[0].shape().to_vec();
    let target = random(r, &out_shape(&program, &inputs));
    let result = check_gradients(&inputs, EPS, |tape, v| {
        let y = program(tape, v)?;
        readout(tape, y, &target)
    })
    .unwrap_or_else(|e| panic!("{op} {shape:?}: {e}"));
    OpCheck { op, shape, result }
}

fn nchw(r: &mut SplitMix64, max_c: usize, min_hw: usize, max_hw: usize) -> [usize; 4] {
    [r.gen_range(1..=2), r.gen_range(1..=max_c), r.gen_range(min_hw..=max_hw), r.gen_range(min_hw..=max_hw)]
}

/// Checks every differentiable tape op on `SHAPES_PER_OP` random shapes each, plus a composite chain.
pub fn gradient_suite(seed: u64) -> Vec<OpCheck> {
    let mut r = SplitMix64::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..SHAPES_PER_OP {
        let [n, cin, h, w] = nchw(&mut r, 3, 3, 7);
        let cout = r.gen_range(1..=3);
        let k = r.gen_range(1..=3.min(h).min(w));
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=2);
        let inputs = vec![random(&mut r, &[n, cin, h, w]), random(&mut r, &[cout, cin, k, k]), random(&mut r, &[cout])];
        out.push(check(&mut r, "conv2d", inputs, move |t, v| t.conv2d(v[0], v[1], v[2], stride, pad)));

        let s = nchw(&mut r, 3, 2, 8);
        let kp = r.gen_range(1..=2.min(s[2]).min(s[3]));
        let sp = r.gen_range(1..=2);
        let x = random(&mut r, &s);
        out.push(check(&mut r, "avg_pool2d", vec![x], move |t, v| t.avg_pool2d(v[0], kp, sp)));

        let s = nchw(&mut r, 3, 1, 6);
        let x = away_from_zero(&mut r, &s);
        out.push(check(&mut r, "relu", vec![x], |t, v| t.relu(v[0])));

        let s = nchw(&mut r, 2, 1, 6);
        let (oh, ow) = (r.gen_range(1..=9), r.gen_range(1..=9));
        let x = random(&mut r, &s);
        out.push(check(&mut r, "bilinear_resize", vec![x], move |t, v| t.bilinear_resize(v[0], oh, ow)));

        let s = nchw(&mut r, 3, 1, 5);
        let (a, b) = (random(&mut r, &s), random(&mut r, &s));
        out.push(check(&mut r, "add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])));
        out.push(check(&mut r, "sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])));
        let f = r.gen_range(-2.0..2.0);
        out.push(check(&mut r, "scale", vec![a.clone()], move |t, v| t.scale(v[0], f)));
        out.push(check(&mut r, "square", vec![a.clone()], |t, v| t.square(v[0])));
        out.push(check(&mut r, "sum", vec![a.clone()], |t, v| t.sum(v[0])));
        out.push(check(&mut r, "mean", vec![a.clone()], |t, v| t.mean(v[0])));
        out.push(check(&mut r, "mse_mean", vec![a, b], |t, v| t.mse_mean(v[0], v[1])));

        let s = nchw(&mut r, 4, 1, 4);
        let start = r.gen_range(0..s[1]);
        let len = r.gen_range(1..=s[1] - start);
        let x = random(&mut r, &s);
        out.push(check(&mut r, "narrow_channels", vec![x], move |t, v| t.narrow_channels(v[0], start, len)));

        let s = nchw(&mut r, 3, 1, 5);
        let frac = r.gen_range(0.05..=1.0);
        let x = distinct(&mut r, &s);
        out.push(check(&mut r, "top_fraction_mean", vec![x], move |t, v| t.top_fraction_mean(v[0], frac)));

        // conv -> relu -> pool -> conv -> resize, as in the networks.
        let [n, c, _, _] = nchw(&mut r, 2, 4, 6);
        let hw = r.gen_range(4..=6);
        let c2 = r.gen_range(1..=2);
        let inputs = vec![
            random(&mut r, &[n, c, hw, hw]),
            random(&mut r, &[c2, c, 3, 3]),
            random(&mut r, &[c2]),
            random(&mut r, &[1, c2, 1, 1]),
            random(&mut r, &[1]),
        ];
        out.push(check(&mut r, "composite", inputs, move |t, v| {
            let a = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            let a = t.relu(a)?;
            let a = t.avg_pool2d(a, 2, 2)?;
            let a = t.conv2d(a, v[3], v[4], 1, 0)?;
            t.bilinear_resize(a, hw, hw)
        }));
    }
    out
}
