//! Central finite-difference gradient checking for tape programs.

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over all checked entries.
    pub max_rel_err: f64,
    /// Number of input entries perturbed.
    pub entries: usize,
}

/// Magnitude below which relative error is measured against `floor` instead.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of the scalar returned by `program` with
/// central differences of step `eps`, for every entry of every input.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, program: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t)).collect();
        let out = program(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = program(&mut tape, &vars)?;
    if tape.shape(out).iter().product::<usize>() != 1 {
        return Err(Error::Contract("gradient check needs a scalar program".into()));
    }
    let grads = tape.backward(out)?;
    let mut work = inputs.clone();
    let mut max_rel_err: f64 = 0.0;
    let mut entries = 0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let x = inputs[k].data()[i];
            work[k].data_mut()[i] = x + eps;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x - eps;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel_err = max_rel_err.max(rel);
            entries += 1;
        }
    }
    Ok(GradCheck { max_rel_err, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let ok = check_gradients(&[x.clone()], 1e-6, |t, v| {
            let s = t.square(v[0])?;
            t.sum(s)
        })
        .unwrap();
        assert!(ok.max_rel_err < 1e-8, "{ok:?}");
        assert_eq!(ok.entries, 3);
        // A straight-through identity over x² reports gradient 1 where the true derivative is 2x.
        let bad = check_gradients(&[x], 1e-6, |t, v| {
            let s = t.straight_through(v[0], |a| (a * a, true))?;
            t.sum(s)
        })
        .unwrap();
        assert!(bad.max_rel_err > 0.1, "{bad:?}");
    }
}
