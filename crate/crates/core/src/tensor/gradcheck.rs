use super::{Element, Result, Tape, Tensor, TensorError, Var};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval<E, F>(f: &F, x: &Tensor<E>) -> Result<E>
where
    E: Element,
    F: for<'t> Fn(&'t Tape<E>, Var<'t, E>) -> Result<Var<'t, E>>,
{
    let tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let out = f(&tape, v)?;
    let o = out.value();
    if o.numel() != 1 {
        return Err(TensorError::NonScalarOutput(o.shape().to_vec()));
    }
    Ok(o.item())
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// using central differences with step `h`.
pub fn check_gradient<E, F>(f: F, x: &Tensor<E>, h: f64) -> Result<f64>
where
    E: Element,
    F: for<'t> Fn(&'t Tape<E>, Var<'t, E>) -> Result<Var<'t, E>>,
{
    check_gradient_with(f, x, h).map(|r| r.max_rel_error)
}

pub fn check_gradient_with<E, F>(f: F, x: &Tensor<E>, h: f64) -> Result<GradCheckReport>
where
    E: Element,
    F: for<'t> Fn(&'t Tape<E>, Var<'t, E>) -> Result<Var<'t, E>>,
{
    if !(h > 0.0) {
        return Err(TensorError::Invalid {
            op: "check_gradient",
            msg: format!("step must be positive, got {h}"),
        });
    }
    let first = eval(&f, x)?;
    let second = eval(&f, x)?;
    if first != second {
        return Err(TensorError::NonDeterministic {
            first: first.to_f64().unwrap(),
            second: second.to_f64().unwrap(),
        });
    }

    let analytic = {
        let tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let out = f(&tape, v)?;
        tape.backward(out)?.get(v)
    };

    let hh = E::lit(h);
    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + hh;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - hh;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down).to_f64().unwrap() / (2.0 * h));
    }

    let analytic: Vec<f64> = analytic.data().iter().map(|v| v.to_f64().unwrap()).collect();
    let mut worst = (0.0, 0);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::new([5], vec![0.3f64, -1.0, 2.0, 0.0, 7.5]).unwrap();
        let err = check_gradient(|_, v| Ok(v.sum()), &x, 1e-3).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn f32_differences_are_roundoff_limited() {
        // Same function in f32: the step itself is not representable exactly.
        let x = Tensor::new([2], vec![7.5f32, 0.3]).unwrap();
        let err = check_gradient(|_, v| Ok(v.sum()), &x, 1e-3).unwrap();
        assert!(err > 1e-7 && err < 1e-3, "{err}");
    }

    #[test]
    fn rejects_nondeterministic_function() {
        let calls = Cell::new(0u32);
        let x = Tensor::new([2], vec![1.0f64, 2.0]).unwrap();
        let err = check_gradient(
            |_, v| {
                calls.set(calls.get() + 1);
                Ok(v.sum().add_scalar(calls.get() as f64))
            },
            &x,
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonDeterministic { .. }));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::new([1], vec![1.0f64]).unwrap();
        assert!(check_gradient(|_, v| Ok(v.sum()), &x, 0.0).is_err());
    }
}
