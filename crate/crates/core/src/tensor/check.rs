use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Compares tape gradients with central differences, coordinate by
/// coordinate, and returns the worst error.
///
/// The error of one coordinate is `|auto − numeric| / max(1, |auto|, |numeric|)`:
/// relative for large gradients, absolute below unit magnitude where f32
/// differencing noise would otherwise dominate. The step actually taken is
/// `(p + eps) − (p − eps)` as represented in f32, not `2·eps`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f32) -> Result<f32>
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Vec<f32>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(v, p)| grads.get(*v).map_or_else(|| vec![0.0; p.numel()], <[f32]>::to_vec))
            .collect()
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = ps.iter().map(|p| tape.frozen(p)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0] as f64)
    };

    let mut worst = 0.0f32;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for c in 0..p.numel() {
            let orig = p.data()[c];
            let hi = orig + eps;
            let lo = orig - eps;
            work[pi].data_mut()[c] = hi;
            let f_hi = eval(&work)?;
            work[pi].data_mut()[c] = lo;
            let f_lo = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (f_hi - f_lo) / (hi as f64 - lo as f64);
            let auto = analytic[pi][c] as f64;
            let denom = 1f64.max(auto.abs()).max(numeric.abs());
            worst = worst.max(((auto - numeric).abs() / denom) as f32);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|t, v| Ok(t.sum_squares(v[0])), std::slice::from_ref(&p), 0.0625).unwrap();
        assert!(err < 1e-6, "{err}");

        let mut tape = Tape::new();
        let x = tape.param(&p);
        let s = tape.sum_squares(x);
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap();
        let c = Tensor::scalar(4.0);
        let err = grad_check(
            move |t, _v| {
                let k = t.leaf(c.clone(), false);
                Ok(t.sum(k))
            },
            &[p],
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
