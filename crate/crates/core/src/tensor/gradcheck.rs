use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter name, flat index)` of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Gradients smaller than this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

/// Compares autodiff gradients of `build` against central differences on
/// every element of every trainable parameter in `store`.
///
/// `build` must be a pure function of the parameter values. Gradients in
/// `store` are cleared on entry and hold the autodiff result on return.
pub fn gradient_check<F>(store: &mut ParamStore, epsilon: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Domain(format!(
            "finite-difference epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store)?;
        Ok(tape.value(loss).item())
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    tape.backward(loss, store)?;
    drop(tape);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for id in store.ids().collect::<Vec<_>>() {
        if !store.get(id).requires_grad {
            continue;
        }
        let n = store.get(id).value.numel();
        let analytic = store.get(id).grad.clone().unwrap_or_else(|| vec![0.0; n]);
        #[allow(clippy::needless_range_loop)]
        for k in 0..n {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + epsilon;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - epsilon;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_layer_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::randn(&[4, 3], 0.5, &mut rng));
        let b = store.add("b", Tensor::randn(&[3], 0.5, &mut rng));
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let report = gradient_check(&mut store, 1e-5, |tape, store| {
            let xv = tape.constant(x.clone());
            let (wv, bv) = (tape.param(store, w), tape.param(store, b));
            let y = tape.matmul(xv, wv)?;
            let y = tape.add(y, bv)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert_eq!(report.checked, 15);
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn epsilon_range_enforced() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[1]));
        let r = gradient_check(&mut store, 1e-2, |tape, store| {
            let id = store.find("w").unwrap();
            let v = tape.param(store, id);
            Ok(tape.sum(v))
        });
        assert!(matches!(r, Err(Error::Domain(_))));
    }
}
