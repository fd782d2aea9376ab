//! Central finite-difference verification of [`Graph::backward`].

use std::collections::BTreeMap;

use super::{Graph, NumericsError, Tensor, Var};

/// Denominator floor of the relative error, so entries whose true
/// gradient is (numerically) zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `backward()` against central differences for every parameter
/// leaf of `graph`. The graph's leaf values are restored afterwards.
pub fn finite_diff_check(
    graph: &mut Graph,
    loss: Var,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, NumericsError> {
    let grads = graph.backward(loss)?.into_params();
    finite_diff_check_against(graph, loss, &grads, step, tolerance)
}

/// Like [`finite_diff_check`] but against caller-supplied gradients.
pub fn finite_diff_check_against(
    graph: &mut Graph,
    loss: Var,
    grads: &BTreeMap<String, Tensor>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, NumericsError> {
    let mut bindings = graph.bindings();
    let mut params = Vec::new();

    for (name, analytic) in grads {
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for idx in 0..analytic.len() {
            let orig = bindings[name].data()[idx];
            let mut eval = |delta: f64| -> Result<f64, NumericsError> {
                bindings.get_mut(name).unwrap().data_mut()[idx] = orig + delta;
                graph.forward(&bindings)?;
                Ok(graph.value(loss).item())
            };
            let plus = eval(step)?;
            let minus = eval(-step)?;
            bindings.get_mut(name).unwrap().data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[idx];
            let r = rel_err(a, numeric);
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            if r > check.max_rel_err {
                check.max_rel_err = r;
                check.worst_index = idx;
            }
        }
        params.push(check);
    }
    graph.forward(&bindings)?;
    Ok(GradCheckReport {
        params,
        tolerance,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    /// One GRU step with every weight zero.
    fn zero_gru_step() -> (Graph, Var) {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::matrix(1, 3, vec![0.3, -0.2, 0.5]).unwrap()).unwrap();
        let h = g.input("h", Tensor::matrix(1, 2, vec![0.4, -0.7]).unwrap()).unwrap();
        let w = g.param("W", Tensor::zeros(&[3, 2])).unwrap();
        let u = g.param("U", Tensor::zeros(&[2, 2])).unwrap();
        let wz = g.param("W_z", Tensor::zeros(&[3, 2])).unwrap();
        let uz = g.param("U_z", Tensor::zeros(&[2, 2])).unwrap();
        let wr = g.param("W_r", Tensor::zeros(&[3, 2])).unwrap();
        let ur = g.param("U_r", Tensor::zeros(&[2, 2])).unwrap();

        let xr = g.matmul(x, wr).unwrap();
        let hr = g.matmul(h, ur).unwrap();
        let r = g.add(xr, hr).unwrap();
        let r = g.sigmoid(r).unwrap();
        let xz = g.matmul(x, wz).unwrap();
        let hz = g.matmul(h, uz).unwrap();
        let z = g.add(xz, hz).unwrap();
        let z = g.sigmoid(z).unwrap();
        let xw = g.matmul(x, w).unwrap();
        let hu = g.matmul(h, u).unwrap();
        let rhu = g.mul(r, hu).unwrap();
        let pre = g.add(xw, rhu).unwrap();
        let cand = g.tanh(pre).unwrap();
        let diff = g.sub(h, cand).unwrap();
        let zd = g.mul(z, diff).unwrap();
        let out = g.add(cand, zd).unwrap();
        let sq = g.mul(out, out).unwrap();
        let loss = g.sum(sq).unwrap();
        (g, loss)
    }

    #[test]
    fn zero_weight_gru_step_passes() {
        let (mut g, loss) = zero_gru_step();
        let report = finite_diff_check(&mut g, loss, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let (mut g, loss) = zero_gru_step();
        let mut grads = g.backward(loss).unwrap().into_params();
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        }
        let report = finite_diff_check_against(&mut g, loss, &grads, 1e-5, 1e-4).unwrap();
        assert!(!report.passed());
    }

    /// Three dense tanh/sigmoid layers with a softmax head touch every
    /// primitive the model uses.
    fn random_three_layer(seed: u64) -> (Graph, Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.input("x", random(&mut rng, &[3, 4], 1.0)).unwrap();
        let w1 = g.param("w1", random(&mut rng, &[4, 5], 0.8)).unwrap();
        let b1 = g.param("b1", random(&mut rng, &[5], 0.5)).unwrap();
        let w2 = g.param("w2", random(&mut rng, &[5, 5], 0.8)).unwrap();
        let w3 = g.param("w3", random(&mut rng, &[10, 6], 0.8)).unwrap();
        let s = g.param("s", random(&mut rng, &[3], 1.0)).unwrap();

        let h1 = g.matmul(x, w1).unwrap();
        let h1 = g.add_row(h1, b1).unwrap();
        let h1 = g.tanh(h1).unwrap();
        let h2 = g.matmul(h1, w2).unwrap();
        let h2 = g.sigmoid(h2).unwrap();
        let h2 = g.row_scale(h2, s).unwrap();
        let cat = g.concat(&[h1, h2]).unwrap();
        let logits = g.matmul(cat, w3).unwrap();
        let lp = g.log_softmax(logits).unwrap();
        let picked = g.pick(lp, vec![0, 5, 2]).unwrap();
        let sm = g.masked_softmax(logits, vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0].repeat(3)).unwrap();
        let half = g.slice(sm, 1, 3).unwrap();
        let m = g.mean(half, crate::numerics::Axis::Rows).unwrap();
        let ex = g.exp(m).unwrap();
        let lg = g.log(ex).unwrap();
        let t = g.transpose(lg).unwrap();
        let gathered = g.gather_rows(h2, vec![Some(2), None, Some(0)]).unwrap();
        let gs = g.mean(gathered, crate::numerics::Axis::Cols).unwrap();
        let a = g.sum(picked).unwrap();
        let b = g.sum(t).unwrap();
        let c = g.sum(gs).unwrap();
        let ab = g.sub(a, b).unwrap();
        let abc = g.add(ab, c).unwrap();
        let loss = g.scale(abc, -0.5).unwrap();
        (g, loss)
    }

    #[test]
    fn random_three_layer_graphs_match_central_differences() {
        for seed in 0..20 {
            let (mut g, loss) = random_three_layer(seed);
            let report = finite_diff_check(&mut g, loss, 1e-5, 1e-6).unwrap();
            assert!(report.passed(), "seed {seed}: {:?}", report.worst());
        }
    }

    #[test]
    fn check_restores_leaf_values() {
        let (mut g, loss) = random_three_layer(3);
        let before = g.value(loss).item();
        finite_diff_check(&mut g, loss, 1e-5, 1e-4).unwrap();
        assert_eq!(g.value(loss).item().to_bits(), before.to_bits());
    }
}
