use super::Tensor;

/// Anything that exposes its trainable tensors in a fixed order.
pub trait ParamSlots {
    fn slots(&self) -> Vec<&Tensor>;
    fn slots_mut(&mut self) -> Vec<&mut Tensor>;
}

impl ParamSlots for Tensor {
    fn slots(&self) -> Vec<&Tensor> {
        vec![self]
    }

    fn slots_mut(&mut self) -> Vec<&mut Tensor> {
        vec![self]
    }
}

impl ParamSlots for Vec<Tensor> {
    fn slots(&self) -> Vec<&Tensor> {
        self.iter().collect()
    }

    fn slots_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }
}

/// Central-difference gradient estimate of `f` at `params`, one entry per
/// scalar slot: `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)`.
///
/// `params` is perturbed in place and restored bit-exactly before returning.
pub fn finite_difference<P, F>(mut f: F, params: &mut P, eps: f64) -> Vec<Vec<f64>>
where
    P: ParamSlots,
    F: FnMut(&P) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let sizes: Vec<usize> = params.slots().iter().map(|t| t.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for (slot, &n) in sizes.iter().enumerate() {
        let mut g = Vec::with_capacity(n);
        for k in 0..n {
            let orig = params.slots()[slot].data()[k];
            params.slots_mut()[slot].data_mut()[k] = orig + eps;
            let plus = f(params);
            params.slots_mut()[slot].data_mut()[k] = orig - eps;
            let minus = f(params);
            params.slots_mut()[slot].data_mut()[k] = orig;
            g.push((plus - minus) / (2.0 * eps));
        }
        out.push(g);
    }
    out
}
