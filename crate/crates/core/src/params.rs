//! Uniform access to every trainable tensor of a model, in a fixed order.
//!
//! The optimizer, the finite-difference oracle and the checkpoint writer all
//! walk parameters through this trait, so they agree on ordering without
//! knowing anything about cell internals.

pub trait Parameters {
    /// Calls `f` once per trainable tensor with a stable name.
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, t| out.extend_from_slice(t));
        out
    }

    /// Overwrites all parameters from a flat buffer produced by [`flatten`].
    ///
    /// [`flatten`]: Parameters::flatten
    fn load_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_mut(&mut |_, t| {
            t.copy_from_slice(&flat[pos..pos + t.len()]);
            pos += t.len();
        });
        assert_eq!(pos, flat.len(), "flat parameter buffer length mismatch");
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, t| t.iter_mut().for_each(|v| *v = value));
    }

    /// `(name, len)` for each tensor, in visiting order.
    fn layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.len())));
        out
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    /// `self += other`, elementwise. Both must share a layout.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut pos = 0;
        self.visit_mut(&mut |_, t| {
            let n = t.len();
            for (a, b) in t.iter_mut().zip(&flat[pos..pos + n]) {
                *a += b;
            }
            pos += n;
        });
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, t| t.iter_mut().for_each(|v| *v *= factor));
    }

    fn norm_l2(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, t| s += t.iter().map(|v| v * v).sum::<f64>());
        s.sqrt()
    }
}

/// A zeroed copy, used as a gradient accumulator.
pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.fill(0.0);
    z
}
