use crate::error::{Error, Result};
use crate::numerics::{matvec_acc, matvec_t_acc, outer_acc, sigmoid, ParamId, Tensor};

use super::SlotSource;

/// One GRU layer. The update gate `z` weights the new candidate state:
/// `h_t = z ⊙ h̃ + (1 - z) ⊙ h_{t-1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GruLayer {
    pub mz: ParamId,
    pub nz: ParamId,
    pub bz: ParamId,
    pub mr: ParamId,
    pub nr: ParamId,
    pub br: ParamId,
    pub ms: ParamId,
    pub ns: ParamId,
    pub bs: ParamId,
    input: usize,
    hidden: usize,
}

/// Intermediate values of one step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GruStep {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    /// `N_s h_{t-1}` before the reset gate is applied.
    pub ns_h: Vec<f64>,
    pub cand: Vec<f64>,
    pub h: Vec<f64>,
}

impl GruLayer {
    pub(crate) fn build(src: &mut SlotSource<'_>, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        let mut m = |n: &str| src.matrix(&format!("{prefix}.{n}"), hidden, input);
        let (mz, mr, ms) = (m("mz")?, m("mr")?, m("ms")?);
        let mut n = |n: &str| src.matrix(&format!("{prefix}.{n}"), hidden, hidden);
        let (nz, nr, ns) = (n("nz")?, n("nr")?, n("ns")?);
        let mut b = |n: &str| src.bias(&format!("{prefix}.{n}"), hidden);
        let (bz, br, bs) = (b("bz")?, b("br")?, b("bs")?);
        Ok(GruLayer {
            mz,
            nz,
            bz,
            mr,
            nr,
            br,
            ms,
            ns,
            bs,
            input,
            hidden,
        })
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [self.mz, self.nz, self.bz, self.mr, self.nr, self.br, self.ms, self.ns, self.bs]
    }

    fn check(&self, x: &[f64], h_prev: &[f64]) -> Result<()> {
        if x.len() != self.input || h_prev.len() != self.hidden {
            return Err(Error::dim(
                "gru_step",
                format!(
                    "layer expects input {} / state {}, got {} / {}",
                    self.input,
                    self.hidden,
                    x.len(),
                    h_prev.len()
                ),
            ));
        }
        Ok(())
    }

    pub fn step(&self, p: &[Tensor], x: &[f64], h_prev: &[f64]) -> Result<GruStep> {
        self.check(x, h_prev)?;
        let gate = |m: ParamId, n: ParamId, b: ParamId| {
            let mut a = p[b].data().to_vec();
            matvec_acc(&p[m], x, &mut a);
            matvec_acc(&p[n], h_prev, &mut a);
            a.iter_mut().for_each(|v| *v = sigmoid(*v));
            a
        };
        let z = gate(self.mz, self.nz, self.bz);
        let r = gate(self.mr, self.nr, self.br);
        let mut ns_h = vec![0.0; self.hidden];
        matvec_acc(&p[self.ns], h_prev, &mut ns_h);
        let mut cand = p[self.bs].data().to_vec();
        matvec_acc(&p[self.ms], x, &mut cand);
        for i in 0..self.hidden {
            cand[i] = (cand[i] + r[i] * ns_h[i]).tanh();
        }
        let h = (0..self.hidden)
            .map(|i| z[i] * cand[i] + (1.0 - z[i]) * h_prev[i])
            .collect();
        Ok(GruStep { z, r, ns_h, cand, h })
    }

    /// Accumulates parameter gradients into `g`, and the input / previous-state
    /// gradients into `dx` / `dh_prev`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_backward(
        &self,
        p: &[Tensor],
        x: &[f64],
        h_prev: &[f64],
        st: &GruStep,
        dh: &[f64],
        g: &mut [Tensor],
        dx: &mut [f64],
        dh_prev: &mut [f64],
    ) {
        let n = self.hidden;
        let mut da_s = vec![0.0; n];
        let mut da_z = vec![0.0; n];
        let mut da_r = vec![0.0; n];
        let mut dns = vec![0.0; n];
        for i in 0..n {
            let (z, r, c) = (st.z[i], st.r[i], st.cand[i]);
            dh_prev[i] += dh[i] * (1.0 - z);
            let dz = dh[i] * (c - h_prev[i]);
            da_z[i] = dz * z * (1.0 - z);
            da_s[i] = dh[i] * z * (1.0 - c * c);
            let dr = da_s[i] * st.ns_h[i];
            da_r[i] = dr * r * (1.0 - r);
            dns[i] = da_s[i] * r;
        }
        for (da, m, nn, b) in [
            (&da_z, self.mz, self.nz, self.bz),
            (&da_r, self.mr, self.nr, self.br),
        ] {
            outer_acc(&mut g[m], da, x);
            outer_acc(&mut g[nn], da, h_prev);
            crate::numerics::axpy(1.0, da, g[b].data_mut());
            matvec_t_acc(&p[m], da, dx);
            matvec_t_acc(&p[nn], da, dh_prev);
        }
        outer_acc(&mut g[self.ms], &da_s, x);
        crate::numerics::axpy(1.0, &da_s, g[self.bs].data_mut());
        matvec_t_acc(&p[self.ms], &da_s, dx);
        outer_acc(&mut g[self.ns], &dns, h_prev);
        matvec_t_acc(&p[self.ns], &dns, dh_prev);
    }

    /// Run over `xs` from a zero initial state.
    pub fn forward_seq(&self, p: &[Tensor], xs: &[Vec<f64>]) -> Result<Vec<GruStep>> {
        let mut steps: Vec<GruStep> = Vec::with_capacity(xs.len());
        let zero = vec![0.0; self.hidden];
        for x in xs {
            let prev = steps.last().map_or(zero.as_slice(), |s| s.h.as_slice());
            let st = self.step(p, x, prev)?;
            steps.push(st);
        }
        Ok(steps)
    }

    /// Backpropagation through time. `dhs[t]` is the gradient arriving at
    /// output `h_t` from above; returns the gradients of the inputs.
    pub fn backward_seq(
        &self,
        p: &[Tensor],
        xs: &[Vec<f64>],
        steps: &[GruStep],
        dhs: &[Vec<f64>],
        g: &mut [Tensor],
    ) -> Vec<Vec<f64>> {
        let n = self.hidden;
        let zero = vec![0.0; n];
        let mut dxs = vec![vec![0.0; self.input]; xs.len()];
        let mut carry = vec![0.0; n];
        for t in (0..xs.len()).rev() {
            let dh: Vec<f64> = dhs[t].iter().zip(&carry).map(|(a, b)| a + b).collect();
            let prev = if t == 0 { zero.as_slice() } else { steps[t - 1].h.as_slice() };
            let mut dprev = vec![0.0; n];
            self.step_backward(p, &xs[t], prev, &steps[t], &dh, g, &mut dxs[t], &mut dprev);
            carry = dprev;
        }
        dxs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_slots, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(input: usize, hidden: usize, seed: u64, zero: bool) -> (ParamStore, GruLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = {
            let mut src = SlotSource::create(&mut store, &mut rng);
            GruLayer::build(&mut src, "g", input, hidden).unwrap()
        };
        for id in l.ids() {
            if zero {
                store.value_mut(id).fill(0.0);
            } else {
                let (r, c) = store.value(id).shape();
                *store.value_mut(id) = Tensor::uniform(r, c, 0.7, &mut rng);
            }
        }
        (store, l)
    }

    #[test]
    fn zero_params_halve_the_state() {
        let (store, l) = layer(3, 3, 0, true);
        let st = l.step(store.values(), &[0.4, -1.0, 2.0], &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(st.h, vec![0.5, -1.0, 0.25]);
    }

    #[test]
    fn saturated_update_gate_takes_candidate() {
        let (mut store, l) = layer(2, 2, 0, true);
        store.value_mut(l.bz).fill(100.0);
        let st = l.step(store.values(), &[1.0, 1.0], &[0.8, -0.3]).unwrap();
        assert!(st.h.iter().all(|v| v.abs() < 1e-12), "{:?}", st.h);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (store, l) = layer(2, 3, 0, true);
        assert!(matches!(l.step(store.values(), &[1.0], &[0.0; 3]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn step_gradients_all_nine_tensors() {
        let (mut store, l) = layer(4, 4, 21, false);
        let x = vec![0.3, -0.5, 0.9, 0.1];
        let h0 = vec![0.2, -0.4, 0.6, -0.1];
        let w = [0.7, -1.3, 0.4, 1.1];
        let loss = |p: &[Tensor]| -> f64 {
            let st = l.step(p, &x, &h0).unwrap();
            st.h.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        {
            let (p, g) = store.split();
            let st = l.step(p, &x, &h0).unwrap();
            let mut dx = vec![0.0; 4];
            let mut dh = vec![0.0; 4];
            l.step_backward(p, &x, &h0, &st, &w, g, &mut dx, &mut dh);
        }
        let err = grad_check_slots(|s| loss(s.values()), &mut store, &l.ids(), 1e-5);
        assert!(err < 1e-4, "{err}");
    }
}
