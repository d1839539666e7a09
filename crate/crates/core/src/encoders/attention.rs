use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, matvec_acc, matvec_t_acc, outer_acc, softmax, ParamId, Tensor};

use super::SlotSource;

/// Self-attention over the states of the last GRU layer.
///
/// `u_t = tanh(M_a h_t + b_a)`, scores `u_t · u_S` against the last real
/// position, `a = softmax(scores)`, and `h2_t = |S| a_t u_t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayer {
    pub ma: ParamId,
    pub ba: ParamId,
    width: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub u: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub weighted: Vec<Vec<f64>>,
}

impl AttentionLayer {
    pub(crate) fn build(src: &mut SlotSource<'_>, prefix: &str, width: usize) -> Result<Self> {
        Ok(AttentionLayer {
            ma: src.matrix(&format!("{prefix}.ma"), width, width)?,
            ba: src.bias(&format!("{prefix}.ba"), width)?,
            width,
        })
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.ma, self.ba]
    }

    /// `states` holds only the real (unpadded) positions.
    pub fn forward(&self, p: &[Tensor], states: &[Vec<f64>]) -> Result<AttentionTrace> {
        if states.is_empty() {
            return Err(Error::Contract("attention over an empty sequence".into()));
        }
        let u: Vec<Vec<f64>> = states
            .iter()
            .map(|h| {
                if h.len() != self.width {
                    return Err(Error::dim(
                        "attention_layer",
                        format!("state width {} but M_a is {0}x{0}", self.width),
                    ));
                }
                let mut a = p[self.ba].data().to_vec();
                matvec_acc(&p[self.ma], h, &mut a);
                a.iter_mut().for_each(|v| *v = v.tanh());
                Ok(a)
            })
            .collect::<Result<_>>()?;
        let last = u.last().expect("non-empty");
        let scores: Vec<f64> = u.iter().map(|ut| dot(ut, last)).collect();
        let weights = softmax(&scores)?;
        let len = states.len() as f64;
        let weighted = u
            .iter()
            .zip(&weights)
            .map(|(ut, &a)| ut.iter().map(|v| len * a * v).collect())
            .collect();
        Ok(AttentionTrace { u, weights, weighted })
    }

    /// Backward from the gradients of `u` and of the attention weights.
    /// Returns the gradients of the input states.
    pub fn backward(
        &self,
        p: &[Tensor],
        states: &[Vec<f64>],
        tr: &AttentionTrace,
        mut du: Vec<Vec<f64>>,
        da: &[f64],
        g: &mut [Tensor],
    ) -> Vec<Vec<f64>> {
        let n = states.len();
        // softmax backward
        let mean: f64 = tr.weights.iter().zip(da).map(|(a, d)| a * d).sum();
        let de: Vec<f64> = tr.weights.iter().zip(da).map(|(a, d)| a * (d - mean)).collect();
        let last = &tr.u[n - 1];
        let mut du_last = vec![0.0; self.width];
        for t in 0..n {
            axpy(de[t], last, &mut du[t]);
            axpy(de[t], &tr.u[t], &mut du_last);
        }
        axpy(1.0, &du_last, &mut du[n - 1]);

        let mut dh = vec![vec![0.0; self.width]; n];
        for t in 0..n {
            let dpre: Vec<f64> = du[t]
                .iter()
                .zip(&tr.u[t])
                .map(|(d, u)| d * (1.0 - u * u))
                .collect();
            outer_acc(&mut g[self.ma], &dpre, &states[t]);
            axpy(1.0, &dpre, g[self.ba].data_mut());
            matvec_t_acc(&p[self.ma], &dpre, &mut dh[t]);
        }
        dh
    }
}

/// Pool the attention output into one vector.
///
/// Doubly weighted (default): `(1/|S|) Σ a_t h2_t`, which equals `Σ a_t² u_t`.
/// Single weighted: `(1/|S|) Σ h2_t = Σ a_t u_t`.
pub fn attentive_pool(tr: &AttentionTrace, single_weight: bool) -> Vec<f64> {
    let n = tr.u.len() as f64;
    let mut out = vec![0.0; tr.u[0].len()];
    for (h2, &a) in tr.weighted.iter().zip(&tr.weights) {
        let coef = if single_weight { 1.0 / n } else { a / n };
        axpy(coef, h2, &mut out);
    }
    out
}

/// Gradients `(du, da)` of [`attentive_pool`] given the output gradient.
pub fn attentive_pool_backward(tr: &AttentionTrace, dout: &[f64], single_weight: bool) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut du = Vec::with_capacity(tr.u.len());
    let mut da = Vec::with_capacity(tr.u.len());
    for (u, &a) in tr.u.iter().zip(&tr.weights) {
        let proj = dot(u, dout);
        if single_weight {
            du.push(dout.iter().map(|d| a * d).collect());
            da.push(proj);
        } else {
            du.push(dout.iter().map(|d| a * a * d).collect());
            da.push(2.0 * a * proj);
        }
    }
    (du, da)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(width: usize) -> (ParamStore, AttentionLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = {
            let mut src = SlotSource::create(&mut store, &mut rng);
            AttentionLayer::build(&mut src, "att", width).unwrap()
        };
        (store, l)
    }

    #[test]
    fn singleton_sequence() {
        let (store, l) = layer(3);
        let tr = l.forward(store.values(), &[vec![0.2, -0.1, 0.5]]).unwrap();
        assert_eq!(tr.weights, vec![1.0]);
        assert_eq!(tr.weighted[0], tr.u[0]);
    }

    #[test]
    fn constant_projection_gives_uniform_weights() {
        let (mut store, l) = layer(3);
        store.value_mut(l.ma).fill(0.0);
        store.value_mut(l.ba).data_mut().copy_from_slice(&[0.3, -0.2, 0.9]);
        let states = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 4.0], vec![0.5, 0.5, 0.5], vec![9.0, 1.0, 0.0]];
        let tr = l.forward(store.values(), &states).unwrap();
        for a in &tr.weights {
            assert!((a - 0.25).abs() < 1e-15);
        }
        // uniform case: pooled output is u / |S|
        let pooled = attentive_pool(&tr, false);
        for (p, u) in pooled.iter().zip(&tr.u[0]) {
            assert!((p - u / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_form_a_distribution() {
        let (store, l) = layer(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let states: Vec<Vec<f64>> = (0..6).map(|_| Tensor::uniform(4, 1, 2.0, &mut rng).into_vec()).collect();
        let tr = l.forward(store.values(), &states).unwrap();
        assert!((tr.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(tr.weights.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}
