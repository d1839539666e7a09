use crate::error::{Error, Result};
use crate::numerics::{axpy, matvec_acc, matvec_t_acc, outer_acc, ParamId, Tensor};

use super::SlotSource;

/// Narrow 1-D convolution: position `t` is `tanh(M_c [x_t; ..; x_{t+h-1}] + b_c)`.
/// `kernel` is `out x (h * in)`.
pub fn conv_layer(xs: &[Vec<f64>], kernel: &Tensor, bias: &[f64], h: usize) -> Result<Vec<Vec<f64>>> {
    if h == 0 || xs.len() < h {
        return Err(Error::Contract(format!(
            "convolution needs at least {h} positions, got {}",
            xs.len()
        )));
    }
    let width = xs[0].len();
    if kernel.cols() != h * width || kernel.rows() != bias.len() {
        return Err(Error::dim(
            "conv_layer",
            format!(
                "kernel is {}x{}, expected {}x{}",
                kernel.rows(),
                kernel.cols(),
                bias.len(),
                h * width
            ),
        ));
    }
    let mut window = Vec::with_capacity(h * width);
    Ok((0..=xs.len() - h)
        .map(|t| {
            window.clear();
            for x in &xs[t..t + h] {
                window.extend_from_slice(x);
            }
            let mut out = bias.to_vec();
            matvec_acc(kernel, &window, &mut out);
            out.iter_mut().for_each(|v| *v = v.tanh());
            out
        })
        .collect())
}

/// Elementwise max over windows of `size` with stride `size`; the last
/// window may be shorter. Returns the pooled vectors and, per output element,
/// the source position of its maximum (first one on ties).
pub fn max_pool(xs: &[Vec<f64>], size: usize) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let mut pooled = Vec::new();
    let mut arg = Vec::new();
    for (w, chunk) in xs.chunks(size).enumerate() {
        let mut best = chunk[0].clone();
        let mut idx = vec![w * size; best.len()];
        for (k, x) in chunk.iter().enumerate().skip(1) {
            for d in 0..x.len() {
                if x[d] > best[d] {
                    best[d] = x[d];
                    idx[d] = w * size + k;
                }
            }
        }
        pooled.push(best);
        arg.push(idx);
    }
    (pooled, arg)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub mc: ParamId,
    pub bc: ParamId,
    input: usize,
    out: usize,
    kernel: usize,
}

impl ConvLayer {
    pub(crate) fn build(src: &mut SlotSource<'_>, prefix: &str, input: usize, out: usize, kernel: usize) -> Result<Self> {
        Ok(ConvLayer {
            mc: src.matrix(&format!("{prefix}.mc"), out, kernel * input)?,
            bc: src.bias(&format!("{prefix}.bc"), out)?,
            input,
            out,
            kernel,
        })
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.mc, self.bc]
    }

    pub fn out_width(&self) -> usize {
        self.out
    }

    pub fn forward(&self, p: &[Tensor], xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        conv_layer(xs, &p[self.mc], p[self.bc].data(), self.kernel)
    }

    /// `outs` are the forward outputs (post-tanh); returns input gradients.
    pub fn backward(
        &self,
        p: &[Tensor],
        xs: &[Vec<f64>],
        outs: &[Vec<f64>],
        douts: &[Vec<f64>],
        g: &mut [Tensor],
    ) -> Vec<Vec<f64>> {
        let mut dxs = vec![vec![0.0; self.input]; xs.len()];
        let mut window = Vec::with_capacity(self.kernel * self.input);
        for t in 0..outs.len() {
            let dpre: Vec<f64> = douts[t]
                .iter()
                .zip(&outs[t])
                .map(|(d, o)| d * (1.0 - o * o))
                .collect();
            window.clear();
            for x in &xs[t..t + self.kernel] {
                window.extend_from_slice(x);
            }
            outer_acc(&mut g[self.mc], &dpre, &window);
            axpy(1.0, &dpre, g[self.bc].data_mut());
            let mut dwin = vec![0.0; window.len()];
            matvec_t_acc(&p[self.mc], &dpre, &mut dwin);
            for (k, chunk) in dwin.chunks(self.input).enumerate() {
                axpy(1.0, chunk, &mut dxs[t + k]);
            }
        }
        dxs
    }
}
