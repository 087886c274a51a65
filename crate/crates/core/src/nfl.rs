//! Stack of neural Fourier layers.
//!
//! Each layer computes `x + gelu(spectral(x) + conv(x))` (post-sum residual) or, with
//! [`ResidualForm::ActivateSum`], `gelu(spectral(x) + conv(x) + x)`. GELU satisfies
//! `gelu(0) = 0`, so zero weights make a post-sum layer the identity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{check_support, conv2d};
use crate::error::Result;
use crate::spectral::{check_modes, spectral_conv, weight_shape};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ResidualForm {
    /// `x + act(spectral(x) + conv(x))`
    #[default]
    PostSum,
    /// `act(spectral(x) + conv(x) + x)`
    ActivateSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NflLayer {
    pub spec_re: ParamId,
    pub spec_im: ParamId,
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NflStack {
    pub width: usize,
    pub modes_lat: usize,
    pub modes_lon: usize,
    pub kernel_size: usize,
    pub residual: ResidualForm,
    pub layers: Vec<NflLayer>,
}

impl NflStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        n_layers: usize,
        modes_lat: usize,
        modes_lon: usize,
        kernel_size: usize,
        residual: ResidualForm,
        rng: &mut R,
    ) -> Self {
        let spec_std = 0.5 / width as f64;
        let conv_std = 0.5 / ((width * kernel_size * kernel_size) as f64).sqrt();
        let layers = (0..n_layers)
            .map(|l| {
                let shp = weight_shape(modes_lat, modes_lon, width, width);
                NflLayer {
                    spec_re: store.add(format!("{prefix}.{l}.spectral_re"), Tensor::randn(shp.clone(), spec_std, rng), true),
                    spec_im: store.add(format!("{prefix}.{l}.spectral_im"), Tensor::randn(shp, spec_std, rng), true),
                    conv_kernel: store.add(
                        format!("{prefix}.{l}.conv_kernel"),
                        Tensor::randn(vec![width, width, kernel_size, kernel_size], conv_std, rng),
                        true,
                    ),
                    conv_bias: store.add(format!("{prefix}.{l}.conv_bias"), Tensor::zeros(vec![width]), false),
                }
            })
            .collect();
        NflStack { width, modes_lat, modes_lon, kernel_size, residual, layers }
    }

    pub fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        check_support(h, w, self.kernel_size, self.kernel_size)?;
        check_modes(h, w, self.modes_lat, self.modes_lon)
    }

    pub fn layer_forward(&self, tape: &mut Tape, store: &ParamStore, layer: &NflLayer, x: Var, periodic: bool) -> Var {
        let wr = tape.param(store, layer.spec_re);
        let wi = tape.param(store, layer.spec_im);
        let k = tape.param(store, layer.conv_kernel);
        let b = tape.param(store, layer.conv_bias);
        let s = spectral_conv(tape, x, wr, wi, self.modes_lat, self.modes_lon);
        let c = conv2d(tape, x, k, b, periodic);
        let sum = tape.add(s, c);
        match self.residual {
            ResidualForm::PostSum => {
                let a = tape.gelu(sum);
                tape.add(a, x)
            }
            ResidualForm::ActivateSum => {
                let pre = tape.add(sum, x);
                tape.gelu(pre)
            }
        }
    }

    /// Shape-preserving forward pass over `[width, H, W]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, periodic: bool) -> Result<Var> {
        let shp = tape.shape(x).to_vec();
        assert_eq!(shp[0], self.width, "nfl width");
        self.check_grid(shp[1], shp[2])?;
        let mut h = x;
        for layer in &self.layers {
            h = self.layer_forward(tape, store, layer, h, periodic);
        }
        Ok(h)
    }
}

/// Plain residual convolution stack `x + gelu(conv(x))`, used where the Fourier layers are
/// ablated and by the ConvCNP-style baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStack {
    pub width: usize,
    pub kernel_size: usize,
    pub layers: Vec<(ParamId, ParamId)>,
}

impl ConvStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        n_layers: usize,
        kernel_size: usize,
        rng: &mut R,
    ) -> Self {
        let std = 0.5 / ((width * kernel_size * kernel_size) as f64).sqrt();
        let layers = (0..n_layers)
            .map(|l| {
                (
                    store.add(
                        format!("{prefix}.{l}.conv_kernel"),
                        Tensor::randn(vec![width, width, kernel_size, kernel_size], std, rng),
                        true,
                    ),
                    store.add(format!("{prefix}.{l}.conv_bias"), Tensor::zeros(vec![width]), false),
                )
            })
            .collect();
        ConvStack { width, kernel_size, layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, periodic: bool) -> Result<Var> {
        let shp = tape.shape(x).to_vec();
        check_support(shp[1], shp[2], self.kernel_size, self.kernel_size)?;
        let mut h = x;
        for &(k, b) in &self.layers {
            let kv = tape.param(store, k);
            let bv = tape.param(store, b);
            let c = conv2d(tape, h, kv, bv, periodic);
            let a = tape.gelu(c);
            h = tape.add(a, h);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed_stack(store: &mut ParamStore, width: usize) -> NflStack {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stack = NflStack::new(store, "nfl", width, 2, 2, 3, 3, ResidualForm::PostSum, &mut rng);
        for l in &stack.layers {
            for id in [l.spec_re, l.spec_im, l.conv_kernel, l.conv_bias] {
                store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        stack
    }

    #[test]
    fn zero_weights_give_identity() {
        let mut store = ParamStore::new();
        let stack = zeroed_stack(&mut store, 3);
        let x: Vec<f64> = (0..3 * 4 * 8).map(|k| (k as f64 * 0.3).cos()).collect();
        let mut t = Tape::new();
        let xv = t.leaf(Tensor::new(vec![3, 4, 8], x.clone()));
        let y = stack.forward(&mut t, &store, xv, true).unwrap();
        assert_eq!(t.value(y).data, x);
    }

    #[test]
    fn rejects_grids_below_kernel_or_nyquist() {
        let mut store = ParamStore::new();
        let stack = zeroed_stack(&mut store, 2);
        let mut t = Tape::new();
        let xv = t.leaf(Tensor::zeros(vec![2, 1, 8]));
        assert!(stack.forward(&mut t, &store, xv, true).is_err());
        let xv = t.leaf(Tensor::zeros(vec![2, 4, 2]));
        assert!(stack.forward(&mut t, &store, xv, true).is_err());
    }

    #[test]
    fn shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let stack = NflStack::new(&mut store, "nfl", 4, 4, 2, 3, 3, ResidualForm::ActivateSum, &mut rng);
        let mut t = Tape::new();
        let xv = t.leaf(Tensor::randn(vec![4, 6, 10], 1.0, &mut rng));
        let y = stack.forward(&mut t, &store, xv, true).unwrap();
        assert_eq!(t.shape(y), &[4, 6, 10]);
    }
}
