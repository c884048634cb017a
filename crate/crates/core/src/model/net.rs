//! A small U-shaped encoder-decoder with two down- and two up-sampling
//! stages and skip connections. Output is a single logit per pixel.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{
    concat, relu_backward, relu_inplace, split, upsample2, upsample2_backward, Columns, Conv2d,
    ConvGrad, Tensor,
};
use super::Real;

/// Channel widths of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Widths {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Self { c1: 8, c2: 16, c3: 32 }
    }
}

/// Layer names in parameter order.
pub const LAYER_NAMES: [&str; 7] = ["enc1", "enc2", "enc3", "mid", "dec2", "dec1", "head"];

#[derive(Debug, Clone, PartialEq)]
pub struct Net<F> {
    pub widths: Widths,
    /// Ordered as [`LAYER_NAMES`].
    pub layers: Vec<Conv2d<F>>,
}

/// Everything the backward pass needs from a forward pass.
pub struct Cache<F> {
    dims: (usize, usize),
    cols: Vec<Columns<F>>,
    acts: Vec<Tensor<F>>,
}

pub type Grads = Vec<ConvGrad>;

impl<F: Real> Net<F> {
    /// He-normal weights, zero biases.
    pub fn new<R: Rng>(widths: Widths, rng: &mut R) -> Self {
        let Widths { c1, c2, c3 } = widths;
        let mut layers = vec![
            Conv2d::zeros(1, c1, 3, 1),
            Conv2d::zeros(c1, c2, 3, 2),
            Conv2d::zeros(c2, c3, 3, 2),
            Conv2d::zeros(c3, c3, 3, 1),
            Conv2d::zeros(c3 + c2, c2, 3, 1),
            Conv2d::zeros(c2 + c1, c1, 3, 1),
            Conv2d::zeros(c1, 1, 1, 1),
        ];
        for layer in &mut layers {
            let std = (2.0 / layer.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut layer.weight {
                *w = F::from_acc(normal.sample(rng));
            }
        }
        Self { widths, layers }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        self.layers.iter().map(ConvGrad::zeros_like).collect()
    }

    /// Forward pass; `x` is a single-channel plane with both sides
    /// divisible by 4. Returns logits and the cache.
    pub fn forward(&self, x: Tensor<F>) -> (Tensor<F>, Cache<F>) {
        debug_assert!(x.c == 1 && x.h % 4 == 0 && x.w % 4 == 0);
        let l = &self.layers;
        let dims = (x.h, x.w);
        let mut cols = Vec::with_capacity(7);
        let mut acts = Vec::with_capacity(6);

        let step = |i: usize, input: &Tensor<F>, relu: bool, cols: &mut Vec<Columns<F>>| {
            let c = l[i].im2col(input);
            let mut y = l[i].forward_cols(&c);
            if relu {
                relu_inplace(&mut y);
            }
            cols.push(c);
            y
        };

        let a1 = step(0, &x, true, &mut cols);
        let a2 = step(1, &a1, true, &mut cols);
        let a3 = step(2, &a2, true, &mut cols);
        let a4 = step(3, &a3, true, &mut cols);
        let cat1 = concat(&upsample2(&a4), &a2);
        let a5 = step(4, &cat1, true, &mut cols);
        let cat2 = concat(&upsample2(&a5), &a1);
        let a6 = step(5, &cat2, true, &mut cols);
        let z = step(6, &a6, false, &mut cols);
        acts.extend([a1, a2, a3, a4, a5, a6]);
        (z, Cache { dims, cols, acts })
    }

    /// Accumulates parameter gradients for `dz` (gradient w.r.t. logits).
    pub fn backward(&self, cache: &Cache<F>, dz: &Tensor<F>, grads: &mut Grads) {
        let l = &self.layers;
        let (h, w) = cache.dims;
        let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
        let [a1, a2, a3, a4, a5, a6] = [0, 1, 2, 3, 4, 5].map(|i| &cache.acts[i]);
        let c = &cache.cols;
        let Widths { c1, .. } = self.widths;
        let c3 = self.widths.c3;

        let mut g = l[6].backward(&c[6], (h, w), dz, &mut grads[6], true).unwrap();
        relu_backward(a6, &mut g);
        let gcat2 = l[5].backward(&c[5], (h, w), &g, &mut grads[5], true).unwrap();
        let (gu2, mut ga1) = split(gcat2, self.widths.c2);
        let mut g = upsample2_backward(&gu2);
        relu_backward(a5, &mut g);
        let gcat1 = l[4].backward(&c[4], (h2, w2), &g, &mut grads[4], true).unwrap();
        let (gu1, mut ga2) = split(gcat1, c3);
        let mut g = upsample2_backward(&gu1);
        relu_backward(a4, &mut g);
        let mut g = l[3].backward(&c[3], (h4, w4), &g, &mut grads[3], true).unwrap();
        relu_backward(a3, &mut g);
        let g = l[2].backward(&c[2], (h2, w2), &g, &mut grads[2], true).unwrap();
        for (a, b) in ga2.data.iter_mut().zip(&g.data) {
            *a = *a + *b;
        }
        relu_backward(a2, &mut ga2);
        let g = l[1].backward(&c[1], (h, w), &ga2, &mut grads[1], true).unwrap();
        for (a, b) in ga1.data.iter_mut().zip(&g.data) {
            *a = *a + *b;
        }
        debug_assert_eq!(ga1.c, c1);
        relu_backward(a1, &mut ga1);
        l[0].backward(&c[0], (h, w), &ga1, &mut grads[0], false);
    }

    /// Sign pattern of every ReLU input; used to detect kinks when checking
    /// gradients by finite differences.
    pub fn relu_pattern(&self, x: Tensor<F>) -> Vec<bool> {
        let (_, cache) = self.forward(x);
        cache
            .acts
            .iter()
            .flat_map(|a| a.data.iter().map(|v| *v > F::zero()))
            .collect()
    }

    /// Visits parameters and their gradients tensor by tensor in a fixed order.
    pub fn for_each_param(&mut self, grads: &Grads, mut f: impl FnMut(usize, &mut [F], &[f64])) {
        for (i, (layer, g)) in self.layers.iter_mut().zip(grads).enumerate() {
            f(2 * i, &mut layer.weight, &g.weight);
            f(2 * i + 1, &mut layer.bias, &g.bias);
        }
    }
}
