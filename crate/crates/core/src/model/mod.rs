//! Trainable segmentation network.
//!
//! [`TinySegNet`] is a compact encoder-decoder written from scratch with
//! explicit backward passes. It is generic over the scalar type so the
//! gradients can be checked in `f64`; training uses `f32`. Anything that
//! implements [`Predictor`] can drive the training loop.

pub mod blob;
pub mod layers;
pub mod net;
pub mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PalError, Result};
use crate::imaging::reflect_index;
use crate::loss::LossKind;
use crate::par::Exec;
use crate::types::{BinaryMask, GrayImage, Grid, SoftLabel};
use layers::Tensor;
use net::{Grads, Net, Widths};
use optim::AdamW;

/// Scalar type of the network.
pub trait Real:
    num_traits::Float + Default + Send + Sync + std::fmt::Debug + 'static
{
    fn to_acc(self) -> f64;
    fn from_acc(v: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn to_acc(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_acc(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline]
    fn to_acc(self) -> f64 {
        self
    }
    #[inline]
    fn from_acc(v: f64) -> Self {
        v
    }
}

/// Smallest and largest probability the network reports.
pub const PROB_FLOOR: f64 = 1e-6;

/// Gain applied after subtracting the image mean.
pub const INPUT_GAIN: f64 = 4.0;

/// A segmentation model the training loop can drive.
pub trait Predictor: Send + Sync {
    /// Per-pixel foreground probabilities, one map per image.
    fn predict(&self, images: &[GrayImage]) -> Vec<SoftLabel>;

    /// One optimisation step on a batch; returns the mean loss.
    fn train_step(&mut self, images: &[GrayImage], targets: &[BinaryMask], loss: &LossKind)
        -> Result<f64>;

    fn save_params(&self) -> Vec<u8>;

    fn load_params(&mut self, blob: &[u8]) -> Result<()>;

    fn parameter_count(&self) -> usize;

    fn set_learning_rate(&mut self, lr: f64);
}

/// Mean-subtracted, scaled input, reflect-padded to multiples of 4.
pub fn prepare_input<F: Real>(img: &GrayImage) -> Tensor<F> {
    let (h, w) = img.dims();
    let (ph, pw) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
    let mean = img.sum() / (h * w) as f64;
    let mut t = Tensor::zeros(1, ph, pw);
    for r in 0..ph {
        let sr = reflect_index(r as isize, h);
        for c in 0..pw {
            let sc = reflect_index(c as isize, w);
            t.data[r * pw + c] = F::from_acc((*img.get(sr, sc) as f64 - mean) * INPUT_GAIN);
        }
    }
    t
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Network plus optimiser state.
#[derive(Debug, Clone)]
pub struct TinySegNet<F: Real = f32> {
    net: Net<F>,
    opt: AdamW,
    exec: Exec,
}

impl<F: Real> TinySegNet<F> {
    pub fn new(seed: u64, learning_rate: f64, weight_decay: f64) -> Self {
        Self::with_widths(Widths::default(), seed, learning_rate, weight_decay)
    }

    pub fn with_widths(widths: Widths, seed: u64, learning_rate: f64, weight_decay: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            net: Net::new(widths, &mut rng),
            opt: AdamW::new(learning_rate, weight_decay),
            exec: Exec::default(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn net(&self) -> &Net<F> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Net<F> {
        &mut self.net
    }

    pub fn steps(&self) -> u64 {
        self.opt.steps()
    }

    /// Probabilities for a single image as `f64`.
    pub fn probabilities(&self, img: &GrayImage) -> Grid<f64> {
        let (h, w) = img.dims();
        let (z, _) = self.net.forward(prepare_input(img));
        Grid::from_fn(h, w, |r, c| sigmoid(z.data[r * z.w + c].to_acc()))
    }

    /// Loss and accumulated parameter gradients for one image.
    pub fn loss_and_grads(
        &self,
        img: &GrayImage,
        target: &BinaryMask,
        loss: &LossKind,
    ) -> Result<(f64, Grads)> {
        img.ensure_same_dims(target)?;
        let (h, w) = img.dims();
        let (z, cache) = self.net.forward(prepare_input(img));
        let p = Grid::from_fn(h, w, |r, c| sigmoid(z.data[r * z.w + c].to_acc()));
        let out = loss.evaluate(&p, &target.to_unit())?;
        // chain through the sigmoid; padded pixels carry no loss
        let mut dz = Tensor::zeros(1, z.h, z.w);
        for r in 0..h {
            for c in 0..w {
                let pv = *p.get(r, c);
                dz.data[r * z.w + c] = F::from_acc(out.grad.get(r, c) * pv * (1.0 - pv));
            }
        }
        let mut grads = self.net.zero_grads();
        self.net.backward(&cache, &dz, &mut grads);
        Ok((out.value, grads))
    }
}

impl<F: Real> Predictor for TinySegNet<F> {
    fn predict(&self, images: &[GrayImage]) -> Vec<SoftLabel> {
        self.exec.map(images, |img| {
            let p = self.probabilities(img);
            SoftLabel::from_grid_clamped(p.map(|&v| v as f32))
        })
    }

    fn train_step(
        &mut self,
        images: &[GrayImage],
        targets: &[BinaryMask],
        loss: &LossKind,
    ) -> Result<f64> {
        if images.is_empty() || images.len() != targets.len() {
            return Err(PalError::param(format!(
                "batch of {} images and {} targets",
                images.len(),
                targets.len()
            )));
        }
        let idx: Vec<usize> = (0..images.len()).collect();
        let results = self
            .exec
            .map(&idx, |&i| self.loss_and_grads(&images[i], &targets[i], loss));
        let n = images.len() as f64;
        let mut total = self.net.zero_grads();
        let mut value = 0.0;
        // summed in batch order so both strategies agree bit for bit
        for res in results {
            let (v, g) = res?;
            value += v;
            for (a, b) in total.iter_mut().zip(&g) {
                a.add(b);
            }
        }
        for g in &mut total {
            g.weight.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v /= n);
        }
        let value = value / n;
        if !value.is_finite() {
            return Err(PalError::NonFiniteLoss {
                value,
                step: self.opt.steps() as usize,
            });
        }
        self.opt.step(&mut self.net, &total);
        Ok(value)
    }

    fn save_params(&self) -> Vec<u8> {
        blob::encode(&self.net)
    }

    fn load_params(&mut self, data: &[u8]) -> Result<()> {
        blob::decode_into(&mut self.net, data)
    }

    fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.opt.lr = lr;
    }
}
