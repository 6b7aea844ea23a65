//! Input-conditioned filter generation (a small hypernetwork) plus the
//! bias-free dynamic convolution that applies each sample's generated
//! bank to that same sample.
//!
//! The generator squeezes the image through conv/relu/pool down to a 2x2
//! summary per channel and expands that with a stride-1 transposed
//! convolution into forty 3x3 kernels. Because both the generator and
//! the dynamic convolution sit on the tape, the loss gradient reaches
//! the image twice: directly through the convolution, and indirectly
//! through the filters it induced.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Number of generated kernels per sample.
pub const FILTER_COUNT: usize = 40;
/// Spatial extent of each generated kernel.
pub const FILTER_EXTENT: usize = 3;
/// Input images are single-channel 28x28.
pub const IMAGE_EXTENT: usize = 28;

/// Draws from the Kaiming-style uniform distribution: zero mean,
/// standard deviation sqrt(2/fan_in), i.e. bounds +-sqrt(6/fan_in).
pub(crate) fn kaiming_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    rng.uniform_tensor(shape, -bound, bound)
        .expect("valid init bounds")
}

/// Learnable state of the filter generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// [Cg,1,3,3] squeeze convolution over the raw image.
    pub conv_w: Tensor,
    /// [Cg] squeeze bias.
    pub conv_b: Tensor,
    /// [Cg,40,2,2] expansion from the pooled 2x2 summary to 3x3 kernels.
    pub deconv_w: Tensor,
    /// [40] per-kernel offset.
    pub deconv_b: Tensor,
}

impl GeneratorParams {
    pub fn init(channels: usize, rng: &mut Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Arg("generator needs at least one channel".into()));
        }
        Ok(GeneratorParams {
            conv_w: kaiming_uniform(rng, &[channels, 1, 3, 3], 9),
            conv_b: Tensor::zeros(&[channels]),
            deconv_w: kaiming_uniform(rng, &[channels, FILTER_COUNT, 2, 2], channels * 4),
            deconv_b: Tensor::zeros(&[FILTER_COUNT]),
        })
    }

    pub fn zeros(channels: usize) -> Self {
        GeneratorParams {
            conv_w: Tensor::zeros(&[channels, 1, 3, 3]),
            conv_b: Tensor::zeros(&[channels]),
            deconv_w: Tensor::zeros(&[channels, FILTER_COUNT, 2, 2]),
            deconv_b: Tensor::zeros(&[FILTER_COUNT]),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv_w.shape()[0]
    }

    /// Pushes the four tensors onto a tape as trainable leaves.
    pub fn leaves(&self, tape: &mut Tape) -> GeneratorVars {
        GeneratorVars {
            conv_w: tape.leaf(self.conv_w.clone()),
            conv_b: tape.leaf(self.conv_b.clone()),
            deconv_w: tape.leaf(self.deconv_w.clone()),
            deconv_b: tape.leaf(self.deconv_b.clone()),
        }
    }
}

/// Tape handles for one instantiation of [`GeneratorParams`].
#[derive(Debug, Clone, Copy)]
pub struct GeneratorVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub deconv_w: Var,
    pub deconv_b: Var,
}

fn expect_image_batch(tape: &Tape, images: Var) -> Result<usize> {
    let shape = tape.value(images).shape();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != IMAGE_EXTENT || shape[3] != IMAGE_EXTENT {
        return Err(Error::Shape(format!(
            "expected [N,1,{IMAGE_EXTENT},{IMAGE_EXTENT}] images, got {shape:?}"
        )));
    }
    Ok(shape[0])
}

/// Synthesizes a per-sample bank of forty 3x3 kernels, [N,40,1,3,3],
/// as a differentiable function of the images.
pub fn generate_filters(tape: &mut Tape, images: Var, gen: &GeneratorVars) -> Result<Var> {
    let n = expect_image_batch(tape, images)?;
    let squeezed = tape.conv2d(images, gen.conv_w, Some(gen.conv_b), 1, 1)?;
    let squeezed = tape.relu(squeezed);
    let summary = tape.maxpool2d(squeezed, 14, 14)?; // [N,Cg,2,2]
    let kernels = tape.conv2d_transposed(summary, gen.deconv_w, Some(gen.deconv_b), 1)?;
    tape.reshape(kernels, &[n, FILTER_COUNT, 1, FILTER_EXTENT, FILTER_EXTENT])
}

/// Convolves every image with its own generated bank (no bias), then
/// relu and 2x2/stride-2 max pooling: [N,1,28,28] -> [N,40,14,14].
pub fn dynamic_conv(tape: &mut Tape, images: Var, filters: Var) -> Result<Var> {
    let n = expect_image_batch(tape, images)?;
    let fs = tape.value(filters).shape();
    if fs != [n, FILTER_COUNT, 1, FILTER_EXTENT, FILTER_EXTENT] {
        return Err(Error::Shape(format!(
            "expected [{n},{FILTER_COUNT},1,{FILTER_EXTENT},{FILTER_EXTENT}] filters, got {fs:?}"
        )));
    }
    let mapped = tape.per_sample_conv2d(images, filters, 1)?;
    let mapped = tape.relu(mapped);
    tape.maxpool2d(mapped, 2, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;

    fn image_batch(rng: &mut Rng, n: usize) -> Tensor {
        rng.uniform_tensor(&[n, 1, 28, 28], 0.0, 1.0).unwrap()
    }

    #[test]
    fn shape_trace_through_the_generator() {
        let mut rng = Rng::seed(41);
        let params = GeneratorParams::init(20, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(image_batch(&mut rng, 3));
        let gen = params.leaves(&mut tape);
        let filters = generate_filters(&mut tape, x, &gen).unwrap();
        assert_eq!(tape.value(filters).shape(), &[3, 40, 1, 3, 3]);
        let features = dynamic_conv(&mut tape, x, filters).unwrap();
        assert_eq!(tape.value(features).shape(), &[3, 40, 14, 14]);
    }

    #[test]
    fn degenerate_generator_yields_constant_filters() {
        let mut rng = Rng::seed(42);
        let mut params = GeneratorParams::zeros(20);
        params.deconv_b = rng.uniform_tensor(&[40], -1.0, 1.0).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(image_batch(&mut rng, 2));
        let gen = params.leaves(&mut tape);
        let filters = generate_filters(&mut tape, x, &gen).unwrap();
        let f = tape.value(filters);
        for n in 0..2 {
            for k in 0..40 {
                let base = (n * 40 + k) * 9;
                for e in 0..9 {
                    assert_eq!(f.data()[base + e], params.deconv_b.data()[k]);
                }
            }
        }
    }

    #[test]
    fn distinct_images_produce_distinct_banks() {
        let mut rng = Rng::seed(43);
        let params = GeneratorParams::init(20, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(image_batch(&mut rng, 2));
        let gen = params.leaves(&mut tape);
        let filters = generate_filters(&mut tape, x, &gen).unwrap();
        let f = tape.value(filters);
        let (a, b) = f.data().split_at(40 * 9);
        let max_diff = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 0.0, "two different images gave identical banks");
    }

    #[test]
    fn generation_is_deterministic() {
        let mut rng = Rng::seed(44);
        let params = GeneratorParams::init(12, &mut rng).unwrap();
        let batch = image_batch(&mut rng, 2);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(batch.clone());
            let gen = params.leaves(&mut tape);
            let filters = generate_filters(&mut tape, x, &gen).unwrap();
            tape.value(filters).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn identity_kernel_slot_reproduces_the_image_before_pooling() {
        let mut rng = Rng::seed(45);
        let image = image_batch(&mut rng, 1);
        // Bank with kernel 0 = center tap, all others zero.
        let mut bank = vec![0.0; 40 * 9];
        bank[4] = 1.0;
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let f = tape.leaf(Tensor::from_vec(&[1, 40, 1, 3, 3], bank).unwrap());
        let y = tape.per_sample_conv2d(x, f, 1).unwrap();
        assert_eq!(&tape.value(y).data()[..28 * 28], image.data());
    }

    #[test]
    fn shared_bank_reduces_to_standard_convolution() {
        let mut rng = Rng::seed(46);
        let images = image_batch(&mut rng, 4);
        let bank = rng.uniform_tensor(&[40, 1, 3, 3], -0.5, 0.5).unwrap();
        let mut stacked = Vec::with_capacity(4 * bank.numel());
        for _ in 0..4 {
            stacked.extend_from_slice(bank.data());
        }
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let f = tape.leaf(Tensor::from_vec(&[4, 40, 1, 3, 3], stacked).unwrap());
        let dynamic = dynamic_conv(&mut tape, x, f).unwrap();

        let w = tape.leaf(bank);
        let conv = tape.conv2d(x, w, None, 1, 1).unwrap();
        let conv = tape.relu(conv);
        let pooled = tape.maxpool2d(conv, 2, 2).unwrap();

        let diff = tape.value(dynamic).max_abs_diff(tape.value(pooled));
        assert!(diff < 1e-12, "max abs diff {diff}");
    }

    #[test]
    fn composite_gradient_covers_both_image_paths() {
        // Small 28x28 batch keeps the finite-difference sweep quick while
        // still exercising conv -> pool -> deconv -> per-sample conv.
        let mut rng = Rng::seed(47);
        let params = GeneratorParams::init(2, &mut rng).unwrap();
        let x = rng.uniform_tensor(&[1, 1, 28, 28], 0.0, 1.0).unwrap();
        let inputs = vec![
            x,
            params.conv_w.clone(),
            params.conv_b.clone(),
            params.deconv_w.clone(),
            params.deconv_b.clone(),
        ];
        let report = gradcheck("dynamic-conv composite", &inputs, 1e-5, |tape, vars| {
            let gen = GeneratorVars {
                conv_w: vars[1],
                conv_b: vars[2],
                deconv_w: vars[3],
                deconv_b: vars[4],
            };
            let filters = generate_filters(tape, vars[0], &gen)?;
            let features = dynamic_conv(tape, vars[0], filters)?;
            let sq = tape.mul(features, features)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report}");
    }
}
