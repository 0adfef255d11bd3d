//! Small convolutional feature extractor: four conv + ReLU + 2×2 average
//! pooling stages, global average pooling and a linear readout to `C`.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::nn::{Bound, Conv2d, Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::synth::Patch;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct Backbone {
    pub stages: Vec<Conv2d>,
    pub readout: Linear,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, channels: &[usize], feature_dim: usize, rng: &mut Rng) -> Self {
        let mut in_ch = 3;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(store, &alloc::format!("backbone.conv{i}"), 3, in_ch, c, rng);
                in_ch = c;
                conv
            })
            .collect();
        let readout = Linear::new(store, "backbone.readout", in_ch, feature_dim, rng);
        Self { stages, readout }
    }

    pub fn feature_dim(&self) -> usize {
        self.readout.out_dim
    }

    /// Smallest side that survives every pooling stage.
    pub fn min_input_side(&self) -> usize {
        1 << self.stages.len()
    }

    /// `[b, h, w, 3] → [b, C]`. Intensities are centered on 0.5 and scaled
    /// by 4 before the first convolution.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, images: Var) -> Result<Var, TensorError> {
        let centered = tape.add_scalar(images, -0.5);
        let mut h = tape.scale(centered, 4.0);
        for conv in &self.stages {
            h = conv.forward(tape, p, h)?;
            h = tape.relu(h);
            h = tape.avg_pool2(h)?;
        }
        let s = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[s[0], s[1] * s[2], s[3]])?;
        let pooled = tape.mean_over_axis(flat, 1)?;
        self.readout.forward(tape, p, pooled)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.stages
            .iter()
            .flat_map(Conv2d::params)
            .chain(self.readout.params())
            .collect()
    }
}

/// Stacks same-sized patches into a `[b, h, w, 3]` tensor.
pub fn stack_patches<'a>(patches: impl IntoIterator<Item = &'a Patch>) -> Result<Tensor, TensorError> {
    let mut shape: Option<(usize, usize)> = None;
    let mut data = Vec::new();
    let mut count = 0;
    for p in patches {
        match shape {
            None => shape = Some((p.height, p.width)),
            Some((h, w)) if (h, w) != (p.height, p.width) => {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_patches",
                    lhs: vec![h, w, 3],
                    rhs: vec![p.height, p.width, 3],
                })
            }
            Some(_) => {}
        }
        data.extend_from_slice(&p.data);
        count += 1;
    }
    let (h, w) = shape.ok_or(TensorError::InvalidShape(vec![0]))?;
    Tensor::new(vec![count, h, w, 3], data)
}
