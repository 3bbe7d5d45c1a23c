//! Two-branch segmentation network with unshared parameters and the
//! feature mapping head applied to the second branch.
//!
//! Each branch is a small encoder-decoder: four stride-2 stages take the
//! input down to 1/16 resolution, and a two-step decoder with skip
//! connections returns to 1/4 resolution. The decoder output is the
//! feature map used by the discrepancy loss; a pointwise classifier turns
//! it into logits that are bilinearly resized to the input size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::label::{argmax_channels, LabelMap};
use crate::nn::{
    bilinear_resize, bilinear_resize_backward, channel_dropout, channel_dropout_backward,
    relu_backward, relu_inplace, BatchNorm2d, BlockTape, Conv2d, ConvBnRelu, ConvTape, NormTape,
    Param,
};
use crate::rng::{self, TAG_DROPOUT, TAG_INIT};
use crate::tensor::{softmax_channels, Real, Tensor};

/// Channel dropout rate of the mapping head.
pub const MAP_DROPOUT: f64 = 0.5;

/// Spatial reduction between the input and the feature map.
pub const OUTPUT_STRIDE: usize = 4;

/// Inputs must be divisible by the deepest stride.
pub const INPUT_MULTIPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub feature_channels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 4,
            base_width: 8,
            feature_channels: 32,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return param_err("num_classes", format!("{} < 2", self.num_classes));
        }
        if self.num_classes > 255 {
            return param_err("num_classes", "ids must fit below the ignore value 255");
        }
        if self.in_channels == 0 || self.base_width == 0 || self.feature_channels == 0 {
            return param_err("arch", "channel counts must be positive");
        }
        Ok(())
    }

    fn widths(&self) -> [usize; 4] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 4 * w]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchId {
    First,
    Second,
}

impl BranchId {
    pub fn index(self) -> usize {
        match self {
            BranchId::First => 0,
            BranchId::Second => 1,
        }
    }

    pub fn other(self) -> BranchId {
        match self {
            BranchId::First => BranchId::Second,
            BranchId::Second => BranchId::First,
        }
    }

    /// Accepts the 1-based numbering used in configs and the CLI.
    pub fn from_number(i: usize) -> Result<BranchId> {
        match i {
            1 => Ok(BranchId::First),
            2 => Ok(BranchId::Second),
            _ => param_err("branch_index", format!("{i} is not 1 or 2")),
        }
    }
}

/// Feature extractor plus classifier for one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T> {
    stem: ConvBnRelu<T>,
    enc1: ConvBnRelu<T>,
    down2: ConvBnRelu<T>,
    enc2: ConvBnRelu<T>,
    down3: ConvBnRelu<T>,
    enc3: ConvBnRelu<T>,
    down4: ConvBnRelu<T>,
    enc4: ConvBnRelu<T>,
    dec3: ConvBnRelu<T>,
    dec2: ConvBnRelu<T>,
    classifier: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct BranchOutput<T> {
    /// Extractor output at 1/4 input resolution, before L2 normalisation.
    pub features: Tensor<T>,
    /// Class scores at input resolution.
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BranchTape<T> {
    stem: BlockTape<T>,
    enc1: BlockTape<T>,
    down2: BlockTape<T>,
    enc2: BlockTape<T>,
    down3: BlockTape<T>,
    enc3: BlockTape<T>,
    down4: BlockTape<T>,
    enc4: BlockTape<T>,
    dec3: BlockTape<T>,
    dec2: BlockTape<T>,
    classifier: ConvTape<T>,
    e3_hw: (usize, usize),
    e4_hw: (usize, usize),
    e3_channels: usize,
    low_hw: (usize, usize),
}

impl<T: Real> Branch<T> {
    fn new<R: Rng>(arch: &ArchConfig, rng: &mut R) -> Self {
        let [w1, w2, w3, w4] = arch.widths();
        Self {
            stem: ConvBnRelu::new(arch.in_channels, w1, 3, 2, rng),
            enc1: ConvBnRelu::new(w1, w1, 3, 1, rng),
            down2: ConvBnRelu::new(w1, w2, 3, 2, rng),
            enc2: ConvBnRelu::new(w2, w2, 3, 1, rng),
            down3: ConvBnRelu::new(w2, w3, 3, 2, rng),
            enc3: ConvBnRelu::new(w3, w3, 3, 1, rng),
            down4: ConvBnRelu::new(w3, w4, 3, 2, rng),
            enc4: ConvBnRelu::new(w4, w4, 3, 1, rng),
            dec3: ConvBnRelu::new(w4 + w3, w3, 3, 1, rng),
            dec2: ConvBnRelu::new(w3 + w2, arch.feature_channels, 3, 1, rng),
            classifier: Conv2d::new(arch.feature_channels, arch.num_classes, 1, 1, true, rng),
        }
    }

    fn blocks(&self) -> [&ConvBnRelu<T>; 10] {
        [
            &self.stem,
            &self.enc1,
            &self.down2,
            &self.enc2,
            &self.down3,
            &self.enc3,
            &self.down4,
            &self.enc4,
            &self.dec3,
            &self.dec2,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut ConvBnRelu<T>; 10] {
        [
            &mut self.stem,
            &mut self.enc1,
            &mut self.down2,
            &mut self.enc2,
            &mut self.down3,
            &mut self.enc3,
            &mut self.down4,
            &mut self.enc4,
            &mut self.dec3,
            &mut self.dec2,
        ]
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<(BranchOutput<T>, BranchTape<T>)> {
        let [_, _, h, w] = x.shape();
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
            return shape_err(
                "Branch::forward spatial size",
                format!("multiples of {INPUT_MULTIPLE}"),
                (h, w),
            );
        }
        let (s, stem) = self.stem.forward(x, train)?;
        let (e1, enc1) = self.enc1.forward(&s, train)?;
        let (d2, down2) = self.down2.forward(&e1, train)?;
        let (e2, enc2) = self.enc2.forward(&d2, train)?;
        let (d3, down3) = self.down3.forward(&e2, train)?;
        let (e3, enc3) = self.enc3.forward(&d3, train)?;
        let (d4, down4) = self.down4.forward(&e3, train)?;
        let (e4, enc4) = self.enc4.forward(&d4, train)?;

        let up4 = bilinear_resize(&e4, e3.height(), e3.width());
        let (u3, dec3) = self
            .dec3
            .forward(&Tensor::concat_channels(&up4, &e3)?, train)?;
        let up3 = bilinear_resize(&u3, e2.height(), e2.width());
        let (features, dec2) = self
            .dec2
            .forward(&Tensor::concat_channels(&up3, &e2)?, train)?;

        let (low, classifier) = self.classifier.forward(&features)?;
        let logits = bilinear_resize(&low, h, w);
        let probs = softmax_channels(&logits);
        let tape = BranchTape {
            e3_hw: (e3.height(), e3.width()),
            e4_hw: (e4.height(), e4.width()),
            e3_channels: e3.channels(),
            low_hw: (low.height(), low.width()),
            stem,
            enc1,
            down2,
            enc2,
            down3,
            enc3,
            down4,
            enc4,
            dec3,
            dec2,
            classifier,
        };
        Ok((
            BranchOutput {
                features,
                logits,
                probs,
            },
            tape,
        ))
    }

    /// Backpropagates gradients with respect to the feature map and/or the
    /// logits, accumulating into parameter gradients and folding the
    /// batch statistics of the tape into the running estimates.
    pub fn backward(
        &mut self,
        tape: &BranchTape<T>,
        d_features: Option<&Tensor<T>>,
        d_logits: Option<&Tensor<T>>,
    ) {
        let mut d_feat = match d_logits {
            Some(dl) => {
                let d_low = bilinear_resize_backward(dl, tape.low_hw.0, tape.low_hw.1);
                self.classifier
                    .backward(&tape.classifier, &d_low, true)
                    .expect("input grad requested")
            }
            None => {
                let Some(df) = d_features else { return };
                Tensor::zeros(df.shape())
            }
        };
        if let Some(df) = d_features {
            d_feat.add_assign(df);
        }

        let d_cat2 = self.dec2.backward(&tape.dec2, d_feat, true).expect("grad");
        // dec2 input is [upsampled dec3 output (e3 width), e2].
        let (d_up3, mut d_e2) = d_cat2.split_channels(tape.e3_channels);
        let d_u3 = bilinear_resize_backward(&d_up3, tape.e3_hw.0, tape.e3_hw.1);
        let d_cat3 = self.dec3.backward(&tape.dec3, d_u3, true).expect("grad");
        let (d_up4, mut d_e3) = d_cat3.split_channels(d_cat3.channels() - tape.e3_channels);
        let d_e4 = bilinear_resize_backward(&d_up4, tape.e4_hw.0, tape.e4_hw.1);

        let d_d4 = self.enc4.backward(&tape.enc4, d_e4, true).expect("grad");
        d_e3.add_assign(&self.down4.backward(&tape.down4, d_d4, true).expect("grad"));
        let d_d3 = self.enc3.backward(&tape.enc3, d_e3, true).expect("grad");
        d_e2.add_assign(&self.down3.backward(&tape.down3, d_d3, true).expect("grad"));
        let d_d2 = self.enc2.backward(&tape.enc2, d_e2, true).expect("grad");
        let d_e1 = self.down2.backward(&tape.down2, d_d2, true).expect("grad");
        let d_s = self.enc1.backward(&tape.enc1, d_e1, true).expect("grad");
        self.stem.backward(&tape.stem, d_s, false);
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for b in self.blocks() {
            b.visit_params(f);
        }
        self.classifier.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in self.blocks_mut() {
            b.visit_params_mut(f);
        }
        self.classifier.visit_params_mut(f);
    }

    pub fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&'a Vec<T>)) {
        for b in self.blocks() {
            b.visit_buffers(f);
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Vec<T>)) {
        for b in self.blocks_mut() {
            b.visit_buffers_mut(f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// Multiplies the output channels of the final extractor layer by
    /// `factor` by rescaling its normalisation affine parameters.
    pub fn scale_feature_output(&mut self, factor: T) {
        for v in self.dec2.norm.gamma.value.iter_mut() {
            *v = *v * factor;
        }
        for v in self.dec2.norm.beta.value.iter_mut() {
            *v = *v * factor;
        }
    }

    /// Mutable access to the first parameter tensor, for perturbation tests.
    pub fn first_param_mut(&mut self) -> &mut Param<T> {
        &mut self.stem.conv.weight
    }
}

/// Pointwise convolution, normalisation, ReLU and channel dropout on
/// branch-2 features; output dimension equals input dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct MapHead<T> {
    conv: Conv2d<T>,
    norm: BatchNorm2d<T>,
}

#[derive(Clone, Debug)]
pub struct MapTape<T> {
    conv: ConvTape<T>,
    norm: NormTape<T>,
    relu_out: Tensor<T>,
    dropout: Option<Vec<T>>,
}

impl<T: Real> MapHead<T> {
    fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(channels, channels, 1, 1, false, rng),
            norm: BatchNorm2d::new(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv.in_channels
    }

    /// `dropout_seed` keys the channel-dropout stream in training mode.
    pub fn forward(
        &self,
        features: &Tensor<T>,
        train: bool,
        dropout_seed: u64,
    ) -> Result<(Tensor<T>, MapTape<T>)> {
        self.forward_opts(features, train, train.then_some(dropout_seed))
    }

    /// Like [`MapHead::forward`] with dropout controlled separately from
    /// the normalisation mode; `None` disables it.
    pub fn forward_opts(
        &self,
        features: &Tensor<T>,
        train: bool,
        dropout_seed: Option<u64>,
    ) -> Result<(Tensor<T>, MapTape<T>)> {
        if features.channels() != self.channels() {
            return shape_err(
                "MapHead::forward channels",
                self.channels(),
                features.channels(),
            );
        }
        let (z, conv) = self.conv.forward(features)?;
        let (mut y, norm) = self.norm.forward(&z, train)?;
        relu_inplace(&mut y);
        let relu_out = y.clone();
        let dropout = dropout_seed.map(|seed| {
            let mut r = rng::stream(seed, &[TAG_DROPOUT]);
            channel_dropout(&mut y, MAP_DROPOUT, &mut r)
        });
        Ok((
            y,
            MapTape {
                conv,
                norm,
                relu_out,
                dropout,
            },
        ))
    }

    /// Returns the gradient with respect to the branch-2 features.
    pub fn backward(&mut self, tape: &MapTape<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = dy.clone();
        if let Some(scales) = &tape.dropout {
            channel_dropout_backward(&mut g, scales);
        }
        relu_backward(&tape.relu_out, &mut g);
        let dz = self.norm.backward(&tape.norm, &g);
        self.norm.update_running_stats(&tape.norm);
        self.conv.backward(&tape.conv, &dz, true).expect("grad")
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv.visit_params(f);
        self.norm.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_params_mut(f);
        self.norm.visit_params_mut(f);
    }

    pub fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&'a Vec<T>)) {
        f(&self.norm.running_mean);
        f(&self.norm.running_var);
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Vec<T>)) {
        f(&mut self.norm.running_mean);
        f(&mut self.norm.running_var);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoBranchModel<T> {
    pub arch: ArchConfig,
    pub branches: [Branch<T>; 2],
    pub map_head: MapHead<T>,
}

impl<T: Real> TwoBranchModel<T> {
    /// Branches and the mapping head draw from independent streams of
    /// `seed`, so the two branches start from different weights.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r1 = rng::stream(seed, &[TAG_INIT, 1]);
        let mut r2 = rng::stream(seed, &[TAG_INIT, 2]);
        let mut r3 = rng::stream(seed, &[TAG_INIT, 3]);
        Ok(Self {
            arch: arch.clone(),
            branches: [Branch::new(arch, &mut r1), Branch::new(arch, &mut r2)],
            map_head: MapHead::new(arch.feature_channels, &mut r3),
        })
    }

    pub fn branch(&self, id: BranchId) -> &Branch<T> {
        &self.branches[id.index()]
    }

    pub fn branch_mut(&mut self, id: BranchId) -> &mut Branch<T> {
        &mut self.branches[id.index()]
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        if images.channels() != self.arch.in_channels {
            return shape_err(
                "model input channels",
                self.arch.in_channels,
                images.channels(),
            );
        }
        if images.batch() == 0 {
            return param_err("images", "empty batch");
        }
        Ok(())
    }

    pub fn forward_branch(
        &self,
        id: BranchId,
        images: &Tensor<T>,
        train: bool,
    ) -> Result<BranchOutput<T>> {
        Ok(self.forward_branch_taped(id, images, train)?.0)
    }

    pub fn forward_branch_taped(
        &self,
        id: BranchId,
        images: &Tensor<T>,
        train: bool,
    ) -> Result<(BranchOutput<T>, BranchTape<T>)> {
        self.check_input(images)?;
        self.branch(id).forward(images, train)
    }

    pub fn map_features(
        &self,
        features: &Tensor<T>,
        train: bool,
        dropout_seed: u64,
    ) -> Result<Tensor<T>> {
        Ok(self.map_head.forward(features, train, dropout_seed)?.0)
    }

    /// Inference uses the first branch only.
    pub fn predict(&self, images: &Tensor<T>) -> Result<LabelMap> {
        let out = self.forward_branch(BranchId::First, images, false)?;
        Ok(argmax_channels(&out.probs).0)
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    /// Visits branch 1, branch 2, then the mapping head.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.branches[0].visit_params(f);
        self.branches[1].visit_params(f);
        self.map_head.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        let [b1, b2] = &mut self.branches;
        b1.visit_params_mut(f);
        b2.visit_params_mut(f);
        self.map_head.visit_params_mut(f);
    }

    pub fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&'a Vec<T>)) {
        self.branches[0].visit_buffers(f);
        self.branches[1].visit_buffers(f);
        self.map_head.visit_buffers(f);
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Vec<T>)) {
        let [b1, b2] = &mut self.branches;
        b1.visit_buffers_mut(f);
        b2.visit_buffers_mut(f);
        self.map_head.visit_buffers_mut(f);
    }

    /// Parameter values and running statistics, in visiting order.
    pub fn flat_state(&self) -> Vec<Vec<T>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.value.clone()));
        self.visit_buffers(&mut |b| out.push(b.clone()));
        out
    }

    /// Inverse of [`TwoBranchModel::flat_state`].
    pub fn load_flat_state(&mut self, state: &[Vec<T>]) -> Result<()> {
        let mut expected = Vec::new();
        self.visit_params(&mut |p| expected.push(p.len()));
        self.visit_buffers(&mut |b| expected.push(b.len()));
        let got: Vec<usize> = state.iter().map(Vec::len).collect();
        if got != expected {
            return shape_err("TwoBranchModel::load_flat_state", expected, got);
        }
        let mut it = state.iter();
        self.visit_params_mut(&mut |p| p.value.clone_from(it.next().expect("length checked")));
        self.visit_buffers_mut(&mut |b| b.clone_from(it.next().expect("length checked")));
        Ok(())
    }

    /// Converts the scalar type, e.g. to run gradient checks in `f64`.
    pub fn cast<U: Real>(&self) -> TwoBranchModel<U> {
        let mut out = TwoBranchModel::<U>::init(&self.arch, 0).expect("arch already validated");
        let state: Vec<Vec<U>> = self
            .flat_state()
            .into_iter()
            .map(|v| v.into_iter().map(|x| U::of(x.f64())).collect())
            .collect();
        out.load_flat_state(&state).expect("same architecture");
        out
    }
}
