//! Compact convolutional backbone and the shared per-frame classifier.
//!
//! The backbone maps a `[mel_bins, n]` spectrogram to frame features
//! `[c, n]`, keeping the time resolution. The classifier is one fully
//! connected layer applied to every frame followed by a sigmoid, and an
//! aggregator turns frame scores into clip scores. Both detection branches
//! bind the same classifier parameters, so their gradients accumulate into
//! one set of weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Conv2dSpec, Tape, Tensor, Var, STANDARDIZE_EPS};
use crate::error::{Error, Result};
use crate::features::Spectrogram;

/// Frame-to-clip aggregation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Mean,
    LinearSoftmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mel_bins: usize,
    pub classes: usize,
    /// Output channels of the three conv blocks; the last one is `c`.
    pub channels: Vec<usize>,
    /// Frequency stride of every block's convolution.
    pub freq_stride: usize,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mel_bins: 64,
            classes: 6,
            channels: vec![8, 16, 64],
            freq_stride: 2,
            pooling: Pooling::Mean,
        }
    }
}

impl ModelConfig {
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated config has channels")
    }

    pub fn validate(&self) -> Result<()> {
        if self.mel_bins == 0 || self.classes == 0 {
            return Err(Error::Config("mel_bins and classes must be positive".into()));
        }
        if self.channels.len() != 3 || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "backbone needs three positive channel widths, got {:?}",
                self.channels
            )));
        }
        if self.freq_stride == 0 {
            return Err(Error::Config("freq_stride must be positive".into()));
        }
        Ok(())
    }

    /// Stable hash of everything that determines parameter shapes and the
    /// forward computation.
    pub fn fingerprint(&self) -> String {
        let canon = format!(
            "mel_bins={};classes={};channels={:?};freq_stride={};pooling={:?}",
            self.mel_bins, self.classes, self.channels, self.freq_stride, self.pooling
        );
        let digest = Sha256::digest(canon.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Conv weights of the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub blocks: Vec<ConvBlock>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Fully connected frame classifier `[k, c]` shared by both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// 1x1 projection `[c, k]` from pool rows to feature gains.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub classifier: Classifier,
    pub projection: Projection,
}

/// Tape handles for a bound classifier.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    pub weight: Var,
    pub bias: Var,
}

/// All model parameters placed on one tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub blocks: Vec<(Var, Var)>,
    pub classifier: ClassifierVars,
    pub projection: ProjectionVars,
}

impl ModelVars {
    /// Vars in the same order as [`Model::named_params`].
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.blocks.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.extend([
            self.classifier.weight,
            self.classifier.bias,
            self.projection.weight,
            self.projection.bias,
        ]);
        out
    }
}

impl Model {
    /// He-initialised convolutions, small random classifier, zero projection.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |shape: &[usize], std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect())
                .expect("shape matches")
        };
        let mut blocks = Vec::new();
        let mut cin = 1;
        for &cout in &config.channels {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            blocks.push(ConvBlock {
                weight: gauss(&[cout, cin, 3, 3], std),
                bias: Tensor::zeros([cout]),
            });
            cin = cout;
        }
        let c = config.feature_channels();
        let k = config.classes;
        let classifier = Classifier {
            weight: gauss(&[k, c], (1.0 / c as f64).sqrt()),
            bias: Tensor::zeros([k]),
        };
        let projection = Projection {
            weight: Tensor::zeros([c, k]),
            bias: Tensor::zeros([c]),
        };
        Ok(Model {
            config,
            backbone: Backbone { blocks },
            classifier,
            projection,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            out.push((format!("backbone.conv{i}.weight"), &b.weight));
            out.push((format!("backbone.conv{i}.bias"), &b.bias));
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out.push(("projection.weight".into(), &self.projection.weight));
        out.push(("projection.bias".into(), &self.projection.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.backbone.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out.push(&mut self.projection.weight);
        out.push(&mut self.projection.bias);
        out
    }

    /// Places every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone().param())
            } else {
                tape.constant(t.clone())
            }
        };
        let blocks = self
            .backbone
            .blocks
            .iter()
            .map(|b| (put(&b.weight), put(&b.bias)))
            .collect();
        let classifier = ClassifierVars {
            weight: put(&self.classifier.weight),
            bias: put(&self.classifier.bias),
        };
        let projection = ProjectionVars {
            weight: put(&self.projection.weight),
            bias: put(&self.projection.bias),
        };
        ModelVars {
            blocks,
            classifier,
            projection,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.is_finite())
    }
}

/// Puts a spectrogram on the tape as a `[1, mel_bins, n]` constant.
pub fn spectrogram_input(tape: &mut Tape, spec: &Spectrogram) -> Var {
    let t = spec
        .values()
        .clone()
        .reshape(vec![1, spec.mel_bins(), spec.frames()])
        .expect("same element count");
    tape.constant(t)
}

/// Runs the backbone: three blocks of
/// `conv3x3 -> per-frame standardization -> relu -> 2x frequency pooling`,
/// then a mean over the remaining frequency axis. Returns `[c, n]`.
///
/// Standardization runs over channels and frequency within each frame, so a
/// frame's features depend only on the input frames inside its receptive
/// field.
pub fn backbone_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &ModelVars,
    input: Var,
) -> Result<Var> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 || shape[1] != cfg.mel_bins {
        return Err(Error::ShapeMismatch {
            op: "backbone input",
            left: shape,
            right: vec![1, cfg.mel_bins, 0],
        });
    }
    let conv = Conv2dSpec {
        stride: (cfg.freq_stride, 1),
        padding: (1, 1),
    };
    let mut h = input;
    for &(w, b) in &vars.blocks {
        h = tape.conv2d(h, w, b, conv)?;
        h = tape.standardize_frames(h, STANDARDIZE_EPS)?;
        h = tape.relu(h);
        h = tape.pool_pairs(h, 1)?;
    }
    tape.mean_axis(h, 1)
}

/// `m[:, t] = sigmoid(W x[:, t] + b)`; returns `[k, n]`.
pub fn frame_scores(tape: &mut Tape, x: Var, clf: ClassifierVars) -> Result<Var> {
    let logits = tape.conv1x1(x, clf.weight, clf.bias)?;
    Ok(tape.sigmoid(logits))
}

/// Clip score per class from frame scores `[k, n]`.
pub fn aggregate_clip(tape: &mut Tape, m: Var, pooling: Pooling) -> Result<Var> {
    let shape = tape.value(m).shape();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::InvalidShape {
            op: "aggregate_clip",
            msg: format!("expected [k, n] with n >= 1, got {shape:?}"),
        });
    }
    match pooling {
        Pooling::Mean => tape.mean_axis(m, 1),
        Pooling::LinearSoftmax => tape.linear_softmax(m),
    }
}
