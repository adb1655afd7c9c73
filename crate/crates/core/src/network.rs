//! The full fusion model: shallow convolutions, channel pruning, affine
//! modulation, two four-level Transformer encoders, a perturbation bottleneck
//! and a decoder with perturbation-fused skip connections.

use crate::autodiff::{Tape, Var};
use crate::config::{FusionConfig, LEVELS};
use crate::error::{Error, Result};
use crate::gam::Gam;
use crate::nn::{Conv1x1, Conv3x3, Downsample, Init, TransformerBlock, Upsample};
use crate::params::ParamStore;
use crate::providers::{EmbeddingVector, Providers, SemanticProvider};
use crate::scpm::{partition, Scpm};
use crate::tcpm::Tcpm;
use crate::tensor::{Real, Shape, Tensor};

/// Spatial sizes must be multiples of this (three stride-2 stages).
pub const SIZE_MULTIPLE: usize = 1 << (LEVELS - 1);

/// External inputs to one forward pass.
pub struct FuseContext<'a> {
    pub semantic: &'a dyn SemanticProvider,
    pub text: EmbeddingVector,
    /// Per-sample keys for providers that look vectors up.
    pub pair_keys: Option<&'a [String]>,
}

impl<'a> FuseContext<'a> {
    pub fn new(providers: &'a Providers, prompt: &str, pair_keys: Option<&'a [String]>) -> Result<Self> {
        Ok(FuseContext {
            semantic: providers.semantic(),
            text: providers.text().text_embed(prompt)?,
            pair_keys,
        })
    }
}

/// Intermediate features before the encoders.
#[derive(Clone, Copy, Debug)]
pub struct ShallowFeatures {
    pub stem_a: Var,
    pub stem_b: Var,
    /// Concatenated stems after channel pruning (or unchanged without it).
    pub pruned: Var,
    /// Encoder inputs after affine modulation.
    pub branch_a: Var,
    pub branch_b: Var,
}

/// Encoder features per level for both streams, plus the bottleneck.
#[derive(Clone, Debug)]
pub struct EncoderState {
    pub feats_a: [Var; LEVELS],
    pub feats_b: [Var; LEVELS],
    pub bottleneck: Var,
}

#[derive(Clone, Debug)]
enum SkipFusion {
    Tcpm(Tcpm),
    /// Concatenation followed by a 1×1 compression to the level width.
    Concat(Conv1x1),
}

impl SkipFusion {
    fn forward<T: Real>(&self, tape: &mut Tape<T>, a: Var, b: Var, text: &EmbeddingVector) -> Result<Var> {
        match self {
            SkipFusion::Tcpm(t) => Ok(t.forward(tape, a, b, text)?.out),
            SkipFusion::Concat(conv) => {
                let cat = tape.concat(&[a, b])?;
                conv.forward(tape, cat)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    levels: Vec<Vec<TransformerBlock>>,
    downs: Vec<Downsample>,
}

impl Encoder {
    fn new(init: &mut Init, name: &str, cfg: &FusionConfig) -> Result<Self> {
        init.scoped(name, |init| {
            let mut levels = Vec::new();
            let mut downs = Vec::new();
            for l in 0..LEVELS {
                let w = cfg.width(l);
                if l > 0 {
                    downs.push(Downsample::new(init, &format!("down{l}"), w / 2)?);
                }
                let blocks = (0..cfg.enc_blocks[l])
                    .map(|b| TransformerBlock::new(init, &format!("l{l}.b{b}"), w, cfg.heads[l]))
                    .collect::<Result<_>>()?;
                levels.push(blocks);
            }
            Ok(Encoder { levels, downs })
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, mut x: Var) -> Result<[Var; LEVELS]> {
        let mut feats = [x; LEVELS];
        for (l, blocks) in self.levels.iter().enumerate() {
            if l > 0 {
                x = self.downs[l - 1].forward(tape, x)?;
            }
            for b in blocks {
                x = b.forward(tape, x)?;
            }
            feats[l] = x;
        }
        Ok(feats)
    }
}

#[derive(Clone, Debug)]
pub struct FusionNetwork {
    config: FusionConfig,
    stem_a: Conv3x3,
    stem_b: Conv3x3,
    scpm: Option<Scpm>,
    gam: Option<(Gam, Gam)>,
    enc_a: Encoder,
    enc_b: Encoder,
    skips: Vec<SkipFusion>,
    compress: Vec<Conv1x1>,
    dec: Vec<Vec<TransformerBlock>>,
    ups: Vec<Upsample>,
    head: Conv3x3,
}

impl FusionNetwork {
    pub fn new(init: &mut Init, cfg: &FusionConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let ab = cfg.ablation;
        let stem_a = Conv3x3::new(init, "stem_a", 1, c, 1)?;
        let stem_b = Conv3x3::new(init, "stem_b", 1, c, 1)?;
        let scpm = ab
            .scpm
            .then(|| Scpm::new(init, "scpm", 2 * c, cfg.prune_ratio_scpm, ab.ca_scpm, ab.semantic_backbone))
            .transpose()?;
        let gam = ab
            .gam
            .then(|| Ok::<_, Error>((Gam::new(init, "gam_a", c)?, Gam::new(init, "gam_b", c)?)))
            .transpose()?;
        let enc_a = Encoder::new(init, "enc_a", cfg)?;
        let enc_b = Encoder::new(init, "enc_b", cfg)?;
        let mut skips = Vec::new();
        for l in 0..LEVELS {
            let w = cfg.width(l);
            let name = format!("skip{l}");
            skips.push(if ab.tcpm {
                SkipFusion::Tcpm(Tcpm::new(init, &name, w, cfg.heads[l], cfg.prune_ratio_tcpm, ab.ca_tcpm)?)
            } else {
                SkipFusion::Concat(Conv1x1::new(init, &name, 2 * w, w)?)
            });
        }
        let mut compress = Vec::new();
        let mut dec = Vec::new();
        let mut ups = Vec::new();
        init.scoped("dec", |init| {
            for l in 0..LEVELS {
                let w = cfg.width(l);
                let c_in = cfg.skip_width(l)? + if l + 1 < LEVELS { w } else { 0 };
                compress.push(Conv1x1::new(init, &format!("compress{l}"), c_in, w)?);
                dec.push(
                    (0..cfg.dec_blocks[l])
                        .map(|b| TransformerBlock::new(init, &format!("l{l}.b{b}"), w, cfg.heads[l]))
                        .collect::<Result<Vec<_>>>()?,
                );
                if l + 1 < LEVELS {
                    ups.push(Upsample::new(init, &format!("up{l}"), 2 * w)?);
                }
            }
            Ok(())
        })?;
        let head = Conv3x3::new(init, "head", c, 1, 1)?;
        Ok(FusionNetwork {
            config: cfg.clone(),
            stem_a,
            stem_b,
            scpm,
            gam,
            enc_a,
            enc_b,
            skips,
            compress,
            dec,
            ups,
            head,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn scpm(&self) -> Option<&Scpm> {
        self.scpm.as_ref()
    }

    /// The perturbation module at `level`, when perturbation is enabled.
    pub fn tcpm(&self, level: usize) -> Option<&Tcpm> {
        match self.skips.get(level) {
            Some(SkipFusion::Tcpm(t)) => Some(t),
            _ => None,
        }
    }

    pub fn check_inputs(shape_a: Shape, shape_b: Shape) -> Result<()> {
        if shape_a != shape_b {
            return Err(Error::Dimension(format!("input shapes differ: {shape_a} and {shape_b}")));
        }
        if shape_a.c() != 1 {
            return Err(Error::Dimension(format!("inputs must be single-channel, got {shape_a}")));
        }
        let (h, w) = (shape_a.h(), shape_a.w());
        if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::Dimension(format!(
                "input size {h}x{w} is not a positive multiple of {SIZE_MULTIPLE}"
            )));
        }
        Ok(())
    }

    /// Shallow convolutions, channel pruning and affine modulation.
    pub fn shallow<T: Real>(&self, tape: &mut Tape<T>, a: Var, b: Var, ctx: &FuseContext) -> Result<ShallowFeatures> {
        Self::check_inputs(tape.shape(a), tape.shape(b))?;
        let stem_a = self.stem_a.forward(tape, a)?;
        let stem_b = self.stem_b.forward(tape, b)?;
        let mut pruned = tape.concat(&[stem_a, stem_b])?;
        if let Some(scpm) = &self.scpm {
            pruned = scpm.forward(tape, pruned, ctx.semantic, ctx.pair_keys)?.out;
        }
        let (mut branch_a, mut branch_b) = partition(tape, pruned)?;
        if let Some((gam_a, gam_b)) = &self.gam {
            branch_a = gam_a.forward(tape, branch_a, stem_a)?;
            branch_b = gam_b.forward(tape, branch_b, stem_b)?;
        }
        Ok(ShallowFeatures { stem_a, stem_b, pruned, branch_a, branch_b })
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, a: Var, b: Var, ctx: &FuseContext) -> Result<EncoderState> {
        let sh = self.shallow(tape, a, b, ctx)?;
        let feats_a = self.enc_a.forward(tape, sh.branch_a)?;
        let feats_b = self.enc_b.forward(tape, sh.branch_b)?;
        let last = LEVELS - 1;
        let bottleneck = self.skips[last].forward(tape, feats_a[last], feats_b[last], &ctx.text)?;
        Ok(EncoderState { feats_a, feats_b, bottleneck })
    }

    /// Fused image in [0, 1], shaped (n, 1, h, w).
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, state: &EncoderState, ctx: &FuseContext) -> Result<Var> {
        let last = LEVELS - 1;
        let mut x = self.compress[last].forward(tape, state.bottleneck)?;
        for b in &self.dec[last] {
            x = b.forward(tape, x)?;
        }
        for l in (0..last).rev() {
            let up = self.ups[l].forward(tape, x)?;
            let skip = self.skips[l].forward(tape, state.feats_a[l], state.feats_b[l], &ctx.text)?;
            let cat = tape.concat(&[up, skip])?;
            x = self.compress[l].forward(tape, cat)?;
            for b in &self.dec[l] {
                x = b.forward(tape, x)?;
            }
        }
        let y = self.head.forward(tape, x)?;
        tape.sigmoid(y)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, a: Var, b: Var, ctx: &FuseContext) -> Result<Var> {
        let state = self.encode(tape, a, b, ctx)?;
        self.decode(tape, &state, ctx)
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub network: FusionNetwork,
    pub params: ParamStore<f32>,
}

impl FusionModel {
    /// Builds the network and draws its initial parameters from `config.seed`.
    pub fn build(config: &FusionConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let network = FusionNetwork::new(&mut Init::new(&mut params, config.seed), config)?;
        Ok(FusionModel { network, params })
    }

    pub fn config(&self) -> &FusionConfig {
        self.network.config()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Fuses a batch of single-channel images, shaped (n, 1, h, w).
    pub fn fuse(&self, a: &Tensor<f32>, b: &Tensor<f32>, ctx: &FuseContext) -> Result<Tensor<f32>> {
        let mut tape = Tape::with_params(&self.params);
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let out = self.network.forward(&mut tape, av, bv, ctx)?;
        Ok(tape.value(out).clone())
    }

    /// Like [`FusionModel::fuse`] for any image size: inputs are mirrored out
    /// to the next multiple of [`SIZE_MULTIPLE`] and the result is cropped back.
    pub fn fuse_padded(&self, a: &Tensor<f32>, b: &Tensor<f32>, ctx: &FuseContext) -> Result<Tensor<f32>> {
        let s = a.shape();
        if s != b.shape() {
            return Err(Error::Dimension(format!("input shapes differ: {s} vs {}", b.shape())));
        }
        let up = |v: usize| v.div_ceil(SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE;
        let (h, w) = (up(s.h()), up(s.w()));
        if (h, w) == (s.h(), s.w()) {
            return self.fuse(a, b, ctx);
        }
        let pad = |t: &Tensor<f32>| {
            Tensor::from_fn(Shape::new(s.n(), s.c(), h, w), |n, c, y, x| t.at(n, c, mirror(y, s.h()), mirror(x, s.w())))
        };
        let f = self.fuse(&pad(a), &pad(b), ctx)?;
        Ok(Tensor::from_fn(Shape::new(s.n(), 1, s.h(), s.w()), |n, _, y, x| f.at(n, 0, y, x)))
    }
}

/// Index `i` reflected into `0..len` without repeating the edge sample.
fn mirror(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let r = i % period;
    if r < len { r } else { period - r }
}
