//! Text-guided channel perturbation.
//!
//! The two streams are concatenated, the top half of channels by
//! squeeze-and-excitation weight is kept and expanded ×2, and the expanded
//! channels are reordered by a permutation derived from a text embedding.
//! Cross-attention then queries the reordered features against the
//! unpermuted ones.

use std::sync::Arc;

use crate::autodiff::{ChannelIndex, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{AttentionOutput, Conv1x1, CrossAttentionBlock, Init, SeBlock};
use crate::providers::{EmbeddingVector, EMBED_DIM};
use crate::scpm::prune_channels;
use crate::selection::{keep_count, stable_argsort_desc, ChannelSelection};
use crate::tensor::{Real, Shape, Tensor};

/// Hidden width of the text mapping network.
pub const TEXT_HIDDEN: usize = 256;

/// A channel permutation and the weights it was sorted from.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationIndex {
    perm: Vec<usize>,
    source_weights: Vec<f32>,
}

impl PerturbationIndex {
    /// Stable descending argsort of `weights`.
    pub fn from_weights<T: Real>(weights: &[T]) -> Self {
        PerturbationIndex {
            perm: stable_argsort_desc(weights),
            source_weights: weights.iter().map(|w| w.as_f64() as f32).collect(),
        }
    }

    /// Wraps an explicit permutation; fails unless it is a bijection.
    pub fn from_perm(perm: Vec<usize>) -> Result<Self> {
        let idx = PerturbationIndex { source_weights: vec![0.0; perm.len()], perm };
        idx.check_bijection()?;
        Ok(idx)
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn source_weights(&self) -> &[f32] {
        &self.source_weights
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.perm.len()];
        self.perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true))
    }

    fn check_bijection(&self) -> Result<()> {
        if self.is_bijection() {
            Ok(())
        } else {
            Err(Error::Contract(format!("index {:?} is not a permutation", self.perm)))
        }
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }
}

/// Channel `i` of the result is channel `perm[i]` of `x`.
pub fn perturb<T: Real>(tape: &mut Tape<T>, x: Var, idx: &PerturbationIndex) -> Result<Var> {
    idx.check_bijection()?;
    let c = tape.shape(x).c();
    if idx.len() != c {
        return Err(Error::Dimension(format!("permutation of {} for {c} channels", idx.len())));
    }
    tape.gather(x, Arc::new(ChannelIndex::shared(idx.perm.clone())))
}

/// Two-layer map from a text embedding to one weight per channel.
#[derive(Clone, Debug)]
pub struct TextGuide {
    fc1: Conv1x1,
    fc2: Conv1x1,
}

impl TextGuide {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(TextGuide {
                fc1: Conv1x1::new(init, "fc1", EMBED_DIM, TEXT_HIDDEN)?,
                fc2: Conv1x1::new(init, "fc2", TEXT_HIDDEN, c)?,
            })
        })
    }

    pub fn channels(&self) -> usize {
        self.fc2.c_out()
    }

    /// Guide weights, (1, c, 1, 1).
    pub fn weights<T: Real>(&self, tape: &mut Tape<T>, text: &EmbeddingVector) -> Result<Var> {
        if text.dim() != EMBED_DIM {
            return Err(Error::Dimension(format!("text embedding dim {}, expected {EMBED_DIM}", text.dim())));
        }
        let e = Tensor::new(
            Shape::new(1, EMBED_DIM, 1, 1),
            text.values.iter().map(|&v| T::lit(v as f64)).collect(),
        )?;
        let e = tape.constant(e);
        let h = self.fc1.forward(tape, e)?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, h)
    }
}

/// Permutation for the current guide output. The permutation is frozen on
/// the tape so that replays reuse it.
pub fn perturbation_index<T: Real>(tape: &mut Tape<T>, guide_weights: Var, c: usize) -> Result<PerturbationIndex> {
    let len = tape.shape(guide_weights).c();
    if len != c {
        return Err(Error::Dimension(format!("guide produced {len} weights for {c} channels")));
    }
    let idx = tape.freeze_indices(|t| {
        Ok(ChannelIndex::shared(PerturbationIndex::from_weights(t.value(guide_weights).data()).perm))
    })?;
    let source_weights = tape.value(guide_weights).data().iter().map(|w| w.as_f64() as f32).collect();
    let out = PerturbationIndex { perm: idx.for_sample(0).to_vec(), source_weights };
    out.check_bijection()?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TcpmOutput {
    pub out: Var,
    /// Selected channels before expansion.
    pub selected: Var,
    /// Expanded channels before permutation; the cross-attention context.
    pub original: Var,
    pub perturbed: Var,
    pub perm: PerturbationIndex,
    pub selections: Vec<ChannelSelection>,
    pub attn: Var,
}

#[derive(Clone, Debug)]
pub struct Tcpm {
    se: Option<SeBlock>,
    expand: Conv1x1,
    guide: TextGuide,
    cross: CrossAttentionBlock,
    in_channels: usize,
    ratio: f64,
}

impl Tcpm {
    /// `c_each` is the width of each input stream. Without channel attention
    /// all `2·c_each` channels are kept.
    pub fn new(init: &mut Init, name: &str, c_each: usize, heads: usize, ratio: f64, use_ca: bool) -> Result<Self> {
        let c_cat = 2 * c_each;
        let k = if use_ca { keep_count(c_cat, ratio)? } else { c_cat };
        init.scoped(name, |init| {
            Ok(Tcpm {
                se: use_ca.then(|| SeBlock::new(init, "se", c_cat)).transpose()?,
                expand: Conv1x1::new(init, "expand", k, 2 * k)?,
                guide: TextGuide::new(init, "guide", 2 * k)?,
                cross: CrossAttentionBlock::new(init, "cross", 2 * k, heads)?,
                in_channels: c_cat,
                ratio,
            })
        })
    }

    /// Channel count of the output: twice the number of selected channels.
    pub fn out_channels(&self) -> usize {
        self.expand.c_out()
    }

    pub fn se(&self) -> Option<&SeBlock> {
        self.se.as_ref()
    }

    pub fn expand_layer(&self) -> &Conv1x1 {
        &self.expand
    }

    /// Keeps the top channels by SE weight, scaled by that weight.
    pub fn select_channels<T: Real>(&self, tape: &mut Tape<T>, x_cat: Var) -> Result<(Var, Vec<ChannelSelection>)> {
        match &self.se {
            Some(se) => {
                let w = se.weights(tape, x_cat)?;
                prune_channels(tape, x_cat, w, self.ratio)
            }
            None => Ok((x_cat, Vec::new())),
        }
    }

    pub fn expand2x<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.expand.forward(tape, x)
    }

    /// Residual cross-attention with queries from `perturbed`, keys and values from `original`.
    pub fn cross_attention<T: Real>(&self, tape: &mut Tape<T>, perturbed: Var, original: Var) -> Result<AttentionOutput> {
        self.cross.forward_with_attention(tape, perturbed, original)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, a: Var, b: Var, text: &EmbeddingVector) -> Result<TcpmOutput> {
        if tape.shape(a) != tape.shape(b) {
            return Err(Error::Dimension(format!(
                "TCPM inputs differ: {} and {}",
                tape.shape(a),
                tape.shape(b)
            )));
        }
        let x_cat = tape.concat(&[a, b])?;
        if tape.shape(x_cat).c() != self.in_channels {
            return Err(Error::Dimension(format!(
                "TCPM built for {} concatenated channels, got {}",
                self.in_channels,
                tape.shape(x_cat).c()
            )));
        }
        let (selected, selections) = self.select_channels(tape, x_cat)?;
        let original = self.expand2x(tape, selected)?;
        let gw = self.guide.weights(tape, text)?;
        let perm = perturbation_index(tape, gw, self.out_channels())?;
        let perturbed = perturb(tape, original, &perm)?;
        let att = self.cross_attention(tape, perturbed, original)?;
        Ok(TcpmOutput {
            out: att.out,
            selected,
            original,
            perturbed,
            perm,
            selections,
            attn: att.attn,
        })
    }
}
