//! Semantic-aware channel pruning.
//!
//! Channel weights from squeeze-and-excitation (ω_C) are combined with
//! semantic weights mapped from a provider embedding (ω_S):
//! `ω_F = ω_C + α·σ(ω_S)`. The top-ranked channels are kept, scaled by their
//! ω_F entry, expanded back to the input width by a 1×1 convolution, and split
//! into two modality streams.

use crate::autodiff::{ChannelIndex, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv1x1, Init, SeBlock};
use crate::params::ParamId;
use crate::providers::{SemanticProvider, EMBED_DIM};
use crate::selection::{keep_count, top_k, ChannelSelection};
use crate::tensor::{Real, Shape, Tensor};

/// `ω_C + α·σ(ω_S)`, with `α` a scalar node.
pub fn fuse_weights<T: Real>(tape: &mut Tape<T>, omega_c: Var, omega_s: Var, alpha: Var) -> Result<Var> {
    if tape.shape(omega_c) != tape.shape(omega_s) {
        return Err(Error::Dimension(format!(
            "fuse_weights: channel weights {} and semantic weights {} differ",
            tape.shape(omega_c),
            tape.shape(omega_s)
        )));
    }
    let s = tape.sigmoid(omega_s)?;
    let scaled = tape.mul(s, alpha)?;
    tape.add(omega_c, scaled)
}

/// Per-sample weight rows of an (n, c, 1, 1) tensor.
fn weight_rows<T: Real>(w: &Tensor<T>) -> impl Iterator<Item = &[T]> {
    w.data().chunks(w.shape().c())
}

/// Keeps the `ceil(ratio·c)` highest-weighted channels of each sample, in
/// ascending channel order, each scaled by its weight. The selection is
/// frozen on the tape.
pub fn prune_channels<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    weights: Var,
    ratio: f64,
) -> Result<(Var, Vec<ChannelSelection>)> {
    let (xs, ws) = (tape.shape(x), tape.shape(weights));
    if ws != Shape::new(xs.n(), xs.c(), 1, 1) {
        return Err(Error::Dimension(format!("weights {ws} do not match features {xs}")));
    }
    let k = keep_count(xs.c(), ratio)?;
    let idx = tape.freeze_indices(|t| {
        ChannelIndex::per_sample(weight_rows(t.value(weights)).map(|row| top_k(row, k)).collect())
    })?;
    let selections = weight_rows(tape.value(weights))
        .enumerate()
        .map(|(n, row)| ChannelSelection {
            kept: idx.for_sample(n).to_vec(),
            ranking_weights: row.iter().map(|v| v.as_f64() as f32).collect(),
        })
        .collect();
    let kept = tape.gather(x, idx.clone())?;
    let kept_w = tape.gather(weights, idx)?;
    Ok((tape.mul(kept, kept_w)?, selections))
}

pub fn expand_channels<T: Real>(tape: &mut Tape<T>, x: Var, layer: &Conv1x1) -> Result<Var> {
    layer.forward(tape, x)
}

/// First half of the channels to stream A, second half to stream B.
pub fn partition<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
    let c = tape.shape(x).c();
    if c == 0 || c % 2 != 0 {
        return Err(Error::Config(format!("cannot partition {c} channels into two halves")));
    }
    tape.split(x, c / 2)
}

/// Embeds every sample of `x` with `provider` and returns the detached
/// (n, EMBED_DIM, 1, 1) batch. The vectors are frozen on the tape.
pub fn semantic_batch<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    provider: &dyn SemanticProvider,
    pair_keys: Option<&[String]>,
) -> Result<Var> {
    let n = tape.shape(x).n();
    if let Some(keys) = pair_keys {
        if keys.len() != n {
            return Err(Error::Argument(format!("{} pair keys for a batch of {n}", keys.len())));
        }
    }
    let values = tape.freeze_vector(|t| {
        let xv = t.value(x);
        let mut out = Vec::with_capacity(n * EMBED_DIM);
        for i in 0..n {
            let key = pair_keys.map(|k| k[i].as_str());
            let e = provider.semantic_embed(&xv.sample(i).cast::<f32>(), key)?;
            if e.dim() != EMBED_DIM {
                return Err(Error::Dimension(format!("semantic embedding dim {}, expected {EMBED_DIM}", e.dim())));
            }
            out.extend(e.values.iter().map(|&v| T::lit(v as f64)));
        }
        Ok(out)
    })?;
    let t = Tensor::new(Shape::new(n, EMBED_DIM, 1, 1), values)?;
    Ok(tape.constant(t))
}

#[derive(Clone, Copy, Debug)]
pub struct ScpmOutput {
    /// Expanded features, same shape as the input.
    pub out: Var,
    /// Fused ranking weights ω_F, (n, c, 1, 1).
    pub omega_f: Var,
}

#[derive(Clone, Debug)]
pub struct Scpm {
    se: Option<SeBlock>,
    semantic_map: Option<Conv1x1>,
    alpha: Option<ParamId>,
    expand: Conv1x1,
    channels: usize,
    ratio: f64,
}

impl Scpm {
    /// `use_ca` enables ω_C; `use_semantic` enables the α·σ(ω_S) term.
    /// With both disabled every channel has weight 1.
    pub fn new(init: &mut Init, name: &str, c: usize, ratio: f64, use_ca: bool, use_semantic: bool) -> Result<Self> {
        let k = keep_count(c, ratio)?;
        init.scoped(name, |init| {
            let se = use_ca.then(|| SeBlock::new(init, "se", c)).transpose()?;
            let (semantic_map, alpha) = if use_semantic {
                (
                    Some(Conv1x1::new(init, "semantic_map", EMBED_DIM, c)?),
                    Some(init.full("alpha", Shape::SCALAR, 1.0)?),
                )
            } else {
                (None, None)
            };
            Ok(Scpm {
                se,
                semantic_map,
                alpha,
                expand: Conv1x1::new(init, "expand", k, c)?,
                channels: c,
                ratio,
            })
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kept(&self) -> usize {
        self.expand.c_in()
    }

    pub fn alpha(&self) -> Option<ParamId> {
        self.alpha
    }

    pub fn se(&self) -> Option<&SeBlock> {
        self.se.as_ref()
    }

    pub fn expand_layer(&self) -> &Conv1x1 {
        &self.expand
    }

    /// ω_F for every sample, (n, c, 1, 1).
    pub fn channel_weights<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        provider: &dyn SemanticProvider,
        pair_keys: Option<&[String]>,
    ) -> Result<Var> {
        let s = tape.shape(x);
        if s.c() != self.channels {
            return Err(Error::Dimension(format!("SCPM built for {} channels, got {s}", self.channels)));
        }
        let omega_c = self.se.as_ref().map(|se| se.weights(tape, x)).transpose()?;
        let semantic = match (&self.semantic_map, self.alpha) {
            (Some(map), Some(alpha)) => {
                let emb = semantic_batch(tape, x, provider, pair_keys)?;
                let omega_s = map.forward(tape, emb)?;
                Some((omega_s, tape.param(alpha)?))
            }
            _ => None,
        };
        match (omega_c, semantic) {
            (Some(wc), Some((ws, a))) => fuse_weights(tape, wc, ws, a),
            (Some(wc), None) => Ok(wc),
            (None, Some((ws, a))) => {
                let sig = tape.sigmoid(ws)?;
                tape.mul(sig, a)
            }
            (None, None) => Ok(tape.constant(Tensor::ones(Shape::new(s.n(), s.c(), 1, 1)))),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        provider: &dyn SemanticProvider,
        pair_keys: Option<&[String]>,
    ) -> Result<ScpmOutput> {
        let omega_f = self.channel_weights(tape, x, provider, pair_keys)?;
        let (pruned, _) = prune_channels(tape, x, omega_f, self.ratio)?;
        let out = expand_channels(tape, pruned, &self.expand)?;
        Ok(ScpmOutput { out, omega_f })
    }
}
