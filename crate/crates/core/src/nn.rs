//! Layers assembled from tape ops. Layers only hold parameter ids, so the
//! same layer runs against an f32 store for training and an f64 copy of it
//! for gradient checks.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

/// Normalisation epsilon.
pub const NORM_EPS: f64 = 1e-6;
/// Squeeze-and-excitation reduction ratio.
pub const SE_REDUCTION: usize = 4;

/// Seeded parameter factory with hierarchical names (`enc_a.l0.b1.attn.q.w`).
pub struct Init<'s> {
    store: &'s mut ParamStore<f32>,
    rng: ChaCha8Rng,
    scope: Vec<String>,
}

impl<'s> Init<'s> {
    pub fn new(store: &'s mut ParamStore<f32>, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            scope: Vec::new(),
        }
    }

    /// Runs `f` with `name` appended to the current scope.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.scope.push(name.to_string());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.scope.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform(&mut self, name: &str, shape: Shape, fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let dist = Uniform::new(-bound, bound);
        let data = (0..shape.numel()).map(|_| dist.sample(&mut self.rng)).collect();
        let full = self.full_name(name);
        self.store.add(full, Tensor::new(shape, data)?)
    }

    pub fn full(&mut self, name: &str, shape: Shape, value: f32) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, Tensor::full(shape, value))
    }
}

/// Weight and bias of a k×k convolution.
#[derive(Clone, Debug)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
    c_in: usize,
    c_out: usize,
}

impl ConvParams {
    fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, k: usize, zero: bool) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config(format!("{name}: zero channel count ({c_in} -> {c_out})")));
        }
        init.scoped(name, |init| {
            let ws = Shape::new(c_out, c_in, k, k);
            let bs = Shape::new(1, c_out, 1, 1);
            let (w, b) = if zero {
                (init.full("w", ws, 0.0)?, init.full("b", bs, 0.0)?)
            } else {
                let fan_in = c_in * k * k;
                (init.uniform("w", ws, fan_in)?, init.uniform("b", bs, fan_in)?)
            };
            Ok(ConvParams { w, b, c_in, c_out })
        })
    }
}

/// Per-pixel linear map across channels.
#[derive(Clone, Debug)]
pub struct Conv1x1(ConvParams);

impl Conv1x1 {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Conv1x1(ConvParams::new(init, name, c_in, c_out, 1, false)?))
    }

    /// Zero weight and bias; the layer outputs zeros until trained.
    pub fn zeroed(init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Conv1x1(ConvParams::new(init, name, c_in, c_out, 1, true)?))
    }

    pub fn c_in(&self) -> usize {
        self.0.c_in
    }

    pub fn c_out(&self) -> usize {
        self.0.c_out
    }

    pub fn weight(&self) -> ParamId {
        self.0.w
    }

    pub fn bias(&self) -> ParamId {
        self.0.b
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(self.0.w)?;
        let b = tape.param(self.0.b)?;
        tape.conv2d(x, w, Some(b), 1, 0)
    }
}

/// 3×3 convolution with zero padding 1; stride 2 gives `ceil(h/2)`.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    p: ConvParams,
    stride: usize,
}

impl Conv3x3 {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("{name}: stride must be 1 or 2, got {stride}")));
        }
        Ok(Conv3x3 {
            p: ConvParams::new(init, name, c_in, c_out, 3, false)?,
            stride,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.p.w
    }

    pub fn bias(&self) -> ParamId {
        self.p.b
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(self.p.w)?;
        let b = tape.param(self.p.b)?;
        tape.conv2d(x, w, Some(b), self.stride, 1)
    }
}

/// Instance normalisation with learnable per-channel scale and shift.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    scale: ParamId,
    shift: ParamId,
}

impl ChannelNorm {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(ChannelNorm {
                scale: init.full("scale", Shape::new(1, c, 1, 1), 1.0)?,
                shift: init.full("shift", Shape::new(1, c, 1, 1), 0.0)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let z = tape.instance_norm(x, NORM_EPS)?;
        let s = tape.param(self.scale)?;
        let b = tape.param(self.shift)?;
        let z = tape.mul(z, s)?;
        tape.add(z, b)
    }
}

/// Squeeze-and-excitation channel weights: GAP, fc, ReLU, fc, sigmoid.
#[derive(Clone, Debug)]
pub struct SeBlock {
    fc1: Conv1x1,
    fc2: Conv1x1,
    channels: usize,
}

impl SeBlock {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Result<Self> {
        if c == 0 || c % SE_REDUCTION != 0 {
            return Err(Error::Config(format!(
                "{name}: {c} channels not divisible by the SE reduction {SE_REDUCTION}"
            )));
        }
        init.scoped(name, |init| {
            Ok(SeBlock {
                fc1: Conv1x1::new(init, "fc1", c, c / SE_REDUCTION)?,
                fc2: Conv1x1::new(init, "fc2", c / SE_REDUCTION, c)?,
                channels: c,
            })
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn fc1(&self) -> &Conv1x1 {
        &self.fc1
    }

    pub fn fc2(&self) -> &Conv1x1 {
        &self.fc2
    }

    /// Weights shaped (n, c, 1, 1), each in (0, 1).
    pub fn weights<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.global_avg_pool(x)?;
        let h = self.fc1.forward(tape, g)?;
        let h = tape.relu(h)?;
        let s = self.fc2.forward(tape, h)?;
        tape.sigmoid(s)
    }
}

/// Result of an attention layer, with the attention map kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    /// (n, heads, c/heads, c/heads); each row sums to 1.
    pub attn: Var,
}

/// Multi-head attention across channels: each channel plane is a token of
/// length h·w, so cost is linear in the pixel count.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    q: Conv1x1,
    kv: Conv1x1,
    temperature: ParamId,
    proj: Conv1x1,
    heads: usize,
    channels: usize,
}

impl ChannelAttention {
    pub fn new(init: &mut Init, name: &str, c: usize, heads: usize) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("{name}: {heads} heads do not divide {c} channels")));
        }
        init.scoped(name, |init| {
            Ok(ChannelAttention {
                q: Conv1x1::new(init, "q", c, c)?,
                kv: Conv1x1::new(init, "kv", c, 2 * c)?,
                temperature: init.full("temperature", Shape::new(1, heads, 1, 1), 1.0)?,
                proj: Conv1x1::zeroed(init, "proj", c, c)?,
                heads,
                channels: c,
            })
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Queries from `xq`, keys and values from `xkv`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, xq: Var, xkv: Var) -> Result<AttentionOutput> {
        if tape.shape(xq) != tape.shape(xkv) {
            return Err(Error::Dimension(format!(
                "attention: query input {} and key/value input {} differ",
                tape.shape(xq),
                tape.shape(xkv)
            )));
        }
        let q = self.q.forward(tape, xq)?;
        let kv = self.kv.forward(tape, xkv)?;
        let (k, v) = tape.split(kv, self.channels)?;
        let q = tape.l2_normalize(q)?;
        let k = tape.l2_normalize(k)?;
        let logits = tape.channel_gram(q, k, self.heads)?;
        let t = tape.param(self.temperature)?;
        let logits = tape.mul(logits, t)?;
        let attn = tape.softmax(logits)?;
        let mixed = tape.channel_attend(attn, v, self.heads)?;
        let out = self.proj.forward(tape, mixed)?;
        Ok(AttentionOutput { out, attn })
    }
}

/// `conv(a * sigmoid(b))` where `[a, b] = conv(x)`; hidden width 2c.
#[derive(Clone, Debug)]
pub struct GatedFfn {
    expand: Conv1x1,
    reduce: Conv1x1,
    hidden: usize,
}

impl GatedFfn {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Result<Self> {
        let hidden = 2 * c;
        init.scoped(name, |init| {
            Ok(GatedFfn {
                expand: Conv1x1::new(init, "expand", c, 2 * hidden)?,
                reduce: Conv1x1::zeroed(init, "reduce", hidden, c)?,
                hidden,
            })
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = self.expand.forward(tape, x)?;
        let (a, b) = tape.split(y, self.hidden)?;
        let gate = tape.sigmoid(b)?;
        let g = tape.mul(a, gate)?;
        self.reduce.forward(tape, g)
    }
}

/// Pre-norm residual block: attention then gated FFN.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    norm1: ChannelNorm,
    attn: ChannelAttention,
    norm2: ChannelNorm,
    ffn: GatedFfn,
}

impl TransformerBlock {
    pub fn new(init: &mut Init, name: &str, c: usize, heads: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(TransformerBlock {
                norm1: ChannelNorm::new(init, "norm1", c)?,
                attn: ChannelAttention::new(init, "attn", c, heads)?,
                norm2: ChannelNorm::new(init, "norm2", c)?,
                ffn: GatedFfn::new(init, "ffn", c)?,
            })
        })
    }

    pub fn forward_with_attention<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<AttentionOutput> {
        let n = self.norm1.forward(tape, x)?;
        let a = self.attn.forward(tape, n, n)?;
        let x = tape.add(x, a.out)?;
        let n = self.norm2.forward(tape, x)?;
        let f = self.ffn.forward(tape, n)?;
        Ok(AttentionOutput { out: tape.add(x, f)?, attn: a.attn })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(tape, x)?.out)
    }
}

/// Residual cross-attention: queries from one stream, keys and values from another.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    norm_q: ChannelNorm,
    norm_kv: ChannelNorm,
    attn: ChannelAttention,
    norm2: ChannelNorm,
    ffn: GatedFfn,
}

impl CrossAttentionBlock {
    pub fn new(init: &mut Init, name: &str, c: usize, heads: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(CrossAttentionBlock {
                norm_q: ChannelNorm::new(init, "norm_q", c)?,
                norm_kv: ChannelNorm::new(init, "norm_kv", c)?,
                attn: ChannelAttention::new(init, "attn", c, heads)?,
                norm2: ChannelNorm::new(init, "norm2", c)?,
                ffn: GatedFfn::new(init, "ffn", c)?,
            })
        })
    }

    pub fn forward_with_attention<T: Real>(&self, tape: &mut Tape<T>, query: Var, context: Var) -> Result<AttentionOutput> {
        let nq = self.norm_q.forward(tape, query)?;
        let nkv = self.norm_kv.forward(tape, context)?;
        let a = self.attn.forward(tape, nq, nkv)?;
        let y = tape.add(query, a.out)?;
        let n = self.norm2.forward(tape, y)?;
        let f = self.ffn.forward(tape, n)?;
        Ok(AttentionOutput { out: tape.add(y, f)?, attn: a.attn })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, query: Var, context: Var) -> Result<Var> {
        Ok(self.forward_with_attention(tape, query, context)?.out)
    }
}

/// Stride-2 3×3 convolution doubling the channel count. Odd sizes round up.
#[derive(Clone, Debug)]
pub struct Downsample(Conv3x3);

impl Downsample {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Result<Self> {
        Ok(Downsample(Conv3x3::new(init, name, c, 2 * c, 2)?))
    }

    pub fn conv(&self) -> &Conv3x3 {
        &self.0
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.h() < 2 || s.w() < 2 {
            return Err(Error::Dimension(format!("downsample needs h, w >= 2, got {s}")));
        }
        self.0.forward(tape, x)
    }
}

/// Nearest ×2 upsampling followed by a 1×1 convolution halving the channels.
#[derive(Clone, Debug)]
pub struct Upsample(Conv1x1);

impl Upsample {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Result<Self> {
        if c < 2 || c % 2 != 0 {
            return Err(Error::Config(format!("{name}: cannot halve {c} channels")));
        }
        Ok(Upsample(Conv1x1::new(init, name, c, c / 2)?))
    }

    pub fn conv(&self) -> &Conv1x1 {
        &self.0
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let up = tape.upsample2x(x)?;
        self.0.forward(tape, up)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with<R>(f: impl FnOnce(&mut Init) -> Result<R>) -> (ParamStore<f32>, R) {
        let mut store = ParamStore::new();
        let r = f(&mut Init::new(&mut store, 7)).unwrap();
        (store, r)
    }

    fn ramp(shape: Shape) -> Tensor<f32> {
        Tensor::from_fn(shape, |n, c, y, x| ((n * 7 + c * 5 + y * 3 + x) % 11) as f32 * 0.1 - 0.4)
    }

    #[test]
    fn conv1x1_identity_and_bias_only() {
        let (mut store, conv) = store_with(|i| Conv1x1::new(i, "c", 3, 3));
        let eye = Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        store.set_value(conv.weight(), eye).unwrap();
        store.set_value(conv.bias(), Tensor::zeros(Shape::new(1, 3, 1, 1))).unwrap();
        let x = ramp(Shape::new(2, 3, 4, 4));
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x.clone());
        let y = conv.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), &x);

        let (mut store, conv) = store_with(|i| Conv1x1::new(i, "c", 2, 1));
        store.set_value(conv.weight(), Tensor::new(Shape::new(1, 2, 1, 1), vec![1.0, 1.0]).unwrap()).unwrap();
        store.set_value(conv.bias(), Tensor::zeros(Shape::new(1, 1, 1, 1))).unwrap();
        let x = ramp(Shape::new(1, 2, 3, 3));
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x.clone());
        let y = conv.forward(&mut tape, xv).unwrap();
        let expect: Vec<f32> = x.plane(0, 0).iter().zip(x.plane(0, 1)).map(|(a, b)| a + b).collect();
        assert_eq!(tape.value(y).data(), &expect[..]);
    }

    #[test]
    fn conv1x1_channel_mismatch_is_dimension_error() {
        let (store, conv) = store_with(|i| Conv1x1::new(i, "c", 3, 2));
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::zeros(Shape::new(1, 4, 2, 2)));
        assert!(matches!(conv.forward(&mut tape, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv3x3_delta_box_and_stride() {
        let (mut store, conv) = store_with(|i| Conv3x3::new(i, "c", 1, 1, 1));
        let delta = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, y, x| if y == 1 && x == 1 { 1.0 } else { 0.0 });
        store.set_value(conv.weight(), delta).unwrap();
        store.set_value(conv.bias(), Tensor::zeros(Shape::new(1, 1, 1, 1))).unwrap();
        let x = ramp(Shape::new(1, 1, 5, 6));
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x.clone());
        let y = conv.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), &x);

        store.set_value(conv.weight(), Tensor::ones(Shape::new(1, 1, 3, 3))).unwrap();
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(Tensor::ones(Shape::new(1, 1, 4, 4)));
        let y = conv.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y).at(0, 0, 1, 2), 9.0);

        let (store, conv) = store_with(|i| Conv3x3::new(i, "c", 2, 3, 2));
        for (h, oh) in [(8, 4), (7, 4)] {
            let mut tape = Tape::with_params(&store);
            let xv = tape.constant(Tensor::zeros(Shape::new(1, 2, h, h)));
            let y = conv.forward(&mut tape, xv).unwrap();
            assert_eq!(tape.shape(y), Shape::new(1, 3, oh, oh));
        }
    }

    #[test]
    fn se_weights_are_half_when_zeroed_and_in_unit_interval() {
        let (mut store, se) = store_with(|i| SeBlock::new(i, "se", 8));
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(ramp(Shape::new(2, 8, 4, 4)));
        let w = se.weights(&mut tape, x).unwrap();
        assert_eq!(tape.shape(w), Shape::new(2, 8, 1, 1));
        assert!(tape.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
        drop(tape);
        for id in [se.fc1.weight(), se.fc1.bias(), se.fc2.weight(), se.fc2.bias()] {
            let s = store.value(id).shape();
            store.set_value(id, Tensor::zeros(s)).unwrap();
        }
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(ramp(Shape::new(1, 8, 4, 4)));
        let w = se.weights(&mut tape, x).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn se_rejects_indivisible_width() {
        let mut store = ParamStore::new();
        assert!(matches!(SeBlock::new(&mut Init::new(&mut store, 0), "se", 6), Err(Error::Config(_))));
    }

    #[test]
    fn fresh_transformer_block_is_identity_with_stochastic_attention() {
        let (store, blk) = store_with(|i| TransformerBlock::new(i, "blk", 8, 2));
        let x = ramp(Shape::new(1, 8, 16, 16));
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x.clone());
        let out = blk.forward_with_attention(&mut tape, xv).unwrap();
        assert_eq!(tape.value(out.out), &x);
        assert_eq!(tape.shape(out.attn), Shape::new(1, 2, 4, 4));
        for row in tape.value(out.attn).data().chunks(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut store = ParamStore::new();
        let err = TransformerBlock::new(&mut Init::new(&mut store, 0), "blk", 8, 3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn down_and_up_shapes() {
        let (store, (down, up)) = store_with(|i| Ok((Downsample::new(i, "d", 8)?, Upsample::new(i, "u", 16)?)));
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::zeros(Shape::new(1, 8, 32, 32)));
        let d = down.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(d), Shape::new(1, 16, 16, 16));
        let u = up.forward(&mut tape, d).unwrap();
        assert_eq!(tape.shape(u), Shape::new(1, 8, 32, 32));
    }

    #[test]
    fn down_then_up_keeps_a_constant_with_averaging_delta_kernels() {
        let (mut store, (down, up)) = store_with(|i| Ok((Downsample::new(i, "d", 4)?, Upsample::new(i, "u", 8)?)));
        let dw = Tensor::from_fn(Shape::new(8, 4, 3, 3), |_, _, y, x| if y == 1 && x == 1 { 0.25 } else { 0.0 });
        store.set_value(down.conv().weight(), dw).unwrap();
        store.set_value(down.conv().bias(), Tensor::zeros(Shape::new(1, 8, 1, 1))).unwrap();
        store.set_value(up.conv().weight(), Tensor::full(Shape::new(4, 8, 1, 1), 0.125)).unwrap();
        store.set_value(up.conv().bias(), Tensor::zeros(Shape::new(1, 4, 1, 1))).unwrap();
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::full(Shape::new(1, 4, 8, 8), 0.75));
        let d = down.forward(&mut tape, x).unwrap();
        let u = up.forward(&mut tape, d).unwrap();
        assert!(tape.value(u).data().iter().all(|&v| (v - 0.75).abs() < 1e-6));
    }
}
