//! Losses, optimiser, learning-rate schedule, data pipeline and the training
//! loop with resumable checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::io::{load_image, match_stems, split_luma, write_atomic};
use crate::network::{FuseContext, FusionModel};
use crate::params::ParamStore;
use crate::providers::{EmbeddingTable, Providers};
use crate::tensor::{Real, Shape, Tensor};

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// `|Gx| + |Gy|` of a single-channel batch, reflect-padded to keep its size.
pub fn sobel_grad<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.c() != 1 {
        return Err(Error::Dimension(format!("sobel_grad needs one channel, got {s}")));
    }
    let kernel = Tensor::new(
        Shape::new(2, 1, 3, 3),
        SOBEL_X.iter().chain(&SOBEL_Y).map(|&v| T::lit(v)).collect(),
    )?;
    let k = tape.constant(kernel);
    let padded = tape.reflect_pad(x, 1)?;
    let g = tape.conv2d(padded, k, None, 1, 0)?;
    let g = tape.abs(g)?;
    let (gx, gy) = tape.split(g, 1)?;
    tape.add(gx, gy)
}

fn check_triple<T: Real>(tape: &Tape<T>, f: Var, a: Var, b: Var) -> Result<()> {
    let (sf, sa, sb) = (tape.shape(f), tape.shape(a), tape.shape(b));
    if sf != sa || sf != sb {
        return Err(Error::Dimension(format!("loss inputs differ in shape: {sf}, {sa}, {sb}")));
    }
    Ok(())
}

/// Mean of `|∇F − max(∇A, ∇B)|` over pixels (and samples).
pub fn grad_loss<T: Real>(tape: &mut Tape<T>, f: Var, a: Var, b: Var) -> Result<Var> {
    check_triple(tape, f, a, b)?;
    let gf = sobel_grad(tape, f)?;
    let ga = sobel_grad(tape, a)?;
    let gb = sobel_grad(tape, b)?;
    let target = tape.maximum(ga, gb)?;
    let d = tape.sub(gf, target)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// `mean|F − A| + mean|F − B|`.
pub fn l1_loss<T: Real>(tape: &mut Tape<T>, f: Var, a: Var, b: Var) -> Result<Var> {
    check_triple(tape, f, a, b)?;
    let mut terms = [f; 2];
    for (t, src) in terms.iter_mut().zip([a, b]) {
        let d = tape.sub(f, src)?;
        let d = tape.abs(d)?;
        *t = tape.mean(d)?;
    }
    tape.add(terms[0], terms[1])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_grad: f64,
    pub l_l1: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn new(l_grad: f64, l_l1: f64) -> Self {
        LossReport { l_grad, l_l1, l_total: l_grad + l_l1 }
    }
}

/// Total loss node plus its readout.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, f: Var, a: Var, b: Var) -> Result<(Var, LossReport)> {
    let g = grad_loss(tape, f, a, b)?;
    let l = l1_loss(tape, f, a, b)?;
    let total = tape.add(g, l)?;
    let report = LossReport::new(tape.value(g).item()?.as_f64(), tape.value(l).item()?.as_f64());
    Ok((total, report))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![0.0; p.value().shape().numel()]).collect();
        Adam { config, t: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, i: usize) -> &[f32] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f32] {
        &self.v[i]
    }

    /// Applies one update from the gradients stored in `params`. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimiser tracks {} tensors, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some((_, p)) = params.iter().find(|(_, p)| !p.grad().is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in parameter {}", p.name())));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = (1.0 - beta1.powi(self.t as i32)) as f32;
        let c2 = (1.0 - beta2.powi(self.t as i32)) as f32;
        let (b1, b2, eps, lr) = (beta1 as f32, beta2 as f32, eps as f32, lr as f32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (w, g) = params.value_and_grad_mut(id);
            for (((w, &g), m), v) in w.iter_mut().zip(g).zip(&mut self.m[i]).zip(&mut self.v[i]) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` at step 0 to `lr_end` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_end: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("cosine schedule needs at least one step".into()));
    }
    if step > total {
        return Err(Error::Argument(format!("step {step} beyond schedule length {total}")));
    }
    if step == 0 {
        return Ok(lr0);
    }
    if step == total {
        return Ok(lr_end);
    }
    let t = step as f64 / total as f64;
    let lr = lr_end + 0.5 * (lr0 - lr_end) * (1.0 + (std::f64::consts::PI * t).cos());
    Ok(lr.clamp(lr0.min(lr_end), lr0.max(lr_end)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// Overrides `epochs × batches per epoch` when set.
    pub steps: Option<usize>,
    pub batch: usize,
    pub crop: usize,
    pub lr0: f64,
    pub lr_end: f64,
    pub adam: AdamConfig,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 100,
            steps: None,
            batch: 2,
            crop: 192,
            lr0: 1e-4,
            lr_end: 1e-5,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.crop == 0 || self.crop % crate::network::SIZE_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "crop {} must be a positive multiple of {}",
                self.crop,
                crate::network::SIZE_MULTIPLE
            )));
        }
        if !(self.lr0.is_finite() && self.lr_end.is_finite() && self.lr0 >= self.lr_end && self.lr_end >= 0.0) {
            return Err(Error::Config(format!("learning rates {} → {} must be finite and non-increasing", self.lr0, self.lr_end)));
        }
        if self.steps == Some(0) || (self.steps.is_none() && self.epochs == 0) {
            return Err(Error::Config("schedule has no steps".into()));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch).max(1)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.steps.unwrap_or(self.epochs * self.batches_per_epoch(dataset_len))
    }

    pub fn lr(&self, step: usize, total: usize) -> Result<f64> {
        cosine_lr(step, total, self.lr0, self.lr_end)
    }
}

/// Aligned crops of two (1, c, h, w) images from one random window.
pub fn random_crop_pair<R: Rng>(a: &Tensor<f32>, b: &Tensor<f32>, size: usize, rng: &mut R) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = a.shape();
    if s != b.shape() {
        return Err(Error::Data(format!("pair shapes differ: {s} and {}", b.shape())));
    }
    if s.h() < size || s.w() < size {
        return Err(Error::Data(format!("image {}x{} smaller than crop {size}", s.h(), s.w())));
    }
    let y0 = rng.gen_range(0..=s.h() - size);
    let x0 = rng.gen_range(0..=s.w() - size);
    let crop = |t: &Tensor<f32>| {
        Tensor::from_fn(Shape::new(s.n(), s.c(), size, size), |n, c, y, x| t.at(n, c, y0 + y, x0 + x))
    };
    Ok((crop(a), crop(b)))
}

/// One aligned source pair, luminance only, each shaped (1, 1, h, w).
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub key: String,
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct PairDataset {
    pub pairs: Vec<ImagePair>,
}

impl PairDataset {
    pub fn new(pairs: Vec<ImagePair>) -> Result<Self> {
        for p in &pairs {
            let s = p.a.shape();
            if s != p.b.shape() || s.n() != 1 || s.c() != 1 {
                return Err(Error::Data(format!(
                    "pair {:?} must be two single-channel images of one size, got {s} and {}",
                    p.key,
                    p.b.shape()
                )));
            }
        }
        Ok(PairDataset { pairs })
    }

    /// Loads `dir_a` and `dir_b`, pairing files by stem and keeping luminance.
    pub fn load(dir_a: &Path, dir_b: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (key, paths) in match_stems(&[dir_a, dir_b])? {
            let a = split_luma(&load_image(&paths[0])?)?.luma;
            let b = split_luma(&load_image(&paths[1])?)?.luma;
            pairs.push(ImagePair { key, a, b });
        }
        Self::new(pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
}

pub const LOG_HEADER: &str = "step,lr,l_grad,l_l1,l_total";

pub fn format_log(records: &[StepRecord]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in records {
        let _ = writeln!(out, "{},{:e},{:e},{:e},{:e}", r.step, r.lr, r.loss.l_grad, r.loss.l_l1, r.loss.l_total);
    }
    out
}

const CHECKPOINT_MAGIC: &str = "upfusion-checkpoint v1";

/// Model, optimiser state and step counter of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FusionModel,
    pub adam: Adam,
    pub schedule: TrainSchedule,
    step: usize,
}

impl Trainer {
    pub fn new(model: FusionModel, schedule: TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        let adam = Adam::new(&model.params, schedule.adam);
        Ok(Trainer { model, adam, schedule, step: 0 })
    }

    /// Number of completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.config().seed);
        rng.set_stream(stream);
        rng
    }

    fn batch(&self, data: &PairDataset) -> Result<(Tensor<f32>, Tensor<f32>, Vec<String>)> {
        let per_epoch = self.schedule.batches_per_epoch(data.len());
        let epoch = self.step / per_epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng(1 << 32 | epoch as u64));
        let start = (self.step % per_epoch) * self.schedule.batch;
        let mut crop_rng = self.rng(1 << 33 | self.step as u64);
        let (mut a, mut b, mut keys) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..self.schedule.batch {
            let pair = &data.pairs[order[(start + i) % order.len()]];
            let (ca, cb) = random_crop_pair(&pair.a, &pair.b, self.schedule.crop, &mut crop_rng)?;
            a.push(ca);
            b.push(cb);
            keys.push(pair.key.clone());
        }
        Ok((Tensor::stack(&a)?, Tensor::stack(&b)?, keys))
    }

    /// Runs one optimisation step and returns its record.
    pub fn train_step(&mut self, data: &PairDataset, providers: &Providers) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::Data("training dataset is empty".into()));
        }
        let total = self.schedule.total_steps(data.len());
        let lr = self.schedule.lr(self.step.min(total), total)?;
        let (a, b, keys) = self.batch(data)?;
        let ctx = FuseContext::new(providers, &self.model.config().prompt, Some(&keys))?;
        let step = self.step + 1;
        let (report, grads) = {
            let mut tape = Tape::with_params(&self.model.params);
            let av = tape.constant(a);
            let bv = tape.constant(b);
            let f = self.model.network.forward(&mut tape, av, bv, &ctx)?;
            let (loss, report) = total_loss(&mut tape, f, av, bv)?;
            if !report.l_total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {step}")));
            }
            (report, tape.backward(loss)?)
        };
        self.model.params.zero_grad();
        grads.accumulate_into(&mut self.model.params)?;
        self.adam
            .step(&mut self.model.params, lr)
            .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        self.step = step;
        Ok(StepRecord { step, lr, loss: report })
    }

    /// Trains until the schedule is exhausted.
    pub fn run(
        &mut self,
        data: &PairDataset,
        providers: &Providers,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        if data.is_empty() {
            return Err(Error::Data("training dataset is empty".into()));
        }
        let total = self.schedule.total_steps(data.len());
        let mut log = Vec::new();
        while self.step < total {
            let r = self.train_step(data, providers)?;
            on_step(&r);
            log.push(r);
        }
        Ok(log)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let mut blocks = Vec::new();
        for (i, (_, p)) in params.iter().enumerate() {
            blocks.push((p.name().to_string(), p.value().data().to_vec()));
            blocks.push((format!("adam.m.{}", p.name()), self.adam.m[i].clone()));
            blocks.push((format!("adam.v.{}", p.name()), self.adam.v[i].clone()));
        }
        let mut out = format!(
            "{CHECKPOINT_MAGIC} digest={:016x} step={} blocks={}\n",
            self.model.config().architecture_digest(),
            self.step,
            blocks.len()
        )
        .into_bytes();
        for (key, values) in blocks {
            let mut t = EmbeddingTable::new(values.len());
            t.insert(key, &values)?;
            out.extend(t.to_bytes());
        }
        Ok(out)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.checkpoint_bytes()?)
    }

    /// Rebuilds a trainer from checkpoint bytes. The architecture digest in
    /// the header must match `config`.
    pub fn from_checkpoint_bytes(bytes: &[u8], config: &FusionConfig, schedule: TrainSchedule) -> Result<Self> {
        let fmt_err = |offset: usize, message: String| Error::Format { offset, message };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt_err(0, "missing checkpoint header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| fmt_err(0, "header is not UTF-8".into()))?;
        let fields = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| fmt_err(0, format!("not a checkpoint header: {header:?}")))?;
        let mut kv = BTreeMap::new();
        for item in fields.split_whitespace() {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| fmt_err(0, format!("bad header field {item:?}")))?;
            kv.insert(k, v);
        }
        let field = |k: &str| kv.get(k).copied().ok_or_else(|| fmt_err(0, format!("header lacks {k}")));
        let digest = u64::from_str_radix(field("digest")?, 16).map_err(|_| fmt_err(0, "bad digest".into()))?;
        let step: usize = field("step")?.parse().map_err(|_| fmt_err(0, "bad step".into()))?;
        let count: usize = field("blocks")?.parse().map_err(|_| fmt_err(0, "bad block count".into()))?;
        if digest != config.architecture_digest() {
            return Err(Error::Config(format!(
                "checkpoint architecture {digest:016x} does not match configuration {:016x}",
                config.architecture_digest()
            )));
        }
        let mut pos = nl + 1;
        let mut blocks = BTreeMap::new();
        for _ in 0..count {
            let (table, used) = EmbeddingTable::parse_prefix(&bytes[pos..], pos)?;
            if table.len() != 1 {
                return Err(fmt_err(pos, format!("checkpoint block holds {} entries", table.len())));
            }
            let key = table.keys()[0].clone();
            let values = table.lookup(&key)?.to_vec();
            blocks.insert(key, values);
            pos += used;
        }
        if pos != bytes.len() {
            return Err(fmt_err(pos, "trailing bytes after checkpoint blocks".into()));
        }
        let mut model = FusionModel::build(config)?;
        let mut adam = Adam::new(&model.params, schedule.adam);
        let ids: Vec<_> = model.params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let name = model.params.get(id).name().to_string();
            let shape = model.params.value(id).shape();
            let take = |key: &str| -> Result<Vec<f32>> {
                let v = blocks
                    .get(key)
                    .ok_or_else(|| Error::Lookup(key.to_string()))?;
                if v.len() != shape.numel() {
                    return Err(Error::Dimension(format!("{key}: {} values for shape {shape}", v.len())));
                }
                Ok(v.clone())
            };
            model.params.set_value(id, Tensor::new(shape, take(&name)?)?)?;
            adam.m[i] = take(&format!("adam.m.{name}"))?;
            adam.v[i] = take(&format!("adam.v.{name}"))?;
        }
        adam.t = step as u64;
        let mut trainer = Trainer::new(model, schedule)?;
        trainer.adam = adam;
        trainer.step = step;
        Ok(trainer)
    }

    pub fn load_checkpoint(path: &Path, config: &FusionConfig, schedule: TrainSchedule) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, config, schedule)
    }
}

/// Model parameters from a checkpoint, ignoring optimiser state.
pub fn load_model(path: &Path, config: &FusionConfig) -> Result<FusionModel> {
    Ok(Trainer::load_checkpoint(path, config, TrainSchedule::default())?.model)
}
