//! Finite-difference checks of every differentiable op and of each model
//! module, run in f64 on a desk-size network.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, ChannelIndex, GradCheckOptions, GradCheckReport, OpKind, Tape, Var};
use crate::config::FusionConfig;
use crate::error::Result;
use crate::network::{FuseContext, FusionModel};
use crate::params::ParamStore;
use crate::providers::Providers;
use crate::synthetic::synthetic_pair;
use crate::tensor::{Shape, Tensor};
use crate::training::{grad_loss, l1_loss};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;

pub const MODULES: [&str; 6] = ["scpm", "gam", "tcpm", "encoder", "decoder", "losses"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err <= TOLERANCE
    }
}

/// Step for whole-module checks. Wider steps cross ReLU and L1 kinks; much
/// narrower ones lose the near-zero gradients of cancelling loss terms to
/// rounding.
pub const MODULE_EPS: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Side of the square synthetic inputs.
    pub size: usize,
    /// Half-width of the uniform noise added to every parameter, so that
    /// zero-initialised projections do not hide upstream gradients.
    pub jitter: f64,
    pub grad: GradCheckOptions,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            size: 16,
            jitter: 0.05,
            grad: GradCheckOptions {
                eps: MODULE_EPS,
                max_coords_per_param: 4,
                richardson: true,
                ..GradCheckOptions::default()
            },
        }
    }
}

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..=1.0))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(0.2..=1.0);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

type OpCase = (OpKind, Vec<(&'static str, Tensor<f64>)>, Box<dyn Fn(&mut Tape<f64>) -> Result<Var>>);

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape::new(2, 3, 4, 4);
    let pc = Shape::new(1, 3, 1, 1);
    let mut r = |shape| random(shape, &mut rng);
    let x = r(s);
    let y = r(s);
    let ych = r(pc);
    let conv_x = r(Shape::new(2, 3, 5, 5));
    let conv_w = r(Shape::new(4, 3, 3, 3));
    let conv_b = r(Shape::new(1, 4, 1, 1));
    let q = r(Shape::new(1, 4, 3, 3));
    let k = r(Shape::new(1, 4, 3, 3));
    let logits = r(Shape::new(1, 2, 3, 3));
    let attn = r(Shape::new(1, 2, 2, 2));
    let v = r(Shape::new(1, 4, 3, 3));
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let kinked = away_from_zero(s, &mut rng2);
    let ymax = Tensor::from_fn(s, |n, c, h, w| kinked.at(n, c, h, w) + if (n + c + h + w) % 2 == 0 { 0.5 } else { -0.5 });

    fn p(t: &mut Tape<f64>, name: &str) -> Result<Var> {
        t.param_named(name)
    }
    let idx = Arc::new(ChannelIndex::shared(vec![2, 0, 2]));
    vec![
        (OpKind::Add, vec![("x", x.clone()), ("y", ych.clone())], Box::new(|t| {
            let (a, b) = (p(t, "x")?, p(t, "y")?);
            t.add(a, b)
        })),
        (OpKind::Sub, vec![("x", x.clone()), ("y", y.clone())], Box::new(|t| {
            let (a, b) = (p(t, "x")?, p(t, "y")?);
            t.sub(a, b)
        })),
        (OpKind::Mul, vec![("x", x.clone()), ("y", ych)], Box::new(|t| {
            let (a, b) = (p(t, "x")?, p(t, "y")?);
            t.mul(a, b)
        })),
        (OpKind::AddScalar, vec![("x", x.clone())], Box::new(|t| {
            let a = p(t, "x")?;
            t.add_scalar(a, 0.7)
        })),
        (OpKind::MulScalar, vec![("x", x.clone())], Box::new(|t| {
            let a = p(t, "x")?;
            t.mul_scalar(a, -1.3)
        })),
        (OpKind::Relu, vec![("x", kinked.clone())], Box::new(|t| {
            let a = p(t, "x")?;
            t.relu(a)
        })),
        (OpKind::Sigmoid, vec![("x", x.clone())], Box::new(|t| {
            let a = p(t, "x")?;
            t.sigmoid(a)
        })),
        (OpKind::Tanh, vec![("x", x.clone())], Box::new(|t| {
            let a = p(t, "x")?;
            t.tanh(a)
        })),
        (OpKind::Abs, vec![("x", kinked.clone())], Box::new(|t| {
            let a = p(t, "x")?;
            t.abs(a)
        })),
        (OpKind::Maximum, vec![("x", kinked.clone()), ("y", ymax)], Box::new(|t| {
            let (a, b) = (p(t, "x")?, p(t, "y")?);
            t.maximum(a, b)
        })),
        (OpKind::GlobalAvgPool, vec![("x", x.clone())], Box::new(|t| {
            let a = p(t, "x")?;
            t.global_avg_pool(a)
        })),
        (OpKind::Sum, vec![("x", x.clone())], Box::new(|t| {
            let a = p(t, "x")?;
            t.sum(a)
        })),
        (OpKind::Mean, vec![("x", x.clone())], Box::new(|t| {
            let a = p(t, "x")?;
            t.mean(a)
        })),
        (OpKind::Concat, vec![("x", x.clone()), ("y", y)], Box::new(|t| {
            let (a, b) = (p(t, "x")?, p(t, "y")?);
            t.concat(&[a, b, a])
        })),
        (OpKind::Narrow, vec![("x", x.clone())], Box::new(|t| {
            let a = p(t, "x")?;
            t.narrow(a, 1, 2)
        })),
        (OpKind::Gather, vec![("x", x.clone())], Box::new(move |t| {
            let a = p(t, "x")?;
            t.gather(a, idx.clone())
        })),
        (OpKind::Reshape, vec![("x", x.clone())], Box::new(|t| {
            let a = p(t, "x")?;
            t.reshape(a, Shape::new(2, 12, 2, 2))
        })),
        (OpKind::Upsample2x, vec![("x", x.clone())], Box::new(|t| {
            let a = p(t, "x")?;
            t.upsample2x(a)
        })),
        (OpKind::ReflectPad, vec![("x", x.clone())], Box::new(|t| {
            let a = p(t, "x")?;
            t.reflect_pad(a, 2)
        })),
        (OpKind::Conv2d, vec![("x", conv_x), ("w", conv_w), ("b", conv_b)], Box::new(|t| {
            let (a, w, b) = (p(t, "x")?, p(t, "w")?, p(t, "b")?);
            t.conv2d(a, w, Some(b), 2, 1)
        })),
        (OpKind::InstanceNorm, vec![("x", x.clone())], Box::new(|t| {
            let a = p(t, "x")?;
            t.instance_norm(a, 1e-6)
        })),
        (OpKind::L2Normalize, vec![("x", x)], Box::new(|t| {
            let a = p(t, "x")?;
            t.l2_normalize(a)
        })),
        (OpKind::ChannelGram, vec![("q", q), ("k", k)], Box::new(|t| {
            let (a, b) = (p(t, "q")?, p(t, "k")?);
            t.channel_gram(a, b, 2)
        })),
        (OpKind::Softmax, vec![("x", logits)], Box::new(|t| {
            let a = p(t, "x")?;
            t.softmax(a)
        })),
        (OpKind::ChannelAttend, vec![("attn", attn), ("v", v)], Box::new(|t| {
            let (a, b) = (p(t, "attn")?, p(t, "v")?);
            t.channel_attend(a, b, 2)
        })),
    ]
}

/// Checks each differentiable op in isolation on random inputs.
pub fn op_checks(opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let full = GradCheckOptions { max_coords_per_param: usize::MAX, ..opts.clone() };
    op_cases(opts.seed)
        .into_iter()
        .map(|(kind, inputs, f)| {
            let mut store = ParamStore::new();
            for (name, t) in inputs {
                store.add(name, t)?;
            }
            let report = grad_check(&store, &full, |t| f(t))?;
            Ok(CheckResult { name: kind.name().to_string(), report })
        })
        .collect()
}

/// Ops with a backward rule, in the order `op_checks` reports them.
pub fn differentiable_ops() -> Vec<OpKind> {
    op_cases(0).into_iter().map(|(k, _, _)| k).collect()
}

fn jittered(model: &FusionModel, jitter: f64, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = model.params.cast::<f64>();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id) {
            *v += rng.gen_range(-jitter..=jitter);
        }
    }
    store
}

fn prefixed(opts: &GradCheckOptions, prefixes: &[&str]) -> GradCheckOptions {
    GradCheckOptions { prefixes: prefixes.iter().map(|s| s.to_string()).collect(), ..opts.clone() }
}

/// Checks each model module: the named module's parameters are perturbed and
/// the output of the stage that consumes them is probed.
pub fn module_checks(config: &FusionConfig, opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let model = FusionModel::build(config)?;
    let params = jittered(&model, opts.jitter, opts.grad.seed);
    let net = &model.network;
    let (a, b) = synthetic_pair(opts.size, opts.size, opts.grad.seed);
    let (a, b) = (a.cast::<f64>(), b.cast::<f64>());
    let providers = Providers::stub(config.seed);
    let ctx = FuseContext::new(&providers, &config.prompt, None)?;
    let inputs = |t: &mut Tape<f64>| (t.constant(a.clone()), t.constant(b.clone()));
    let g = &opts.grad;
    let mut out = Vec::new();
    let mut run = |name: &str, report: GradCheckReport| out.push(CheckResult { name: name.into(), report });

    run(
        "scpm",
        grad_check(&params, &prefixed(g, &["stem_", "scpm."]), |t| {
            let (av, bv) = inputs(t);
            Ok(net.shallow(t, av, bv, &ctx)?.pruned)
        })?,
    );
    run(
        "gam",
        grad_check(&params, &prefixed(g, &["gam_"]), |t| {
            let (av, bv) = inputs(t);
            let sh = net.shallow(t, av, bv, &ctx)?;
            t.concat(&[sh.branch_a, sh.branch_b])
        })?,
    );
    run(
        "encoder",
        grad_check(&params, &prefixed(g, &["enc_"]), |t| {
            let (av, bv) = inputs(t);
            Ok(net.encode(t, av, bv, &ctx)?.bottleneck)
        })?,
    );
    run(
        "tcpm",
        grad_check(&params, &prefixed(g, &["skip"]), |t| {
            let (av, bv) = inputs(t);
            net.forward(t, av, bv, &ctx)
        })?,
    );
    run(
        "decoder",
        grad_check(&params, &prefixed(g, &["dec.", "head."]), |t| {
            let (av, bv) = inputs(t);
            net.forward(t, av, bv, &ctx)
        })?,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(g.seed ^ 0x1055);
    let mut fused = ParamStore::new();
    fused.add("fused", Tensor::from_fn(a.shape(), |_, _, _, _| rng.gen_range(0.0..1.0)))?;
    // Each loss term is checked on its own; the worse report stands for both.
    let loss_opts = GradCheckOptions { max_coords_per_param: 64, ..g.clone() };
    let grad_term = grad_check(&fused, &loss_opts, |t| {
        let f = t.param_named("fused")?;
        let (av, bv) = inputs(t);
        grad_loss(t, f, av, bv)
    })?;
    let l1_term = grad_check(&fused, &loss_opts, |t| {
        let f = t.param_named("fused")?;
        let (av, bv) = inputs(t);
        l1_loss(t, f, av, bv)
    })?;
    run("losses", if l1_term.max_rel_err > grad_term.max_rel_err { l1_term } else { grad_term });
    Ok(out)
}
