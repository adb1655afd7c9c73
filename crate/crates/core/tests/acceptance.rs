//! One PASS/FAIL line per acceptance criterion, each with its time budget.
//! Exits nonzero if any criterion fails.

mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use upfusion::autodiff::sigmoid;
use upfusion::config::Ablation;
use upfusion::gam::{modulate, AffineParams};
use upfusion::io::{encode_nfi, write_atomic};
use upfusion::metrics::{q_ncie, q_p, qabf, ssim_fusion, vif_fusion, MetricValues};
use upfusion::nn::Init;
use upfusion::scpm::{fuse_weights, prune_channels, Scpm};
use upfusion::selection::stable_argsort_desc;
use upfusion::synthetic::synthetic_pair;
use upfusion::tcpm::{perturb, PerturbationIndex, Tcpm};
use upfusion::training::{cosine_lr, grad_loss, l1_loss, total_loss, ImagePair, PairDataset, TrainSchedule, Trainer};
use upfusion::{FuseContext, FusionConfig, FusionModel, ParamStore, Providers, Shape, Tape, Tensor};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn leaf(tape: &mut Tape<f32>, shape: Shape, data: Vec<f32>) -> upfusion::Var {
    tape.constant(Tensor::new(shape, data).unwrap())
}

fn weighted_sum_exact() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let c = rng.gen_range(1..=64);
        let wc: Vec<f32> = (0..c).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let ws: Vec<f32> = (0..c).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let alpha: f32 = rng.gen_range(-2.0..2.0);
        let mut tape = Tape::<f32>::new();
        let vc = leaf(&mut tape, Shape::new(1, c, 1, 1), wc.clone());
        let vs = leaf(&mut tape, Shape::new(1, c, 1, 1), ws.clone());
        let va = leaf(&mut tape, Shape::SCALAR, vec![alpha]);
        let out = fuse_weights(&mut tape, vc, vs, va).map_err(err)?;
        for (i, &got) in tape.value(out).data().iter().enumerate() {
            let want = wc[i] + sigmoid(ws[i]) * alpha;
            ensure(got.to_bits() == want.to_bits(), || format!("c={c} channel {i}: {got} != {want}"))?;
        }
    }
    Ok("1000 triples bit-identical".into())
}

/// Channel i survives iff fewer than k channels rank strictly ahead of it,
/// where ties rank the lower index first.
fn brute_force_kept(w: &[f32], k: usize) -> Vec<usize> {
    (0..w.len())
        .filter(|&i| (0..w.len()).filter(|&j| w[j] > w[i] || (w[j] == w[i] && j < i)).count() < k)
        .collect()
}

fn top_k_counts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let levels = [-1.0f32, -0.25, 0.0, 0.5, 0.5, 1.0, 2.0];
    for c in 4..=64usize {
        let k_scpm = (7 * c).div_ceil(10);
        let k_tcpm = c.div_ceil(2);
        for (ratio, k) in [(0.7, k_scpm), (0.5, k_tcpm)] {
            for trial in 0..4 {
                let w: Vec<f32> = (0..c)
                    .map(|_| if trial % 2 == 0 { levels[rng.gen_range(0..levels.len())] } else { rng.gen_range(0.0..1.0) })
                    .collect();
                let x: Vec<f32> = (0..c * 4).map(|i| i as f32).collect();
                let mut tape = Tape::<f32>::new();
                let xv = leaf(&mut tape, Shape::new(1, c, 2, 2), x);
                let wv = leaf(&mut tape, Shape::new(1, c, 1, 1), w.clone());
                let (out, sel) = prune_channels(&mut tape, xv, wv, ratio).map_err(err)?;
                let want = brute_force_kept(&w, k);
                ensure(sel[0].kept == want, || format!("c={c} ratio {ratio}: {:?} vs {want:?}", sel[0].kept))?;
                let data = tape.value(out).data();
                for (slot, &ch) in want.iter().enumerate() {
                    for p in 0..4 {
                        let expect = (ch * 4 + p) as f32 * w[ch];
                        ensure(data[slot * 4 + p] == expect, || format!("c={c}: kept channel {ch} not scaled by its weight"))?;
                    }
                }
            }
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 0);
        // Squeeze-and-excitation needs c divisible by its reduction.
        let with_se = c % upfusion::nn::SE_REDUCTION == 0;
        let scpm = Scpm::new(&mut init, "scpm", c, 0.7, with_se, true).map_err(err)?;
        ensure(scpm.kept() == k_scpm, || format!("SCPM at c={c} keeps {}", scpm.kept()))?;
        if with_se {
            let tcpm = Tcpm::new(&mut init, "tcpm", c / 2, 1, 0.5, true).map_err(err)?;
            let mut tape = Tape::with_params(&store);
            let x = leaf(&mut tape, Shape::new(1, c, 2, 2), (0..c * 4).map(|i| (i % 7) as f32).collect());
            let (_, sel) = tcpm.select_channels(&mut tape, x).map_err(err)?;
            ensure(sel[0].kept.len() == k_tcpm, || format!("TCPM at c={c} keeps {}", sel[0].kept.len()))?;
            ensure(sel[0].kept == brute_force_kept(&sel[0].ranking_weights, k_tcpm), || format!("TCPM at c={c}: wrong set"))?;
        }
    }
    Ok("c in 4..=64, ratios 0.7 and 0.5, sets match oracle".into())
}

fn affine_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = Shape::new(2, 5, 7, 3);
    let x: Vec<f32> = (0..shape.numel()).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut tape = Tape::<f32>::new();
    let xv = leaf(&mut tape, shape, x.clone());
    let zero = Tensor::zeros(Shape::new(2, 5, 1, 1));
    let p = AffineParams { gamma: tape.constant(zero.clone()), beta: tape.constant(zero) };
    let out = modulate(&mut tape, xv, p).map_err(err)?;
    let same = tape.value(out).data().iter().zip(&x).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, || "zero modulation changed the features".into())?;

    let mut tape = Tape::<f64>::new();
    let f = tape.constant(Tensor::full(Shape::new(1, 1, 2, 2), 2.0));
    let gamma = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), 0.5));
    let beta = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), 0.1));
    let out = modulate(&mut tape, f, AffineParams { gamma, beta }).map_err(err)?;
    let v = tape.value(out).data()[0];
    ensure((v - 3.1).abs() < 1e-12, || format!("2·(1+0.5)+0.1 gave {v}"))?;
    Ok(format!("bit-exact identity, spot value {v}"))
}

fn permutation_soundness() -> Check {
    let mut runner = TestRunner::new(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() });
    let strategy = (1usize..=24, 1usize..=3, any::<u64>());
    runner
        .run(&strategy, |(c, side, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f32> = (0..c).map(|_| rng.gen_range(-4i32..4) as f32 * 0.5).collect();
            let idx = PerturbationIndex::from_weights(&w);
            prop_assert!(idx.is_bijection());
            let shape = Shape::new(1, c, side, side);
            let x: Vec<f32> = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::<f32>::new();
            let xv = tape.constant(Tensor::new(shape, x).unwrap());
            let out = perturb(&mut tape, xv, &idx).unwrap();
            let planes = |t: &Tensor<f32>| {
                let mut p: Vec<Vec<u32>> = (0..c).map(|ch| t.plane(0, ch).iter().map(|v| v.to_bits()).collect()).collect();
                p.sort();
                p
            };
            prop_assert_eq!(planes(tape.value(xv)), planes(tape.value(out)));
            let scale = 2f32.powi(rng.gen_range(-6..=6));
            let scaled: Vec<f32> = w.iter().map(|v| v * scale).collect();
            prop_assert_eq!(stable_argsort_desc(&w), stable_argsort_desc(&scaled));
            Ok(())
        })
        .map_err(err)?;
    Ok("1000 cases".into())
}

fn gradient_suite() -> Check {
    let out = Command::new(env!("CARGO_BIN_EXE_upfusion")).arg("gradcheck").output().map_err(err)?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut worst = Vec::new();
    for name in upfusion::gradsuite::MODULES {
        let line = stdout
            .lines()
            .find(|l| l.split_whitespace().take(2).eq(["module", name]))
            .ok_or_else(|| format!("no result line for {name}"))?;
        let err: f64 = line
            .split_whitespace()
            .skip_while(|w| *w != "max_rel_err")
            .nth(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("cannot parse {line:?}"))?;
        ensure(err <= 1e-3, || format!("{name} error {err:.3e}"))?;
        worst.push(format!("{name} {err:.1e}"));
    }
    ensure(out.status.success(), || format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))?;
    Ok(worst.join(", "))
}

fn loss_contracts() -> Check {
    let (a, b) = synthetic_pair(32, 32, 5);
    let f = Tensor::from_fn(a.shape(), |_, _, y, x| ((x * 7 + y * 3) % 11) as f32 / 10.0);
    let eval = |f: &Tensor<f32>, a: &Tensor<f32>, b: &Tensor<f32>| {
        let mut tape = Tape::<f64>::new();
        let (fv, av, bv) = (tape.constant(f.cast()), tape.constant(a.cast()), tape.constant(b.cast()));
        let g = grad_loss(&mut tape, fv, av, bv).unwrap();
        let l = l1_loss(&mut tape, fv, av, bv).unwrap();
        let (t, report) = total_loss(&mut tape, fv, av, bv).unwrap();
        let v = |x| tape.value(x).item().unwrap();
        (v(g), v(l), v(t), report)
    };
    let (g, l, _, _) = eval(&a, &a, &a);
    ensure(g == 0.0 && l == 0.0, || format!("F=A=B gives {g}, {l}"))?;
    let (g1, l1, t1, rep) = eval(&f, &a, &b);
    let (g2, l2, t2, _) = eval(&f, &b, &a);
    ensure(g1 == g2 && l1 == l2 && t1 == t2, || format!("swap changed losses: {g1} {l1} vs {g2} {l2}"))?;
    ensure(t1 == g1 + l1 && rep.l_total == t1, || format!("total {t1} != {g1} + {l1}"))?;
    ensure(g1 > 0.0 && l1 > 0.0, || "losses vanish on a generic F".into())?;
    Ok(format!("L_grad {g1:.4}, L_l1 {l1:.4}"))
}

fn schedule_endpoints() -> Check {
    let s = TrainSchedule::default();
    let total = 1000;
    let start = cosine_lr(0, total, s.lr0, s.lr_end).map_err(err)?;
    let end = cosine_lr(total, total, s.lr0, s.lr_end).map_err(err)?;
    ensure(start == 1e-4 && end == 1e-5, || format!("endpoints {start:e}, {end:e}"))?;
    Ok(format!("{start:e} -> {end:e}"))
}

fn overfit() -> Check {
    let (a, b) = synthetic_pair(64, 64, 1);
    let data = PairDataset::new(vec![ImagePair { key: "pair".into(), a, b }]).map_err(err)?;
    let schedule = TrainSchedule {
        steps: Some(300),
        batch: 1,
        crop: 64,
        lr0: 2e-3,
        lr_end: 2e-4,
        ..TrainSchedule::default()
    };
    let model = FusionModel::build(&FusionConfig::desk()).map_err(err)?;
    let mut trainer = Trainer::new(model, schedule).map_err(err)?;
    let log = trainer.run(&data, &Providers::stub(0), |_| {}).map_err(err)?;
    let first = log[0].loss.l_total;
    let last = log.last().unwrap().loss.l_total;
    let drop = 1.0 - last / first;
    ensure(drop >= 0.9, || format!("L_T {first:.4} -> {last:.4}, drop {:.1}%", drop * 100.0))?;
    Ok(format!("L_T {first:.4} -> {last:.5} over {} steps ({:.1}% drop)", log.len(), drop * 100.0))
}

fn metric_identities() -> Check {
    use common::*;
    let a = textured(48, 40, 12);
    let id = [
        ("ssim", ssim_fusion(&a, &a, &a).map_err(err)?, 1e-6),
        ("vif", vif_fusion(&a, &a, &a).map_err(err)?, 1e-3),
        ("q_p", q_p(&a, &a, &a).map_err(err)?, 1e-3),
        ("q_ncie", q_ncie(&a, &a, &a).map_err(err)?, 1e-6),
    ];
    for (name, v, tol) in id {
        ensure((v - 1.0).abs() <= tol, || format!("{name}(A,A,A) = {v}"))?;
    }
    let (x, y, f) = (textured(40, 40, 31), textured(40, 40, 32), textured(40, 40, 33));
    let fwd = MetricValues::compute(&x, &y, &f).map_err(err)?.as_array();
    let rev = MetricValues::compute(&y, &x, &f).map_err(err)?.as_array();
    ensure(fwd.iter().zip(&rev).all(|(p, q)| (p - q).abs() <= 1e-12), || format!("asymmetric: {fwd:?} vs {rev:?}"))?;

    let oracle = |name: &str, got: f64, want: f64, tol: f64| {
        ensure(rel_diff(got, want) <= tol, || format!("{name}: {got} vs reference {want}"))
    };
    for (h, w, seed) in [(16, 16, 1u64), (40, 24, 2), (64, 64, 3)] {
        let (p, q, r) = (textured(h, w, seed), noise(h, w, seed + 1), textured(h, w, seed + 2));
        oracle("ssim", ssim_fusion(&p, &q, &r).map_err(err)?, ssim_fusion_ref(&p, &q, &r), 1e-6)?;
        oracle("qabf", qabf(&p, &q, &r).map_err(err)?, qabf_ref(&p, &q, &r), 1e-9)?;
        oracle("q_ncie", q_ncie(&p, &q, &r).map_err(err)?, q_ncie_ref(&p, &q, &r), 1e-9)?;
        if h.min(w) >= 32 {
            oracle("q_p", q_p(&p, &q, &r).map_err(err)?, q_p_ref(&p, &q, &r), 1e-6)?;
            oracle("vif", vif_fusion(&p, &q, &r).map_err(err)?, vif_fusion_ref(&p, &q, &r), 1e-5)?;
        }
    }
    Ok("identities, symmetry and reference loops agree".into())
}

fn write_pair(dir: &Path) -> std::result::Result<(), String> {
    let (a, b) = synthetic_pair(40, 48, 9);
    write_atomic(&dir.join("a.nfi"), &encode_nfi(&a).map_err(err)?).map_err(err)?;
    write_atomic(&dir.join("b.nfi"), &encode_nfi(&b).map_err(err)?).map_err(err)
}

fn fuse_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    write_pair(dir.path())?;
    let mut outputs = Vec::new();
    for name in ["f1.nfi", "f2.nfi"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_upfusion"))
            .args(["fuse", "--set", "seed=7", "--prompt", "highlight the warm targets"])
            .arg("--a")
            .arg(dir.path().join("a.nfi"))
            .arg("--b")
            .arg(dir.path().join("b.nfi"))
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(err)?;
        ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
        outputs.push(std::fs::read(&out).map_err(err)?);
    }
    ensure(outputs[0] == outputs[1], || "fused files differ".into())?;
    Ok(format!("{} identical bytes", outputs[0].len()))
}

fn ablation_matrix() -> Check {
    let (a, b) = synthetic_pair(32, 32, 4);
    let providers = Providers::stub(0);
    for bits in 0..64u8 {
        let cfg = FusionConfig { ablation: Ablation::from_bits(bits), ..FusionConfig::desk() };
        let model = FusionModel::build(&cfg).map_err(|e| format!("{:?}: {e}", cfg.ablation))?;
        let ctx = FuseContext::new(&providers, &cfg.prompt, None).map_err(err)?;
        let f = model.fuse(&a, &b, &ctx).map_err(|e| format!("{:?}: {e}", cfg.ablation))?;
        ensure(f.shape() == a.shape() && f.is_finite(), || format!("{:?}: bad output", cfg.ablation))?;
    }
    Ok("64 combinations".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("weighted channel sum is exact", 1, weighted_sum_exact),
        ("top-k keep counts and sets", 1, top_k_counts),
        ("affine modulation identity", 1, affine_identity),
        ("permutation soundness", 5, permutation_soundness),
        ("gradient suite", 120, gradient_suite),
        ("loss contracts", 1, loss_contracts),
        ("schedule endpoints", 1, schedule_endpoints),
        ("overfit sanity", 300, overfit),
        ("metric identities and oracles", 120, metric_identities),
        ("fuse determinism", 30, fuse_determinism),
        ("ablation matrix", 120, ablation_matrix),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_secs(budget);
        let (tag, detail) = match &result {
            Ok(d) if !over => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; over budget")),
            Err(e) => ("FAIL", e.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} {name} ({:.2}s of {budget}s): {detail}", elapsed.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
