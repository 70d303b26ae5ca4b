//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Runs without the libtest harness so the
//! lines are never captured.

use std::process::ExitCode;
use std::time::Instant;

use caila_core::autodiff::{grad_check, grad_check_params};
use caila_core::data::{
    render_image, split_compositions, synthesize, Dataset, LabelSpace, Pair, RenderSpec, SplitCounts, Stage,
    VocabSpec, World,
};
use caila_core::eval::{evaluate, harmonic_mean, oracle_eval, report_text, score_all, EvalReport, ScoreMatrix};
use caila_core::model::{block_forward, vision_moa_block_forward, Ablation, Encoder, EncoderConfig, ModelParams};
use caila_core::train::{
    caila_loss, composition_rows, concept_shift, frozen_hash, metrics_csv, stage0_pretrain, train,
    TrainConfig, TrainOutcome, VisionBatch,
};
use caila_core::{ConceptKind, Result, SeqLayout, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OP_TOL: f64 = 1e-4;
const LOSS_TOL: f64 = 1e-3;
const GRAD_SUITE_SECONDS: f64 = 30.0;
const MOA_TOL: f32 = 1e-6;
const AUC_TOL: f64 = 1e-9;
const ORACLE_CASES: usize = 100;
const SHIFT_DRAWS: usize = 10_000;
const LEARNING_SECONDS: f64 = 15.0 * 60.0;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..=scale)).collect()).unwrap()
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape, 1.0);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights)?;
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

/// Largest finite-difference error over every differentiable op.
fn op_gradients() -> Result<Vec<(&'static str, f64)>> {
    let eps = 1e-3;
    let mut out = Vec::new();
    for seed in 0..5 {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(rng, &[3, 4], 1.0), random(rng, &[4, 2], 1.0));
        let w32 = random(rng, &[3, 2], 1.0);
        let w35 = random(rng, &[3, 5], 1.0);
        let w53 = random(rng, &[5, 3], 1.0);
        let x35 = random(rng, &[3, 5], 2.0);
        let g5 = random(rng, &[5], 1.5);
        let b5 = random(rng, &[5], 1.0);
        let w34 = random(rng, &[3, 4], 1.0);
        let nz = away_from_zero(rng, &[3, 4]);
        let qkv = random(rng, &[12, 12], 1.0);
        let w124 = random(rng, &[12, 4], 1.0);
        let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
        let masked = SeqLayout { seq_len: 4, valid: vec![4, 2, 1] };

        out.push(("matmul", grad_check(|t, x| { let c = t.constant(&b)?; let y = t.matmul(x, c)?; project(t, y, &w32) }, &a, eps)?));
        out.push(("matmul.rhs", grad_check(|t, x| { let c = t.constant(&a)?; let y = t.matmul(c, x)?; project(t, y, &w32) }, &b, eps)?));
        out.push(("transpose", grad_check(|t, x| { let y = t.transpose(x)?; project(t, y, &w53) }, &x35, eps)?));
        out.push(("add", grad_check(|t, x| { let y = t.add(x, x)?; project(t, y, &w35) }, &x35, eps)?));
        out.push(("add_row", grad_check(|t, v| { let c = t.constant(&x35)?; let y = t.add_row(c, v)?; project(t, y, &w35) }, &b5, eps)?));
        out.push(("mul", grad_check(|t, x| { let y = t.mul(x, x)?; project(t, y, &w35) }, &x35, eps)?));
        out.push(("scale", grad_check(|t, x| { let y = t.scale(x, -2.5)?; project(t, y, &w35) }, &x35, eps)?));
        out.push(("average", grad_check(|t, x| { let c = t.constant(&x35)?; let y = t.average(&[x, c, x])?; project(t, y, &w35) }, &x35, eps)?));
        out.push(("gather_rows", grad_check(|t, x| { let y = t.gather_rows(&[x], &[(0, 2), (0, 0), (0, 2)])?; project(t, y, &w35) }, &x35, eps)?));
        out.push(("gelu", grad_check(|t, x| { let y = t.gelu(x)?; project(t, y, &w35) }, &x35, eps)?));
        out.push(("relu", grad_check(|t, x| { let y = t.relu(x)?; project(t, y, &w34) }, &nz, eps)?));
        out.push(("layer_norm", grad_check(|t, x| { let (g, bb) = (t.constant(&g5)?, t.constant(&b5)?); let y = t.layer_norm(x, g, bb, 1e-5)?; project(t, y, &w35) }, &x35, eps)?));
        out.push(("layer_norm.gain", grad_check(|t, g| { let (x, bb) = (t.constant(&x35)?, t.constant(&b5)?); let y = t.layer_norm(x, g, bb, 1e-5)?; project(t, y, &w35) }, &g5, eps)?));
        out.push(("softmax", grad_check(|t, x| { let y = t.softmax(x, 0.5)?; project(t, y, &w34) }, &w34, eps)?));
        out.push(("cross_entropy", grad_check(|t, x| t.cross_entropy(x, &targets, 1.0), &w34, eps)?));
        out.push(("l2_normalize", grad_check(|t, x| { let y = t.l2_normalize_rows(x)?; project(t, y, &w34) }, &nz, eps)?));
        out.push(("attention", grad_check(|t, x| { let y = t.attention(x, &masked, 2)?; project(t, y, &w124) }, &qkv, eps)?));
        out.push(("sum", grad_check(|t, x| t.sum(x), &x35, eps)?));
    }
    Ok(out)
}

/// Full training loss on the micro model at the default temperatures.
fn micro_loss_gradient() -> Result<(f64, usize)> {
    let spec = RenderSpec::synthetic(2, 2, 8, 0.05);
    let vocab = spec.vocab()?;
    let ls = LabelSpace::new(
        vocab.clone(),
        vec![Pair::new(0, 0), Pair::new(0, 1), Pair::new(1, 1)],
        vec![Pair::new(1, 0)],
    )?;
    let mut p = ModelParams::init(EncoderConfig::micro(), vocab, 4)?;
    p.randomize_adapters(5, 0.4);
    let labels = vec![Pair::new(0, 0), Pair::new(1, 1), Pair::new(0, 1), Pair::new(0, 0)];
    let images: Vec<Tensor> = labels
        .iter()
        .enumerate()
        .map(|(k, l)| render_image(l.attr, l.obj, &spec, k as u64))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = images.iter().collect();
    let plan = concept_shift(&labels, 0.5, &ls, 2);
    let cfg = TrainConfig::default().loss();
    let ids = p.trainable_ids();
    let report = grad_check_params(
        &p.store,
        &ids,
        |t| {
            let enc = Encoder::new(&p);
            Ok(caila_loss(t, &enc, VisionBatch::Images(&refs), &labels, &plan, &ls, &cfg)?.total)
        },
        1e-6,
    )?;
    Ok((report.max_error, report.scalars_checked))
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let ops = op_gradients().map_err(|e| e.to_string())?;
    let (worst_op, op_err) = ops.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    let (loss_err, n) = micro_loss_gradient().map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        op_err < OP_TOL && loss_err < LOSS_TOL && secs < GRAD_SUITE_SECONDS,
        format!("worst op {worst_op} {op_err:.2e} (< {OP_TOL:e}), full loss {loss_err:.2e} over {n} scalars (< {LOSS_TOL:e}), {secs:.1}s"),
    )
}

fn small_config() -> EncoderConfig {
    EncoderConfig { d: 16, heads: 2, n_vision: 3, n_text: 2, moa_layers: 1, patch: 8, image_hw: 16, ..EncoderConfig::default() }
}

fn small_vocab() -> VocabSpec {
    RenderSpec::synthetic(3, 4, 16, 0.1).vocab().unwrap()
}

fn criterion_identity() -> Outcome {
    let spec = RenderSpec::synthetic(3, 4, 16, 0.1);
    let mut compared = 0;
    for ablation in [Ablation::FULL, Ablation { vision_moa: false, ..Ablation::FULL }] {
        let p = ModelParams::init(EncoderConfig { ablation, ..small_config() }, small_vocab(), 21).map_err(|e| e.to_string())?;
        let images: Vec<Tensor> = (0..3).map(|s| render_image(s % 3, s % 4, &spec, s as u64).unwrap()).collect();
        let refs: Vec<&Tensor> = images.iter().collect();
        let pairs = vec![Pair::new(0, 0), Pair::new(2, 3), Pair::new(1, 2)];
        let outputs = |enc: Encoder| -> Result<Vec<Tensor>> {
            let mut tape = Tape::<f32>::inference();
            let s = enc.vision_streams(&mut tape, &refs)?;
            let fc = enc.vision_composition(&mut tape, &s, &[(0, 0), (1, 1), (2, 2)])?;
            let te = enc.encode_labels(&mut tape, &pairs)?;
            Ok([s.f_a, s.f_o, fc, te.g_a, te.g_o, te.g_c, te.g].iter().map(|&v| tape.to_tensor(v)).collect())
        };
        let adapted = outputs(Encoder::new(&p)).map_err(|e| e.to_string())?;
        let frozen = outputs(Encoder::backbone(&p)).map_err(|e| e.to_string())?;
        for (k, (a, b)) in adapted.iter().zip(&frozen).enumerate() {
            if !a.bit_eq(b) {
                return Err(format!("output {k} differs from the frozen backbone with {ablation:?}"));
            }
            compared += 1;
        }
    }
    Ok(format!("F_A, F_O, F_C, G_A, G_O, G_C, G bit-identical to the backbone ({compared} tensors)"))
}

fn criterion_moa() -> Outcome {
    let mut worst = 0.0f32;
    for seed in 0..5 {
        let mut p = ModelParams::init(small_config(), small_vocab(), seed).unwrap();
        p.randomize_adapters(seed + 100, 0.3);
        p.tie_adapters_to(ConceptKind::Composition);
        let h = random(&mut ChaCha8Rng::seed_from_u64(seed), &[5, 16], 1.0);
        let depth = p.config.n_vision - 1;
        let layout = SeqLayout::dense(1, 5);
        let mut tape = Tape::<f32>::inference();
        let hv = tape.constant(&h).unwrap();
        let moa = vision_moa_block_forward(&mut tape, &p, &p.vision[depth], hv, &layout).map_err(|e| e.to_string())?;
        let single = block_forward(&mut tape, &p, &p.vision[depth], hv, &layout, Some(ConceptKind::Composition))
            .map_err(|e| e.to_string())?;
        for (x, y) in tape.value(moa).iter().zip(tape.value(single)) {
            worst = worst.max((x - y).abs());
        }
    }
    check(worst <= MOA_TOL, format!("max |MoA - single adapter| = {worst:.2e} (<= {MOA_TOL:e}) over 5 seeds"))
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, coarse: bool) -> ScoreMatrix {
    let mut flags: Vec<bool> = (0..cols).map(|_| rng.random_bool(0.5)).collect();
    flags[0] = false;
    flags[cols - 1] = true;
    let seen: Vec<usize> = (0..cols).filter(|&c| !flags[c]).collect();
    let unseen: Vec<usize> = (0..cols).filter(|&c| flags[c]).collect();
    let truth = (0..rows)
        .map(|r| {
            let g = if r == 0 || (r > 1 && rng.random_bool(0.5)) { &seen } else { &unseen };
            g[rng.random_range(0..g.len())]
        })
        .collect();
    let values = (0..rows * cols)
        .map(|_| if coarse { rng.random_range(-4i32..=4) as f64 / 8.0 } else { rng.random_range(-1.0..1.0) })
        .collect();
    ScoreMatrix::new(values, flags, truth).unwrap()
}

fn monotone(r: &EvalReport) -> bool {
    r.curve.windows(2).all(|w| w[0].bias <= w[1].bias && w[1].seen <= w[0].seen && w[1].unseen >= w[0].unseen)
}

fn criterion_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_auc = 0.0f64;
    for k in 0..ORACLE_CASES {
        let (rows, cols) = (rng.random_range(2..=10), rng.random_range(2..=8));
        let m = random_matrix(&mut rng, rows, cols, k % 2 == 0);
        let fast = evaluate(&m).map_err(|e| e.to_string())?;
        let slow = oracle_eval(&m).map_err(|e| e.to_string())?;
        worst_auc = worst_auc.max((fast.auc - slow.auc).abs());
        if fast.best_seen != slow.best_seen || fast.best_unseen != slow.best_unseen || fast.best_hm != slow.best_hm {
            return Err(format!("case {k} ({rows}x{cols}): best seen/unseen/HM disagree with the oracle"));
        }
        if !monotone(&fast) || !monotone(&slow) {
            return Err(format!("case {k} ({rows}x{cols}): curve not monotone in bias"));
        }
    }
    check(
        worst_auc <= AUC_TOL,
        format!("{ORACLE_CASES} matrices up to 10x8: best seen/unseen/HM exact, max AUC gap {worst_auc:.1e} (<= {AUC_TOL:e}), curves monotone"),
    )
}

fn criterion_hm() -> Outcome {
    let cases = [(0.4, 0.6, 0.48), (0.5, 0.5, 0.5), (0.0, 0.7, 0.0), (0.0, 0.0, 0.0)];
    for (s, u, want) in cases {
        let got = harmonic_mean(s, u);
        if (got - want).abs() > 1e-12 {
            return Err(format!("HM({s}, {u}) = {got}, expected {want}"));
        }
    }
    Ok("HM(0.4, 0.6) = 0.48, HM(0.5, 0.5) = 0.5, HM(0, x) = 0".into())
}

fn criterion_shift() -> Outcome {
    let vocab = RenderSpec::synthetic(6, 6, 64, 0.0).vocab().unwrap();
    let ls = split_compositions(&vocab, 0.667, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut draws, mut batches) = (0, 0u64);
    while draws < SHIFT_DRAWS {
        let b = rng.random_range(2..=48);
        let labels: Vec<Pair> = (0..b).map(|_| ls.seen()[rng.random_range(0..ls.seen().len())]).collect();
        let ratio = rng.random_range(0.05..0.9);
        let plan = concept_shift(&labels, ratio, &ls, batches);
        for f in &plan.shifted {
            if !ls.is_seen(f.label) || f.label != Pair::new(labels[f.donor_attr].attr, labels[f.donor_obj].obj) {
                return Err(format!("batch {batches}: synthesized label {} is not a valid seen pair", f.label));
            }
        }
        draws += plan.shifted.len();
        batches += 1;

        let still = concept_shift(&labels, 0.0, &ls, batches);
        let (mixes, out, regular) = composition_rows(&labels, &still);
        if !still.shifted.is_empty() || out != labels || !regular.iter().all(|&r| r) || mixes.iter().enumerate().any(|(i, &m)| m != (i, i)) {
            return Err(format!("batch {batches}: ratio 0 changed the batch"));
        }
    }
    Ok(format!("{draws} synthesized features over {batches} batches, all labels in the seen set; ratio 0 is a no-op"))
}

fn benchmark_data() -> (Dataset, LabelSpace) {
    let spec = RenderSpec::synthetic(6, 6, 64, 0.05);
    let ls = split_compositions(&spec.vocab().unwrap(), 0.667, 0).unwrap();
    let data = synthesize(&spec, &ls, SplitCounts { train: 20, val: 5, test: 10 }, 0).unwrap();
    (data, ls)
}

struct Learned {
    baseline: EvalReport,
    trained: EvalReport,
    outcome: TrainOutcome,
    stage0_hash: String,
    final_hash: String,
    seconds: f64,
}

fn learn(data: &Dataset, ls: &LabelSpace) -> Result<Learned> {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    let mut p = ModelParams::init(EncoderConfig::default(), ls.vocab().clone(), cfg.seed)?;
    let s0 = stage0_pretrain(&mut p, data, &cfg)?;
    let test = data.stage(Stage::Test);
    let baseline = evaluate(&score_all(&p, &test, ls, World::Closed)?)?;
    let outcome = train(&mut p, data, &cfg)?;
    let trained = evaluate(&score_all(&p, &test, ls, World::Closed)?)?;
    Ok(Learned {
        baseline,
        trained,
        outcome,
        stage0_hash: s0.frozen_hash,
        final_hash: frozen_hash(&p),
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn criterion_learning(l: &Learned, ls: &LabelSpace) -> Outcome {
    let chance = 1.0 / (ls.seen().len() + ls.unseen().len()) as f64;
    let floor = 3.0 * chance;
    let t = &l.trained;
    check(
        t.unseen_top1 >= floor && t.auc > l.baseline.auc && l.seconds < LEARNING_SECONDS,
        format!(
            "{} seen / {} unseen pairs: unseen top-1 {:.3} (>= {floor:.3}), AUC {:.4} vs zero-init {:.4}, HM {:.3}, best epoch {}, {:.0}s",
            ls.seen().len(),
            ls.unseen().len(),
            t.unseen_top1,
            t.auc,
            l.baseline.auc,
            t.best_hm,
            l.outcome.best_epoch,
            l.seconds
        ),
    )
}

fn best_val_auc(outcome: &TrainOutcome) -> f64 {
    outcome.metrics[outcome.best_epoch].val_auc
}

fn criterion_ablation(data: &Dataset, seed0_full: Option<f64>) -> Outcome {
    let one_side = Ablation { vision_adapters: false, text_adapters: true, vision_moa: false, text_moa: true };
    let none = Ablation { vision_adapters: false, text_adapters: false, vision_moa: false, text_moa: true };
    let mut sums = [0.0f64; 3];
    let mut rows = Vec::new();
    for seed in ABLATION_SEEDS {
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let mut base = ModelParams::init(EncoderConfig::default(), data.labelspace.vocab().clone(), seed).map_err(|e| e.to_string())?;
        stage0_pretrain(&mut base, data, &cfg).map_err(|e| e.to_string())?;
        let mut aucs = [0.0; 3];
        for (k, ablation) in [Ablation::FULL, one_side, none].into_iter().enumerate() {
            if let (0, 0, Some(auc)) = (k, seed, seed0_full) {
                aucs[0] = auc;
                continue;
            }
            let mut p = base.with_ablation(ablation, seed).map_err(|e| e.to_string())?;
            aucs[k] = best_val_auc(&train(&mut p, data, &cfg).map_err(|e| e.to_string())?);
        }
        for k in 0..3 {
            sums[k] += aucs[k];
        }
        rows.push(format!("seed {seed}: {:.4}/{:.4}/{:.4}", aucs[0], aucs[1], aucs[2]));
    }
    let n = ABLATION_SEEDS.len() as f64;
    let [both, one, zero] = sums.map(|s| s / n);
    check(
        both >= one && one >= zero,
        format!("mean val AUC both {both:.4} >= text-only {one:.4} >= none {zero:.4} ({})", rows.join(", ")),
    )
}

/// Two identical short runs on the benchmark data, compared byte for byte.
fn criterion_determinism(data: &Dataset, ls: &LabelSpace) -> Outcome {
    let cfg = TrainConfig { epochs: 2, stage0_epochs: 2, seed: 7, ..TrainConfig::default() };
    let run = || -> Result<(String, String, String)> {
        let mut p = ModelParams::init(EncoderConfig::default(), ls.vocab().clone(), cfg.seed)?;
        stage0_pretrain(&mut p, data, &cfg)?;
        let out = train(&mut p, data, &cfg)?;
        let test = data.stage(Stage::Test);
        let closed = score_all(&p, &test, ls, World::Closed)?;
        let open = score_all(&p, &test, ls, World::Open)?;
        Ok((
            metrics_csv(&out.metrics),
            report_text(&evaluate(&closed)?, World::Closed, closed.cols()),
            report_text(&evaluate(&open)?, World::Open, open.cols()),
        ))
    };
    let a = run().map_err(|e| e.to_string())?;
    let b = run().map_err(|e| e.to_string())?;
    check(
        a == b,
        format!("metrics log ({} bytes) and closed/open reports identical across two runs", a.0.len()),
    )
}

fn criterion_frozen(l: &Learned) -> Outcome {
    let o = &l.outcome;
    check(
        o.frozen_hash_before == o.frozen_hash_after && l.final_hash == l.stage0_hash,
        format!("frozen hash {}… unchanged through adapter training", &l.final_hash[..16]),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        match outcome {
            Ok(d) => println!("PASS [{n:>2}] {name}: {d}"),
            Err(d) => {
                failures += 1;
                println!("FAIL [{n:>2}] {name}: {d}");
            }
        }
    };
    report(1, "gradient suite", criterion_gradients());
    report(2, "identity at init", criterion_identity());
    report(3, "mixture algebra", criterion_moa());
    report(4, "evaluation oracle", criterion_oracle());
    report(5, "harmonic mean", criterion_hm());
    report(6, "concept shift validity", criterion_shift());

    let (data, ls) = benchmark_data();
    match learn(&data, &ls) {
        Ok(l) => {
            report(7, "learning signal", criterion_learning(&l, &ls));
            report(8, "ablation ordering", criterion_ablation(&data, Some(best_val_auc(&l.outcome))));
            report(9, "determinism", criterion_determinism(&data, &ls));
            report(10, "frozen partition", criterion_frozen(&l));
        }
        Err(e) => {
            report(7, "learning signal", Err(e.to_string()));
            report(8, "ablation ordering", criterion_ablation(&data, None));
            report(9, "determinism", criterion_determinism(&data, &ls));
            report(10, "frozen partition", Err("training did not complete".into()));
        }
    }
    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} of 10 criteria failed");
        ExitCode::FAILURE
    }
}
