//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if any fails.
//!
//! `ACCEPTANCE_CRITERIA=1,2,5` runs a subset.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use orthodiff::checkpoint::Checkpoint;
use orthodiff::config::RunConfig;
use orthodiff::pipeline::{self, RunDir};
use orthodiff::report::read_reports;
use orthodiff::store::{write_corpus, DiskCorpus};
use orthodiff::trainlog::{self, TrainLog};
use orthodiff_core::autograd::{Graph, Mode, Var};
use orthodiff_core::conditioning::TemplateBank;
use orthodiff_core::corpus::{generate_plan, materialize, CorpusConfig};
use orthodiff_core::diffusion::{sample, DenoiserConfig, NoiseSchedule, SamplerKind, ScheduleKind};
use orthodiff_core::disentangle::{
    alignment_loss, alignment_term_var, decouple, decouple_var, project_out, DecoupleConfig, DecoupleMode, Factor,
    NuisanceFeatureSet, Origin,
};
use orthodiff_core::evaluation::{condition_for, MetricsReport};
use orthodiff_core::feature::{LayerFeatureSet, TAPS};
use orthodiff_core::gradcheck::{check_inputs, check_params};
use orthodiff_core::rng::{self, Rng};
use orthodiff_core::training::{
    batch_objective, overfit_one, prepare, trainable_parameters, Ablation, Draw, ModelConfig, Models, Prepared,
    TrainConfig, Trainer,
};
use orthodiff_core::Tensor;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

fn gaussian(r: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng::normal(r)).collect()
}

fn set_of(rows: &[Vec<f64>]) -> LayerFeatureSet {
    LayerFeatureSet::from_rows(rows).unwrap()
}

fn nuisance(factor: Factor, rows: &[Vec<f64>]) -> NuisanceFeatureSet {
    NuisanceFeatureSet { factor, origin: Origin::Predicted, features: set_of(rows) }
}

fn layers(r: &mut Rng, d: usize) -> Vec<Vec<f64>> {
    (0..TAPS).map(|_| gaussian(r, d)).collect()
}

/// Joint and sequential decoupling over 1000 random triples per dimension.
fn orthogonality() -> Outcome {
    let mut r = rng::seeded(1);
    let joint = DecoupleConfig { mode: DecoupleMode::Joint, ..Default::default() };
    let seq = DecoupleConfig { mode: DecoupleMode::Sequential, ..Default::default() };
    let mut worst_joint = 0.0f64;
    let mut worst_seq = 0.0f64;
    for d in [8, 64, 768] {
        for _ in 0..1000 / TAPS {
            let (f, p, b) = (layers(&mut r, d), layers(&mut r, d), layers(&mut r, d));
            let (pn, bn) = (nuisance(Factor::Pose, &p), nuisance(Factor::Background, &b));
            let j = decouple(&set_of(&f), Some(&pn), Some(&bn), &joint).map_err(|e| e.to_string())?;
            let s = decouple(&set_of(&f), Some(&pn), Some(&bn), &seq).map_err(|e| e.to_string())?;
            for l in 0..TAPS {
                worst_joint = worst_joint.max(cos(j.layer(l), &p[l]).abs()).max(cos(j.layer(l), &b[l]).abs());
                worst_seq = worst_seq.max(cos(s.layer(l), &b[l]).abs());
            }
        }
    }
    // degenerate cases: a zero direction removes nothing
    let d = 16;
    let (f, p, b) = (layers(&mut r, d), layers(&mut r, d), layers(&mut r, d));
    let zero: Vec<Vec<f64>> = (0..TAPS).map(|_| vec![0.0; d]).collect();
    let fs = set_of(&f);
    let run = |p: &[Vec<f64>], b: &[Vec<f64>]| {
        decouple(&fs, Some(&nuisance(Factor::Pose, p)), Some(&nuisance(Factor::Background, b)), &seq).unwrap()
    };
    let thr = seq.threshold(d);
    let mut degenerate_ok = run(&zero, &zero) == fs;
    for l in 0..TAPS {
        degenerate_ok &= run(&zero, &b).layer(l) == project_out(&f[l], &b[l], thr).unwrap().as_slice();
        degenerate_ok &= run(&p, &zero).layer(l) == project_out(&f[l], &p[l], thr).unwrap().as_slice();
    }
    degenerate_ok &= decouple(&fs, None, None, &seq).unwrap() == fs;

    // sequential is orthogonal to pose exactly when pose ⟂ background
    let mut b_perp = b.clone();
    for l in 0..TAPS {
        b_perp[l] = project_out(&b[l], &p[l], thr).unwrap();
    }
    let orth = run(&p, &b_perp);
    let skew = run(&p, &b);
    let orth_pose = (0..TAPS).map(|l| cos(orth.layer(l), &p[l]).abs()).fold(0.0, f64::max);
    let skew_pose = (0..TAPS).map(|l| cos(skew.layer(l), &p[l]).abs()).fold(0.0, f64::max);
    let branches_ok = orth_pose < 1e-6 && skew_pose > 1e-6;

    check(
        worst_joint < 1e-6 && worst_seq < 1e-6 && degenerate_ok && branches_ok,
        format!(
            "joint max|cos| {worst_joint:.1e}, sequential vs background {worst_seq:.1e}, \
             degenerate passthrough {degenerate_ok}, pose branch {orth_pose:.1e}/{skew_pose:.1e}"
        ),
    )
}

/// Projection identities over 1000 random cases each.
fn projection_algebra() -> Outcome {
    let mut r = rng::seeded(2);
    let eps = 1e-12 * 32.0;
    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let mut fails = Vec::new();
    let (mut idem, mut pyth, mut scale, mut lin) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut norm_ok = true;
    for _ in 0..1000 {
        let d = 2 + rng::below(&mut r, 31);
        let mag = 10f64.powf(rng::uniform(&mut r) * 4.0 - 2.0);
        let v: Vec<f64> = gaussian(&mut r, d).iter().map(|x| x * mag).collect();
        let w = gaussian(&mut r, d);
        let u = gaussian(&mut r, d);
        let pv = project_out(&v, &u, eps).unwrap();
        let ppv = project_out(&pv, &u, eps).unwrap();
        idem = idem.max(max_diff(&pv, &ppv) / norm(&v).max(1.0));

        let removed: Vec<f64> = v.iter().zip(&pv).map(|(a, b)| a - b).collect();
        pyth = pyth.max((dot(&v, &v) - dot(&pv, &pv) - dot(&removed, &removed)).abs() / dot(&v, &v));
        norm_ok &= norm(&pv) <= norm(&v) * (1.0 + 1e-15);

        let c = if rng::uniform(&mut r) < 0.5 { -1.0 } else { 1.0 } * 10f64.powf(rng::uniform(&mut r) * 6.0 - 3.0);
        let cu: Vec<f64> = u.iter().map(|x| c * x).collect();
        scale = scale.max(max_diff(&pv, &project_out(&v, &cu, eps).unwrap()) / norm(&v));

        let (a, b) = (rng::normal(&mut r), rng::normal(&mut r));
        let comb: Vec<f64> = v.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
        let pw = project_out(&w, &u, eps).unwrap();
        let lhs = project_out(&comb, &u, eps).unwrap();
        let rhs: Vec<f64> = pv.iter().zip(&pw).map(|(x, y)| a * x + b * y).collect();
        lin = lin.max(max_diff(&lhs, &rhs) / norm(&comb).max(1e-300));
    }
    if idem > 1e-12 {
        fails.push("idempotence");
    }
    if pyth > 1e-10 {
        fails.push("pythagoras");
    }
    if !norm_ok {
        fails.push("norm");
    }
    if scale > 1e-10 {
        fails.push("scale");
    }
    if lin > 1e-10 {
        fails.push("linearity");
    }
    check(
        fails.is_empty(),
        format!("idempotence {idem:.1e}, pythagoras {pyth:.1e}, norm bound {norm_ok}, scale {scale:.1e}, linearity {lin:.1e} {fails:?}"),
    )
}

/// Finite-difference checks of the alignment loss, decoupling and the full objective.
fn gradients() -> Outcome {
    let mut worst = [0.0f64; 3];
    for seed in 0..3u64 {
        let mut r = rng::seeded(30 + seed);
        let mut mat = |d: usize| Tensor::from_vec(&[TAPS, d], gaussian(&mut r, TAPS * d)).unwrap();

        // L₁ over a batch of two samples and both factors
        let inputs: Vec<Tensor> = (0..8).map(|_| mat(6)).collect();
        let l1 = |g: &mut Graph, v: &[Var]| -> orthodiff_core::Result<Var> {
            let mut acc: Option<Var> = None;
            for k in 0..4 {
                let t = alignment_term_var(g, v[2 * k], v[2 * k + 1])?;
                acc = Some(match acc {
                    Some(a) => g.add(a, t)?,
                    None => t,
                });
            }
            Ok(g.scale(acc.unwrap(), 0.5))
        };
        let rep = check_inputs(&inputs, &l1, 1e-6).map_err(|e| e.to_string())?;
        worst[0] = worst[0].max(rep.max_rel_error);
        // the graph form agrees with the reference implementation
        let sets: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();
        let fs = |i: usize, f: Factor| NuisanceFeatureSet {
            factor: f,
            origin: Origin::Predicted,
            features: LayerFeatureSet::from_rows(&sets[i].chunks(6).map(<[f64]>::to_vec).collect::<Vec<_>>()).unwrap(),
        };
        let pred = vec![vec![fs(0, Factor::Pose), fs(2, Factor::Background)], vec![fs(4, Factor::Pose), fs(6, Factor::Background)]];
        let truth = vec![vec![fs(1, Factor::Pose), fs(3, Factor::Background)], vec![fs(5, Factor::Pose), fs(7, Factor::Background)]];
        let reference = alignment_loss(&pred, &truth).map_err(|e| e.to_string())?;
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let graph_value = l1(&mut g, &vars).map(|v| g.value(v).item()).map_err(|e| e.to_string())?;
        if (reference - graph_value).abs() > 1e-12 {
            return Err(format!("graph L1 {graph_value} differs from reference {reference}"));
        }

        for mode in [DecoupleMode::Sequential, DecoupleMode::Joint] {
            let cfg = DecoupleConfig { mode, ..Default::default() };
            let inputs = vec![mat(6), mat(6), mat(6), mat(6)];
            let f = |g: &mut Graph, v: &[Var]| {
                let d = decouple_var(g, v[0], Some(v[1]), Some(v[2]), &cfg)?;
                let w = g.mul(d, v[3])?;
                Ok(g.sum(w))
            };
            worst[1] = worst[1].max(check_inputs(&inputs, &f, 1e-6).map_err(|e| e.to_string())?.max_rel_error);
        }

        worst[2] = worst[2].max(tiny_pipeline_gradient(seed).map_err(|e| e.to_string())?);
    }
    check(
        worst.iter().all(|&w| w < 1e-4),
        format!("max relative error: alignment {:.1e}, decouple {:.1e}, total objective {:.1e}", worst[0], worst[1], worst[2]),
    )
}

fn tiny_pipeline_gradient(seed: u64) -> orthodiff_core::Result<f64> {
    let cfg = CorpusConfig { image_size: 16, originals: 2, ..Default::default() };
    let plan = generate_plan(&cfg, 5)?;
    let renderer = cfg.renderer();
    let mut m = Models::new(ModelConfig::tiny(), seed)?;
    let mut r = rng::seeded(100 + seed);
    // the output layer starts at zero; perturb it so every path carries gradient
    for id in m.store.ids_with_prefix("denoiser.out") {
        let t = m.store.get(id).map(|_| 0.2 * rng::normal(&mut r));
        m.store.set(id, t)?;
    }
    let sch = NoiseSchedule::build(10, ScheduleKind::LinearBeta)?;
    let bank = TemplateBank::default();
    let shape = m.denoiser.latent_shape();
    let n: usize = shape.iter().product();
    let preps: Vec<Prepared> =
        (0..2).map(|i| prepare(&m, &materialize(&plan.samples[i * 7], &renderer)?)).collect::<Result<_, _>>()?;
    let draws: Vec<Draw> = (0..2)
        .map(|i| Draw {
            index: i,
            template: 3 + i,
            t: 2 + 3 * i,
            eps: Tensor::from_vec(&shape, gaussian(&mut r, n)).unwrap(),
        })
        .collect();
    let loss = TrainConfig::default().loss();
    let ids = trainable_parameters(&m, Ablation::FULL)?;
    let mask = m.store.mask(&ids);
    let models = m.clone();
    let mut store = m.store.clone();
    let rep = check_params(
        &mut store,
        &ids,
        2,
        seed,
        1e-6,
        || Graph::new(mask.clone(), Mode::Train, 77),
        |s, g| {
            let mm = Models { store: s.clone(), ..models.clone() };
            let items: Vec<(&Prepared, &Draw)> = preps.iter().zip(&draws).collect();
            Ok(batch_objective(g, &mm, &bank, &sch, &items, &loss)?.total)
        },
    )?;
    Ok(rep.max_rel_error)
}

/// Logged totals decompose exactly over a 100-step run.
fn bookkeeping(fx: &Fixture) -> Outcome {
    let cfg = RunConfig::default();
    let models = Checkpoint::load(&fx.pretrained).map_err(|e| e.to_string())?.models().map_err(|e| e.to_string())?;
    let mut tc = cfg.train_config().map_err(|e| e.to_string())?;
    tc.steps = 100;
    let (l1w, l2w) = (tc.lambda1, tc.lambda2);
    let mut trainer = Trainer::new(models, tc).map_err(|e| e.to_string())?;
    let path = fx.dir.join("bookkeeping.csv");
    let mut log = TrainLog::open(&path).map_err(|e| e.to_string())?;
    for _ in 0..100 {
        let rec = trainer.step(&fx.corpus).map_err(|e| e.to_string())?;
        log.append(&rec).map_err(|e| e.to_string())?;
    }
    let rows = trainlog::read(&path).map_err(|e| e.to_string())?;
    let (mut e8, mut e7) = (0.0f64, 0.0f64);
    for r in &rows {
        e8 = e8.max((r.total - (r.l2 + l2w * r.l1)).abs());
        e7 = e7.max((r.l2 - (r.l_ldm + l1w * r.f_main_l1)).abs());
    }
    check(
        rows.len() == 100 && e8 <= 1e-10 && e7 <= 1e-10,
        format!("{} logged rows, max |L - (L2 + λ2·L1)| {e8:.1e}, max |L2 - (Lldm + λ1·|F|)| {e7:.1e}", rows.len()),
    )
}

/// Default expansion, pose-matched variants and exact background ground truth.
fn corpus_contract() -> Outcome {
    let t0 = Instant::now();
    let cfg = CorpusConfig { originals: 10, ..Default::default() };
    let plan = generate_plan(&cfg, 3).map_err(|e| e.to_string())?;
    let renderer = cfg.renderer();
    let mut per_original = vec![0usize; cfg.originals];
    let mut bad = 0;
    for rec in &plan.samples {
        per_original[rec.original] += 1;
        let s = materialize(rec, &renderer).map_err(|e| e.to_string())?;
        let pose_exact = s.variants.len() == 3
            && s.pose_variants.len() == 3
            && s.variants.iter().all(|v| v.pose == s.factors.pose && v.identity != s.factors.identity);
        let mask = renderer.subject_mask(&s.factors).map_err(|e| e.to_string())?;
        let bg_exact = s.background_image == renderer.render(&s.factors, false).map_err(|e| e.to_string())?
            && mask.iter().enumerate().filter(|(_, &m)| !m).all(|(p, _)| {
                (0..3).all(|c| {
                    s.main_image.pixels()[p * 3 + c].to_bits() == s.background_image.pixels()[p * 3 + c].to_bits()
                })
            });
        if !(pose_exact && bg_exact && s.validate(3).is_ok()) {
            bad += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let counts_ok = per_original.iter().all(|&n| n == 100);
    check(
        counts_ok && bad == 0 && secs < 60.0,
        format!("{} samples, per original {:?}, {bad} violations, {secs:.1}s", plan.samples.len(), per_original),
    )
}

/// Shared artifacts for the training-based criteria: one pretraining and the four ablation runs.
struct Fixture {
    dir: PathBuf,
    corpus: DiskCorpus,
    pretrained: PathBuf,
    run: RunDir,
    reports: Vec<MetricsReport>,
    pretrain_secs: f64,
    ablate_secs: f64,
}

fn fixture(dir: &Path) -> Result<Fixture, String> {
    let cfg = RunConfig::default();
    let corpus_dir = dir.join("corpus");
    write_corpus(&corpus_dir, &cfg.corpus_config(), cfg.seed).map_err(|e| e.to_string())?;
    let corpus = DiskCorpus::open(&corpus_dir).map_err(|e| e.to_string())?;
    let run = RunDir::new(dir.join("ablate"));
    let t0 = Instant::now();
    run.create().map_err(|e| e.to_string())?;
    let models = pipeline::pretrained_models(&cfg, &corpus).map_err(|e| e.to_string())?;
    let pretrained = run.pretrained();
    Checkpoint::capture(&cfg, orthodiff::checkpoint::Stage::Pretrained, &models, None)
        .save(&pretrained)
        .map_err(|e| e.to_string())?;
    let pretrain_secs = t0.elapsed().as_secs_f64();
    let reports = pipeline::ablate(&cfg, &run, &corpus, Some(&pretrained)).map_err(|e| e.to_string())?;
    let ablate_secs = t0.elapsed().as_secs_f64();
    println!("{}", orthodiff::report::grid(&reports).trim_end());
    Ok(Fixture { dir: dir.to_path_buf(), corpus, pretrained, run, reports, pretrain_secs, ablate_secs })
}

/// 500 steps: loss falls by half and frozen parameters stay bitwise fixed.
fn training_sanity(fx: &Fixture) -> Outcome {
    let full = fx.run.ablation(Ablation::FULL);
    let rows = trainlog::read(&full.train_log()).map_err(|e| e.to_string())?;
    if rows.len() != 500 {
        return Err(format!("expected 500 logged steps, found {}", rows.len()));
    }
    let mean = |xs: &[orthodiff_core::training::TrainRecord]| xs.iter().map(|r| r.total).sum::<f64>() / xs.len() as f64;
    let (first, last) = (mean(&rows[..10]), mean(&rows[rows.len() - 10..]));
    let drop = 1.0 - last / first;
    let before = Checkpoint::load(&fx.pretrained).and_then(|c| c.models()).map_err(|e| e.to_string())?;
    let after = Checkpoint::load(&full.checkpoint()).and_then(|c| c.models()).map_err(|e| e.to_string())?;
    let trainable = trainable_parameters(&before, Ablation::FULL).map_err(|e| e.to_string())?;
    let changed: Vec<&str> = before
        .store
        .ids()
        .filter(|id| !trainable.contains(id))
        .filter(|&id| {
            let (a, b) = (before.store.get(id).data(), after.store.get(id).data());
            a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits())
        })
        .map(|id| before.store.name(id))
        .collect();
    let secs = rows.last().map_or(0.0, |r| r.wall_time);
    check(
        drop >= 0.5 && changed.is_empty() && secs < 600.0,
        format!(
            "first-10 mean {first:.4}, last-10 mean {last:.4}, drop {:.1}%, frozen changed {changed:?}, {secs:.0}s",
            100.0 * drop
        ),
    )
}

/// Swapping background or pose moves decoupled features at most half as much as raw ones.
fn disentanglement(fx: &Fixture) -> Outcome {
    let r = &fx.reports[0];
    let (b, p) = (&r.background_drift, &r.pose_drift);
    check(
        b.pairs >= 200 && p.pairs >= 200 && b.ratio() <= 0.5 && p.ratio() <= 0.5,
        format!(
            "background drift {:.3} decoupled vs {:.3} raw (ratio {:.2}), pose {:.3} vs {:.3} (ratio {:.2}), {} pairs each",
            b.decoupled,
            b.raw,
            b.ratio(),
            p.decoupled,
            p.raw,
            p.ratio(),
            b.pairs
        ),
    )
}

/// Full model ≥ each single-expert ablation ≥ no experts.
fn ablation_order(fx: &Fixture) -> Outcome {
    let [full, no_bg, no_pose, none] = &fx.reports[..] else {
        return Err("expected four ablation reports".into());
    };
    let ordered = |f: &dyn Fn(&MetricsReport) -> f64| {
        f(full) >= f(no_bg) && f(full) >= f(no_pose) && f(no_bg) >= f(none) && f(no_pose) >= f(none)
    };
    let id_ok = ordered(&|r| r.identity_probe);
    let sim_ok = ordered(&|r| r.image_sim.mean);
    let fmt = |f: &dyn Fn(&MetricsReport) -> f64| {
        fx.reports.iter().map(|r| format!("{:.4}", f(r))).collect::<Vec<_>>().join("/")
    };
    check(
        id_ok && sim_ok && fx.ablate_secs < 45.0 * 60.0,
        format!(
            "identity probe {} ordered {id_ok}, image_sim {} ordered {sim_ok} (full/bg/pose/both), \
             {:.0}s including {:.0}s shared pretraining",
            fmt(&|r| r.identity_probe),
            fmt(&|r| r.image_sim.mean),
            fx.ablate_secs,
            fx.pretrain_secs
        ),
    )
}

/// A denoiser fit to one image reproduces it under DDIM.
fn overfit() -> Outcome {
    let cfg = CorpusConfig { image_size: 16, originals: 1, ..Default::default() };
    let plan = generate_plan(&cfg, 0).map_err(|e| e.to_string())?;
    let s = materialize(&plan.samples[0], &cfg.renderer()).map_err(|e| e.to_string())?;
    // the tiny encoder with a full-width denoiser; the tiny denoiser is too narrow to memorise an image
    let mut mcfg = ModelConfig::tiny();
    mcfg.denoiser = DenoiserConfig { latent_size: 8, d_text: mcfg.denoiser.d_text, ..Default::default() };
    let mut m = Models::new(mcfg, 0).map_err(|e| e.to_string())?;
    let sch = NoiseSchedule::build(100, ScheduleKind::LinearBeta).map_err(|e| e.to_string())?;
    let loss = TrainConfig::default().loss();
    let cond = condition_for(&s.main_image, TemplateBank::default().get(0), &m, &loss).map_err(|e| e.to_string())?;
    let losses = overfit_one(&mut m, &s.main_image, &cond, &sch, OVERFIT_STEPS, 3e-3, 8, 0).map_err(|e| e.to_string())?;
    let img = sample(&cond, &m.denoiser, &m.store, &sch, m.config.codec, SamplerKind::Ddim, 50, 1).map_err(|e| e.to_string())?;
    let px = img.pixels().len() as f64;
    let mse = img.pixels().iter().zip(s.main_image.pixels()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / px;
    let tail = losses.iter().rev().take(50).sum::<f64>() / 50.0;
    check(mse <= 0.05, format!("{OVERFIT_STEPS} steps, final loss {tail:.5}, DDIM(50) pixel MSE {mse:.5}"))
}

const OVERFIT_STEPS: usize = 2500;

fn masked_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    common::tree(root)
        .into_iter()
        .map(|(p, bytes)| {
            if p.file_name().is_some_and(|n| n == "train_log.csv") {
                let rows = trainlog::read(&root.join(&p)).unwrap();
                let masked: Vec<String> = rows
                    .iter()
                    .map(|r| format!("{} {} {} {} {} {} {}", r.step, r.l1, r.l_ldm, r.f_main_l1, r.l2, r.total, r.grad_norm))
                    .collect();
                (p, masked.join("\n").into_bytes())
            } else {
                (p, bytes)
            }
        })
        .collect()
}

/// gen-corpus → train(200) → sample → eval, twice with the same seed.
fn cli_smoke(dir: &Path) -> Outcome {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let cfg = cfg.to_str().unwrap();
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let out = dir.join(name);
        let out = out.to_str().unwrap();
        for cmd in ["gen-corpus", "train", "sample", "eval"] {
            let mut args = vec![cmd, "--config", cfg, "--seed", "11", "--out", out];
            if cmd == "train" {
                args.extend(["--steps", "200"]);
            }
            let o = common::cli(&args);
            if !o.status.success() {
                return Err(format!("{cmd} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
            }
        }
        let reports = read_reports(&dir.join(name).join("metrics.json")).map_err(|e| e.to_string())?;
        let complete = reports.len() == 1
            && reports[0].validate().is_ok()
            && reports[0].config_hash.len() == 64
            && reports[0].checkpoint_id.len() == 16
            && dir.join(name).join("metrics.csv").is_file();
        if !complete {
            return Err(format!("incomplete metrics report in run {name}"));
        }
        let steps = trainlog::read(&dir.join(name).join("train_log.csv")).map_err(|e| e.to_string())?.len();
        if steps != 200 {
            return Err(format!("run {name} logged {steps} steps"));
        }
        trees.push(masked_tree(&dir.join(name)));
    }
    let identical = trees[0] == trees[1];
    check(identical, format!("{} files, identical across reruns: {identical} (train_log wall_time excluded)", trees[0].len()))
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_CRITERIA").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(n) {
            let t0 = Instant::now();
            let out = f();
            let secs = t0.elapsed().as_secs_f64();
            let (tag, detail) = match &out {
                Ok(d) => ("PASS", d),
                Err(d) => ("FAIL", d),
            };
            println!("criterion {n:>2} {name:<22} {tag} ({secs:.1}s): {detail}");
            results.push((n, name, out, secs));
        }
    };

    run(1, "orthogonality", &mut orthogonality);
    run(2, "projection algebra", &mut projection_algebra);
    run(3, "gradients", &mut gradients);
    run(5, "corpus contract", &mut corpus_contract);
    run(9, "overfit one", &mut overfit);
    run(10, "cli smoke", &mut || cli_smoke(&tmp.path().join("cli")));

    if [4, 6, 7, 8].into_iter().any(wanted) {
        match fixture(&tmp.path().join("fixture")) {
            Ok(fx) => {
                run(4, "loss bookkeeping", &mut || bookkeeping(&fx));
                run(6, "training sanity", &mut || training_sanity(&fx));
                run(7, "disentanglement", &mut || disentanglement(&fx));
                run(8, "ablation order", &mut || ablation_order(&fx));
            }
            Err(e) => {
                for (n, name) in [(4, "loss bookkeeping"), (6, "training sanity"), (7, "disentanglement"), (8, "ablation order")] {
                    run(n, name, &mut || Err(format!("shared training run failed: {e}")));
                }
            }
        }
    }

    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    for (n, name, out, secs) in &results {
        println!("criterion {n:>2} {name:<22} {} ({secs:.1}s)", if out.is_ok() { "PASS" } else { "FAIL" });
    }
    if results.iter().any(|r| r.2.is_err()) {
        std::process::exit(1);
    }
}
