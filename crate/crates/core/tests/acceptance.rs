//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use udoc::autograd::Graph;
use udoc::checkpoint::Checkpoint;
use udoc::config::{RunConfig, TaskSet};
use udoc::corpus::{generate_corpus, load_corpus, save_corpus, Corpus};
use udoc::downstream::{finetune, Task};
use udoc::encoder::{Encoder, GateOverride};
use udoc::gradcheck::gradcheck;
use udoc::losses::{info_nce, msm_loss, vcl_contrastive_sum, vla_value};
use udoc::model::UdocModel;
use udoc::params::{Initializer, ParamStore};
use udoc::quantizer::{diversity_stats, TemperatureSchedule};
use udoc::seeding;
use udoc::sequence::{sample_mask_plan, MaskCategory};
use udoc::tensor::Tensor;
use udoc::trainer::{self, lr_at, smoothed, Trainer, LAST_DIR, METRICS_FILE};
use udoc::visual_encoder::BACKBONE_PREFIX;

const SEEDS: [u64; 3] = [0, 1, 2];
const TREND_STEPS: usize = 2000;
const TREND_DOCS: usize = 512;
const LABELED_DOCS: usize = 1024;
const ENTITY_STEPS: usize = 50;
const DOC_STEPS: usize = 500;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = seeding::stream(seed, 77, 0);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let report = gradcheck(&RunConfig::tiny(), None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(report.passed(), format!("{} tensors over tolerance:\n{report}", report.failures().len()))?;
    ensure(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} tensors, max relative error {:.2e}, {:.1?}",
        report.tensors.len(),
        report.max_rel_err(),
        elapsed
    ))
}

fn loss_identities() -> Check {
    let mut g = Graph::new();
    let target = random(3, 8, 1);
    let p = g.constant(target.clone());
    let t = g.constant(target);
    let msm = msm_loss(&mut g, p, t, 1.0).map_err(|e| e.to_string())?;
    ensure(g.value(msm).item() == 0.0, "MSM is not zero on a perfect prediction")?;

    let single = {
        let mut g = Graph::new();
        let p = g.constant(random(1, 8, 2));
        let c = g.constant(random(1, 8, 3));
        let l = vcl_contrastive_sum(&mut g, p, c, &[0], 0.1).map_err(|e| e.to_string())?;
        g.value(l).item()
    };
    ensure(single.abs() < 1e-12, format!("single candidate gives {single}"))?;
    let pair = {
        let mut g = Graph::new();
        let row = random(1, 8, 4);
        let p = g.constant(row.clone());
        let c = g.constant(Tensor::from_rows(&[row.data().to_vec(), row.data().to_vec()]));
        let l = vcl_contrastive_sum(&mut g, p, c, &[0], 0.1).map_err(|e| e.to_string())?;
        g.value(l).item()
    };
    ensure((pair - 2f64.ln()).abs() <= 1e-9, format!("two equal candidates give {pair}"))?;
    ensure((info_nce(&[0.3, 0.3], 1, 0.1) - 2f64.ln()).abs() <= 1e-9, "info_nce mismatch")?;

    let s = random(5, 8, 5);
    let same = vla_value(&s, &s).map_err(|e| e.to_string())?;
    ensure(same.abs() < 1e-12, format!("VLA(S, S) = {same}"))?;
    let z = random(5, 8, 6);
    let base = vla_value(&s, &z).map_err(|e| e.to_string())?;
    let scales = [0.5, 3.0, 1e-3, 7.0, 42.0];
    let rescaled = Tensor::from_rows(
        &(0..5)
            .map(|r| z.row_slice(r).iter().map(|x| x * scales[r]).collect())
            .collect::<Vec<_>>(),
    );
    let moved = vla_value(&s, &rescaled).map_err(|e| e.to_string())?;
    ensure((moved - base).abs() <= 1e-9 * base.abs().max(1.0), format!("row rescaling moved VLA {base} -> {moved}"))?;

    let (c, e) = (2usize, 8usize);
    let uniform = Tensor::filled(vec![4, c * e], 1.0 / e as f64);
    let mut hot = Tensor::zeros(vec![4, c * e]);
    for r in 0..4 {
        hot.data_mut()[r * c * e] = 1.0;
        hot.data_mut()[r * c * e + e] = 1.0;
    }
    let mut rng = seeding::stream(9, 77, 1);
    let mut soft = Tensor::zeros(vec![16, c * e]);
    for chunk in soft.data_mut().chunks_mut(e) {
        let w: Vec<f64> = (0..e).map(|_| rng.gen::<f64>()).collect();
        let z: f64 = w.iter().sum();
        chunk.iter_mut().zip(&w).for_each(|(x, w)| *x = w / z);
    }
    let bound = -(c as f64) * (e as f64).ln();
    let mut scaled = Vec::new();
    for probs in [&uniform, &hot, &soft] {
        let v = diversity_stats(probs, e).map_err(|e| e.to_string())?.penalty * (c * e) as f64;
        ensure(v >= bound - 1e-12 && v <= 1e-12, format!("penalty*C*E = {v} outside [{bound}, 0]"))?;
        scaled.push(v);
    }
    ensure((scaled[0] - bound).abs() < 1e-12, "uniform usage does not attain the bound")?;
    ensure(scaled[1].abs() < 1e-12, "one-hot usage is not zero")?;
    Ok(format!("VCL pair {:.3e} from log 2, penalty bound {bound:.4} attained", (pair - 2f64.ln()).abs()))
}

fn masking_statistics() -> Check {
    let cfg = RunConfig::desk();
    let mut rng = seeding::stream(2024, seeding::TAG_TRAIN_STEP, 0);
    let (mut regions, mut sentence, mut visual) = (0usize, 0usize, 0usize);
    let mut cats = [0usize; 3];
    while regions < 100_000 {
        let n = rng.gen_range(cfg.corpus.min_regions..=cfg.corpus.max_regions).min(100_000 - regions);
        let plan = sample_mask_plan(n, cfg.train.p_mask_sentence, cfg.train.p_mask_visual, &mut rng);
        for s in &plan.sentences {
            cats[match s.category {
                MaskCategory::Mask => 0,
                MaskCategory::Random => 1,
                MaskCategory::Keep => 2,
            }] += 1;
        }
        sentence += plan.sentences.len();
        visual += plan.visual.len();
        regions += n;
    }
    let ps = sentence as f64 / regions as f64;
    let pv = visual as f64 / regions as f64;
    let split: Vec<f64> = cats.iter().map(|&c| c as f64 / sentence as f64).collect();
    ensure((ps - 0.15).abs() <= 0.01, format!("sentence rate {ps}"))?;
    ensure((pv - 0.075).abs() <= 0.01, format!("visual rate {pv}"))?;
    for (got, want) in split.iter().zip([0.8, 0.1, 0.1]) {
        ensure((got - want).abs() <= 0.02, format!("category split {split:?}"))?;
    }
    Ok(format!(
        "sentence {ps:.4}, visual {pv:.4}, split {:.3}/{:.3}/{:.3} over {regions} regions",
        split[0], split[1], split[2]
    ))
}

fn schedules() -> Check {
    let cfg = RunConfig::desk();
    let sched = TemperatureSchedule::from_config(&cfg.train);
    for step in [0u64, 1, 100_000, 1_000_000] {
        let want = (2.0 * 0.999995f64.powf(step as f64)).max(0.5);
        let got = sched.tau_at(step);
        ensure(got == want, format!("tau({step}) = {got}, expected {want}"))?;
    }
    ensure(sched.tau_at(0) == 2.0 && sched.tau_at(1_000_000) == 0.5, "tau endpoints")?;
    let mut train = RunConfig::full().train;
    train.total_steps = 1000;
    let at = lr_at(200, &train);
    ensure(at == 1e-5, format!("lr at 20% = {at}"))?;
    ensure(lr_at(0, &train) == 0.0 && lr_at(1000, &train) == 1e-5, "lr endpoints")?;
    ensure(lr_at(100, &train) < at, "lr is not ramping")?;
    Ok(format!("tau(1e5) = {:.6}, lr(200/1000) = {at:e}", sched.tau_at(100_000)))
}

fn structural_invariants() -> Check {
    let cfg = RunConfig::desk().model;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seeding::stream(3, seeding::TAG_INIT, 0));
    let enc = Encoder::register(&mut init, &mut store, &cfg);
    let d = cfg.d_model;
    let mut g = Graph::new();
    let hm = g.constant(random(7, d, 11));
    let hn_t = random(7, d, 12);
    let perm = [6, 2, 0, 5, 1, 3, 4];
    let permuted =
        Tensor::from_rows(&perm.iter().map(|&i| hn_t.row_slice(i).to_vec()).collect::<Vec<_>>());
    let hn = g.constant(hn_t);
    let hp = g.constant(permuted);
    let mut worst_row = 0.0f64;
    for block in &enc.blocks {
        for dir in [&block.visual, &block.textual] {
            let a = enc.cross_attention(&mut g, &store, dir, hm, hn).map_err(|e| e.to_string())?;
            let b = enc.cross_attention(&mut g, &store, dir, hm, hp).map_err(|e| e.to_string())?;
            for w in &a.weights {
                let w = g.value(*w);
                for r in 0..w.rows() {
                    worst_row = worst_row.max((w.row_slice(r).iter().sum::<f64>() - 1.0).abs());
                }
            }
            let diff = g.value(a.output).max_abs_diff(g.value(b.output));
            ensure(diff < 1e-10, format!("permutation changed the output by {diff}"))?;
        }
    }
    ensure(worst_row <= 1e-6, format!("attention row sum off by {worst_row}"))?;

    let block = &enc.blocks[0];
    let hv = g.constant(random(5, d, 13));
    let ht = g.constant(random(5, d, 14));
    let off = enc
        .block_forward(&mut g, &store, block, hv, ht, GateOverride::Logits(f64::NEG_INFINITY))
        .map_err(|e| e.to_string())?;
    let half = enc
        .block_forward(&mut g, &store, block, hv, ht, GateOverride::Logits(0.0))
        .map_err(|e| e.to_string())?;
    let v_plus = enc.direction_forward(&mut g, &store, &block.visual, hv, ht).map_err(|e| e.to_string())?;
    let t_plus = enc.direction_forward(&mut g, &store, &block.textual, ht, hv).map_err(|e| e.to_string())?;
    ensure(g.value(off.visual) == g.value(v_plus), "closed visual gate is not the ungated output")?;
    ensure(g.value(off.textual) == g.value(t_plus), "closed textual gate is not the ungated output")?;
    let dv = g.value(half.visual).max_abs_diff(&g.value(v_plus).map(|x| 1.5 * x));
    let dt = g.value(half.textual).max_abs_diff(&g.value(t_plus).map(|x| 1.5 * x));
    ensure(dv < 1e-12 && dt < 1e-12, format!("half-open gate off from 1.5x by {}", dv.max(dt)))?;
    Ok(format!("row sums within {worst_row:.1e}, permutation and gate limits hold"))
}

struct PretrainRun {
    seed: u64,
    ratio: f64,
    perplexity: Vec<f64>,
    model: UdocModel,
    elapsed: Duration,
}

fn pretrain_runs() -> Result<Vec<PretrainRun>, String> {
    let mut runs = Vec::new();
    for seed in SEEDS {
        let mut cfg = RunConfig::desk();
        cfg.train.seed = seed;
        cfg.train.total_steps = TREND_STEPS;
        let corpus = generate_corpus(seed, TREND_DOCS, &cfg.corpus).map_err(|e| e.to_string())?;
        let start = Instant::now();
        let mut t = Trainer::new(&cfg, &corpus).map_err(|e| e.to_string())?;
        let records = t.run(TREND_STEPS, None).map_err(|e| e.to_string())?;
        let totals: Vec<f64> = records.iter().map(|r| r.report.total).collect();
        let s = smoothed(&totals);
        let tail = &records[records.len() - trainer::SMOOTHING_WINDOW..];
        let perplexity = (0..cfg.model.codebooks)
            .map(|c| tail.iter().map(|r| r.perplexity[c]).sum::<f64>() / tail.len() as f64)
            .collect();
        runs.push(PretrainRun {
            seed,
            ratio: s[s.len() - 1] / s[10],
            perplexity,
            model: t.model,
            elapsed: start.elapsed(),
        });
    }
    Ok(runs)
}

fn training_trend(runs: &[PretrainRun]) -> Check {
    let cfg = RunConfig::desk();
    let half = cfg.model.entries as f64 / 2.0;
    let ratio = median(runs.iter().map(|r| r.ratio).collect());
    let ppl: Vec<f64> = (0..cfg.model.codebooks)
        .map(|c| median(runs.iter().map(|r| r.perplexity[c]).collect()))
        .collect();
    let minutes = runs.iter().map(|r| r.elapsed.as_secs_f64()).sum::<f64>() / 60.0;
    let detail = format!(
        "median ratio {ratio:.3}, median perplexity {ppl:.2?} (need >= {half}), per-seed {:?}, {minutes:.1} min",
        runs.iter().map(|r| (r.seed, (r.ratio * 1000.0).round() / 1000.0)).collect::<Vec<_>>()
    );
    ensure(ratio <= 0.7, detail.clone())?;
    ensure(ppl.iter().all(|&p| p >= half), detail.clone())?;
    ensure(minutes <= 20.0, detail.clone())?;
    Ok(detail)
}

fn transfer(runs: &[PretrainRun]) -> Check {
    let start = Instant::now();
    let (mut entity, mut doc) = (Vec::new(), Vec::new());
    for run in runs {
        let mut cfg = RunConfig::desk();
        cfg.train.seed = run.seed;
        cfg.finetune.seed = run.seed;
        let labeled = generate_corpus(1000 + run.seed, LABELED_DOCS, &cfg.corpus).map_err(|e| e.to_string())?;
        for (task, steps, out) in [(Task::Entity, ENTITY_STEPS, &mut entity), (Task::Doc, DOC_STEPS, &mut doc)] {
            cfg.finetune.steps = steps;
            let pre = finetune(run.model.clone(), &labeled, task, &cfg).map_err(|e| e.to_string())?;
            let scratch = UdocModel::new(&cfg, run.seed);
            let rand = finetune(scratch, &labeled, task, &cfg).map_err(|e| e.to_string())?;
            let (p, r) = match task {
                Task::Entity => (pre.report.micro_f1, rand.report.micro_f1),
                Task::Doc => (pre.report.accuracy, rand.report.accuracy),
            };
            out.push(100.0 * (p - r));
        }
    }
    let (me, md) = (median(entity.clone()), median(doc.clone()));
    let elapsed = start.elapsed();
    let detail = format!(
        "entity F1 gain {me:+.1} pts {entity:.1?}, doc accuracy gain {md:+.1} pts {doc:.1?}, {:.1} min",
        elapsed.as_secs_f64() / 60.0
    );
    ensure(me >= 5.0 && md >= 3.0, detail.clone())?;
    ensure(elapsed <= Duration::from_secs(15 * 60), detail.clone())?;
    Ok(detail)
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn ablation_grid() -> Check {
    let mut lines = Vec::new();
    for (file, tasks) in [
        ("ablation_msm_mvm.cfg", TaskSet::MSM_MVM),
        ("ablation_msm_vcl.cfg", TaskSet::MSM_VCL),
        ("ablation_msm_vcl_vla.cfg", TaskSet::FULL),
    ] {
        let mut cfg = RunConfig::load(&configs_dir().join(file)).map_err(|e| e.to_string())?;
        ensure(cfg.loss.tasks == tasks, format!("{file} enables {}", cfg.loss.tasks))?;
        cfg.train.total_steps = 60;
        cfg.finetune.steps = 20;
        let corpus = generate_corpus(8, 48, &cfg.corpus).map_err(|e| e.to_string())?;
        let mut t = Trainer::new(&cfg, &corpus).map_err(|e| e.to_string())?;
        let before = t.model.store.checksum(BACKBONE_PREFIX);
        let records = t.run(cfg.train.total_steps, None).map_err(|e| e.to_string())?;
        let after = t.model.store.checksum(BACKBONE_PREFIX);
        ensure(records.iter().all(|r| r.report.total.is_finite()), format!("{tasks}: non-finite loss"))?;
        ensure(records.iter().all(|r| r.report.mvm.is_some() == tasks.mvm), format!("{tasks}: mvm reporting"))?;
        if tasks.mvm {
            ensure(before == after, "backbone changed under msm+mvm")?;
        } else {
            ensure(before != after, format!("backbone frozen under {tasks}"))?;
        }
        let ft = finetune(t.model, &corpus, Task::Entity, &cfg).map_err(|e| e.to_string())?;
        ensure(ft.report.micro_f1.is_finite(), format!("{tasks}: fine-tuning failed"))?;
        lines.push(format!(
            "{tasks}: loss {:.3} -> {:.3}, entity F1 {:.3}",
            records[0].report.total,
            records[records.len() - 1].report.total,
            ft.report.micro_f1
        ));
    }
    Ok(format!("{}; backbone checksum fixed under msm+mvm", lines.join("; ")))
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism_and_persistence() -> Check {
    let mut cfg = RunConfig::tiny();
    cfg.train.total_steps = 10;
    cfg.train.checkpoint_every = 5;
    cfg.train.lr = 1e-3;
    let corpus = generate_corpus(4, 16, &cfg.corpus).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    trainer::pretrain(&corpus, &cfg, &a).map_err(|e| e.to_string())?;
    trainer::pretrain(&corpus, &cfg, &b).map_err(|e| e.to_string())?;
    for f in [METRICS_FILE, "last.ckpt/weights.bin", "last.ckpt/manifest.json", "step_000005.ckpt/weights.bin"] {
        ensure(read(&a.join(f))? == read(&b.join(f))?, format!("{f} differs between identical runs"))?;
    }

    let mut first = Trainer::new(&cfg, &corpus).map_err(|e| e.to_string())?;
    first.run(5, Some(&c)).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::resume(&corpus, &c.join("step_000005.ckpt")).map_err(|e| e.to_string())?;
    resumed.run(10, Some(&c)).map_err(|e| e.to_string())?;
    ensure(read(&a.join(METRICS_FILE))? == read(&c.join(METRICS_FILE))?, "resumed metrics differ")?;
    let (ca, cc) = (
        Checkpoint::load(&a.join(LAST_DIR)).map_err(|e| e.to_string())?,
        Checkpoint::load(&c.join(LAST_DIR)).map_err(|e| e.to_string())?,
    );
    ensure(ca == cc, "resumed checkpoint differs")?;

    let desk = RunConfig::desk();
    let docs: Corpus = generate_corpus(6, 5, &desk.corpus).map_err(|e| e.to_string())?;
    let dir = tmp.path().join("corpus");
    save_corpus(&docs, &dir).map_err(|e| e.to_string())?;
    let back = load_corpus(&dir).map_err(|e| e.to_string())?;
    ensure(back == docs, "corpus round trip changed the documents")?;
    Ok("identical runs, resume at step 5 and corpus round trip are bit-exact".into())
}

fn run(name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS  {name}: {detail} [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("FAIL  {name}: {detail} [{secs:.1}s]");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= run("gradient suite", gradient_suite);
    ok &= run("loss identities", loss_identities);
    ok &= run("masking statistics", masking_statistics);
    ok &= run("schedules", schedules);
    ok &= run("structural invariants", structural_invariants);
    ok &= run("ablation harness", ablation_grid);
    ok &= run("determinism and persistence", determinism_and_persistence);
    match pretrain_runs() {
        Ok(runs) => {
            ok &= run("training trend", || training_trend(&runs));
            ok &= run("transfer direction", || transfer(&runs));
        }
        Err(e) => {
            println!("FAIL  training trend: pretraining failed: {e}");
            println!("FAIL  transfer direction: pretraining failed: {e}");
            ok = false;
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
