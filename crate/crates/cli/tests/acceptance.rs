//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line;
//! the process fails if any criterion does.

#[path = "../../core/tests/common/oracle.rs"]
mod oracle;
#[path = "../../core/tests/common/scenes.rs"]
mod scenes;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use occpose::adaptation::FusionBlock;
use occpose::autodiff::{Tape, Var};
use occpose::backbone::ImageCrop;
use occpose::checkpoint::Checkpoint;
use occpose::correction::{RefinementTrace, ResGcnBlock};
use occpose::data::{DatasetRecord, ImageSource, Instance};
use occpose::evaluation::{compute_map, iou, occlusion_stats, GroundTruth, OcclusionStats, Prediction};
use occpose::gradcheck::{check_gradients, GradCheck};
use occpose::model::{Ablation, Model, ModelConfig};
use occpose::nn::{Conv2d, GcnLayer, SelfAttention};
use occpose::params::{Bound, Init, ParamStore};
use occpose::pipeline::EvalReport;
use occpose::pose::{Frame, GroundTruthPose, Joint, Pose};
use occpose::skeleton::{build_adjacency, BoundingBox, SkeletonSpec};
use occpose::tensor::Tensor;
use occpose::training::{masked_l1_var, total_loss, total_loss_var};
use occpose_cli::{cmd_eval, cmd_synth, cmd_train, DeviceArg, EvalArgs, SynthArgs, TrainArgs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn device() -> DeviceArg {
    DeviceArg { device: "none".into() }
}

fn synth(out: &Path, num_images: usize, seed: u64) -> PathBuf {
    cmd_synth(&SynthArgs {
        config: Some(configs().join("synth.json")),
        out: out.to_path_buf(),
        seed: Some(seed),
        num_images: Some(num_images),
        occlusion_target: None,
    })
    .expect("synthetic dataset");
    out.to_path_buf()
}

fn train_args(config: &str, dataset: &Path, out: &Path) -> TrainArgs {
    TrainArgs {
        config: Some(configs().join(config)),
        dataset: dataset.to_path_buf(),
        out: out.to_path_buf(),
        seed: None,
        couple_graph: false,
        ablation: Vec::new(),
        resume: None,
        max_steps: None,
        device: device(),
    }
}

fn eval_args(checkpoint: &Path, dataset: &Path, out: &Path) -> EvalArgs {
    EvalArgs {
        checkpoint: checkpoint.to_path_buf(),
        dataset: dataset.to_path_buf(),
        out: out.to_path_buf(),
        couple_graph: false,
        ablation: Vec::new(),
        device: device(),
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn gradients() -> Outcome {
    let cfg = GradCheck {
        probes: 12,
        ..GradCheck::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut lines = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>| -> Result<(), String> {
        let report = check_gradients(&inputs, &f, &cfg);
        check(report.probes.len() >= 10, format!("{name}: only {} probes", report.probes.len()))?;
        check(report.passed(), format!("{name}: {report}"))?;
        lines.push(format!("{name} {:.1e}", report.max_rel_err()));
        Ok(())
    };

    let heat = random_tensor(&mut rng, &[3, 6, 5], 2.0);
    let w = random_tensor(&mut rng, &[3, 3], 1.0);
    run("soft_argmax", vec![heat], &|t, v| v[0].soft_argmax().unwrap().mul(t.constant(w.clone())).unwrap().sum())?;

    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, &mut rng, "c", 2, 3, 3, 2, Init::He);
    let x = random_tensor(&mut rng, &[2, 7, 6], 1.0);
    let probe = random_tensor(&mut rng, &[3, 4, 3], 1.0);
    let mut inputs = vec![x];
    inputs.extend(store.values().iter().cloned());
    run("conv2d", inputs, &|t, v| {
        let p = Bound::with_vars(t, &store, v[1..].to_vec());
        conv.forward(&p, v[0]).unwrap().mul(t.constant(probe.clone())).unwrap().sum()
    })?;

    let mut store = ParamStore::new();
    let fusion = FusionBlock::new(&mut store, &mut rng, "f", 4, 3);
    let coarse = random_tensor(&mut rng, &[4, 3, 3], 1.0);
    let fine = random_tensor(&mut rng, &[3, 6, 6], 1.0);
    let probe = random_tensor(&mut rng, &[3, 6, 6], 1.0);
    let mut inputs = vec![coarse, fine];
    inputs.extend(store.values().iter().cloned());
    run("fusion_block", inputs, &|t, v| {
        let p = Bound::with_vars(t, &store, v[2..].to_vec());
        fusion.forward(&p, v[0], v[1]).unwrap().mul(t.constant(probe.clone())).unwrap().sum()
    })?;

    let feat = random_tensor(&mut rng, &[4, 8, 8], 1.0);
    // keep probes away from cell borders where bilinear weights have kinks
    let coords: Vec<f64> = (0..24)
        .map(|_| (2.0 * (rng.random_range(0..7) as f64 + 0.3 + 0.4 * rng.random_range(0.0..1.0)) + 1.0) / 8.0 - 1.0 - 1.0 / 8.0)
        .collect();
    let coords = Tensor::from_vec(&[12, 2], coords).unwrap();
    let probe = random_tensor(&mut rng, &[4, 12], 1.0);
    run("grid_sample_joints", vec![coords, feat], &|t, v| {
        Var::grid_sample(v[1], v[0]).unwrap().mul(t.constant(probe.clone())).unwrap().sum()
    })?;

    let agg = build_adjacency(&SkeletonSpec::ocpose12()).unwrap().mean_aggregation();
    let mut store = ParamStore::new();
    let gcn = GcnLayer::new(&mut store, &mut rng, "g", 5, 4);
    let x = random_tensor(&mut rng, &[5, 12], 1.0);
    let probe = random_tensor(&mut rng, &[4, 12], 1.0);
    let mut inputs = vec![x];
    inputs.extend(store.values().iter().cloned());
    run("gcn_layer", inputs, &|t, v| {
        let p = Bound::with_vars(t, &store, v[1..].to_vec());
        gcn.forward(&p, v[0], t.constant(agg.clone())).unwrap().mul(t.constant(probe.clone())).unwrap().sum()
    })?;

    let mut store = ParamStore::new();
    let block = ResGcnBlock::new(&mut store, &mut rng, "b", 10, 0, 6);
    let nodes = random_tensor(&mut rng, &[5, 12], 1.0);
    let sampled = random_tensor(&mut rng, &[5, 12], 1.0);
    let probe = random_tensor(&mut rng, &[6, 12], 1.0);
    let mut inputs = vec![nodes, sampled];
    inputs.extend(store.values().iter().cloned());
    run("res_gcn_block", inputs, &|t, v| {
        let p = Bound::with_vars(t, &store, v[2..].to_vec());
        let a = t.constant(agg.clone());
        block.forward(&p, v[0], v[1], None, a).unwrap().mul(t.constant(probe.clone())).unwrap().sum()
    })?;

    let mut store = ParamStore::new();
    let attn = SelfAttention::new(&mut store, &mut rng, "a", 4);
    let x = random_tensor(&mut rng, &[4, 12], 1.0);
    let probe = random_tensor(&mut rng, &[4, 12], 1.0);
    let mut inputs = vec![x];
    inputs.extend(store.values().iter().cloned());
    run("attention", inputs, &|t, v| {
        let p = Bound::with_vars(t, &store, v[1..].to_vec());
        attn.forward(&p, v[0]).unwrap().mul(t.constant(probe.clone())).unwrap().sum()
    })?;

    let gt = GroundTruthPose::new(
        (0..12).map(|k| [0.1 * k as f64 - 0.5, 0.3]).collect(),
        (0..12).map(|k| k % 4 != 0).collect(),
        vec![false; 12],
        Frame::Normalized,
    )
    .unwrap();
    let poses: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, &[12, 3], 1.0)).collect();
    run("total_loss", poses.clone(), &|_, v| total_loss_var(&v[0..3], v[3], &gt, [0.3, 0.5, 1.0]).unwrap().0)?;
    run("masked_l1", vec![poses[0].clone()], &|_, v| masked_l1_var(v[0], Frame::Normalized, &gt).unwrap())?;
    Ok(lines.join(", "))
}

fn zero_residual(work: &Path) -> Outcome {
    let cfg = ModelConfig::default();
    let model = Model::new(&cfg, Ablation::default(), 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let [h, w] = cfg.backbone.crop_size;
    for i in 0..100 {
        let crop = ImageCrop {
            pixels: Tensor::from_vec(&[cfg.backbone.in_channels, h, w], (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect())
                .unwrap(),
            source_box: BoundingBox::new(0.0, 0.0, 40.0, 50.0).unwrap(),
            source_image_id: i,
        };
        let out = model.infer(&crop).map_err(|e| e.to_string())?;
        check(out.trace.final_pose == out.initial, format!("input {i}: final pose differs from initial pose"))?;
    }
    let ck = work.join("untrained/epoch_000.json");
    Checkpoint::from_model(&model, 3, 0, 0).save(&ck).map_err(|e| e.to_string())?;
    let data = synth(&work.join("zr_data"), 10, 77);
    let (report, _) = cmd_eval(&eval_args(&ck, &data, &work.join("zr_eval"))).map_err(|e| e.to_string())?;
    check(report.initial == report.final_stage, "eval reports differ between initial and final poses")?;
    Ok(format!("100 inputs bit-identical; eval mAP {:.4} both stages", report.final_stage.ap.map_50_95))
}

fn loss_arithmetic() -> Outcome {
    let gt = GroundTruthPose::new(vec![[0.0, 0.0], [0.5, 0.5]], vec![true, false], vec![true, false], Frame::Normalized).unwrap();
    let at = |d: f64| Pose::new(vec![Joint { x: d, y: 0.0, c: 1.0 }, Joint { x: 9.0, y: -9.0, c: 1.0 }], Frame::Normalized).unwrap();
    let trace = RefinementTrace {
        pose1: at(2.0),
        pose2: at(2.0),
        final_pose: at(2.0),
        block_features: Vec::new(),
    };
    let total = total_loss(&trace, &at(4.0), &gt, [0.3, 0.5, 1.0]).map_err(|e| e.to_string())?.total;
    check(total == 7.6, format!("total loss {total:?}, expected 7.6"))?;

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = [2.0, 2.0, 2.0, 4.0]
        .iter()
        .map(|&d| tape.leaf(Tensor::from_vec(&[2, 3], at(d).to_rows()).unwrap()))
        .collect();
    let (loss, _) = total_loss_var(&vars[0..3], vars[3], &gt, [0.3, 0.5, 1.0]).map_err(|e| e.to_string())?;
    check(loss.value().item() == 7.6, "taped loss differs from 7.6")?;
    let grads = tape.backward(loss);
    for v in &vars {
        let g = grads.get_or_zeros(*v);
        check(g.data()[3..6].iter().all(|&x| x == 0.0), "unlabeled joint received gradient")?;
    }
    Ok(format!("total {total}; unlabeled gradient exactly 0"))
}

fn read_losses(path: &Path) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let col = r.headers().unwrap().iter().position(|h| h == "loss").unwrap();
    r.records().map(|rec| rec.unwrap()[col].parse().unwrap()).collect()
}

fn overfit(work: &Path) -> Outcome {
    let start = Instant::now();
    let data = synth(&work.join("overfit_data"), 8, 500);
    let out = work.join("overfit_run");
    cmd_train(&train_args("overfit.json", &data, &out)).map_err(|e| format!("{e:#}"))?;
    let losses = read_losses(&out.join("loss.csv"));
    let elapsed = start.elapsed();
    check(losses.len() <= 500, format!("{} steps", losses.len()))?;
    let (first, last) = (losses[0], *losses.last().unwrap());
    check(last < 0.05 * first, format!("loss {first:.4} -> {last:.4} ({:.1}%)", 100.0 * last / first))?;
    check(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(format!(
        "loss {first:.4} -> {last:.5} ({:.2}%) in {} steps, {:.0}s",
        100.0 * last / first,
        losses.len(),
        elapsed.as_secs_f64()
    ))
}

struct Benchmark {
    full: EvalReport,
    no_guidance: EvalReport,
    full_runtime: Duration,
}

fn benchmark(work: &Path) -> Result<Benchmark, String> {
    let train = synth(&work.join("bench_train"), 400, 1);
    let test = synth(&work.join("bench_test"), 100, 1_000_000);
    let run = |name: &str, ablation: &[&str]| -> Result<(EvalReport, Duration), String> {
        let start = Instant::now();
        let mut args = train_args("benchmark.json", &train, &work.join(name));
        args.ablation = ablation.iter().map(|s| s.to_string()).collect();
        let m = cmd_train(&args).map_err(|e| format!("{e:#}"))?;
        let ck = m.checkpoints.last().ok_or("no checkpoint written")?;
        let (report, _) = cmd_eval(&eval_args(ck, &test, &work.join(format!("{name}_eval")))).map_err(|e| format!("{e:#}"))?;
        Ok((report, start.elapsed()))
    };
    let (full, full_runtime) = run("bench_full", &[])?;
    let (no_guidance, _) = run("bench_no_guidance", &["image_guided"])?;
    Ok(Benchmark {
        full,
        no_guidance,
        full_runtime,
    })
}

fn occlusion_recovery(b: &Result<Benchmark, String>) -> Outcome {
    let b = b.as_ref().map_err(Clone::clone)?;
    let (i, f) = (&b.full.initial.errors, &b.full.final_stage.errors);
    let inv_gain = 1.0 - f.invisible / i.invisible;
    let vis_change = f.visible / i.visible - 1.0;
    let summary = format!(
        "invisible L1 {:.4} -> {:.4} ({:+.1}%), visible {:.4} -> {:.4} ({:+.1}%), {:.0}s",
        i.invisible,
        f.invisible,
        -100.0 * inv_gain,
        i.visible,
        f.visible,
        100.0 * vis_change,
        b.full_runtime.as_secs_f64()
    );
    check(inv_gain >= 0.20, format!("{summary}: invisible gain below 20%"))?;
    check(vis_change <= 0.05, format!("{summary}: visible error degraded more than 5%"))?;
    check(b.full_runtime < Duration::from_secs(1800), format!("{summary}: over 30 minutes"))?;
    Ok(summary)
}

fn ablation_order(b: &Result<Benchmark, String>) -> Outcome {
    let b = b.as_ref().map_err(Clone::clone)?;
    let full = b.full.final_stage.errors.invisible;
    let plain = b.no_guidance.final_stage.errors.invisible;
    let summary = format!("invisible L1 full {full:.4}, without image guidance {plain:.4}");
    check(full <= plain * 1.02, format!("{summary}: full model worse by more than 2%"))?;
    Ok(summary)
}

fn evaluator() -> Outcome {
    let sigmas = SkeletonSpec::ocpose12().oks_sigmas;
    for seed in 0..20 {
        let s = scenes::random_scene(seed, sigmas.len());
        let report = compute_map(&s.preds, &s.gts, &sigmas, false).map_err(|e| e.to_string())?;
        let expected = oracle::mean_ap(&s.preds, &s.gts, &sigmas);
        check((report.map_50_95 - expected).abs() <= 1e-9, format!("scene {seed}: {} vs oracle {expected}", report.map_50_95))?;
    }
    // one joint whose similarity is exactly 0.6: d^2 = -2 ln(0.6) area k^2
    let mut sig = vec![0.5; 12];
    sig[0] = 0.5;
    let area = 100.0;
    let d = (-2.0 * 0.6f64.ln() * area * 1.0).sqrt();
    let labeled: Vec<bool> = (0..12).map(|k| k == 0).collect();
    let gt = GroundTruth {
        image_id: 0,
        instance_id: 0,
        pose: GroundTruthPose::new(vec![[5.0, 5.0]; 12], labeled.clone(), labeled, Frame::Pixel).unwrap(),
        bbox: BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
    };
    let pred = Prediction {
        image_id: 0,
        pose: Pose::new(vec![Joint { x: 5.0 + d, y: 5.0, c: 1.0 }; 12], Frame::Pixel).unwrap(),
        score: 0.37,
        bbox: None,
    };
    let oks = oracle::oks(&pred, &gt, &sig);
    check((oks - 0.6).abs() < 1e-12, format!("constructed OKS {oks}"))?;
    let report = compute_map(&[pred], &[gt], &sig, false).map_err(|e| e.to_string())?;
    check(report.ap_50 == 1.0 && report.ap_75 == 0.0, format!("AP50 {} AP75 {}", report.ap_50, report.ap_75))?;
    Ok("20 scenes match the oracle; OKS 0.6 case AP50 1, AP75 0".into())
}

fn statistics() -> Outcome {
    let record = |id: u64, other: BoundingBox| DatasetRecord {
        image_id: id,
        image: ImageSource::Pixels(Tensor::zeros(&[1, 20, 20])),
        width: 20,
        height: 20,
        instances: [BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), other]
            .into_iter()
            .enumerate()
            .map(|(i, bbox)| Instance {
                id: 2 * id + i as u64,
                bbox,
                pose: GroundTruthPose::new(vec![[5.0, 5.0]; 12], vec![true; 12], vec![true; 12], Frame::Pixel).unwrap(),
            })
            .collect(),
        pairs: Some(vec![(0, 1)]),
    };
    // IoU with the unit square is height / 10 for these boxes
    let records: Vec<DatasetRecord> = [9.0, 4.0, 2.0]
        .iter()
        .enumerate()
        .map(|(i, &h)| record(i as u64, BoundingBox::new(0.0, 0.0, 10.0, h).unwrap()))
        .collect();
    let stats = occlusion_stats(&records);
    check(stats.total == 3 && stats.counts == [2, 1, 1], format!("counts {:?}", stats.counts))?;
    check(stats.average_iou == 0.5 && stats.average_defined, format!("average {}", stats.average_iou))?;
    let row = stats.row("hand-built");
    check(row.contains("2 (67%)") && row.contains("1 (33%)") && row.contains("0.50"), format!("row {row:?}"))?;
    check(OcclusionStats::header().contains("IoU>0.3"), "header lacks threshold columns")?;

    let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let b = BoundingBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
    // exact rational: intersection 50, union 150
    let (inter, union) = (5i64 * 10, 100i64 + 100 - 5 * 10);
    check(inter * 3 == union, "rational IoU is not 1/3")?;
    let v = iou(&a, &b);
    check((v - 1.0 / 3.0).abs() <= 1e-12, format!("iou {v}"))?;
    Ok(format!("{row}; iou = {v}"))
}

fn determinism(work: &Path) -> Outcome {
    let data = synth(&work.join("det_data"), 8, 900);
    let runs: Vec<PathBuf> = (0..2).map(|i| work.join(format!("det_run{i}"))).collect();
    for out in &runs {
        let mut args = train_args("smoke.json", &data, out);
        args.seed = Some(42);
        cmd_train(&args).map_err(|e| format!("{e:#}"))?;
    }
    let csv: Vec<Vec<u8>> = runs.iter().map(|r| fs::read(r.join("loss.csv")).unwrap()).collect();
    check(csv[0] == csv[1], "loss logs differ")?;
    let ck = runs[0].join("checkpoints/epoch_002.json");
    let evals: Vec<PathBuf> = (0..2).map(|i| work.join(format!("det_eval{i}"))).collect();
    for out in &evals {
        cmd_eval(&eval_args(&ck, &data, out)).map_err(|e| format!("{e:#}"))?;
    }
    for file in ["eval.json", "eval.txt"] {
        let a = fs::read(evals[0].join(file)).unwrap();
        let b = fs::read(evals[1].join(file)).unwrap();
        check(a == b, format!("{file} differs between runs"))?;
    }
    Ok(format!("{} loss rows identical; eval files identical", csv[0].iter().filter(|&&c| c == b'\n').count() - 1))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    // failures are reported on the criterion line
    std::panic::set_hook(Box::new(|_| {}));
    let tmp = tempfile::tempdir().expect("temporary directory");
    let work = tmp.path();

    let bench = if wanted(5) || wanted(6) {
        let start = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(|| benchmark(work))).unwrap_or_else(|_| Err("benchmark panicked".into()));
        eprintln!("benchmark finished in {:.0}s", start.elapsed().as_secs_f64());
        r
    } else {
        Err("not run".into())
    };

    let criteria: Vec<(usize, &str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        (1, "gradient integrity", Box::new(gradients)),
        (2, "zero-residual identity", Box::new(|| zero_residual(work))),
        (3, "loss arithmetic", Box::new(loss_arithmetic)),
        (4, "overfit capability", Box::new(|| overfit(work))),
        (5, "occlusion recovery", Box::new(|| occlusion_recovery(&bench))),
        (6, "ablation ordering", Box::new(|| ablation_order(&bench))),
        (7, "evaluator correctness", Box::new(evaluator)),
        (8, "statistics machinery", Box::new(statistics)),
        (9, "determinism", Box::new(|| determinism(work))),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = guarded(f);
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
