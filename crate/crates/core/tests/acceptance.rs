//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use llmood::config::{RunConfig, Shots};
use llmood::detectors::{
    cosine_score, energy_score, fit_cosine, fit_maha, maha_score, DetectorKind, DetectorParams, FittedDetector,
};
use llmood::dump::{read_dump, write_dump, EmbeddingDump, EmbeddingRecord};
use llmood::error::Error;
use llmood::metrics::{anisotropy, aupr, auroc, far_at_95};
use llmood::protocol::{aggregate, base_model, run_seed_from, FINE_TUNED, ZERO_GRAD};
use llmood::toylm::{train_with_validator, AdamW, AdamWConfig, Example, LoraConfig, ToyLm, TrainConfig, TuningMode};
use llmood::Regime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn metric_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n_id = rng.random_range(1..=200);
        let n_ood = rng.random_range(1..=200);
        let id = common::tied_scores(&mut rng, n_id);
        let ood = common::tied_scores(&mut rng, n_ood);
        let fast = auroc(&id, &ood).map_err(|e| e.to_string())?;
        worst = worst.max((fast - common::auroc_pairs(&id, &ood)).abs());
    }
    check(worst <= 1e-12, format!("auroc deviates from pair count by {worst:e}"))?;

    let e = |r: llmood::Result<f64>| r.map_err(|e| e.to_string());
    check(e(auroc(&[0.9, 0.3], &[0.5, 0.1]))? == 0.75, "auroc worked example")?;
    let mut id = vec![1.0; 19];
    id.push(0.0);
    check(e(far_at_95(&id, &[0.5, 1.0]))? == 0.5, "far@95 worked example")?;
    check(e(far_at_95(&[0.9, 0.8], &[0.1, 0.2]))? == 0.0, "far@95 separated")?;
    // PR walk: recall 1/2 at precision 1, then recall 1 at precision 2/3.
    check(
        e(aupr(&[0.9, 0.3], &[0.5, 0.1]))? == 0.5 * 1.0 + 0.5 * (2.0 / 3.0),
        "aupr worked example",
    )?;
    check(e(aupr(&[0.4; 3], &[0.4; 3]))? == 0.5, "aupr all tied")?;
    check(e(aupr(&[0.9, 0.8], &[0.1, 0.2]))? == 1.0, "aupr separated")?;
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "max |fast - pairs| = {worst:.1e} over 1000 sets; worked examples exact"
    ))
}

fn detector_math() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 12;
    let data: Vec<(usize, Vec<f64>)> = (0..60).map(|i| (i % 3, gaussian(&mut rng, d))).collect();
    let bank = fit_maha(data.iter().map(|(c, v)| (*c, v.as_slice())), 1e-5).map_err(|e| e.to_string())?;
    for (_, mean) in &bank.means {
        let s = maha_score(&bank, mean).map_err(|e| e.to_string())?;
        check(s.abs() < 1e-12, format!("maha at a class mean = {s:e}"))?;
    }

    let queries: Vec<Vec<f64>> = (0..20).map(|_| gaussian(&mut rng, d)).collect();
    let base: Vec<f64> = queries.iter().map(|q| maha_score(&bank, q).unwrap()).collect();
    let mut worst_rot: f64 = 0.0;
    for _ in 0..100 {
        let q = common::random_orthogonal(&mut rng, d);
        let rotated: Vec<(usize, Vec<f64>)> = data.iter().map(|(c, v)| (*c, common::rotate(&q, v))).collect();
        let rbank = fit_maha(rotated.iter().map(|(c, v)| (*c, v.as_slice())), 1e-5).map_err(|e| e.to_string())?;
        for (z, s0) in queries.iter().zip(&base) {
            let s = maha_score(&rbank, &common::rotate(&q, z)).map_err(|e| e.to_string())?;
            worst_rot = worst_rot.max((s - s0).abs() / s0.abs().max(1e-300));
        }
    }
    check(worst_rot <= 1e-6, format!("maha rotation relative error {worst_rot:e}"))?;

    let mut worst_shift: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(1..10);
        let x: Vec<f64> = (0..k).map(|_| rng.random_range(-20.0..20.0)).collect();
        let c: f64 = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let lhs = energy_score(&shifted).map_err(|e| e.to_string())?;
        let rhs = energy_score(&x).map_err(|e| e.to_string())? + c;
        worst_shift = worst_shift.max((lhs - rhs).abs());
    }
    check(
        worst_shift <= 1e-12,
        format!("energy shift identity off by {worst_shift:e}"),
    )?;

    let vecs: Vec<(String, Vec<f64>)> = (0..30).map(|i| (format!("b{i}"), gaussian(&mut rng, d))).collect();
    let cbank = fit_cosine(vecs.iter().map(|(n, v)| (n.as_str(), v.as_slice()))).map_err(|e| e.to_string())?;
    let mut worst_scale: f64 = 0.0;
    for _ in 0..200 {
        let z = gaussian(&mut rng, d);
        let a: f64 = rng.random_range(1e-3..1e3);
        let scaled: Vec<f64> = z.iter().map(|v| v * a).collect();
        let diff = cosine_score(&cbank, &scaled).unwrap() - cosine_score(&cbank, &z).unwrap();
        worst_scale = worst_scale.max(diff.abs());
    }
    check(
        worst_scale <= 1e-12,
        format!("cosine scale invariance off by {worst_scale:e}"),
    )?;
    within(t.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "rotation rel err {worst_rot:.1e}, energy shift {worst_shift:.1e}, cosine scale {worst_scale:.1e}"
    ))
}

fn one_shot(base: &ToyLm) -> Outcome {
    let cfg = RunConfig {
        shots: Shots::K(1),
        regime: Regime::Far,
        ..RunConfig::default()
    };
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        runs.push(run_seed_from(&cfg, base, seed).map_err(|e| e.to_string())?);
    }
    let fit = FittedDetector::fit(
        DetectorKind::Maha,
        &runs[0].fine_tuned.dumps.train.dump,
        &DetectorParams::default(),
    );
    check(
        matches!(fit, Err(Error::DegenerateFit)),
        format!("1-shot Maha fit returned {:?}", fit.err()),
    )?;
    let report = aggregate(&cfg, &runs);
    for setting in [ZERO_GRAD, FINE_TUNED] {
        for row in report
            .rows
            .iter()
            .filter(|r| r.setting == setting && r.detector == "maha")
        {
            check(
                row.degenerate && row.mean.auroc == 0.5 && row.mean.far95 == 1.0,
                format!("{setting}/{} maha row is {:?}", row.ood_set, row.mean),
            )?;
        }
    }
    let cos = report.mean_auroc(FINE_TUNED, "cosine").ok_or("no cosine rows")?;
    check(cos > 0.90, format!("1-shot cosine AUROC {cos:.4} <= 0.90"))?;
    Ok(format!(
        "maha rows degenerate (0.5, 1.0); fine-tuned cosine AUROC {cos:.4}"
    ))
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let checks = common::gradient_check_all();
    let (cfg, worst) = checks
        .iter()
        .max_by(|a, b| a.1.rel_err.total_cmp(&b.1.rel_err))
        .ok_or("no parameter groups")?;
    check(
        worst.rel_err < 1e-4,
        format!("{cfg} {}: relative error {:e}", worst.group, worst.rel_err),
    )?;
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "{} groups, worst {:.1e} ({cfg} {}), {:.1?}",
        checks.len(),
        worst.rel_err,
        worst.group,
        t.elapsed()
    ))
}

fn lora_contracts() -> Outcome {
    let cfg = common::tiny_config();
    let base = ToyLm::new(cfg, 3).map_err(|e| e.to_string())?;
    let mut adapted = base.clone();
    adapted
        .attach_lora(LoraConfig::default(), 4)
        .map_err(|e| e.to_string())?;
    let tokens = llmood::toylm::build_prompt("so witty", 48).map_err(|e| e.to_string())?;
    let a = base.forward(&tokens).map_err(|e| e.to_string())?;
    let b = adapted.forward(&tokens).map_err(|e| e.to_string())?;
    let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    check(
        bits(a.z.as_slice().unwrap()) == bits(b.z.as_slice().unwrap()),
        "zero-init adapter changed the representations",
    )?;
    let last = a.z.nrows() - 1;
    let la = base.lm_logits(a.z.row(last).as_slice().unwrap());
    let lb = adapted.lm_logits(b.z.row(last).as_slice().unwrap());
    check(bits(&la) == bits(&lb), "zero-init adapter changed the logits")?;

    let frozen: Vec<Vec<u64>> = base.base.tensors().iter().map(|t| bits(t.2)).collect();
    let classes = vec!["positive".to_string(), "negative".to_string()];
    let examples = [("so witty", 0), ("so dull", 1)];
    let shapes: Vec<usize> = adapted.trainable_tensors().iter().map(|t| t.2.len()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.01,
            ..AdamWConfig::default()
        },
        &shapes,
        100,
    );
    for step in 0..100 {
        let (text, label) = examples[step % 2];
        let ex = Example {
            id: format!("s{step}"),
            text: text.into(),
            label,
        };
        let (_, grads) = llmood::toylm::loss_and_grads(&adapted, &ex, &classes, TuningMode::Generative)
            .map_err(|e| e.to_string())?;
        opt.step(adapted.trainable_mut(), grads.tensors());
    }
    let after: Vec<Vec<u64>> = adapted.base.tensors().iter().map(|t| bits(t.2)).collect();
    check(after == frozen, "base weights changed during adapter training")?;
    let moved = adapted
        .lora
        .as_ref()
        .unwrap()
        .tensors()
        .iter()
        .any(|t| t.0.ends_with(".b") && t.2.iter().any(|&v| v != 0.0));
    check(moved, "adapter B matrices never left zero")?;
    Ok("outputs bitwise equal at init; base bitwise frozen after 100 steps".into())
}

fn far_trend(base: &ToyLm, pretrain_time: Duration) -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::default();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        runs.push(run_seed_from(&cfg, base, seed).map_err(|e| e.to_string())?);
    }
    let report = aggregate(&cfg, &runs);
    let maha = report.mean_auroc(FINE_TUNED, "maha").ok_or("no maha rows")?;
    let cos = report.mean_auroc(FINE_TUNED, "cosine").ok_or("no cosine rows")?;
    let elapsed = t.elapsed() + pretrain_time;
    let detail = format!("maha {maha:.4}, cosine {cos:.4} over 5 seeds, {elapsed:.0?}");
    check(maha > 0.99 && cos > 0.99, detail.clone())?;
    within(elapsed, Duration::from_secs(600))?;
    Ok(detail)
}

fn near_trend(base: &ToyLm) -> Outcome {
    let cfg = RunConfig {
        regime: Regime::Near,
        ..RunConfig::default()
    };
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        runs.push(run_seed_from(&cfg, base, seed).map_err(|e| e.to_string())?);
    }
    let report = aggregate(&cfg, &runs);
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in DetectorKind::ALL {
        let zg = report
            .mean_auroc(ZERO_GRAD, kind.as_str())
            .ok_or("missing zero-grad rows")?;
        let ft = report
            .mean_auroc(FINE_TUNED, kind.as_str())
            .ok_or("missing fine-tuned rows")?;
        ok &= ft - zg >= 0.02;
        parts.push(format!("{kind} {zg:.3}->{ft:.3}"));
    }
    let detail = parts.join(", ");
    check(ok, detail.clone())?;
    Ok(detail)
}

fn anisotropy_contrast() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let iso: Vec<Vec<f64>> = (0..200).map(|_| gaussian(&mut rng, 256)).collect();
    let a_iso = anisotropy(&iso).map_err(|e| e.to_string())?;
    let dir = gaussian(&mut rng, 256);
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cone: Vec<Vec<f64>> = (0..200)
        .map(|_| {
            let noise = gaussian(&mut rng, 256);
            dir.iter().zip(&noise).map(|(u, n)| u / norm + 0.01 * n).collect()
        })
        .collect();
    let a_cone = anisotropy(&cone).map_err(|e| e.to_string())?;
    check(a_iso < 0.1, format!("isotropic anisotropy {a_iso:.4}"))?;
    check(a_cone > 0.9, format!("cone anisotropy {a_cone:.4}"))?;
    let a = |v: &[Vec<f64>]| anisotropy(v).map_err(|e| e.to_string());
    check(a(&[vec![1.0, 0.0], vec![0.0, 1.0]])? == 0.0, "orthogonal pair")?;
    check(a(&[vec![0.6, 0.8], vec![0.6, 0.8]])? == 1.0, "identical pair")?;
    let third = a(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]])?;
    check(
        (third - 1.0 / 3.0).abs() < 1e-15,
        format!("three-vector example gave {third}"),
    )?;
    Ok(format!(
        "isotropic {a_iso:.4}, cone {a_cone:.4}; worked values 0, 1, 1/3"
    ))
}

fn early_stopping() -> Outcome {
    let mut model = ToyLm::new(common::tiny_config(), 5).map_err(|e| e.to_string())?;
    let classes = vec!["positive".to_string(), "negative".to_string()];
    let train_set = vec![
        Example {
            id: "a".into(),
            text: "so witty".into(),
            label: 0,
        },
        Example {
            id: "b".into(),
            text: "so dull".into(),
            label: 1,
        },
    ];
    let cfg = TrainConfig {
        epochs: 50,
        ..TrainConfig::default()
    };
    let mut validate = |epoch: usize, _: &ToyLm| -> llmood::Result<f64> {
        Ok(if epoch < 10 {
            epoch as f64
        } else {
            9.0 - (epoch - 9) as f64
        })
    };
    let out = train_with_validator(&mut model, &train_set, &classes, &cfg, &mut validate, &mut |_, _| {
        Ok(Vec::new())
    })
    .map_err(|e| e.to_string())?;
    let detail = format!(
        "stopped after epoch {} (early: {}), best epoch {}",
        out.epochs_run, out.stopped_early, out.best_epoch
    );
    check(
        out.epochs_run == 16 && out.stopped_early && out.best_epoch == 9,
        detail.clone(),
    )?;
    Ok(detail)
}

fn random_dump(rng: &mut ChaCha8Rng) -> EmbeddingDump {
    let dim = rng.random_range(1..=16);
    let k = rng.random_range(0..=4);
    let class_names: Vec<String> = (0..k)
        .map(|i| format!("class{i}_{}", rng.random_range(0..1000)))
        .collect();
    let n = rng.random_range(1..=8);
    let special = [f32::NAN, f32::INFINITY, -0.0, f32::MIN_POSITIVE, f32::MAX];
    let value = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.05) {
            special[rng.random_range(0..special.len())]
        } else {
            f32::from_bits(rng.random::<u32>() & 0xBFFF_FFFF)
        }
    };
    let records = (0..n)
        .map(|i| EmbeddingRecord {
            id: format!("r{i}-{}", "é".repeat(rng.random_range(0..3))),
            label: (k > 0 && rng.random_bool(0.7)).then(|| rng.random_range(0..k as u32)),
            embedding: (0..dim).map(|_| value(rng)).collect(),
            class_logits: (k > 0).then(|| (0..k).map(|_| value(rng)).collect()),
        })
        .collect();
    EmbeddingDump {
        dim,
        class_names,
        records,
    }
}

fn format_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("dump.edf");
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..10_000 {
        let dump = random_dump(&mut rng);
        write_dump(&dump, &path).map_err(|e| format!("dump {i}: {e}"))?;
        let back = read_dump(&path).map_err(|e| format!("dump {i}: {e}"))?;
        check(back.bit_eq(&dump), format!("dump {i} changed on round trip"))?;
    }
    Ok("10000 dumps bit-exact".into())
}

fn main() {
    let mut failures = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("[PASS] {name}: {detail}"),
        Err(detail) => {
            failures += 1;
            println!("[FAIL] {name}: {detail}");
        }
    };
    report("metric oracle equivalence", metric_oracle());
    report("detector math", detector_math());
    report("toy-model gradient check", gradient_check());
    report("LoRA contracts", lora_contracts());
    report("anisotropy contrast", anisotropy_contrast());
    report("early-stopping rule", early_stopping());
    report("format round-trip", format_round_trip());

    let t = Instant::now();
    match base_model(&RunConfig::default()) {
        Ok(base) => {
            let pretrain_time = t.elapsed();
            report("1-shot Maha degeneracy", one_shot(&base));
            report("end-to-end far-OOD trend", far_trend(&base, pretrain_time));
            report("fine-tuning benefit trend", near_trend(&base));
        }
        Err(e) => {
            for name in [
                "1-shot Maha degeneracy",
                "end-to-end far-OOD trend",
                "fine-tuning benefit trend",
            ] {
                report(name, Err(format!("base model: {e}")));
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
