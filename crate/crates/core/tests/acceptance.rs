//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line each, and exits non-zero if any criterion fails.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tailcal::backbone::{Backbone, GruAttention};
use tailcal::calibration::{routed_gradients, trace, CalibrationConfig, CalibrationHead, HEAD_PREFIX};
use tailcal::corpus::{
    kfold_index, session_distribution, split_by_threshold, synth_generate, Catalog, Dataset, Partition, PopDistribution,
    Session, SynthConfig,
};
use tailcal::curriculum::{evaluate, route_q, run_finetune, run_pretrain, Ablation, ExperimentConfig, ModelBundle, ModelRegistry, RoutingMode};
use tailcal::metrics::{
    c_kl, coverage_at_n, mrr_at_n, recall_at_n, tail_at_n, tail_coverage_at_n, EvalRecord, ModelId, MetricsReport, ReportFile, Scope,
};
use tailcal::numerics::{Gradients, ParamMask, ParamStore};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ranked_catalog(n: usize) -> Catalog {
    let keys = (0..n).map(|i| format!("item{i}")).collect();
    let counts = (0..n).map(|i| (10 * (n - i)) as u64).collect();
    Catalog::new(keys, counts).unwrap()
}

// ---------------------------------------------------------------- 1

fn metric_oracles() -> Outcome {
    const ITEMS: usize = 200;
    const N: usize = 20;
    let started = Instant::now();
    let cat = ranked_catalog(ITEMS);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut records = Vec::new();
    for i in 0..1000 {
        let list = sample(&mut rng, ITEMS, N).into_vec();
        let len = rng.gen_range(1..10);
        let tails = rng.gen_range(0..=len);
        let q = PopDistribution {
            head: (len - tails) as f64 / len as f64,
            tail: tails as f64 / len as f64,
        };
        // half the targets are drawn from the list so recall and MRR are non-trivial
        let target = if rng.gen_bool(0.5) { list[rng.gen_range(0..N)] } else { rng.gen_range(0..ITEMS) };
        records.push(EvalRecord::new(i, list, target, q, &cat, ModelId::Base).unwrap());
    }

    // brute force over raw lists
    let tail_set: HashSet<usize> = (0..ITEMS).filter(|&i| i >= ITEMS / 5).collect();
    let (mut hit, mut rr, mut tail_share, mut kl) = (0.0, 0.0, 0.0, 0.0);
    let mut union = HashSet::new();
    for r in &records {
        for k in 0..N {
            union.insert(r.list[k]);
            if r.list[k] == r.target {
                hit += 1.0;
                rr += 1.0 / (k + 1) as f64;
            }
        }
        let t = r.list.iter().filter(|i| tail_set.contains(i)).count() as f64;
        tail_share += t / N as f64;
        let p = [1.0 - t / N as f64, t / N as f64];
        let mut q = [r.q.head, r.q.tail];
        for v in q.iter_mut() {
            if *v == 1.0 {
                *v = 0.999;
            } else if *v == 0.0 {
                *v = 0.001;
            }
        }
        for j in 0..2 {
            if p[j] > 0.0 {
                kl += p[j] * (p[j] / q[j]).ln();
            }
        }
    }
    let m = records.len() as f64;
    let expect = [
        ("Recall", recall_at_n(&records).unwrap(), hit / m),
        ("MRR", mrr_at_n(&records).unwrap(), rr / m),
        ("Cov", coverage_at_n(&records, &cat).unwrap(), union.len() as f64 / ITEMS as f64),
        (
            "TCov",
            tail_coverage_at_n(&records, &cat).unwrap(),
            union.intersection(&tail_set).count() as f64 / tail_set.len() as f64,
        ),
        ("Tail", tail_at_n(&records, &cat).unwrap(), tail_share / m),
        ("C_KL", c_kl(&records).unwrap(), kl / m),
    ];
    let mut worst: f64 = 0.0;
    for (name, got, want) in expect {
        let d = (got - want).abs();
        worst = worst.max(d);
        ensure(d <= 1e-12, format!("{name}: {got} vs oracle {want}"))?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 5.0, format!("took {secs:.2}s"))?;
    Ok(format!("max deviation {worst:.1e}, {secs:.2}s"))
}

// ---------------------------------------------------------------- 2

struct Tiny {
    enc: GruAttention,
    head: CalibrationHead,
    params: ParamStore,
    catalog: Catalog,
    batch: Vec<Session>,
}

fn tiny_model(seed: u64) -> Tiny {
    let enc = GruAttention { item_count: 50, dim: 8 };
    let head = CalibrationHead::for_encoding(enc.encoding_dim());
    let mut params = ParamStore::new();
    enc.init_params(&mut params, seed);
    head.init_params(&mut params, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // mixed sessions so both KL terms carry weight
    let batch = (0..4)
        .map(|b| {
            let len = 2 + b;
            let mut items: Vec<usize> = (0..len).map(|_| rng.gen_range(0..50)).collect();
            items[0] = 10 + rng.gen_range(0..40);
            Session::new(items, rng.gen_range(0..50))
        })
        .collect();
    Tiny {
        enc,
        head,
        params,
        catalog: ranked_catalog(50),
        batch,
    }
}

#[derive(Clone, Copy)]
enum Loss {
    Ce,
    Wp,
    Wq,
    Combined,
}

fn loss_value(t: &Tiny, params: &ParamStore, cfg: &CalibrationConfig, which: Loss) -> f64 {
    let refs: Vec<&Session> = t.batch.iter().collect();
    let cg = trace(&t.enc, &t.head, params, &t.catalog, &refs, cfg, 19).unwrap();
    let s = &cg.state;
    match which {
        Loss::Ce => s.l_ce,
        Loss::Wp => s.l_wp,
        Loss::Wq => s.l_wq,
        Loss::Combined => s.total(cfg),
    }
}

fn analytic(t: &Tiny, cfg: &CalibrationConfig, which: Loss) -> Gradients {
    let refs: Vec<&Session> = t.batch.iter().collect();
    let mut cg = trace(&t.enc, &t.head, &t.params, &t.catalog, &refs, cfg, 19).unwrap();
    let loss = match which {
        Loss::Ce => cg.ce,
        Loss::Wp => cg.wp,
        Loss::Wq => cg.wq,
        Loss::Combined => {
            let g = &mut cg.graph;
            let kl = g.add(cg.wp, cg.wq).unwrap();
            let kl = g.scale(kl, cfg.lambda).unwrap();
            g.add(cg.ce, kl).unwrap()
        }
    };
    let mut grads = Gradients::new();
    cg.graph.backward(loss, &ParamMask::All, &mut grads).unwrap();
    grads
}

/// Worst relative error between analytic and central-difference gradients
/// over every parameter entry. The denominator is floored at 1e-6: central
/// differences of an O(1) loss carry roundoff near ε·L/h ≈ 1e-10, which
/// would otherwise swamp entries of magnitude 1e-8.
fn gradient_check(t: &Tiny, cfg: &CalibrationConfig, which: Loss) -> (f64, usize, String) {
    const H: f64 = 1e-5;
    let grads = analytic(t, cfg, which);
    let mut worst: f64 = 0.0;
    let mut at = String::new();
    let mut checked = 0;
    let names: Vec<String> = t.params.names().map(str::to_string).collect();
    for name in names {
        let size = t.params.get(&name).unwrap().data().len();
        for i in 0..size {
            let mut p = t.params.clone();
            let base = p.get(&name).unwrap().data()[i];
            p.get_mut(&name).unwrap().data_mut()[i] = base + H;
            let up = loss_value(t, &p, cfg, which);
            p.get_mut(&name).unwrap().data_mut()[i] = base - H;
            let down = loss_value(t, &p, cfg, which);
            let numeric = (up - down) / (2.0 * H);
            let a = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            if (a - numeric).abs() / scale > worst {
                worst = (a - numeric).abs() / scale;
                at = format!("{name}[{i}] analytic {a:.3e} numeric {numeric:.3e}");
            }
            checked += 1;
        }
    }
    (worst, checked, at)
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let t = tiny_model(17);
    let cfg = CalibrationConfig::default();
    let mut parts = Vec::new();
    for (name, which) in [("CE", Loss::Ce), ("WP", Loss::Wp), ("WQ", Loss::Wq), ("combined", Loss::Combined)] {
        let (worst, checked, at) = gradient_check(&t, &cfg, which);
        ensure(worst < 1e-3, format!("{name}: relative error {worst:.2e} at {at}"))?;
        parts.push(format!("{name} {worst:.1e}"));
        if name == "combined" {
            parts.push(format!("{checked} entries"));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("{}, {secs:.1}s", parts.join(", ")))
}

// ---------------------------------------------------------------- 3

fn routing_suite() -> Outcome {
    let cat = ranked_catalog(100);
    let head_items: Vec<usize> = (0..20).collect();
    let tail_items: Vec<usize> = (20..100).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut sessions = Vec::new();
    let mut fractions = Vec::new();
    for _ in 0..10_000 {
        let len = rng.gen_range(1..=12usize);
        let tails = rng.gen_range(0..=len);
        let mut items: Vec<usize> = (0..tails).map(|_| tail_items[rng.gen_range(0..80)]).collect();
        items.extend((tails..len).map(|_| head_items[rng.gen_range(0..20)]));
        sessions.push(Session::new(items, 0));
        fractions.push((tails, len));
    }
    let mut boundary_cases = 0;
    for (i, s) in sessions.iter().enumerate() {
        let q = session_distribution(s, &cat).tail;
        // θ sometimes lands exactly on q to exercise the strict inequality
        let theta = if rng.gen_bool(0.3) { q } else { rng.gen_range(0.0..=1.0) };
        let k = rng.gen_range(1..=12);
        let split = split_by_threshold(std::slice::from_ref(s), &cat, theta).unwrap();
        let in_tail = split.folds[0] == vec![0];
        let routed = route_q(q, RoutingMode::Threshold, theta, 1);
        ensure(in_tail == (routed == ModelId::Fold(1)), format!("session {i}: split and route disagree at q={q}, θ={theta}"))?;
        if q == theta {
            boundary_cases += 1;
            ensure(routed == ModelId::Base, format!("q = θ = {q} routed to the tail model"))?;
        }
        // fold oracle in exact integer arithmetic: (j−1)/k < t/len ≤ j/k
        let (t, len) = fractions[i];
        let expected = if t == 0 {
            ModelId::Base
        } else {
            ModelId::Fold((1..=k).find(|&j| (j - 1) * len < t * k && t * k <= j * len).unwrap())
        };
        ensure(route_q(q, RoutingMode::Kfold, theta, k) == expected, format!("fold of q={t}/{len}, k={k}"))?;
    }
    for k in [1, 3, 10] {
        let part = Partition::kfold(&sessions, &cat, k).unwrap();
        let mut seen = vec![0u8; sessions.len()];
        for (j, fold) in part.folds.iter().enumerate() {
            for &i in fold {
                seen[i] += 1;
                ensure(kfold_index(session_distribution(&sessions[i], &cat).tail, k) == j + 1, "fold membership")?;
            }
        }
        for &i in &part.head {
            seen[i] += 1;
        }
        ensure(seen.iter().all(|&c| c == 1), format!("k={k}: folds and head do not partition"))?;
        let positive: Vec<usize> = (0..sessions.len()).filter(|&i| fractions[i].0 > 0).collect();
        ensure(part.tail() == positive, format!("k={k}: folds differ from the q>0 set"))?;
    }
    Ok(format!("10000 triples, {boundary_cases} boundary cases"))
}

// ---------------------------------------------------------------- 4

fn freezing_contract() -> Outcome {
    let t = tiny_model(5);
    let cfg = CalibrationConfig {
        lambda: 2.0,
        ..CalibrationConfig::default()
    };
    let refs: Vec<&Session> = t.batch.iter().collect();
    let mut cg = trace(&t.enc, &t.head, &t.params, &t.catalog, &refs, &cfg, 19).unwrap();
    let routed = routed_gradients(&mut cg, &cfg).unwrap();

    let masked = |which: Loss, mask: ParamMask| {
        let mut cg = trace(&t.enc, &t.head, &t.params, &t.catalog, &refs, &cfg, 19).unwrap();
        let v = match which {
            Loss::Ce => cg.ce,
            Loss::Wp => cg.wp,
            _ => cg.wq,
        };
        let v = cg.graph.scale(v, if matches!(which, Loss::Ce) { 1.0 } else { cfg.lambda }).unwrap();
        let mut g = Gradients::new();
        cg.graph.backward(v, &mask, &mut g).unwrap();
        g
    };
    let backbone = ParamMask::prefix("backbone.");
    let head = ParamMask::prefix(HEAD_PREFIX);
    let wq_unmasked = masked(Loss::Wq, ParamMask::All);
    let wp_unmasked = masked(Loss::Wp, ParamMask::All);
    ensure(
        wq_unmasked.iter().any(|(n, g)| n.starts_with(HEAD_PREFIX) && g.data().iter().any(|&v| v != 0.0)),
        "L_WQ has no head gradient even without masking; the check would be vacuous",
    )?;
    ensure(
        wp_unmasked.iter().any(|(n, g)| n.starts_with("backbone.") && g.data().iter().any(|&v| v != 0.0)),
        "L_WP has no encoder gradient even without masking; the check would be vacuous",
    )?;

    // head entries of the step equal the L_WP-only head gradient bit for bit,
    // so the L_WQ contribution there is exactly zero
    let wp_head = masked(Loss::Wp, head);
    let mut head_entries = 0;
    for (name, g) in routed.iter().filter(|(n, _)| n.starts_with(HEAD_PREFIX)) {
        ensure(Some(g) == wp_head.get(name), format!("{name}: head gradient carries more than L_WP"))?;
        head_entries += g.data().len();
    }
    // encoder entries equal the CE + L_WQ gradient bit for bit
    let ce = masked(Loss::Ce, backbone.clone());
    let wq = masked(Loss::Wq, backbone);
    let mut mixed = Gradients::new();
    {
        let mut cg = trace(&t.enc, &t.head, &t.params, &t.catalog, &refs, &cfg, 19).unwrap();
        let s = cg.graph.scale(cg.wq, cfg.lambda).unwrap();
        let s = cg.graph.add(cg.ce, s).unwrap();
        cg.graph.backward(s, &ParamMask::prefix("backbone."), &mut mixed).unwrap();
    }
    let mut backbone_entries = 0;
    for (name, g) in routed.iter().filter(|(n, _)| n.starts_with("backbone.")) {
        ensure(Some(g) == mixed.get(name), format!("{name}: encoder gradient carries more than CE + L_WQ"))?;
        ensure(ce.get(name).is_some() || wq.get(name).is_some(), format!("{name}: unexpected encoder gradient"))?;
        backbone_entries += g.data().len();
    }
    Ok(format!("{head_entries} head and {backbone_entries} encoder entries exact"))
}

// ---------------------------------------------------------------- 5, 6, 9

struct EndToEnd {
    dataset: Dataset,
    base: ModelBundle,
    calibrated: ModelRegistry,
    base_report: ReportFile,
    calibrated_report: ReportFile,
    config: ExperimentConfig,
    seconds: f64,
}

fn e2e_config() -> ExperimentConfig {
    ExperimentConfig {
        lambda: 1.0,
        theta: 0.0,
        k: 1,
        dim: 32,
        lr: 0.01,
        finetune_lr: Some(0.001),
        epochs: 10,
        finetune_epochs: 3,
        ..ExperimentConfig::default()
    }
}

fn run_end_to_end() -> EndToEnd {
    let started = Instant::now();
    let dataset = synth_generate(&SynthConfig {
        item_count: 500,
        session_count: 20_000,
        zipf_exponent: 1.1,
        tail_affinity_fraction: 0.3,
        ..SynthConfig::default()
    })
    .unwrap();
    let config = e2e_config();
    let (base, _) = run_pretrain(&dataset, &config).unwrap();
    let (calibrated, _) = run_finetune(&base, &dataset, &config).unwrap();
    let (base_report, _) = evaluate(&ModelRegistry::base_only(base.clone(), 0.0), &dataset, 20, 10).unwrap();
    let (calibrated_report, _) = evaluate(&calibrated, &dataset, 20, 10).unwrap();
    EndToEnd {
        dataset,
        base,
        calibrated,
        base_report,
        calibrated_report,
        config,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn tail_scope(r: &ReportFile) -> &MetricsReport {
    r.find(&Scope::Tail).expect("tail scope present")
}

fn end_to_end(e: &EndToEnd) -> Outcome {
    let b = tail_scope(&e.base_report);
    let c = tail_scope(&e.calibrated_report);
    let tail_gain = (c.tail_ratio - b.tail_ratio) / b.tail_ratio;
    let recall_drop = (b.recall - c.recall) / b.recall;
    let summary = format!(
        "Tail@20 {:.4}→{:.4} ({:+.1}%), C_KL {:.4}→{:.4}, Recall@20 {:.4}→{:.4} ({:+.1}%), {:.0}s",
        b.tail_ratio,
        c.tail_ratio,
        100.0 * tail_gain,
        b.c_kl,
        c.c_kl,
        b.recall,
        c.recall,
        -100.0 * recall_drop,
        e.seconds
    );
    ensure(tail_gain >= 0.10, format!("Tail@20 gain below 10%: {summary}"))?;
    ensure(c.c_kl < b.c_kl, format!("C_KL did not decrease: {summary}"))?;
    ensure(recall_drop <= 0.20, format!("Recall@20 fell by more than 20%: {summary}"))?;
    ensure(e.seconds <= 600.0, format!("over 10 minutes: {summary}"))?;
    Ok(summary)
}

fn lambda_direction(e: &EndToEnd) -> Outcome {
    let mut tail = BTreeMap::new();
    for lambda in [0.0, 10.0] {
        let cfg = ExperimentConfig { lambda, ..e.config.clone() };
        let (reg, _) = run_finetune(&e.base, &e.dataset, &cfg).map_err(|err| err.to_string())?;
        let (rep, _) = evaluate(&reg, &e.dataset, 20, 10).map_err(|err| err.to_string())?;
        tail.insert(lambda as u32, tail_scope(&rep).tail_ratio);
    }
    let summary = format!("Tail@20 λ=0 {:.4}, λ=10 {:.4}", tail[&0], tail[&10]);
    ensure(tail[&10] >= tail[&0], summary.clone())?;
    Ok(summary)
}

fn head_path_identity(e: &EndToEnd) -> Outcome {
    let cat = &e.dataset.catalog;
    let before = ModelRegistry::base_only(e.base.clone(), 0.0);
    let kfold = ExperimentConfig { k: 3, finetune_epochs: 1, ..e.config.clone() };
    let (kreg, _) = run_finetune(&e.base, &e.dataset, &kfold).map_err(|err| err.to_string())?;
    let head_sessions: Vec<Session> = e
        .dataset
        .test
        .iter()
        .filter(|s| session_distribution(s, cat).tail == 0.0)
        .cloned()
        .collect();
    ensure(!head_sessions.is_empty(), "no all-head test sessions")?;
    let want = before.records(&head_sessions, cat, 20).map_err(|err| err.to_string())?;
    for reg in [&e.calibrated, &kreg] {
        let got = reg.records(&head_sessions, cat, 20).map_err(|err| err.to_string())?;
        for (g, w) in got.iter().zip(&want) {
            ensure(g.list == w.list, format!("session {} differs from the base list", g.session))?;
            ensure(g.model == ModelId::Base, "all-head session not routed to the base")?;
        }
        for (s, w) in head_sessions.iter().zip(&want).take(200) {
            ensure(reg.recommend(s, cat, 20).unwrap() == w.list, "single-session recommend differs from the base")?;
        }
    }
    Ok(format!("{} all-head sessions identical (threshold and 3-fold)", head_sessions.len()))
}

// ---------------------------------------------------------------- 7, 8

fn small_dataset(seed: u64) -> Dataset {
    synth_generate(&SynthConfig {
        item_count: 120,
        session_count: 1500,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        dim: 16,
        lr: 0.01,
        epochs: 2,
        finetune_epochs: 2,
        ..ExperimentConfig::default()
    }
}

fn ablation_consistency() -> Outcome {
    let ds = small_dataset(8);
    let cfg = small_config();
    let (base, _) = run_pretrain(&ds, &cfg).map_err(|e| e.to_string())?;
    let no_calib = ExperimentConfig {
        ablation: Ablation { no_calib: true, ..Ablation::default() },
        ..cfg.clone()
    };
    let lambda0 = ExperimentConfig { lambda: 0.0, ..cfg.clone() };
    let (ra, _) = run_finetune(&base, &ds, &no_calib).map_err(|e| e.to_string())?;
    let (rb, _) = run_finetune(&base, &ds, &lambda0).map_err(|e| e.to_string())?;
    ensure(ra == rb, "no_calib and lambda 0 registries differ")?;
    let (fa, reca) = evaluate(&ra, &ds, 20, 10).map_err(|e| e.to_string())?;
    let (fb, recb) = evaluate(&rb, &ds, 20, 10).map_err(|e| e.to_string())?;
    ensure(fa.to_json() == fb.to_json() && fa.to_csv() == fb.to_csv(), "reports differ")?;
    ensure(reca == recb, "recommendation lists differ")?;

    let no_ct = ExperimentConfig {
        ablation: Ablation { no_ct: true, ..Ablation::default() },
        ..cfg
    };
    let (rc, logs) = run_finetune(&base, &ds, &no_ct).map_err(|e| e.to_string())?;
    ensure(rc.mode == RoutingMode::Single && rc.models.len() == 1, "no_ct registry is not a single model")?;
    ensure(logs[0].samples == ds.train.len() - (0.1 * ds.train.len() as f64).round() as usize, "no_ct model did not see every training sample")?;
    let (_, recs) = evaluate(&rc, &ds, 20, 10).map_err(|e| e.to_string())?;
    ensure(recs.iter().all(|r| r.model == ModelId::Fold(1)), "some session bypassed the single model")?;
    Ok(format!("{} test sessions: no_calib ≡ λ=0 bit for bit, no_ct routes all to one model", recs.len()))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let mut full = vec!["tailcal"];
    full.extend_from_slice(args);
    match tailcal::cli::main_with_args(full) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

fn pipeline(dir: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    run_cli(&["synth", "--items", "120", "--sessions", "1500", "--seed", "11", "--out", &p("data.jsonl")])?;
    run_cli(&["pretrain", "--data", &p("data.jsonl"), "--dim", "16", "--lr", "0.01", "--epochs", "2", "--out", &p("base.ckpt")])?;
    run_cli(&[
        "calibrate", "--base", &p("base.ckpt"), "--data", &p("data.jsonl"), "--k", "2", "--lr", "0.005", "--finetune-epochs", "2", "--out",
        &p("registry.json"),
    ])?;
    run_cli(&["evaluate", "--registry", &p("registry.json"), "--data", &p("data.jsonl"), "--out", &p("report")])?;
    let mut out = Vec::new();
    for name in ["data.jsonl", "base.ckpt", "registry.json", "registry.base.ckpt", "registry.fold-1.ckpt", "registry.fold-2.ckpt", "report.json", "report.csv"] {
        out.push((name.to_string(), std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"))?));
    }
    Ok(out)
}

fn determinism_and_persistence() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        ensure(x == y, format!("{name} differs between reruns"))?;
    }

    // in-memory registry vs the one reloaded from disk
    let ds = Dataset::load(&a.path().join("data.jsonl")).map_err(|e| e.to_string())?;
    let loaded = ModelRegistry::load(&a.path().join("registry.json")).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("again.json");
    loaded.save(&path).map_err(|e| e.to_string())?;
    let reloaded = ModelRegistry::load(&path).map_err(|e| e.to_string())?;
    let x = loaded.records(&ds.test, &ds.catalog, 20).map_err(|e| e.to_string())?;
    let y = reloaded.records(&ds.test, &ds.catalog, 20).map_err(|e| e.to_string())?;
    ensure(x == y, "recommendations changed across save/load")?;
    let report = ReportFile::load(&a.path().join("report.json")).map_err(|e| e.to_string())?;
    let (fresh, _) = evaluate(&reloaded, &ds, 20, 10).map_err(|e| e.to_string())?;
    ensure(fresh == report, "re-evaluating the reloaded registry changed the report")?;
    Ok(format!("{} artifacts identical across reruns; {} lists identical after save/load", first.len(), x.len()))
}

// ----------------------------------------------------------------

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let guarded = |f: &dyn Fn() -> Outcome| -> Outcome {
        std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        })
    };
    results.push(("1 metric oracles", guarded(&metric_oracles)));
    results.push(("2 gradient suite", guarded(&gradient_suite)));
    results.push(("3 routing and partition", guarded(&routing_suite)));
    results.push(("4 freezing contract", guarded(&freezing_contract)));
    let e2e = std::panic::catch_unwind(run_end_to_end);
    match &e2e {
        Ok(e) => {
            results.push(("5 end-to-end tail gains", guarded(&|| end_to_end(e))));
            results.push(("6 lambda direction", guarded(&|| lambda_direction(e))));
        }
        Err(_) => {
            results.push(("5 end-to-end tail gains", Err("pipeline panicked".into())));
            results.push(("6 lambda direction", Err("pipeline panicked".into())));
        }
    }
    results.push(("7 ablation consistency", guarded(&ablation_consistency)));
    results.push(("8 determinism and persistence", guarded(&determinism_and_persistence)));
    match &e2e {
        Ok(e) => results.push(("9 head-path identity", guarded(&|| head_path_identity(e)))),
        Err(_) => results.push(("9 head-path identity", Err("pipeline panicked".into()))),
    }

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
