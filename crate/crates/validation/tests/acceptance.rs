//! Acceptance suite, run without the libtest harness so its report is never
//! captured. Each criterion prints one `ACCEPTANCE <n> ... PASS|FAIL` line with
//! the measured numbers; the process fails if any criterion fails.
//!
//! The learning criteria (4 to 6) train with `configs/desk.toml`; one seed-0
//! run of the full model is shared between them. Criteria run one after
//! another so wall-clock budgets are measured without competing work.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use hero_cli::{load_config, run, run_ablation, AblationRow, Variant};
use hero_core::config::HeroConfig;
use hero_core::diagnostics::{gradient_suite, kernel_oracle_suite, structural_suite};
use hero_core::eval::EvalReport;
use hero_core::pipeline::{
    evaluate, fit, held_out, retrieval_report, train, training_pool, HeroModel, InputShape, QueryMode, RetrievalReport,
};

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
const RETRIEVAL_STEPS: usize = 2000;
const ABLATION_STEPS: usize = 3000;
const GROUNDING_STEPS: usize = 5000;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn desk(seed: u64) -> HeroConfig {
    let mut cfg = load_config(Some(Path::new(DESK)), &[], Some(seed), Some(GROUNDING_STEPS)).expect("desk config loads");
    cfg.eval.episodes = 200;
    cfg
}

struct MainRun {
    retrieval: RetrievalReport,
    retrieval_time: Duration,
    ablation_avg: f64,
    grounding: EvalReport,
}

/// Seed-0 full model: retrieval is scored on the held-out set at step 2000 and
/// the ablation baseline at step 3000 of the run that continues to 5000 steps
/// for grounding.
fn main_run() -> &'static MainRun {
    static RUN: OnceLock<MainRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = desk(0);
        let eval_set = held_out(&cfg).unwrap();
        let start = Instant::now();
        let mut snapshot = None;
        let mut ablation_avg = None;
        let (model, _) = fit(&cfg, |s, m| {
            if s.step + 1 == RETRIEVAL_STEPS {
                snapshot = Some((retrieval_report(m, &eval_set)?, start.elapsed()));
            }
            if s.step + 1 == ABLATION_STEPS {
                ablation_avg = Some(evaluate(m, &eval_set, QueryMode::Full, "")?.avg);
            }
            Ok(())
        })
        .unwrap();
        let (retrieval, retrieval_time) = snapshot.expect("run reaches the retrieval checkpoint");
        let ablation_avg = ablation_avg.expect("run reaches the ablation checkpoint");
        let grounding = evaluate(&model, &eval_set, QueryMode::Full, &cfg.hash()).unwrap();
        MainRun {
            retrieval,
            retrieval_time,
            ablation_avg,
            grounding,
        }
    })
}

fn criterion_1_kernel_oracles() -> bool {
    let start = Instant::now();
    let r = kernel_oracle_suite(200, 11).unwrap();
    let t = start.elapsed();
    let ok = r.instances == 200 && r.pyramid_max_err <= 1e-12 && r.shifted_max_err <= 1e-12 && r.reductions_exact && t < Duration::from_secs(10);
    println!(
        "ACCEPTANCE 1 kernel oracles: {} (instances {}, pyramid max err {:.2e}, shifted max err {:.2e}, reductions exact {}, {:.2} s; need <= 1e-12 and < 10 s)",
        verdict(ok),
        r.instances,
        r.pyramid_max_err,
        r.shifted_max_err,
        r.reductions_exact,
        t.as_secs_f64()
    );
    ok
}

fn criterion_2_gradient_suite() -> bool {
    let start = Instant::now();
    let entries = gradient_suite(0).unwrap();
    let t = start.elapsed();
    let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    let has_end_to_end = entries.iter().any(|e| e.name == "end_to_end_loss");
    let ok = has_end_to_end && worst < 1e-4 && t < Duration::from_secs(60);
    println!(
        "ACCEPTANCE 2 gradient suite: {} ({} checks, max relative error {:.2e}, {:.1} s; need < 1e-4 and < 60 s)",
        verdict(ok),
        entries.len(),
        worst,
        t.as_secs_f64()
    );
    ok
}

fn criterion_3_structural_invariants() -> bool {
    let r = structural_suite(120, 13).unwrap();
    let ok = r.configurations >= 100
        && r.flow_violations == 0
        && r.proposal_violations == 0
        && r.empty_selections == 0
        && r.max_mass_error <= 1e-9;
    println!(
        "ACCEPTANCE 3 structural invariants: {} ({} configurations, flow violations {}, proposal violations {}, empty selections {}, max |sum v - L| {:.2e})",
        verdict(ok),
        r.configurations,
        r.flow_violations,
        r.proposal_violations,
        r.empty_selections,
        r.max_mass_error
    );
    ok
}

fn criterion_4_retrieval_learnability() -> bool {
    let m = main_run();
    let r = &m.retrieval;
    let ok = r.episodes == 200 && r.f1 >= 0.8 && r.clip_overlap >= 0.9 && m.retrieval_time <= Duration::from_secs(15 * 60);
    println!(
        "ACCEPTANCE 4 retrieval learnability: {} (after {RETRIEVAL_STEPS} steps on {} episodes: frame precision {:.3}, recall {:.3}, F1 {:.3} (need >= 0.8), clip overlap {:.3} (need >= 0.9), {:.0} s (need <= 900 s))",
        verdict(ok),
        r.episodes,
        r.precision,
        r.recall,
        r.f1,
        r.clip_overlap,
        m.retrieval_time.as_secs_f64()
    );
    ok
}

fn criterion_5_grounding_learnability() -> bool {
    let full = &main_run().grounding;

    let cfg = desk(0);
    let mut pool = training_pool(&cfg).unwrap();
    for ep in &mut pool {
        ep.query = ep.query.zeroed();
    }
    let mut blind = HeroModel::<f64>::new(&cfg.model, InputShape::from(&cfg.world), cfg.train.seed).unwrap();
    train(&mut blind, &pool, &cfg.train, |_, _| Ok(())).unwrap();
    let no_text = evaluate(&blind, &held_out(&cfg).unwrap(), QueryMode::Zeroed, &cfg.hash()).unwrap();

    let acc = |r: &EvalReport| r.accuracy_at(0.5).unwrap();
    let ok = full.episodes == 200 && acc(full) >= 0.8 && acc(&no_text) <= 0.5;
    println!(
        "ACCEPTANCE 5 grounding learnability: {} (after {GROUNDING_STEPS} steps: accuracy@0.5 {:.3} (need >= 0.8), no-text model {:.3} (need <= 0.5))",
        verdict(ok),
        acc(full),
        acc(&no_text)
    );
    ok
}

fn criterion_6_ablation_direction() -> bool {
    let mut base = desk(0);
    base.train.max_steps = Some(ABLATION_STEPS);
    let mut full_seeds = vec![main_run().ablation_avg];
    for &seed in &ABLATION_SEEDS[1..] {
        full_seeds.push(run_ablation(&base, Variant::Full, &[seed]).unwrap().avg);
    }
    let full_avg = full_seeds.iter().sum::<f64>() / full_seeds.len() as f64;

    let removed: Vec<AblationRow> = [Variant::NoRetr, Variant::NoPyr, Variant::NoShi]
        .into_iter()
        .map(|v| run_ablation(&base, v, &ABLATION_SEEDS).unwrap())
        .collect();
    let inversions: Vec<f64> = removed
        .iter()
        .map(|r| 100.0 * (r.avg - full_avg))
        .filter(|gap| *gap > 0.0)
        .collect();
    let ok = inversions.is_empty() || (inversions.len() == 1 && inversions[0] <= 1.0);
    let rows: Vec<String> = removed
        .iter()
        .map(|r| {
            let seeds: Vec<String> = r.per_seed.iter().map(|s| format!("{:.1}", 100.0 * s.avg)).collect();
            format!("{} {:.1} [{}]", r.label, 100.0 * r.avg, seeds.join(", "))
        })
        .collect();
    let full_rows: Vec<String> = full_seeds.iter().map(|a| format!("{:.1}", 100.0 * a)).collect();
    println!(
        "ACCEPTANCE 6 ablation direction: {} (Avg over seeds {:?} after {ABLATION_STEPS} steps: full {:.1} [{}]; {}; allow one inversion <= 1 point)",
        verdict(ok),
        ABLATION_SEEDS,
        100.0 * full_avg,
        full_rows.join(", "),
        rows.join("; ")
    );
    ok
}

fn call(args: &[&str]) -> String {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(std::iter::once("hero").chain(args.iter().copied()), &mut out, &mut err);
    assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
    String::from_utf8(out).unwrap()
}

fn criterion_7_determinism() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let path = |name: &str| d.join(name).to_str().unwrap().to_string();
    for run_id in ["a", "b"] {
        call(&[
            "train",
            "--config",
            DESK,
            "--seed",
            "5",
            "--steps",
            "300",
            "--out",
            &path(&format!("{run_id}.ckpt")),
            "--loss-log",
            &path(&format!("{run_id}.jsonl")),
        ]);
        for eval_id in ["1", "2"] {
            call(&[
                "eval",
                "--checkpoint",
                &path(&format!("{run_id}.ckpt")),
                "--out",
                &path(&format!("{run_id}{eval_id}.json")),
            ]);
        }
    }
    let read = |name: &str| fs::read(d.join(name)).unwrap();
    let curves = read("a.jsonl") == read("b.jsonl");
    let checkpoints = read("a.ckpt") == read("b.ckpt");
    let reports = [read("a1.json"), read("a2.json"), read("b1.json")].iter().all(|r| *r == read("b2.json"));
    let steps = String::from_utf8(read("a.jsonl")).unwrap().lines().count();
    let ok = curves && checkpoints && reports && steps == 300;
    println!(
        "ACCEPTANCE 7 determinism: {} (two 300-step train runs: loss curves identical {curves}, checkpoints identical {checkpoints}; four evals identical {reports})",
        verdict(ok)
    );
    ok
}

fn main() {
    let criteria: [(&str, fn() -> bool); 7] = [
        ("1", criterion_1_kernel_oracles),
        ("2", criterion_2_gradient_suite),
        ("3", criterion_3_structural_invariants),
        ("4", criterion_4_retrieval_learnability),
        ("5", criterion_5_grounding_learnability),
        ("6", criterion_6_ablation_direction),
        ("7", criterion_7_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (id, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let ok = std::panic::catch_unwind(check).unwrap_or_else(|_| {
            println!("ACCEPTANCE {id}: FAIL (panicked)");
            false
        });
        if !ok {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {}", failed.join(", "));
        std::process::exit(1);
    }
}
