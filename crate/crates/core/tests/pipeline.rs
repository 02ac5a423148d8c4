mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;

use common::*;
use plab::corpus::{load_questions, write_csv_dir, write_jsonl as write_corpus_jsonl};
use plab::experiment::{
    flags_by_question, partition_subsets, read_jsonl, run_patching_sweep, run_persona_eval, summarize_sweep,
    write_jsonl, EvalConfig, EvalRecord, Harness, MetricRecord, SweepConfig, Target,
};
use plab::figures::layer_heatmaps;
use plab::fixtures;
use plab::metrics::paired_t_test;
use plab::prompt::BASE_SURFACE;

fn plab(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_plab")).arg("--out").arg(dir).args(args).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn corpus_converts_both_ways() {
    let corpus = fixtures::corpus();
    assert_eq!(corpus.len(), 40);
    let subjects: BTreeSet<&str> = corpus.iter().map(|q| q.subject.as_str()).collect();
    assert_eq!(subjects.len(), 8);

    let dir = tempfile::tempdir().unwrap();
    let csv_dir = dir.path().join("csv");
    write_csv_dir(&corpus, &csv_dir).unwrap();
    assert_eq!(std::fs::read_dir(&csv_dir).unwrap().count(), 8);
    let back = load_questions(&csv_dir).unwrap();
    let mut want = corpus.clone();
    want.sort_by(|a, b| a.subject.cmp(&b.subject));
    assert_eq!(back, want);

    let jl = dir.path().join("c.jsonl");
    write_corpus_jsonl(&back, &jl).unwrap();
    assert_eq!(load_questions(&jl).unwrap(), want);
}

#[test]
fn eval_summary_matches_its_records() {
    let m = toy();
    let tok = tokenizer();
    let template = fixtures::template();
    let h = Harness::new(&m, &tok, &template).unwrap();
    let reg = fixtures::identities();
    let corpus = fixtures::corpus();
    let out = run_persona_eval(&h, &corpus, &reg, &EvalConfig::default()).unwrap();
    assert_eq!(out.records.len(), reg.all().len() * corpus.len());

    let column = |id: &str| -> BTreeMap<String, &EvalRecord> {
        out.records.iter().filter(|r| r.identity == id).map(|r| (r.question_id.clone(), r)).collect()
    };
    let base = column(BASE_SURFACE);
    for s in &out.summary.identities {
        let col = column(&s.identity);
        let n = col.len() as f64;
        let mean_prob = col.values().map(|r| r.prob).sum::<f64>() / n;
        let acc = col.values().filter(|r| r.is_max).count() as f64 / n;
        let delta = col.iter().map(|(q, r)| r.prob - base[q].prob).sum::<f64>() / n;
        assert!((s.mean_prob - mean_prob).abs() < 1e-9);
        assert!((s.accuracy - acc).abs() < 1e-9);
        assert!((s.prob_delta_vs_base - delta).abs() < 1e-9);
        if s.identity == BASE_SURFACE {
            assert_eq!((s.prob_delta_vs_base, s.accuracy_delta_vs_base), (0.0, 0.0));
            assert!(s.test_vs_base.is_none());
        } else {
            let x: Vec<f64> = col.values().map(|r| r.prob).collect();
            let y: Vec<f64> = base.values().map(|r| r.prob).collect();
            let t = paired_t_test(&x, &y).unwrap();
            let got = s.test_vs_base.unwrap();
            assert!((got.t - t.t).abs() < 1e-9 && (got.p - t.p).abs() < 1e-12);
        }
        assert_eq!(out.summary.pairwise_prob_delta[&s.identity][&s.identity], 0.0);
    }
    for r in &out.records {
        assert!(r.prob > 0.0 && r.prob < 1.0);
    }
}

#[test]
fn self_pair_sweep_has_no_effect() {
    let m = toy();
    let tok = tokenizer();
    let template = fixtures::template();
    let h = Harness::new(&m, &tok, &template).unwrap();
    let reg = fixtures::identities();
    let id = reg.get("Brown").unwrap();
    let questions: Vec<_> = fixtures::corpus().into_iter().step_by(5).collect();
    let cfg = SweepConfig { targets: Target::ALL.to_vec(), direct: true };
    let out = run_patching_sweep(&h, id, id, &questions, &cfg, Vec::new()).unwrap();
    let flags = plab::experiment::evaluate_flags(&h, id, &questions).unwrap();
    assert_eq!(out.computed, out.records.len());
    for r in &out.records {
        assert_eq!(r.delta_r, 0.0, "{} {}", r.site, r.positions);
        assert_eq!(r.is_max, flags[&r.question_id]);
        assert!((r.rederive().unwrap() - r.delta_r).abs() < 1e-6);
    }
}

#[test]
fn sweep_records_rederive_and_resume() {
    let m = toy();
    let tok = tokenizer();
    let template = fixtures::template();
    let h = Harness::new(&m, &tok, &template).unwrap();
    let reg = fixtures::identities();
    let (a, b) = (reg.get("intelligent").unwrap(), reg.get("stupid").unwrap());
    let questions: Vec<_> = fixtures::corpus().into_iter().take(6).collect();
    let cfg = SweepConfig { targets: vec![Target::MlpLayers, Target::MhaLayers], direct: true };

    let full = run_patching_sweep(&h, a, b, &questions, &cfg, Vec::new()).unwrap();
    assert_eq!(full.records.len(), 6 * 2 * 2 * 2);
    for r in &full.records {
        assert!((r.rederive().unwrap() - r.delta_r).abs() < 1e-6);
    }

    // an interrupted run: keep a prefix, write it, resume from the file
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.jsonl");
    write_jsonl(&path, &full.records[..10]).unwrap();
    let existing: Vec<MetricRecord> = read_jsonl(&path).unwrap();
    let resumed = run_patching_sweep(&h, a, b, &questions, &cfg, existing).unwrap();
    assert_eq!((resumed.computed, resumed.skipped), (full.records.len() - 10, 10));
    assert_eq!(resumed.records, full.records);

    let again = run_patching_sweep(&h, a, b, &questions, &cfg, resumed.records).unwrap();
    assert_eq!(again.computed, 0);

    let summary = summarize_sweep(&full.records);
    assert_eq!(summary.targets.len(), 8);
    assert!(summary.targets.iter().all(|t| t.n == 6));
}

#[test]
fn partitions_cover_every_question() {
    let m = toy();
    let tok = tokenizer();
    let template = fixtures::template();
    let h = Harness::new(&m, &tok, &template).unwrap();
    let reg = fixtures::identities();
    let corpus = fixtures::corpus();
    let out = run_persona_eval(&h, &corpus, &reg, &EvalConfig::default()).unwrap();
    for pair in fixtures::pairs() {
        let p =
            partition_subsets(&flags_by_question(&out.records, &pair.id1), &flags_by_question(&out.records, &pair.id2))
                .unwrap();
        assert_eq!(p.total(), corpus.len());
        let all: BTreeSet<&String> = p.s1.iter().chain(&p.s2).chain(&p.s3).chain(&p.s4).collect();
        assert_eq!(all.len(), corpus.len());
    }
}

#[test]
fn layer_heatmap_has_one_cell_per_target_and_layer() {
    let m = toy();
    let tok = tokenizer();
    let template = fixtures::template();
    let h = Harness::new(&m, &tok, &template).unwrap();
    let reg = fixtures::identities();
    let questions: Vec<_> = fixtures::corpus().into_iter().take(3).collect();
    let out = run_patching_sweep(
        &h,
        reg.get("good").unwrap(),
        reg.get("bad").unwrap(),
        &questions,
        &SweepConfig::default(),
        Vec::new(),
    )
    .unwrap();
    let figs = layer_heatmaps(&out.records);
    assert_eq!(figs.len(), 1);
    assert_eq!(figs[0].0, "layer_heatmap__good__bad.svg");
    assert_eq!(figs[0].1.matches("class=\"cell\"").count(), 4);
    assert!(figs[0].1.contains("mlp_layers") && figs[0].1.contains("mha_layers"));
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = plab(d, &["figures", "--kind", "pie"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pie"));

    let bad = d.join("bad.jsonl");
    std::fs::write(&bad, "{\"id\": \"x\"}\n").unwrap();
    let out = plab(d, &["--corpus", bad.to_str().unwrap(), "eval"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":1"));

    let model = d.join("broken.plab");
    std::fs::write(&model, b"not a model").unwrap();
    let out = plab(d, &["--model", model.to_str().unwrap(), "eval"]);
    assert_eq!(out.status.code(), Some(4));

    // the toy model's partition for this pair has an empty S3
    let small = d.join("small.jsonl");
    let corpus: Vec<_> = fixtures::corpus().into_iter().take(1).collect();
    write_corpus_jsonl(&corpus, &small).unwrap();
    let c = small.to_str().unwrap();
    assert_eq!(plab(d, &["--corpus", c, "eval"]).status.code(), Some(0));
    let out = plab(d, &["--corpus", c, "patch-sweep", "--pair", "helpful:helpful"]);
    assert_eq!(out.status.code(), Some(5));

    let out = plab(d, &["patch-sweep", "--targets", "everything"]);
    assert_eq!(out.status.code(), Some(2));
}
