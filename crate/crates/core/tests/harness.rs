use std::fs;

use cope_core::harness::checkpoint::{Checkpoint, EntryData};
use cope_core::harness::{
    parse_config, parse_overrides, read_metrics, resume_train, run_eval, run_train, seed_dir,
    summarize, Trainer, KNOWN_KEYS,
};
use cope_core::position_encoding::{Combine, PeKind};
use cope_core::Error;

fn cfg(text: &str) -> cope_core::harness::RunConfig {
    parse_config(text, &[]).unwrap()
}

const SMALL_COUNTING: &str =
    "task=counting\ntask.max_ops=12\ndata.train_pool=200\ndata.eval_size=40\n\
model.d_model=16\nmodel.n_heads=2\nmodel.n_layers=1\npe.kind=cope\npe.p_max=8\n\
train.batch_size=4\ntrain.total_steps=12\ntrain.eval_every=5\noptim.lr=1e-3\n";

#[test]
fn cope_keys_build_a_cope_config() {
    let c = cfg("task=counting\npe.kind=cope\npe.p_max=64");
    assert_eq!(c.model.pe.variant.kind, PeKind::Cope);
    assert_eq!(c.model.pe.cope.p_max, 64);
    let c = cfg("task=counting\npe.kind=cope\npe.combine_with=relative");
    assert_eq!(c.model.pe.variant.combine_with, Some(Combine::Relative));
}

#[test]
fn p_max_is_rejected_for_absolute() {
    let err = parse_config("task=counting\npe.kind=absolute\npe.p_max=8", &[]).unwrap_err();
    assert!(
        matches!(&err, Error::Config(m) if m.contains("pe.p_max")),
        "{err}"
    );
}

#[test]
fn unknown_keys_get_a_suggestion() {
    let err = parse_config("task=counting\npe.pmax=8", &[])
        .unwrap_err()
        .to_string();
    assert!(err.contains("did you mean \"pe.p_max\""), "{err}");
    let err = parse_config("task=counting\ntrain.total_step=8", &[])
        .unwrap_err()
        .to_string();
    assert!(err.contains("train.total_steps"), "{err}");
}

#[test]
fn diagnostics_for_types_and_missing_task() {
    let err = parse_config("task=counting\nmodel.d_model=lots", &[])
        .unwrap_err()
        .to_string();
    assert!(
        err.contains("model.d_model") && err.contains("line 2"),
        "{err}"
    );
    let err = parse_config("pe.kind=cope", &[]).unwrap_err().to_string();
    assert!(err.contains("missing required key task"), "{err}");
    assert!(parse_config("task=counting\ntask.n_pairs=4", &[]).is_err());
}

#[test]
fn overrides_beat_the_file() {
    let c = parse_config(
        "task=flipflop\ntask.n_pairs=8",
        &[("task.n_pairs".into(), "16".into())],
    )
    .unwrap();
    assert_eq!(c.model.context_t, 31);
}

#[test]
fn override_arguments_take_both_forms() {
    let args: Vec<String> = ["pe.kind=rope", "--optim.lr", "3e-4", "train.seeds=1,2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let ov = parse_overrides(&args).unwrap();
    assert_eq!(
        ov,
        vec![
            ("pe.kind".to_string(), "rope".to_string()),
            ("optim.lr".to_string(), "3e-4".to_string()),
            ("train.seeds".to_string(), "1,2".to_string()),
        ]
    );
    assert!(parse_overrides(&["--optim.lr".to_string()]).is_err());
    assert!(parse_overrides(&["loose".to_string()]).is_err());
}

#[test]
fn canonical_text_round_trips() {
    for text in [
        SMALL_COUNTING,
        "task=flipflop\npe.kind=cope_alibi\npe.alibi_slopes=0.5,0.25\n",
        "task=selective_copy\ntask.n_content=8\ntask.n_blanks=8\npe.kind=relative_capped\npe.relative_cap=9\n",
        "task=charlm\npe.kind=cope\npe.combine_with=rope\ntrain.early_stop=0.01\ntrain.dtype=f64\n",
    ] {
        let c = cfg(text);
        let again = cfg(&c.to_text());
        assert_eq!(c, again);
        assert_eq!(c.to_text(), again.to_text());
    }
    // Every key the parser knows appears in some canonical form.
    assert!(KNOWN_KEYS.iter().all(|k| k.contains('.') || *k == "task"));
}

#[test]
fn context_length_covers_the_longest_split() {
    let c = cfg("task=selective_copy\ntask.n_content=8\ntask.n_blanks=8\n");
    assert_eq!(c.model.context_t, 2 * 8 + 16);
}

#[test]
fn zero_steps_evaluates_the_initial_model_near_chance() {
    let mut c = cfg(SMALL_COUNTING);
    c.total_steps = 0;
    c.eval_size = 300;
    let dir = tempfile::tempdir().unwrap();
    let runs = run_train(&c, dir.path(), None).unwrap();
    let in_dist = runs[0].error("in_dist").unwrap();
    // Eleven possible answers; an untrained model is right about once in
    // eleven at best, often never.
    assert!(in_dist >= 1.0 - 1.0 / 11.0 - 0.1, "{in_dist}");
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let c = cfg(SMALL_COUNTING);
    let dir = tempfile::tempdir().unwrap();
    let runs = run_train(&c, dir.path(), None).unwrap();
    let path = runs[0].dir.join("checkpoint.bin");
    let bytes = fs::read(&path).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), bytes);
    let t = Trainer::<f32>::from_checkpoint(&ck, None).unwrap();
    assert_eq!(t.to_checkpoint().to_bytes().unwrap(), bytes);
    assert_eq!(t.step, 12);
}

#[test]
fn checkpoint_rejects_shape_mismatch_naming_the_tensor() {
    let c = cfg(SMALL_COUNTING);
    let t = Trainer::<f32>::new(c, 3).unwrap();
    let mut ck = t.to_checkpoint();
    let e = ck
        .entries
        .iter_mut()
        .find(|e| e.name == "param.layers.0.attn.q.w")
        .unwrap();
    e.dims = vec![8, 32];
    let err = Trainer::<f32>::from_checkpoint(&ck, None)
        .err()
        .unwrap()
        .to_string();
    assert!(err.contains("param.layers.0.attn.q.w"), "{err}");

    let mut ck = t.to_checkpoint();
    ck.entries.retain(|e| e.name != "adam.v.tok_emb");
    let err = Trainer::<f32>::from_checkpoint(&ck, None)
        .err()
        .unwrap()
        .to_string();
    assert!(err.contains("adam.v.tok_emb"), "{err}");

    let bytes = t.to_checkpoint().to_bytes().unwrap();
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Format(_))
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::Format(_))
    ));
}

#[test]
fn checkpoint_stores_precision_and_state() {
    let t = Trainer::<f64>::new(cfg(&format!("{SMALL_COUNTING}train.dtype=f64\n")), 5).unwrap();
    let ck = t.to_checkpoint();
    assert!(matches!(
        ck.get("param.tok_emb").unwrap().data,
        EntryData::F64(_)
    ));
    assert_eq!(ck.u64s("rng.state").unwrap(), vec![5, 0]);
    assert!(Trainer::<f32>::from_checkpoint(&ck, None).is_err());
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let c = cfg(SMALL_COUNTING);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_train(&c, a.path(), None).unwrap();
    run_train(&c, b.path(), None).unwrap();
    let m = |d: &std::path::Path| fs::read(seed_dir(d, 1).join("metrics.jsonl")).unwrap();
    assert_eq!(m(a.path()), m(b.path()));
    let ck = |d: &std::path::Path| fs::read(seed_dir(d, 1).join("checkpoint.bin")).unwrap();
    assert_eq!(ck(a.path()), ck(b.path()));
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let c = cfg(SMALL_COUNTING);
    let (full, split) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_train(&c, full.path(), None).unwrap();
    // Stop off an evaluation boundary so the interval accumulators matter.
    let first = run_train(&c, split.path(), Some(7)).unwrap();
    assert_eq!(first[0].steps, 7);
    let resumed = resume_train(&first[0].dir.join("checkpoint.bin"), None).unwrap();
    assert_eq!(resumed.steps, 12);
    let file = |d: &std::path::Path, f: &str| fs::read(seed_dir(d, 1).join(f)).unwrap();
    assert_eq!(
        file(full.path(), "metrics.jsonl"),
        file(split.path(), "metrics.jsonl")
    );
    assert_eq!(
        file(full.path(), "checkpoint.bin"),
        file(split.path(), "checkpoint.bin")
    );
}

#[test]
fn eval_matches_the_final_training_record() {
    let c = cfg(SMALL_COUNTING);
    let dir = tempfile::tempdir().unwrap();
    let runs = run_train(&c, dir.path(), None).unwrap();
    let ckpt = runs[0].dir.join("checkpoint.bin");
    let evals = run_eval(&ckpt, &[]).unwrap();
    assert_eq!(evals, runs[0].final_records);
    assert_eq!(run_eval(&ckpt, &[]).unwrap(), evals);
    let metrics = read_metrics(&runs[0].dir.join("metrics.jsonl")).unwrap();
    let last = &metrics[metrics.len() - evals.len()..];
    assert_eq!(last, &evals[..]);
}

#[test]
fn eval_with_changed_knob_and_vocab_check() {
    let c = cfg(SMALL_COUNTING);
    let dir = tempfile::tempdir().unwrap();
    let runs = run_train(&c, dir.path(), None).unwrap();
    let ckpt = runs[0].dir.join("checkpoint.bin");
    let recs = run_eval(&ckpt, &[("task.ood_w_pass".into(), "3".into())]).unwrap();
    assert_eq!(
        recs.iter().map(|r| r.split.as_str()).collect::<Vec<_>>(),
        ["in_dist", "ood_w_pass_3"]
    );
    let err = run_eval(&ckpt, &[("task".into(), "flipflop".into())])
        .unwrap_err()
        .to_string();
    assert!(
        err.contains("vocabulary mismatch") || err.contains("does not apply"),
        "{err}"
    );
}

#[test]
fn seeds_run_in_sequence_and_summarize() {
    let c = cfg(&format!("{SMALL_COUNTING}train.seeds=1,2\n"));
    let dir = tempfile::tempdir().unwrap();
    let runs = run_train(&c, dir.path(), None).unwrap();
    assert_eq!(runs.len(), 2);
    assert!(seed_dir(dir.path(), 2).join("checkpoint.bin").exists());
    let s = summarize(&runs);
    assert!(s.lines().nth(1).unwrap().starts_with("in_dist "), "{s}");
    assert!(s.lines().count() == 4);
}

#[test]
fn metrics_lines_name_their_fields() {
    let c = cfg(SMALL_COUNTING);
    let dir = tempfile::tempdir().unwrap();
    run_train(&c, dir.path(), None).unwrap();
    let text = fs::read_to_string(seed_dir(dir.path(), 1).join("metrics.jsonl")).unwrap();
    let first = text.lines().next().unwrap();
    for field in [
        "\"seed\":",
        "\"step\":",
        "\"split\":",
        "\"loss\":",
        "\"error\":",
        "\"config\":",
    ] {
        assert!(first.contains(field), "{first}");
    }
    assert!(!first.contains("\"wall_clock\":"));
    // 12 steps, evaluations at 5, 10 and 12, four records each.
    assert_eq!(text.lines().count(), 12);
}
