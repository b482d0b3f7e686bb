use cope_core::analysis::{
    cope_head, dump_checkpoint, dump_position_attention, read_tokens, Dump, DumpMode,
};
use cope_core::harness::checkpoint::Checkpoint;
use cope_core::harness::{parse_config, run_train, Trainer};
use cope_core::numerics::{Purpose, RngStream};

fn train(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let c = parse_config(text, &[]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let runs = run_train(&c, dir.path(), None).unwrap();
    let ck = runs[0].dir.join("checkpoint.bin");
    (dir, ck)
}

fn sample(ck: &std::path::Path, index: u64) -> Vec<usize> {
    let text = Checkpoint::load(ck).unwrap().config_text;
    let (task, _) = parse_config(&text, &[]).unwrap().task.build().unwrap();
    let mut rng = RngStream::for_purpose(99, Purpose::Test, index);
    task.generate_one(&mut rng).tokens
}

/// Linear interpolation of a table row at a fractional position.
fn interp(row: &[f64], p: f64) -> f64 {
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(row.len() - 1);
    let w = p - lo as f64;
    row[lo] * (1.0 - w) + row[hi] * w
}

#[test]
fn position_maps_recompute_from_gates_positions_and_table() {
    let (_dir, ck) = train(
        "task=counting\ntask.max_ops=16\ndata.train_pool=500\ndata.eval_size=50\nmodel.d_model=32\nmodel.n_heads=2\n\
         model.n_layers=2\npe.kind=cope\npe.p_max=12\ntrain.batch_size=8\ntrain.total_steps=150\ntrain.eval_every=150\n\
         optim.lr=2e-3\ntrain.dtype=f64\n",
    );
    let t = Trainer::<f64>::from_checkpoint(&Checkpoint::load(&ck).unwrap(), None).unwrap();
    let p_max = t.config.model.pe.cope.p_max;
    for k in 0..3 {
        let tokens = sample(&ck, k);
        for (layer, head) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let h = cope_head(&t.model, &tokens, layer, head, None).unwrap();
            let table = h.table.as_ref().unwrap();
            let n = tokens.len();
            for i in 0..n {
                // Positions from the dumped gates.
                let mut acc = 0.0;
                let mut pos = vec![0.0; i + 1];
                for j in (0..=i).rev() {
                    acc += h.gates[i][j];
                    pos[j] = acc.min((p_max - 1) as f64);
                }
                for j in 0..=i {
                    assert!((pos[j] - h.positions[i][j]).abs() < 1e-9);
                }
                let logits: Vec<f64> = pos.iter().map(|&p| interp(&table[i], p)).collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
                let top = e.iter().copied().fold(0.0, f64::max);
                let d = dump_position_attention(&t.model, &tokens, layer, head).unwrap();
                for j in 0..n {
                    let want = if j <= i { e[j] / top } else { 0.0 };
                    assert!(
                        (d.rows[i][j] - want).abs() < 1e-5,
                        "row {i} col {j}: {} vs {want}",
                        d.rows[i][j]
                    );
                }
            }
        }
    }
    // The file route gives the same rows through the text format.
    let tokens = sample(&ck, 7);
    let d = dump_checkpoint(&ck, &tokens, 1, 0, DumpMode::Position).unwrap();
    let back = Dump::parse(&d.to_text()).unwrap();
    for (a, b) in back.rows.iter().flatten().zip(d.rows.iter().flatten()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn gate_rows_sum_to_the_unclamped_first_position() {
    let (_dir, ck) = train(
        "task=flipflop\ntask.n_pairs=8\ndata.eval_size=50\nmodel.d_model=32\nmodel.n_heads=2\nmodel.n_layers=2\n\
         pe.kind=cope\npe.p_max=4\ntrain.batch_size=8\ntrain.total_steps=150\ntrain.eval_every=150\noptim.lr=2e-3\n",
    );
    let t = Trainer::<f32>::from_checkpoint(&Checkpoint::load(&ck).unwrap(), None).unwrap();
    let mut clamped = 0;
    for k in 0..3 {
        let tokens = sample(&ck, k);
        for layer in 0..2 {
            for head in 0..2 {
                let h = cope_head(&t.model, &tokens, layer, head, None).unwrap();
                for i in 0..tokens.len() {
                    // Reversed cumulative sum of the row, accumulated in f64.
                    let p0: f64 = (0..=i).rev().map(|j| h.gates[i][j]).sum();
                    let row: f64 = h.gates[i].iter().sum();
                    assert!((row - p0).abs() < 1e-9);
                    let stored = h.positions[i][0];
                    assert!((stored - p0.min(3.0)).abs() < 1e-4, "{stored} vs {p0}");
                    clamped += usize::from(p0 > 3.0);
                }
            }
        }
    }
    // A 17-token input with p_max = 4 has to hit the clamp somewhere.
    assert!(clamped > 0);
}

#[test]
fn dumps_reject_non_cope_checkpoints() {
    let (_dir, ck) = train(
        "task=counting\ntask.max_ops=8\ndata.train_pool=50\ndata.eval_size=10\nmodel.d_model=8\nmodel.n_heads=2\n\
         model.n_layers=1\npe.kind=relative\ntrain.batch_size=2\ntrain.total_steps=2\ntrain.eval_every=2\n",
    );
    let err = dump_checkpoint(&ck, &[1, 2, 3], 0, 0, DumpMode::Gates).unwrap_err();
    assert!(matches!(err, cope_core::Error::Config(_)), "{err}");
}

#[test]
fn token_files_parse() {
    assert_eq!(read_tokens("3 1\n4 1 5\n").unwrap(), vec![3, 1, 4, 1, 5]);
    assert!(read_tokens("3 x").is_err());
    assert!(read_tokens("  \n").is_err());
}
