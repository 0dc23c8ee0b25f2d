use std::path::Path;

use candle_core::DType;
use haze_core::checkpoint::Checkpoint;
use haze_core::grid::{read_table, run_k_grid, run_lr_grid, GridPlan, K_TABLE_HEADER, LR_TABLE_HEADER};
use haze_core::synth::{write_toy_dataset, ToyDatasetSpec};

fn toy(root: &Path) {
    write_toy_dataset(
        root,
        &ToyDatasetSpec {
            unpaired: 4,
            test: 2,
            ..ToyDatasetSpec::default()
        },
    )
    .unwrap();
}

fn quick_plan(data: &Path, out: &Path) -> GridPlan {
    let mut plan = GridPlan::smoke(data, out, 3);
    plan.pretrain.epochs = 1;
    plan.pretrain.eval_every = 0;
    plan.cyclegan.epochs = 1;
    plan.cyclegan.eval_every = 0;
    plan.finetune.epochs = 1;
    plan.finetune.eval_every = 0;
    plan
}

#[test]
fn k_grid_emits_five_rows_and_loadable_variants() {
    let data = tempfile::tempdir().unwrap();
    toy(data.path());
    let out = tempfile::tempdir().unwrap();
    let plan = quick_plan(data.path(), out.path());
    let report = run_k_grid(&plan).unwrap();
    assert!(report.is_complete(), "{:?}", report.failures);
    let (header, rows) = read_table(&report.table).unwrap();
    assert_eq!(header, K_TABLE_HEADER);
    let labels: Vec<_> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(labels, ["25", "20", "10", "5", "0"]);
    for row in &report.rows {
        let name = row.checkpoint.file_name().unwrap().to_str().unwrap();
        assert!(name.starts_with(&format!("finetune_k{}_", row.label)), "{name}");
        Checkpoint::load(&row.checkpoint).unwrap().generator(DType::F32).unwrap();
    }

    let again = tempfile::tempdir().unwrap();
    let second = run_k_grid(&quick_plan(data.path(), again.path())).unwrap();
    assert_eq!(read_table(&second.table).unwrap(), (header, rows));
}

#[test]
fn failing_cell_does_not_stop_the_grid() {
    let data = tempfile::tempdir().unwrap();
    toy(data.path());
    let out = tempfile::tempdir().unwrap();
    let mut plan = quick_plan(data.path(), out.path());
    plan.ks = vec![5, 7, 0];
    let report = run_k_grid(&plan).unwrap();
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].label, "7");
    assert_eq!(report.rows.len(), 2);
}

#[test]
fn lr_grid_uses_learning_rate_layout() {
    let data = tempfile::tempdir().unwrap();
    toy(data.path());
    let out = tempfile::tempdir().unwrap();
    let plan = quick_plan(data.path(), out.path());
    let report = run_lr_grid(&plan, &[1e-4, 1e-3, 1e-2]).unwrap();
    let (header, rows) = read_table(&report.table).unwrap();
    assert_eq!(header, LR_TABLE_HEADER);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][0], "0.001");
}
