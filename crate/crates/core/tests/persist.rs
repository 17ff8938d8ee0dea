use mvpr_core::config::RunConfig;
use mvpr_core::persist::{checkpoint_bytes, load_checkpoint, save_checkpoint};
use mvpr_core::synthworld::{generate_world, render_database, RenderConfig};
use mvpr_core::trainer::{initialize, train, train_epoch, Dataset};
use mvpr_core::Error;

fn setup(seed: u64) -> (RunConfig, Dataset) {
    let mut cfg = RunConfig::default();
    for kv in ["epochs=4", "iterations_per_epoch=6", "batch_size=8", "group_count=2", "recluster_fraction=0.5", "lr_encoder=0.001", "num_cells=6"] {
        cfg.apply_override(kv).unwrap();
    }
    cfg.apply_override(&format!("seed={seed}")).unwrap();
    let world = generate_world(&cfg.world).unwrap();
    let data = Dataset::new(render_database(&world, &RenderConfig::default()).unwrap(), cfg.train.cell_size).unwrap();
    (cfg, data)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (cfg, data) = setup(3);
    let mut state = initialize(&data, &cfg.train).unwrap();
    train_epoch(&mut state, &data, &cfg.train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &cfg, &state, false).unwrap();
    let (cfg2, state2) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(state2, state);
    assert_eq!(checkpoint_bytes(&cfg2, &state2), std::fs::read(&path).unwrap());
    assert!(matches!(save_checkpoint(&path, &cfg, &state, false), Err(Error::Exists(_))));
}

#[test]
fn resumed_run_equals_straight_run() {
    let (cfg, data) = setup(8);
    let mut straight = initialize(&data, &cfg.train).unwrap();
    train(&mut straight, &data, &cfg.train).unwrap();

    let mut first = initialize(&data, &cfg.train).unwrap();
    train_epoch(&mut first, &data, &cfg.train).unwrap();
    train_epoch(&mut first, &data, &cfg.train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &cfg, &first, false).unwrap();
    drop(first);

    let (cfg2, mut resumed) = load_checkpoint(&path).unwrap();
    train(&mut resumed, &data, &cfg2.train).unwrap();
    assert_eq!(resumed.epoch, 4);
    assert_eq!(resumed, straight);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (cfg, data) = setup(1);
    let state = initialize(&data, &cfg.train).unwrap();
    let bytes = checkpoint_bytes(&cfg, &state);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    for bad in [bytes[..bytes.len() - 3].to_vec(), b"NOTACKPT".to_vec(), { let mut b = bytes.clone(); b[8] = 9; b }] {
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
