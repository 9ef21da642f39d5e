//! Checkpoint files written by training round-trip exactly.

use std::fs;

use accord::checkpoint::{load_checkpoint, load_projector, save_checkpoint, save_projector, VERSION};
use accord::denoiser::DenoiserArch;
use accord::projector::{Projector, ProjectorSpec};
use accord::rng;
use accord::schedule::ScheduleSpec;
use accord::trainer::{pretrain, PretrainConfig};
use accord::world::{build_world, WorldSpec};
use accord::Error;

#[test]
fn pretrained_checkpoint_round_trips() {
    let world = build_world(&WorldSpec::default()).unwrap();
    let schedule = ScheduleSpec { steps: 10, ..Default::default() }.build().unwrap();
    let arch = DenoiserArch { embed_dim: 4, hidden: 8, time_dim: 4, ..Default::default() };
    let config = PretrainConfig { steps: 30, batch_size: 8, ..Default::default() };
    let params = pretrain(&world, &schedule, arch, &config, 2).unwrap().params;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    save_checkpoint(&params, "seed = 2", &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let (back, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(back, params);
    assert_eq!(meta, "seed = 2");
    save_checkpoint(&back, &meta, &path).unwrap();
    assert_eq!(fs::read(&path).unwrap(), bytes);

    fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));
    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
    fs::write(&path, &future).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointVersion { .. })));
    assert!(matches!(load_checkpoint(&dir.path().join("missing.ckpt")), Err(Error::Io(_))));
}

#[test]
fn projector_checkpoint_round_trips() {
    let proj = Projector::init(8, 2, &ProjectorSpec::default(), &mut rng::stream(1, "p")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("proj.ckpt");
    save_projector(&proj, "", &path).unwrap();
    assert_eq!(load_projector(&path).unwrap().0, proj);
    assert!(load_checkpoint(&path).is_err());
}
