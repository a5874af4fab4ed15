use std::path::Path;

use serde::Serialize;

use super::{train_step, LossReport, Queues, TrainConfig};
use crate::data::TrajectoryRecord;
use crate::encoder::{save_checkpoint, TigrModel};
use crate::error::{Result, TigrError};
use crate::masking::MaskingConfig;
use crate::numerics::{Adam, Rng};
use crate::spatiotemporal::TrafficFeatures;

pub const LOSS_HEADER: [&str; 5] = ["epoch", "step", "intra", "inter", "total"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRow {
    pub epoch: usize,
    pub step: u64,
    pub intra: f64,
    pub inter: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub rows: Vec<LossRow>,
    /// Mean total loss per epoch.
    pub epoch_means: Vec<f64>,
    pub adam: Adam<f32>,
    pub queues: Queues<f32>,
}

const SHUFFLE_TAG: u64 = 0x5348_5546;
const STEP_TAG: u64 = 0x5354_4550;

/// Trains `model` for `cfg.epochs` shuffled epochs. A final partial batch
/// of one trajectory is dropped.
///
/// With `out` set, writes `loss.csv`, `checkpoints/epoch-<e>/` after every
/// epoch and `checkpoint/` holding the latest state (the initial state when
/// no epoch runs).
pub fn pretrain(
    model: &mut TigrModel<f32>,
    records: &[TrajectoryRecord],
    cfg: &TrainConfig,
    masking: &MaskingConfig,
    feats: Option<&TrafficFeatures>,
    out: Option<&Path>,
    run: &serde_json::Value,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    masking.validate()?;
    if records.len() < 2 {
        return Err(TigrError::Data(format!("{} training trajectories; need at least 2", records.len())));
    }
    let root = Rng::new(cfg.seed);
    let mut adam = Adam::new(&model.store, cfg.lr);
    let mut queues = Queues::new(model.branches.iter().map(|b| b.branch), cfg.queue, model.spec.config.proj_dim);
    let mut rows = Vec::new();
    let mut epoch_means = Vec::new();
    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| TigrError::io(dir, e))?;
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .terminator(csv::Terminator::Any(b'\n'))
                .from_path(dir.join("loss.csv"))?;
            w.write_record(LOSS_HEADER)?;
            w.flush().map_err(|e| TigrError::io(dir.join("loss.csv"), e))?;
            Some(w)
        }
        None => None,
    };

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        root.derive(SHUFFLE_TAG + epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&TrajectoryRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let step_rng = root.derive(STEP_TAG + adam.step);
            let r: LossReport = train_step(model, &mut adam, &mut queues, &batch, cfg, masking, feats, &step_rng)?;
            let row = LossRow {
                epoch,
                step: adam.step,
                intra: r.intra,
                inter: r.inter,
                total: r.total,
            };
            if let Some(w) = writer.as_mut() {
                w.serialize(&row)?;
            }
            log::debug!("epoch {epoch} step {}: total {:.5}", row.step, row.total);
            sum += r.total;
            steps += 1;
            rows.push(row);
        }
        let mean = sum / steps.max(1) as f64;
        log::info!("epoch {epoch}: mean loss {mean:.5} over {steps} steps");
        epoch_means.push(mean);
        if let Some(dir) = out {
            if let Some(w) = writer.as_mut() {
                w.flush().map_err(|e| TigrError::io(dir.join("loss.csv"), e))?;
            }
            save_checkpoint(&dir.join("checkpoints").join(format!("epoch-{epoch}")), model, Some(&adam), adam.step, run)?;
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&dir.join("checkpoint"), model, Some(&adam), adam.step, run)?;
    }
    Ok(PretrainOutput {
        rows,
        epoch_means,
        adam,
        queues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{load_checkpoint, ModelSpec};
    use crate::training::step::tests::{features, record, tiny};

    fn data(n: usize) -> Vec<TrajectoryRecord> {
        let mut rng = Rng::new(21);
        (0..n).map(|i| record(i, &mut rng, 12, 9, 5 + i % 4)).collect()
    }

    fn spec_cfg() -> (ModelSpec, TrainConfig, TrafficFeatures) {
        let (spec, mut cfg) = tiny(0.5);
        cfg.epochs = 2;
        cfg.seed = 4;
        let feats = features(spec.n_segments, &mut Rng::new(2));
        (spec, cfg, feats)
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let (spec, cfg, feats) = spec_cfg();
        let mut model = TigrModel::<f32>::new(spec).unwrap();
        let initial = model.store.clone();
        let cfg = TrainConfig { epochs: 0, ..cfg };
        let out = pretrain(&mut model, &data(8), &cfg, &MaskingConfig::default(), Some(&feats), Some(dir.path()), &serde_json::Value::Null).unwrap();
        assert!(out.rows.is_empty());
        assert!(!dir.path().join("checkpoints").exists());
        let c = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
        assert_eq!(c.step, 0);
        for (id, p) in initial.iter() {
            assert_eq!(c.model.store.get(id).value, p.value);
        }
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv, "epoch,step,intra,inter,total\n");
    }

    #[test]
    fn deterministic_loss_csv() {
        let run = |dir: &Path| {
            let (spec, cfg, feats) = spec_cfg();
            let mut model = TigrModel::<f32>::new(spec).unwrap();
            pretrain(&mut model, &data(10), &cfg, &MaskingConfig::default(), Some(&feats), Some(dir), &serde_json::Value::Null).unwrap();
            std::fs::read(dir.join("loss.csv")).unwrap()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (ca, cb) = (run(a.path()), run(b.path()));
        assert_eq!(ca, cb);
        let text = String::from_utf8(ca).unwrap();
        // 10 records, batch 4: chunks of 4, 4, 2 → 3 steps per epoch
        assert_eq!(text.lines().count(), 1 + 6);
        assert!(a.path().join("checkpoints/epoch-2/manifest.json").exists());
    }
}
