use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Metrics, TrajectoryRepresentation};
use crate::error::{Result, TigrError};

/// Leading bytes of an embedding file. The header continues with the
/// count and width as little-endian `u32`, then `count × width` `f32`
/// values, then one id per line.
pub const EMBEDDING_MAGIC: &[u8; 8] = b"TIGREMB1";

pub fn write_embeddings(path: &Path, reps: &[TrajectoryRepresentation]) -> Result<()> {
    let dim = reps.first().map_or(0, |r| r.z.len());
    if let Some(r) = reps.iter().find(|r| r.z.len() != dim) {
        return Err(TigrError::Data(format!("embedding {} has width {}, expected {dim}", r.id, r.z.len())));
    }
    if let Some(r) = reps.iter().find(|r| r.id.contains('\n')) {
        return Err(TigrError::Data(format!("trajectory id {:?} contains a newline", r.id)));
    }
    let io = |e| TigrError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(EMBEDDING_MAGIC).map_err(io)?;
    w.write_all(&(reps.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    for r in reps {
        for v in &r.z {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    for r in reps {
        writeln!(w, "{}", r.id).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<TrajectoryRepresentation>> {
    let io = |e| TigrError::io(path, e);
    let bad = |reason: &str| TigrError::Parse {
        path: path.display().to_string(),
        line: 0,
        reason: reason.into(),
    };
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..8] != EMBEDDING_MAGIC {
        return Err(bad("not an embedding file"));
    }
    let n = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; n * dim * 4];
    r.read_exact(&mut buf).map_err(|_| bad("truncated values"))?;
    let values: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let ids: Vec<String> = r.lines().collect::<std::io::Result<_>>().map_err(io)?;
    if ids.len() != n {
        return Err(bad(&format!("{} ids for {n} embeddings", ids.len())));
    }
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| TrajectoryRepresentation {
            id,
            z: values[i * dim..(i + 1) * dim].to_vec(),
        })
        .collect())
}

/// Contents of a per-task metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub dataset: String,
    pub seed: u64,
    pub metrics: Metrics,
    pub baseline: Metrics,
    pub config_hash: String,
}

pub fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| TigrError::io(path, e))
}

/// One configuration of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config: String,
    #[serde(rename = "HR@1")]
    pub hr1: f64,
    #[serde(rename = "HR@5")]
    pub hr5: f64,
    #[serde(rename = "MR")]
    pub mr: f64,
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| TigrError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.bin");
        let reps = vec![
            TrajectoryRepresentation { id: "a".into(), z: vec![1.5, -0.0, f32::MIN_POSITIVE] },
            TrajectoryRepresentation { id: "b c".into(), z: vec![3.0, 2.0, 1.0] },
        ];
        write_embeddings(&p, &reps).unwrap();
        let back = read_embeddings(&p).unwrap();
        assert_eq!(back, reps);
        assert_eq!(back[0].z[1].to_bits(), (-0.0f32).to_bits());

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..20]).unwrap();
        assert!(read_embeddings(&p).is_err());
        let ragged = vec![reps[0].clone(), TrajectoryRepresentation { id: "x".into(), z: vec![1.0] }];
        assert!(write_embeddings(&p, &ragged).is_err());
    }

    #[test]
    fn sweep_and_metrics_formats() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_sweep_csv(&p, &[SweepRow { config: "k_neg=100".into(), hr1: 0.5, hr5: 0.75, mr: 3.25 }]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "config,HR@1,HR@5,MR\nk_neg=100,0.5,0.75,3.25\n");

        let m = dir.path().join("m.json");
        let report = MetricsReport {
            task: "ts".into(),
            dataset: "synthetic".into(),
            seed: 7,
            metrics: [("mr".to_string(), 1.0)].into(),
            baseline: Metrics::new(),
            config_hash: "abc".into(),
        };
        write_metrics(&m, &report).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&m).unwrap()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["baseline", "config_hash", "dataset", "metrics", "seed", "task"]);
    }
}
