use serde::{Deserialize, Serialize};

use super::{Ablation, Branch, EncoderParams, ModelConfig, ProjectionHead, TokenEmbedder};
use crate::data::Timestamp;
use crate::error::{Result, TigrError};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Rng, ShadowStore, TargetView, Tensor, Var};
use crate::spatiotemporal::{StParams, TrafficFeatures};

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub n_cells: usize,
    pub n_segments: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BranchInput {
    Table(TokenEmbedder),
    St(StParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchModel {
    pub branch: Branch,
    pub width: usize,
    pub input: BranchInput,
    pub encoder: EncoderParams,
    pub head: ProjectionHead,
}

/// Token sequences stacked back to back.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BranchBatch {
    pub ids: Vec<usize>,
    pub times: Vec<Timestamp>,
    pub lengths: Vec<usize>,
}

impl BranchBatch {
    pub fn push(&mut self, ids: &[usize], times: &[Timestamp]) {
        debug_assert_eq!(ids.len(), times.len());
        self.ids.extend_from_slice(ids);
        self.times.extend_from_slice(times);
        self.lengths.push(ids.len());
    }

    /// Number of sequences.
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Global row offsets of each sequence.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.lengths
            .iter()
            .map(|&l| {
                let o = off;
                off += l;
                o
            })
            .collect()
    }
}

/// Anchor parameters for every active branch plus EMA shadows of the
/// encoders and projection heads. The target path reads every other
/// parameter (embedders, spatio-temporal layers) from the anchor.
#[derive(Clone, Debug)]
pub struct TigrModel<T: Real = f32> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    pub shadow: ShadowStore<T>,
    pub branches: Vec<BranchModel>,
}

impl<T: Real> TigrModel<T> {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let cfg = &spec.config;
        cfg.validate()?;
        let mut rng = Rng::new(spec.seed);
        let mut store = ParamStore::new();
        let mut branches = Vec::new();
        for b in spec.ablation.branches.iter() {
            let d = cfg.width(b);
            let name = b.name();
            let input = match b {
                Branch::Grid => BranchInput::Table(TokenEmbedder::new(&mut store, "grid.embed", spec.n_cells, d, &mut rng)?),
                Branch::Road => BranchInput::Table(TokenEmbedder::new(&mut store, "road.embed", spec.n_segments, d, &mut rng)?),
                Branch::St => BranchInput::St(StParams::new(&mut store, "st", d, cfg.q, cfg.h_lma, &mut rng)?),
            };
            let encoder = EncoderParams::new(
                &mut store,
                &format!("{name}.encoder"),
                d,
                cfg.n_layers,
                cfg.h_enc,
                cfg.ffn_ratio,
                &mut rng,
            )?;
            let head = ProjectionHead::new(&mut store, &format!("{name}.head"), d, cfg.proj_dim, &mut rng)?;
            branches.push(BranchModel {
                branch: b,
                width: d,
                input,
                encoder,
                head,
            });
        }
        let shadowed: Vec<ParamId> = branches.iter().flat_map(|bm| Self::pair_ids(bm)).collect();
        let shadow = ShadowStore::mirror(&store, shadowed);
        Ok(TigrModel {
            spec,
            store,
            shadow,
            branches,
        })
    }

    fn pair_ids(bm: &BranchModel) -> Vec<ParamId> {
        let mut ids = bm.encoder.ids();
        ids.extend(bm.head.ids());
        ids
    }

    pub fn branch(&self, b: Branch) -> Option<&BranchModel> {
        self.branches.iter().find(|bm| bm.branch == b)
    }

    /// Width of the concatenated representation.
    pub fn embedding_dim(&self) -> usize {
        self.branches.iter().map(|bm| bm.width).sum()
    }

    pub fn target_view(&self) -> TargetView<'_, T> {
        TargetView {
            anchor: &self.store,
            shadow: &self.shadow,
        }
    }

    pub fn ema_update(&mut self) {
        self.shadow.ema_update(&self.store, self.spec.config.mu);
    }

    pub fn rope(&self) -> bool {
        !self.spec.ablation.no_rope
    }

    /// Unmasked token embeddings `T^b` for a batch (`N × d_b`).
    pub fn tokens(
        &self,
        g: &mut Graph<T>,
        bm: &BranchModel,
        batch: &BranchBatch,
        feats: Option<&TrafficFeatures>,
    ) -> Result<Var> {
        match &bm.input {
            BranchInput::Table(e) => e.embed(g, &batch.ids),
            BranchInput::St(p) => {
                let feats = feats.ok_or_else(|| TigrError::Contract("spatio-temporal branch needs traffic features".into()))?;
                p.forward(g, feats, &batch.ids, &batch.times, &batch.lengths, !self.spec.ablation.no_lma)
            }
        }
    }

    /// Mean-pooled encoder output (`B × d_b`).
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        bm: &BranchModel,
        tokens: Var,
        lengths: &[usize],
        dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let p = self.spec.config.dropout;
        super::encode_batch(g, &bm.encoder, tokens, lengths, self.rope(), dropout.map(|r| (p, r)))
    }

    /// Inference representation `z = z^g || z^r || z^st` (`B × d`) using the
    /// anchor encoders, without masking, dropout or projection. The road
    /// batch also drives the spatio-temporal branch.
    pub fn embed(&self, grid: &BranchBatch, road: &BranchBatch, feats: Option<&TrafficFeatures>) -> Result<Tensor<T>> {
        if grid.len() != road.len() {
            return Err(TigrError::Contract(format!(
                "grid batch has {} sequences, road batch {}",
                grid.len(),
                road.len()
            )));
        }
        let mut g = Graph::frozen(&self.store);
        let mut parts = Vec::new();
        for bm in &self.branches {
            let batch = if bm.branch == Branch::Grid { grid } else { road };
            let t = self.tokens(&mut g, bm, batch, feats)?;
            parts.push(self.encode(&mut g, bm, t, &batch.lengths, None)?);
        }
        let z = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
        let z = g.value(z).clone();
        if !z.is_finite() {
            return Err(TigrError::NonFinite("trajectory representation".into()));
        }
        Ok(z)
    }

    pub fn cast<U: Real>(&self) -> TigrModel<U> {
        TigrModel {
            spec: self.spec.clone(),
            store: self.store.cast(),
            shadow: self.shadow.cast(),
            branches: self.branches.clone(),
        }
    }
}
