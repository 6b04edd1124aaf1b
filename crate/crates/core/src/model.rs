//! Encoder and decoder parameters bundled into one reconstruction model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode_candidates, decode_stage, Candidates, DecoderConfig, DecoderParams, StagePoint};
use crate::diff::{Bound, Graph, ParamStore};
use crate::encoder::{encode, EncoderConfig, EncoderOutput, EncoderParams};
use crate::error::Result;
use crate::geometry::NormalizedScene;
use crate::scene::{GaussianScene, SceneVars};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

/// Everything recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub encoded: EncoderOutput,
    pub candidates: Candidates,
    pub scene: SceneVars,
}

impl Model {
    /// Registers and initializes every parameter from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, &config.encoder, &mut rng)?;
        let decoder = DecoderParams::new(&mut store, config.encoder.width, &mut rng)?;
        Ok(Self { config, store, encoder, decoder })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, scene: &NormalizedScene, point: StagePoint) -> Result<Forward> {
        let encoded = encode(g, p, &self.encoder, &self.config.encoder, scene)?;
        let candidates = decode_candidates(g, p, &self.decoder, &self.config.decoder, encoded.geo, encoded.app)?;
        let decoded = decode_stage(g, &candidates, point, self.config.decoder.tau)?;
        Ok(Forward { encoded, candidates, scene: decoded })
    }

    /// Inference-only reconstruction in the canonical frame.
    pub fn reconstruct(&self, scene: &NormalizedScene, point: StagePoint) -> Result<GaussianScene> {
        Ok(self.reconstruct_profiled(scene, point)?.0)
    }

    /// Also returns the bytes held by the inference graph, a peak-memory proxy.
    pub fn reconstruct_profiled(&self, scene: &NormalizedScene, point: StagePoint) -> Result<(GaussianScene, usize)> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let f = self.forward(&mut g, &p, scene, point)?;
        Ok((f.scene.to_scene(&g), g.storage_bytes()))
    }
}
