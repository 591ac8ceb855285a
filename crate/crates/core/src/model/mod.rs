//! The promptable segmentation network.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod prompt;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spine_neural::{checkpoint, DType, ParamStore, Scalar, Tape, Tensor, Var};

pub use config::ModelConfig;
pub use decoder::{Decoder, DecoderOut};
pub use encoder::{patchify, replicate_channels, Encoder, EncoderOut};
pub use prompt::{dense_pe, fourier_features, Point, PointLabel, PromptBox, PromptEncoder, PromptSet};

use crate::error::{CoreError, Result};

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    EncoderBase,
    Lora,
    Cbam,
    Prompt,
    Decoder,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        match name.split('.').next() {
            Some("lora") => ParamGroup::Lora,
            Some("cbam") => ParamGroup::Cbam,
            Some("prompt") => ParamGroup::Prompt,
            Some("decoder") => ParamGroup::Decoder,
            _ => ParamGroup::EncoderBase,
        }
    }
}

pub fn is_decoder_param(name: &str) -> bool {
    ParamGroup::of(name) == ParamGroup::Decoder
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub by_group: BTreeMap<ParamGroup, usize>,
    pub trainable_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskCandidate {
    pub height: usize,
    pub width: usize,
    pub prob_map: Vec<f64>,
    pub confidence: f64,
    pub threshold: f64,
}

impl MaskCandidate {
    pub fn binary(&self) -> Vec<bool> {
        self.prob_map.iter().map(|&p| p >= self.threshold).collect()
    }
}

/// Index of the most confident candidate; ties go to the lowest index.
pub fn rank_and_select(candidates: &[MaskCandidate]) -> Result<usize> {
    let confidences: Vec<f64> = candidates.iter().map(|c| c.confidence).collect();
    argmax_first(&confidences).ok_or_else(|| CoreError::Empty("no mask candidates to rank".into()))
}

pub(crate) fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub candidates: Vec<MaskCandidate>,
    pub selected: usize,
}

impl Prediction {
    pub fn best(&self) -> &MaskCandidate {
        &self.candidates[self.selected]
    }
}

/// Graph handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub embedding: Var,
    pub out: DecoderOut,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub prompt: PromptEncoder,
    pub decoder: Decoder,
}

impl SegModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &cfg, &mut rng)?;
        let prompt = PromptEncoder::new(&mut store, cfg.embed_dim, cfg.input_size, cfg.pe_max_freq, &mut rng);
        let decoder = Decoder::new(&mut store, &cfg, &mut rng);
        Ok(Self {
            cfg,
            store,
            encoder,
            prompt,
            decoder,
        })
    }

    pub fn param_report(&self) -> ParamReport {
        let mut by_group = BTreeMap::new();
        for (name, p) in self.store.iter() {
            *by_group.entry(ParamGroup::of(name)).or_insert(0) += p.value.numel();
        }
        let total = self.store.count();
        let trainable = self.store.trainable_count();
        ParamReport {
            total,
            trainable,
            frozen: total - trainable,
            by_group,
            trainable_fraction: trainable as f64 / total as f64,
        }
    }

    fn check_image<T: Scalar>(&self, image: &Tensor<T>) -> Result<()> {
        let s = self.cfg.input_size;
        if image.shape() != [s, s] {
            return Err(CoreError::Shape(format!(
                "model expects a {s}x{s} slice, got {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Encoder output `F'` as a graph node.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, image: &Tensor<T>, use_lora: bool) -> Result<EncoderOut> {
        self.encoder.forward(tape, &self.store, image, use_lora)
    }

    /// Prompt encoding and mask decoding on top of an embedding node.
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        embedding: Var,
        image: &Tensor<T>,
        prompts: &PromptSet,
    ) -> Result<DecoderOut> {
        self.check_image(image)?;
        let s = self.cfg.input_size;
        let p = self.prompt.forward(tape, &self.store, prompts)?;
        let pe = tape.constant(dense_pe(self.cfg.grid(), self.cfg.embed_dim, self.cfg.pe_max_freq).cast());
        let skip = tape.constant(image.clone().reshape(vec![1, s, s])?);
        self.decoder.forward(tape, &self.store, embedding, p, pe, skip)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, image: &Tensor<T>, prompts: &PromptSet) -> Result<ForwardVars> {
        self.check_image(image)?;
        let enc = self.encode(tape, image, true)?;
        let out = self.decode(tape, enc.refined, image, prompts)?;
        Ok(ForwardVars {
            embedding: enc.refined,
            out,
        })
    }

    /// `F'` evaluated eagerly, suitable for caching.
    pub fn embed<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, image, true)?;
        Ok(tape.value(enc.refined).clone())
    }

    pub fn predict_with_embedding<T: Scalar>(
        &self,
        embedding: &Tensor<T>,
        image: &Tensor<T>,
        prompts: &PromptSet,
    ) -> Result<Prediction> {
        let mut tape = Tape::new();
        let e = tape.constant(embedding.clone());
        let out = self.decode(&mut tape, e, image, prompts)?;
        Ok(self.collect(&tape, out))
    }

    pub fn predict<T: Scalar>(&self, image: &Tensor<T>, prompts: &PromptSet) -> Result<Prediction> {
        let emb = self.embed(image)?;
        self.predict_with_embedding(&emb, image, prompts)
    }

    /// Read candidates out of a finished forward pass.
    pub fn collect<T: Scalar>(&self, tape: &Tape<T>, out: DecoderOut) -> Prediction {
        let s = self.cfg.input_size;
        let probs = tape.value(out.probs).to_f64_vec();
        let conf = tape.value(out.confidence).to_f64_vec();
        let candidates: Vec<MaskCandidate> = conf
            .iter()
            .enumerate()
            .map(|(k, &c)| MaskCandidate {
                height: s,
                width: s,
                prob_map: probs[k * s * s..(k + 1) * s * s].to_vec(),
                confidence: c,
                threshold: 0.5,
            })
            .collect();
        let selected = rank_and_select(&candidates).expect("K >= 1");
        Prediction { candidates, selected }
    }

    /// Write the parameters plus a `model.json` sidecar holding the config.
    pub fn save(&self, path: impl AsRef<Path>, metadata: &BTreeMap<String, String>) -> Result<()> {
        let path = path.as_ref();
        checkpoint::save(&self.store, path, DType::F64, metadata)?;
        std::fs::write(sidecar(path), serde_json::to_vec_pretty(&self.cfg)?)?;
        Ok(())
    }

    /// Load a checkpoint written by [`SegModel::save`], validating the config.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg: ModelConfig = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
        let mut model = Self::new(cfg, 0)?;
        checkpoint::load_into(&mut model.store, path)?;
        Ok(model)
    }
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    path.with_file_name("model.json")
}
