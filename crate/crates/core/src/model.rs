use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionParams;
use crate::config::ModelConfig;
use crate::datamodel::Vocabulary;
use crate::decoder::DecoderParams;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// All learned weights plus the resolved handles each component uses.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: EncoderParams,
    pub attention: AttentionParams,
    pub decoder: DecoderParams,
}

impl Model {
    /// Freshly initialized weights; parameter creation order (and so
    /// checkpoint order) is encoder, attention, decoder.
    pub fn new(config: &ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = EncoderParams::create(
            &mut params,
            &config.encoder,
            config.scenario,
            vocab.keys.len(),
            vocab.values.len(),
            &mut rng,
        )?;
        let attention = AttentionParams::create(&mut params, config, &mut rng)?;
        let decoder = DecoderParams::create(&mut params, config, vocab.words.len(), &mut rng)?;
        Ok(Self { config: config.clone(), params, encoder, attention, decoder })
    }

    /// Wraps loaded weights, checking that every expected parameter exists.
    pub fn from_params(config: &ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::resolve(&params, &config.encoder, config.scenario)?;
        let attention = AttentionParams::resolve(&params, config.scenario)?;
        let decoder = DecoderParams::resolve(&params, config)?;
        let model = Self { config: config.clone(), params, encoder, attention, decoder };
        let expected = Self::count_expected(config, &model)?;
        if expected != model.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} parameters, the {} model needs {expected}",
                model.params.len(),
                config.scenario
            )));
        }
        Ok(model)
    }

    fn count_expected(config: &ModelConfig, model: &Model) -> Result<usize> {
        let vocab_shape = |id| model.params.value(id).rows();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut probe = ParamStore::new();
        EncoderParams::create(
            &mut probe,
            &config.encoder,
            config.scenario,
            vocab_shape(model.encoder.key_embed),
            vocab_shape(model.encoder.value_embed),
            &mut rng,
        )?;
        AttentionParams::create(&mut probe, config, &mut rng)?;
        DecoderParams::create(&mut probe, config, vocab_shape(model.decoder.word_embed), &mut rng)?;
        for (_, p) in probe.iter() {
            let id = model.params.id(&p.name)?;
            if model.params.value(id).shape() != p.value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    model.params.value(id).shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(probe.len())
    }

    pub fn vocab_size(&self) -> usize {
        self.params.value(self.decoder.word_embed).rows()
    }
}
