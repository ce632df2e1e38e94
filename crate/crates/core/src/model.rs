use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::encoders::{EncoderStack, Query};
use crate::error::Result;
use crate::fusion::FusionStack;
use crate::memory::PerceiverHead;
use crate::retriever::GateParams;
use crate::scalar::Scalar;

/// How knowledge values are produced from the base encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueHead {
    /// Latent cross-attention compression to `c` tokens.
    Perceiver,
    /// Ablation: keep the first `c` base-encoded tokens (zero-padded).
    FirstTokens,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub d_img: usize,
    pub vocab: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub base_layers: usize,
    pub head_layers: usize,
    pub perceiver_layers: usize,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    /// Compressed value length.
    pub c: usize,
    pub num_corpora: usize,
    /// Patches produced per image descriptor.
    pub patches: usize,
    pub tau: f64,
    pub value_head: ValueHead,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn toy() -> Self {
        Self {
            d: 32,
            d_img: 16,
            vocab: 1024,
            heads: 2,
            ff_mult: 2,
            base_layers: 2,
            head_layers: 1,
            perceiver_layers: 1,
            fusion_layers: 2,
            decoder_layers: 2,
            c: 4,
            num_corpora: 3,
            patches: 2,
            tau: 0.05,
            value_head: ValueHead::Perceiver,
            seed: 0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.d * self.ff_mult
    }

    /// Uniform init half-width `1/sqrt(d)`.
    pub fn init_bound(&self) -> f64 {
        1.0 / (self.d as f64).sqrt()
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// All stacks plus the parameter store they index into.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoders: EncoderStack,
    pub perceiver: PerceiverHead,
    pub gate: GateParams,
    pub fusion: FusionStack,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let encoders = EncoderStack::new(&mut params, &mut rng, &config);
        let perceiver = PerceiverHead::new(&mut params, &mut rng, &config);
        let gate = GateParams::new(&mut params, &mut rng, &config);
        let fusion = FusionStack::new(&mut params, &mut rng, &config);
        Self {
            config,
            params,
            encoders,
            perceiver,
            gate,
            fusion,
        }
    }

    /// `psi(b(z))` (or the first-tokens ablation) from a base encoding.
    pub fn value_from_base(&self, g: &mut Graph<T>, store: &ParamStore<T>, base: Var) -> Result<Var> {
        match self.config.value_head {
            ValueHead::Perceiver => self.perceiver.compress(g, store, base),
            ValueHead::FirstTokens => crate::memory::first_tokens(g, base, self.config.c),
        }
    }

    /// Key `[1,d]`, value `[c,d]` and base encoding of a knowledge input,
    /// tracked in `g` against `store`.
    pub fn encode_knowledge(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: &Query) -> Result<(Var, Var, Var)> {
        let base = self.encoders.base_encode(g, store, z)?;
        let key = self.encoders.key_embed_from_base(g, store, base)?;
        let value = self.value_from_base(g, store, base)?;
        Ok((key, value, base))
    }
}
