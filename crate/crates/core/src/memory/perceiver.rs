use rand::Rng;

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{Attention, Builder, LayerNorm, Mlp};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct PerceiverLayer {
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

/// Compresses a variable-length token sequence into `c` latent tokens.
#[derive(Clone, Debug)]
pub struct PerceiverHead {
    /// Learnable latent queries, `[c, d]`.
    pub latent: ParamId,
    pub input_norm: LayerNorm,
    pub layers: Vec<PerceiverLayer>,
}

impl PerceiverHead {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let mut b = Builder {
            store,
            rng,
            group: ParamGroup::Perceiver,
            bound: cfg.init_bound(),
        };
        let latent = b.weight("perceiver.latent", &[cfg.c, cfg.d]);
        let input_norm = LayerNorm::new(&mut b, "perceiver.ln_input", cfg.d);
        let layers = (0..cfg.perceiver_layers)
            .map(|l| {
                let n = format!("perceiver.layer{l}");
                PerceiverLayer {
                    ln_cross: LayerNorm::new(&mut b, &format!("{n}.ln_cross"), cfg.d),
                    cross_attn: Attention::new(&mut b, &format!("{n}.cross_attn"), cfg.d, cfg.heads),
                    ln_self: LayerNorm::new(&mut b, &format!("{n}.ln_self"), cfg.d),
                    self_attn: Attention::new(&mut b, &format!("{n}.self_attn"), cfg.d, cfg.heads),
                    ln_mlp: LayerNorm::new(&mut b, &format!("{n}.ln_mlp"), cfg.d),
                    mlp: Mlp::new(&mut b, &format!("{n}.mlp"), cfg.d, cfg.hidden()),
                }
            })
            .collect();
        Self {
            latent,
            input_norm,
            layers,
        }
    }

    pub fn latent_len<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.latent).rows()
    }

    /// `tokens [len, d] -> [c, d]`.
    ///
    /// `B = LN(tokens)`; per layer the latents cross-attend to `B`, then
    /// self-attend, then pass an MLP, each pre-norm with a residual.
    pub fn compress<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tokens: Var) -> Result<Var> {
        if g.value(tokens).rows() == 0 {
            return Err(Error::EmptyInput("perceiver input"));
        }
        let b = self.input_norm.forward(g, store, tokens)?;
        let mut z = g.param(store, self.latent);
        for layer in &self.layers {
            let q = layer.ln_cross.forward(g, store, z)?;
            let a = layer.cross_attn.forward(g, store, q, b, None)?;
            let zh = g.add(a, z)?;
            let s = layer.ln_self.forward(g, store, zh)?;
            let s = layer.self_attn.forward(g, store, s, s, None)?;
            let zh = g.add(s, zh)?;
            let m = layer.ln_mlp.forward(g, store, zh)?;
            let m = layer.mlp.forward(g, store, m)?;
            z = g.add(m, zh)?;
        }
        Ok(z)
    }
}

/// First-`c`-tokens value head: rows `0..c` of the base encoding, zero-padded.
pub fn first_tokens<T: Scalar>(g: &mut Graph<T>, base: Var, c: usize) -> Result<Var> {
    let (rows, d) = {
        let v = g.value(base);
        (v.rows(), v.last_dim())
    };
    if rows == 0 {
        return Err(Error::EmptyInput("value input"));
    }
    if rows >= c {
        return g.narrow(base, 0, 0, c);
    }
    let pad = g.constant(Tensor::zeros(vec![c - rows, d]));
    g.concat(&[base, pad], 0)
}
