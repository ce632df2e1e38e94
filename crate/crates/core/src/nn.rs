//! Pre-norm transformer building blocks shared by the encoders, the value
//! compressor, the fusion stack and the decoder.

use rand::Rng;

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Additive bias used to exclude attention positions.
pub const MASKED_LOGIT: f64 = -1e9;

/// Parameter-construction context: store, group tag and a name prefix.
pub struct Builder<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub group: ParamGroup,
    pub bound: f64,
}

impl<'a, T: Scalar, R: Rng> Builder<'a, T, R> {
    pub fn weight(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add_uniform(name, self.group, shape, self.bound, self.rng)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, self.group, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, self.group, Tensor::ones(shape.to_vec()))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        Self {
            weight: b.weight(&format!("{name}.w"), &[inp, out]),
            bias: bias.then(|| b.zeros(&format!("{name}.b"), &[out])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, d: usize) -> Self {
        Self {
            gamma: b.ones(&format!("{name}.gamma"), &[d]),
            beta: b.zeros(&format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, d: usize, heads: usize) -> Self {
        assert!(heads >= 1 && d % heads == 0, "d={d} not divisible by heads={heads}");
        Self {
            q: Linear::new(b, &format!("{name}.q"), d, d, false),
            k: Linear::new(b, &format!("{name}.k"), d, d, false),
            v: Linear::new(b, &format!("{name}.v"), d, d, false),
            o: Linear::new(b, &format!("{name}.o"), d, d, true),
            heads,
            d,
        }
    }

    /// `queries [n,d]` attend over `context [m,d]`. `bias`, when given, is an
    /// additive `[n,m]` logit bias (e.g. a causal mask).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        context: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, queries)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.narrow(q, 1, h * dh, dh)?, g.narrow(k, 1, h * dh, dh)?, g.narrow(v, 1, h * dh, dh)?)
            };
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let mut logits = g.scale(logits, scale)?;
            if let Some(b) = bias {
                logits = g.add(logits, b)?;
            }
            let attn = g.softmax(logits)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let merged = g.concat(&outs, 1)?;
        self.o.forward(g, store, merged)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(b, &format!("{name}.up"), d, hidden, true),
            down: Linear::new(b, &format!("{name}.down"), hidden, d, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, store, h)
    }
}

/// `x + Attn(LN(x))`, then `+ MLP(LN(.))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, d: usize, heads: usize, hidden: usize) -> Self {
        Self {
            ln_attn: LayerNorm::new(b, &format!("{name}.ln_attn"), d),
            attn: Attention::new(b, &format!("{name}.attn"), d, heads),
            ln_mlp: LayerNorm::new(b, &format!("{name}.ln_mlp"), d),
            mlp: Mlp::new(b, &format!("{name}.mlp"), d, hidden),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.ln_attn.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, None)?;
        let x = g.add(x, a)?;
        let h = self.ln_mlp.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}

/// Causal self-attention, cross-attention to a memory, MLP; all pre-norm.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderLayer {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, d: usize, heads: usize, hidden: usize) -> Self {
        Self {
            ln_self: LayerNorm::new(b, &format!("{name}.ln_self"), d),
            self_attn: Attention::new(b, &format!("{name}.self_attn"), d, heads),
            ln_cross: LayerNorm::new(b, &format!("{name}.ln_cross"), d),
            cross_attn: Attention::new(b, &format!("{name}.cross_attn"), d, heads),
            ln_mlp: LayerNorm::new(b, &format!("{name}.ln_mlp"), d),
            mlp: Mlp::new(b, &format!("{name}.mlp"), d, hidden),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        memory: Var,
        causal: Var,
    ) -> Result<Var> {
        let h = self.ln_self.forward(g, store, x)?;
        let a = self.self_attn.forward(g, store, h, h, Some(causal))?;
        let x = g.add(x, a)?;
        let h = self.ln_cross.forward(g, store, x)?;
        let c = self.cross_attn.forward(g, store, h, memory, None)?;
        let x = g.add(x, c)?;
        let h = self.ln_mlp.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}

/// Sinusoidal position table `[n, d]`, rows for positions `offset..offset+n`.
pub fn sinusoidal<T: Scalar>(n: usize, d: usize, offset: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * d);
    for p in offset..offset + n {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * freq;
            data.push(T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![n, d], data).expect("position table shape")
}

/// `[n, n]` additive mask blocking attention to later positions.
pub fn causal_bias<T: Scalar>(n: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = T::lit(MASKED_LOGIT);
        }
    }
    Tensor::new(vec![n, n], data).expect("causal mask shape")
}
