//! Attentive fusion of query tokens with retrieved knowledge values, and the
//! autoregressive decoder that reads the fused sequence.
//!
//! The fused input is `X = [b(x); v_1; ...; v_K]` of length `I + c*K`. Every
//! fusion layer computes
//!
//! ```text
//! H = mask * LN(X)            (row i scaled by mask[i])
//! H = SelfAttn(H) + X
//! X = MLP(LN(H)) + H
//! ```
//!
//! where `mask = [1 x I, p_1 x c, ..., p_K x c]`. Because the retrieval
//! probabilities scale the knowledge rows before attention, the loss is
//! differentiable with respect to them, which is the only path by which the
//! gate and query head receive gradient from generation.

use rand::Rng;

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{causal_bias, sinusoidal, Attention, Builder, DecoderLayer, LayerNorm, Mlp};
use crate::scalar::Scalar;

/// `[1 x query_len, p_1 x c, ..., p_K x c]`.
pub fn build_attention_mask<T: Scalar>(topk_probs: &[T], query_len: usize, c: usize) -> Result<Vec<T>> {
    if topk_probs.is_empty() {
        return Err(Error::EmptyInput("retrieval probabilities"));
    }
    let total: f64 = topk_probs.iter().map(|p| p.as_f64()).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("retrieval probabilities sum to {total}, not 1")));
    }
    let mut mask = vec![T::one(); query_len];
    for p in topk_probs {
        mask.extend(std::iter::repeat(*p).take(c));
    }
    Ok(mask)
}

/// Differentiable mask from a `[K]` probability node.
pub fn mask_var<T: Scalar>(g: &mut Graph<T>, probs: Var, query_len: usize, c: usize) -> Result<Var> {
    let k = g.value(probs).len();
    let probs = g.reshape(probs, vec![k])?;
    let idx: Vec<usize> = (0..k).flat_map(|i| std::iter::repeat(i).take(c)).collect();
    let knowledge = g.gather(probs, idx)?;
    if query_len == 0 {
        return Ok(knowledge);
    }
    let ones = g.constant(Tensor::ones(vec![query_len]));
    g.concat(&[ones, knowledge], 0)
}

#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl FusionLayer {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mask: Option<Var>) -> Result<Var> {
        let mut h = self.ln_attn.forward(g, store, x)?;
        if let Some(m) = mask {
            h = g.scale_rows(h, m)?;
        }
        let a = self.attn.forward(g, store, h, h, None)?;
        let h = g.add(a, x)?;
        let n = self.ln_mlp.forward(g, store, h)?;
        let m = self.mlp.forward(g, store, n)?;
        g.add(m, h)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embedding: ParamId,
    pub bos: ParamId,
    pub fused_norm: LayerNorm,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub output_projection: ParamId,
}

/// Fusion layers plus decoder.
#[derive(Clone, Debug)]
pub struct FusionStack {
    /// Added to every knowledge block; carries within-block position only.
    pub knowledge_segment: ParamId,
    pub layers: Vec<FusionLayer>,
    pub decoder: Decoder,
    pub c: usize,
    pub d: usize,
    pub vocab: usize,
}

impl FusionStack {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let (d, h, hidden) = (cfg.d, cfg.heads, cfg.hidden());
        let mut b = Builder {
            store,
            rng,
            group: ParamGroup::Fusion,
            bound: cfg.init_bound(),
        };
        let knowledge_segment = b.weight("fusion.segment", &[cfg.c, d]);
        let layers = (0..cfg.fusion_layers)
            .map(|i| {
                let name = format!("fusion.{i}");
                FusionLayer {
                    ln_attn: LayerNorm::new(&mut b, &format!("{name}.ln_attn"), d),
                    attn: Attention::new(&mut b, &format!("{name}.attn"), d, h),
                    ln_mlp: LayerNorm::new(&mut b, &format!("{name}.ln_mlp"), d),
                    mlp: Mlp::new(&mut b, &format!("{name}.mlp"), d, hidden),
                }
            })
            .collect();
        b.group = ParamGroup::Decoder;
        let decoder = Decoder {
            embedding: b.weight("decoder.embedding", &[cfg.vocab, d]),
            bos: b.weight("decoder.bos", &[1, d]),
            fused_norm: LayerNorm::new(&mut b, "decoder.fused_norm", d),
            layers: (0..cfg.decoder_layers)
                .map(|i| DecoderLayer::new(&mut b, &format!("decoder.{i}"), d, h, hidden))
                .collect(),
            final_norm: LayerNorm::new(&mut b, "decoder.final_norm", d),
            output_projection: b.weight("decoder.out", &[d, cfg.vocab]),
        };
        Self {
            knowledge_segment,
            layers,
            decoder,
            c: cfg.c,
            d,
            vocab: cfg.vocab,
        }
    }

    /// Concatenates `[query; v_1 + seg; ...; v_K + seg]`.
    pub fn fused_input<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, query: Var, values: &[Var]) -> Result<Var> {
        let qs = g.value(query).shape().to_vec();
        if qs.len() != 2 || qs[1] != self.d {
            return Err(Error::Shape {
                op: "fused_input",
                lhs: qs,
                rhs: vec![0, self.d],
            });
        }
        let seg = g.param(store, self.knowledge_segment);
        let mut parts = Vec::with_capacity(values.len() + 1);
        parts.push(query);
        for &v in values {
            let vs = g.value(v).shape();
            if vs != [self.c, self.d] {
                return Err(Error::Shape {
                    op: "fused_input",
                    lhs: vs.to_vec(),
                    rhs: vec![self.c, self.d],
                });
            }
            parts.push(g.add(v, seg)?);
        }
        g.concat(&parts, 0)
    }

    /// Runs the fusion layers. `mask = None` skips the multiplication.
    pub fn attentive_fusion<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query: Var,
        values: &[Var],
        mask: Option<Var>,
    ) -> Result<Var> {
        let mut x = self.fused_input(g, store, query, values)?;
        let n = g.value(x).rows();
        if let Some(m) = mask {
            let len = g.value(m).len();
            if len != n {
                return Err(Error::DimensionMismatch {
                    what: "attention mask length",
                    expected: n,
                    found: len,
                });
            }
        }
        for layer in &self.layers {
            x = layer.forward(g, store, x, mask)?;
        }
        Ok(x)
    }

    /// Logits `[n+1, V]`, one row per position of `[BOS; inputs]`.
    fn decoder_logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fused: Var, inputs: &[usize]) -> Result<Var> {
        if let Some(&bad) = inputs.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::InvalidArgument(format!("token {bad} outside vocabulary of {}", self.vocab)));
        }
        let dec = &self.decoder;
        let memory = dec.fused_norm.forward(g, store, fused)?;
        let bos = g.param(store, dec.bos);
        let mut x = if inputs.is_empty() {
            bos
        } else {
            let emb = g.param(store, dec.embedding);
            let toks = g.gather(emb, inputs.to_vec())?;
            g.concat(&[bos, toks], 0)?
        };
        let n = inputs.len() + 1;
        let pos = g.constant(sinusoidal(n, self.d, 0));
        x = g.add(x, pos)?;
        let causal = g.constant(causal_bias(n));
        for layer in &dec.layers {
            x = layer.forward(g, store, x, memory, causal)?;
        }
        let x = dec.final_norm.forward(g, store, x)?;
        let out = g.param(store, dec.output_projection);
        g.matmul(x, out)
    }

    /// Next-token logits `[V]` given the tokens generated so far.
    pub fn decode_step<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fused: Var, prefix: &[usize]) -> Result<Var> {
        let logits = self.decoder_logits(g, store, fused, prefix)?;
        let last = g.value(logits).rows() - 1;
        let row = g.narrow(logits, 0, last, 1)?;
        g.reshape(row, vec![self.vocab])
    }

    /// Teacher-forced summed cross-entropy of `target`.
    pub fn sequence_nll<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fused: Var, target: &[usize]) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::EmptyInput("target sequence"));
        }
        let logits = self.decoder_logits(g, store, fused, &target[..target.len() - 1])?;
        g.cross_entropy(logits, target.to_vec())
    }

    /// Greedy generation of up to `max_len` tokens (stops early on `stop`).
    pub fn greedy_decode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        fused: &Tensor<T>,
        max_len: usize,
        stop: Option<usize>,
    ) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(max_len);
        while out.len() < max_len {
            let mut g = Graph::no_grad();
            let f = g.constant(fused.clone());
            let logits = self.decode_step(&mut g, store, f, &out)?;
            let next = argmax(g.value(logits).data());
            out.push(next);
            if Some(next) == stop {
                break;
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; first one wins ties.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::GradCheck;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d: 8,
            d_img: 4,
            vocab: 16,
            heads: 2,
            ff_mult: 2,
            base_layers: 1,
            head_layers: 1,
            perceiver_layers: 1,
            fusion_layers: 2,
            decoder_layers: 1,
            c: 2,
            num_corpora: 2,
            patches: 1,
            tau: 0.05,
            ..ModelConfig::toy()
        }
    }

    fn setup(seed: u64) -> (ParamStore<f64>, FusionStack, ModelConfig) {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = FusionStack::new(&mut store, &mut rng, &cfg);
        (store, stack, cfg)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape.to_vec(), 1.0, &mut rng)
    }

    #[test]
    fn mask_layout_examples() {
        let m = build_attention_mask(&[0.7, 0.3], 3, 2).unwrap();
        assert_eq!(m, vec![1.0, 1.0, 1.0, 0.7, 0.7, 0.3, 0.3]);
        assert_eq!(build_attention_mask(&[1.0], 2, 3).unwrap(), vec![1.0; 5]);
        let u = build_attention_mask(&[0.5, 0.5], 1, 2).unwrap();
        assert_eq!(&u[1..], &[0.5; 4]);
        assert!(build_attention_mask(&[0.6, 0.6], 1, 2).is_err());
    }

    #[test]
    fn mask_var_matches_plain_mask() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::vector(vec![0.2, 0.5, 0.3]), true);
        let m = mask_var(&mut g, p, 4, 3).unwrap();
        let want = build_attention_mask(&[0.2, 0.5, 0.3], 4, 3).unwrap();
        assert_eq!(g.value(m).data(), want.as_slice());
    }

    #[test]
    fn fused_length_is_query_plus_c_times_k() {
        let (store, stack, cfg) = setup(1);
        for k in [1, 3, 7] {
            let mut g = Graph::no_grad();
            let q = g.constant(random(&[5, cfg.d], 2));
            let vals: Vec<Var> = (0..k).map(|i| g.constant(random(&[cfg.c, cfg.d], 10 + i as u64))).collect();
            let probs = vec![1.0 / k as f64; k];
            let m = build_attention_mask(&probs, 5, cfg.c).unwrap();
            let m = g.constant(Tensor::vector(m));
            let out = stack.attentive_fusion(&mut g, &store, q, &vals, Some(m)).unwrap();
            assert_eq!(g.value(out).shape(), &[5 + cfg.c * k, cfg.d]);
        }
    }

    #[test]
    fn identity_mask_equals_unmasked_stack_bitwise() {
        let (store, stack, cfg) = setup(2);
        let run = |mask: bool| {
            let mut g = Graph::no_grad();
            let q = g.constant(random(&[3, cfg.d], 3));
            let v = g.constant(random(&[cfg.c, cfg.d], 4));
            let m = mask.then(|| g.constant(Tensor::vector(build_attention_mask(&[1.0], 3, cfg.c).unwrap())));
            let out = stack.attentive_fusion(&mut g, &store, q, &[v], m).unwrap();
            g.value(out).data().to_vec()
        };
        let a = run(true);
        let b = run(false);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn wrong_mask_length_rejected() {
        let (store, stack, cfg) = setup(3);
        let mut g = Graph::no_grad();
        let q = g.constant(random(&[3, cfg.d], 3));
        let v = g.constant(random(&[cfg.c, cfg.d], 4));
        let m = g.constant(Tensor::vector(vec![1.0; 4]));
        assert!(matches!(
            stack.attentive_fusion(&mut g, &store, q, &[v], Some(m)),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad = g.constant(random(&[cfg.c + 1, cfg.d], 5));
        assert!(stack.attentive_fusion(&mut g, &store, q, &[bad], None).is_err());
    }

    #[test]
    fn swapping_blocks_permutes_outputs() {
        let (store, stack, cfg) = setup(4);
        let (i, c) = (3, cfg.c);
        let run = |order: [usize; 3], probs: [f64; 3]| {
            let mut g = Graph::no_grad();
            let q = g.constant(random(&[i, cfg.d], 6));
            let vals: Vec<Var> = order.iter().map(|&o| g.constant(random(&[c, cfg.d], 20 + o as u64))).collect();
            let m = g.constant(Tensor::vector(build_attention_mask(&probs, i, c).unwrap()));
            let out = stack.attentive_fusion(&mut g, &store, q, &vals, Some(m)).unwrap();
            g.value(out).clone()
        };
        let a = run([0, 1, 2], [0.5, 0.3, 0.2]);
        let b = run([2, 1, 0], [0.2, 0.3, 0.5]);
        let d = cfg.d;
        let rows = |t: &Tensor<f64>, r: usize, n: usize| t.data()[r * d..(r + n) * d].to_vec();
        let close = |x: Vec<f64>, y: Vec<f64>| x.iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-9);
        assert!(close(rows(&a, 0, i), rows(&b, 0, i)));
        assert!(close(rows(&a, i, c), rows(&b, i + 2 * c, c)));
        assert!(close(rows(&a, i + c, c), rows(&b, i + c, c)));
        assert!(close(rows(&a, i + 2 * c, c), rows(&b, i, c)));
    }

    #[test]
    fn output_depends_on_each_block_probability() {
        let (store, stack, cfg) = setup(5);
        let readout = |probs: &[f64]| {
            let mut g = Graph::no_grad();
            let q = g.constant(random(&[2, cfg.d], 7));
            let vals: Vec<Var> = (0..probs.len()).map(|k| g.constant(random(&[cfg.c, cfg.d], 30 + k as u64))).collect();
            let mut m = vec![1.0; 2];
            for p in probs {
                m.extend(std::iter::repeat(*p).take(cfg.c));
            }
            let m = g.constant(Tensor::vector(m));
            let out = stack.attentive_fusion(&mut g, &store, q, &vals, Some(m)).unwrap();
            g.value(out).data().iter().sum::<f64>()
        };
        let base = [0.4, 0.35, 0.25];
        let h = 1e-5;
        for i in 0..3 {
            let mut up = base;
            let mut dn = base;
            up[i] += h;
            dn[i] -= h;
            let fd = (readout(&up) - readout(&dn)) / (2.0 * h);
            assert!(fd.abs() > 1e-8, "block {i} derivative {fd}");
        }
    }

    #[test]
    fn decode_step_shape_and_determinism() {
        let (store, stack, cfg) = setup(6);
        let fused = random(&[7, cfg.d], 8);
        let logits = |prefix: &[usize]| {
            let mut g = Graph::no_grad();
            let f = g.constant(fused.clone());
            let l = stack.decode_step(&mut g, &store, f, prefix).unwrap();
            g.value(l).data().to_vec()
        };
        let a = logits(&[3, 1]);
        assert_eq!(a.len(), cfg.vocab);
        assert_eq!(a, logits(&[3, 1]));
        assert_eq!(logits(&[]).len(), cfg.vocab);
    }

    #[test]
    fn decoding_is_causal() {
        let (store, stack, cfg) = setup(7);
        let fused = random(&[5, cfg.d], 9);
        let rows = |target: &[usize]| {
            let mut g = Graph::no_grad();
            let f = g.constant(fused.clone());
            let l = stack.decoder_logits(&mut g, &store, f, target).unwrap();
            g.value(l).data()[..2 * cfg.vocab].to_vec()
        };
        assert_eq!(rows(&[4, 5, 6]), rows(&[4, 9, 1]));
    }

    #[test]
    fn sequence_nll_matches_uniform_value_and_rejects_empty() {
        let (mut store, stack, cfg) = setup(8);
        // Zero output projection gives uniform logits.
        *store.get_mut(stack.decoder.output_projection) = Tensor::zeros(vec![cfg.d, cfg.vocab]);
        let mut g = Graph::no_grad();
        let f = g.constant(random(&[4, cfg.d], 10));
        let nll = stack.sequence_nll(&mut g, &store, f, &[1, 2, 3]).unwrap();
        let want = 3.0 * (cfg.vocab as f64).ln();
        assert!((g.value(nll).item() - want).abs() < 1e-12);
        assert!(matches!(stack.sequence_nll(&mut g, &store, f, &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn hand_cross_entropy() {
        // logits rows [ln 3, 0] and [0, 0], targets [0, 1]:
        // -ln(3/4) - ln(1/2)
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::matrix(2, 2, vec![3f64.ln(), 0.0, 0.0, 0.0]).unwrap(), false);
        let ce = g.cross_entropy(l, vec![0, 1]).unwrap();
        let want = -(0.75f64).ln() - (0.5f64).ln();
        assert!((g.value(ce).item() - want).abs() < 1e-12);
        let sat = g.leaf(Tensor::matrix(1, 3, vec![60.0, 0.0, 0.0]).unwrap(), false);
        let ce = g.cross_entropy(sat, vec![0]).unwrap();
        assert!(g.value(ce).item() < 1e-20);
    }

    #[test]
    fn gradcheck_through_fusion_and_decoder() {
        let (mut store, stack, cfg) = setup(9);
        let q = random(&[2, cfg.d], 11);
        let v0 = random(&[cfg.c, cfg.d], 12);
        let v1 = random(&[cfg.c, cfg.d], 13);
        let p_id = store.add("probs", ParamGroup::Other, Tensor::vector(vec![0.6, 0.4]));
        let loss = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let qv = g.constant(q.clone());
            let a = g.constant(v0.clone());
            let b = g.constant(v1.clone());
            let p = g.param(s, p_id);
            let m = mask_var(&mut g, p, 2, cfg.c)?;
            let f = stack.attentive_fusion(&mut g, s, qv, &[a, b], Some(m))?;
            let l = stack.sequence_nll(&mut g, s, f, &[3, 7, 1])?;
            Ok((g, l))
        };
        let ids: Vec<ParamId> = store.ids().collect();
        let report = GradCheck {
            max_entries_per_param: Some(4),
            ..GradCheck::default()
        }
        .run(loss, &store, &ids)
        .unwrap();
        assert!(report.passed, "{:?}", report.worst());
    }

    #[test]
    fn overfit_single_example_greedy_reproduces_target() {
        let (mut store, stack, cfg) = setup(10);
        let fused = random(&[4, cfg.d], 14);
        let target = [5usize, 2, 9, 2];
        for _ in 0..300 {
            let mut g = Graph::new();
            let f = g.constant(fused.clone());
            let l = stack.sequence_nll(&mut g, &store, f, &target).unwrap();
            let grads = g.backward(l).unwrap();
            for id in store.ids().collect::<Vec<_>>() {
                let gr = grads.param_or_zeros(&store, id);
                let t = store.get_mut(id);
                for (w, d) in t.data_mut().iter_mut().zip(gr.data()) {
                    *w -= 0.1 * d;
                }
            }
        }
        let out = stack.greedy_decode(&store, &fused, target.len(), None).unwrap();
        assert_eq!(out, target);
    }
}
