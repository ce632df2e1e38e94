//! Toy multimodal featurizers and the shared base encoder with its query and
//! key heads.
//!
//! Every input is laid out as `[CLS; projected patches; embedded text]`.
//! Patches and text carry sinusoidal positions (positions count from the
//! first non-CLS token); CLS carries none. The query and key heads each run
//! their own upper encoder layers over the base output, take the CLS row,
//! project it and L2-normalize, so relevance scores are cosines in `[-1, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{sinusoidal, Builder, EncoderLayer};
use crate::scalar::Scalar;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, used wherever a hash must be stable across runs and platforms.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Lowercases, splits on whitespace and hashes each word into `[0, vocab)`.
pub fn featurize_text(raw: &str, vocab: usize) -> Vec<usize> {
    assert!(vocab >= 2, "vocabulary must have at least 2 entries");
    raw.split_whitespace()
        .map(|w| (stable_hash(w.to_lowercase().as_bytes()) % vocab as u64) as usize)
        .collect()
}

/// `patches` deterministic pseudo-random unit vectors of width `d_img`,
/// one stream per `(descriptor, patch index)`.
pub fn featurize_image(descriptor: &str, patches: usize, d_img: usize) -> Vec<Vec<f64>> {
    assert!(patches >= 1, "need at least one patch");
    let base = stable_hash(descriptor.as_bytes());
    (0..patches)
        .map(|p| {
            let seed = base ^ stable_hash(&(p as u64).to_le_bytes()).rotate_left(17);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            loop {
                let v: Vec<f64> = (0..d_img).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-3 {
                    break v.into_iter().map(|x| x / n).collect();
                }
            }
        })
        .collect()
}

/// Featurized input: text tokens plus optional patch features.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: String,
    pub text_tokens: Vec<usize>,
    pub patches: Option<Vec<Vec<f64>>>,
}

impl Query {
    pub fn new(id: impl Into<String>, text_tokens: Vec<usize>, patches: Option<Vec<Vec<f64>>>) -> Self {
        Self {
            id: id.into(),
            text_tokens,
            patches,
        }
    }

    /// Featurizes raw text and an optional image descriptor.
    pub fn from_raw(id: impl Into<String>, text: &str, image: Option<&str>, cfg: &ModelConfig) -> Self {
        Self::new(
            id,
            featurize_text(text, cfg.vocab),
            image.map(|d| featurize_image(d, cfg.patches, cfg.d_img)),
        )
    }

    pub fn num_patches(&self) -> usize {
        self.patches.as_ref().map_or(0, Vec::len)
    }

    /// Encoded sequence length `1 + P + T`.
    pub fn seq_len(&self) -> usize {
        1 + self.num_patches() + self.text_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text_tokens.is_empty() && self.num_patches() == 0
    }

    /// Copy with the image modality removed.
    pub fn without_image(&self) -> Self {
        Self {
            patches: None,
            ..self.clone()
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyInput("query has neither text nor image"));
        }
        if let Some(&t) = self.text_tokens.iter().find(|t| **t >= cfg.vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {t} outside vocabulary of {}",
                cfg.vocab
            )));
        }
        if let Some(p) = self.patches.iter().flatten().find(|p| p.len() != cfg.d_img) {
            return Err(Error::DimensionMismatch {
                what: "patch width",
                expected: cfg.d_img,
                found: p.len(),
            });
        }
        Ok(())
    }
}

/// Init half-width of embedding tables: entries have unit variance.
pub const EMBED_BOUND: f64 = 1.732_050_807_568_877_2;

/// Upper layers plus output projection of a query or key head.
#[derive(Clone, Debug)]
pub struct Head {
    pub layers: Vec<EncoderLayer>,
    pub projection: ParamId,
}

impl Head {
    fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, cfg: &ModelConfig) -> Self {
        Self {
            layers: (0..cfg.head_layers)
                .map(|l| EncoderLayer::new(b, &format!("{name}.layer{l}"), cfg.d, cfg.heads, cfg.hidden()))
                .collect(),
            projection: b.weight(&format!("{name}.proj"), &[cfg.d, cfg.d]),
        }
    }

    /// `[1, d]` unit-norm embedding from a base-encoded sequence.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, base: Var) -> Result<Var> {
        let mut h = base;
        for layer in &self.layers {
            h = layer.forward(g, store, h)?;
        }
        let cls = g.narrow(h, 0, 0, 1)?;
        let w = g.param(store, self.projection);
        let p = g.matmul(cls, w)?;
        g.l2_normalize(p)
    }
}

/// Base encoder `b(.)` with the query head and key head.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub token_embedding: ParamId,
    pub image_projection: ParamId,
    pub cls_embedding: ParamId,
    pub base_layers: Vec<EncoderLayer>,
    pub query_head: Head,
    pub key_head: Head,
}

impl EncoderStack {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let bound = cfg.init_bound();
        let mut b = Builder {
            store,
            rng,
            group: ParamGroup::TokenEmbedding,
            bound,
        };
        // Unit-variance inputs so token and patch identity are on the same
        // scale as the sinusoidal positions.
        b.bound = EMBED_BOUND;
        let token_embedding = b.weight("enc.token_embedding", &[cfg.vocab, cfg.d]);
        b.group = ParamGroup::ImageProjection;
        let image_projection = b.weight("enc.image_projection", &[cfg.d_img, cfg.d]);
        b.bound = bound;
        b.group = ParamGroup::BaseEncoder;
        let cls_embedding = b.weight("enc.cls", &[1, cfg.d]);
        let base_layers = (0..cfg.base_layers)
            .map(|l| EncoderLayer::new(&mut b, &format!("enc.base{l}"), cfg.d, cfg.heads, cfg.hidden()))
            .collect();
        b.group = ParamGroup::QueryHead;
        let query_head = Head::new(&mut b, "enc.query_head", cfg);
        b.group = ParamGroup::KeyHead;
        let key_head = Head::new(&mut b, "enc.key_head", cfg);
        Self {
            token_embedding,
            image_projection,
            cls_embedding,
            base_layers,
            query_head,
            key_head,
        }
    }

    /// Embeds `[CLS; patches; text]` without running the base layers.
    pub fn embed_input<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &Query) -> Result<Var> {
        let d = store.get(self.cls_embedding).last_dim();
        let d_img = store.get(self.image_projection).rows();
        let vocab = store.get(self.token_embedding).rows();
        if input.is_empty() {
            return Err(Error::EmptyInput("query has neither text nor image"));
        }
        let mut body = Vec::with_capacity(2);
        if let Some(patches) = input.patches.as_ref().filter(|p| !p.is_empty()) {
            let mut flat = Vec::with_capacity(patches.len() * d_img);
            for p in patches {
                if p.len() != d_img {
                    return Err(Error::DimensionMismatch {
                        what: "patch width",
                        expected: d_img,
                        found: p.len(),
                    });
                }
                flat.extend(p.iter().map(|v| T::lit(*v)));
            }
            let pv = g.constant(Tensor::new(vec![patches.len(), d_img], flat)?);
            let proj = g.param(store, self.image_projection);
            body.push(g.matmul(pv, proj)?);
        }
        if !input.text_tokens.is_empty() {
            if let Some(&t) = input.text_tokens.iter().find(|t| **t >= vocab) {
                return Err(Error::InvalidArgument(format!("token id {t} outside vocabulary of {vocab}")));
            }
            let table = g.param(store, self.token_embedding);
            body.push(g.gather(table, input.text_tokens.clone())?);
        }
        let body = g.concat(&body, 0)?;
        let n = g.value(body).rows();
        let pos = g.constant(sinusoidal(n, d, 0));
        let body = g.add(body, pos)?;
        let cls = g.param(store, self.cls_embedding);
        g.concat(&[cls, body], 0)
    }

    /// `b(x)`: `[1 + P + T, d]`, row 0 is the contextualized CLS.
    pub fn base_encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &Query) -> Result<Var> {
        let mut h = self.embed_input(g, store, input)?;
        for layer in &self.base_layers {
            h = layer.forward(g, store, h)?;
        }
        Ok(h)
    }

    pub fn query_embed_from_base<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, base: Var) -> Result<Var> {
        self.query_head.embed(g, store, base)
    }

    pub fn key_embed_from_base<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, base: Var) -> Result<Var> {
        self.key_head.embed(g, store, base)
    }

    /// `Emb_Query(x)` as a `[1, d]` node.
    pub fn query_embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &Query) -> Result<Var> {
        let b = self.base_encode(g, store, x)?;
        self.query_embed_from_base(g, store, b)
    }

    /// `Emb_Key(z)` as a `[1, d]` node.
    pub fn key_embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: &Query) -> Result<Var> {
        let b = self.base_encode(g, store, z)?;
        self.key_embed_from_base(g, store, b)
    }

    /// Inference-only query embedding.
    pub fn query_vector<T: Scalar>(&self, store: &ParamStore<T>, x: &Query) -> Result<Vec<T>> {
        let mut g = Graph::no_grad();
        let v = self.query_embed(&mut g, store, x)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Inference-only key embedding.
    pub fn key_vector<T: Scalar>(&self, store: &ParamStore<T>, z: &Query) -> Result<Vec<T>> {
        let mut g = Graph::no_grad();
        let v = self.key_embed(&mut g, store, z)?;
        Ok(g.value(v).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn text_featurizer_basics() {
        assert!(featurize_text("", 1024).is_empty());
        let aa = featurize_text("a a", 1024);
        assert_eq!(aa.len(), 2);
        assert_eq!(aa[0], aa[1]);
        let cd = featurize_text("cat dog", 1024);
        let dc = featurize_text("dog cat", 1024);
        assert_eq!(cd, vec![dc[1], dc[0]]);
        assert_eq!(featurize_text("Cat", 1024), featurize_text("cat", 1024));
        assert!(featurize_text("many words here", 7).iter().all(|t| *t < 7));
    }

    #[test]
    fn image_featurizer_is_deterministic_unit_norm() {
        let a = featurize_image("red bus", 3, 16);
        assert_eq!(a, featurize_image("red bus", 3, 16));
        let one = featurize_image("x", 1, 16);
        assert_eq!(one.len(), 1);
        let n = one[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_descriptors_give_distinct_patches() {
        for i in 0..100 {
            let a = featurize_image(&format!("img-{i}"), 1, 16);
            let b = featurize_image(&format!("img-{}", i + 1000), 1, 16);
            assert!(cosine(&a[0], &b[0]) < 0.999);
        }
    }

    fn small_model() -> Model<f64> {
        Model::new(ModelConfig {
            d: 16,
            d_img: 8,
            ..ModelConfig::toy()
        })
    }

    #[test]
    fn base_encode_shapes() {
        let m = small_model();
        let cfg = &m.config;
        let text = Query::from_raw("t", "a b c", None, cfg);
        let image = Query::from_raw("i", "", Some("pic"), cfg);
        let pair = Query::from_raw("p", "a b c", Some("pic"), cfg);
        for (q, rows) in [(&text, 4), (&image, 1 + cfg.patches), (&pair, 4 + cfg.patches)] {
            let mut g = Graph::no_grad();
            let b = m.encoders.base_encode(&mut g, &m.params, q).unwrap();
            assert_eq!(g.value(b).shape(), &[rows, cfg.d]);
        }
        let mut g = Graph::<f64>::no_grad();
        let empty = Query::new("e", vec![], None);
        assert!(matches!(
            m.encoders.base_encode(&mut g, &m.params, &empty),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn image_only_with_two_patches() {
        let m = Model::<f64>::new(ModelConfig {
            patches: 2,
            ..ModelConfig::toy()
        });
        let q = Query::from_raw("i", "", Some("pic"), &m.config);
        let mut g = Graph::no_grad();
        let b = m.encoders.base_encode(&mut g, &m.params, &q).unwrap();
        assert_eq!(g.value(b).shape(), &[3, m.config.d]);
        let pair = Query::from_raw("p", "x y z", Some("pic"), &m.config);
        let b = m.encoders.base_encode(&mut g, &m.params, &pair).unwrap();
        assert_eq!(g.value(b).shape(), &[6, m.config.d]);
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let m = small_model();
        let q = Query::from_raw("q", "what is this", Some("pic"), &m.config);
        let z = Query::from_raw("z", "this is a pic", None, &m.config);
        let a = m.encoders.query_vector(&m.params, &q).unwrap();
        let b = m.encoders.query_vector(&m.params, &q).unwrap();
        assert_eq!(a, b);
        let k = m.encoders.key_vector(&m.params, &z).unwrap();
        for v in [&a, &k] {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let rel: f64 = a.iter().zip(&k).map(|(x, y)| x * y).sum();
        assert!((-1.0..=1.0).contains(&rel));
    }

    #[test]
    fn dropping_image_changes_query_embedding() {
        let m = small_model();
        for i in 0..20 {
            let q = Query::from_raw(format!("q{i}"), &format!("word{i} other"), Some(&format!("img{i}")), &m.config);
            let full = m.encoders.query_vector(&m.params, &q).unwrap();
            let dropped = m.encoders.query_vector(&m.params, &q.without_image()).unwrap();
            assert!(cosine(&full, &dropped) < 1.0 - 1e-12);
        }
    }

    #[test]
    fn text_order_matters() {
        let m = small_model();
        let a = m
            .encoders
            .query_vector(&m.params, &Query::from_raw("a", "cat dog", None, &m.config))
            .unwrap();
        let b = m
            .encoders
            .query_vector(&m.params, &Query::from_raw("b", "dog cat", None, &m.config))
            .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn gradients_reach_token_embedding_and_image_projection() {
        let m = small_model();
        let q = Query::from_raw("q", "a b", Some("pic"), &m.config);
        let mut g = Graph::new();
        let e = m.encoders.query_embed(&mut g, &m.params, &q).unwrap();
        let w = g.constant(Tensor::uniform(vec![m.config.d, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let s = g.matmul(e, w).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.group_max_abs(&m.params, ParamGroup::TokenEmbedding) > 0.0);
        assert!(grads.group_max_abs(&m.params, ParamGroup::ImageProjection) > 0.0);
        assert_eq!(grads.group_max_abs(&m.params, ParamGroup::KeyHead), 0.0);
    }

    #[test]
    fn out_of_vocab_token_rejected() {
        let m = small_model();
        let q = Query::new("q", vec![m.config.vocab], None);
        assert!(m.encoders.query_vector(&m.params, &q).is_err());
    }
}
