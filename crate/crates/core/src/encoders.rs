//! Frozen surrogate encoders, the attention-pooling head and the learnable
//! dual prompts.
//!
//! The frozen pieces are seeded random transformers that stand in for a
//! pretrained vision-language backbone. Only prompt tokens are trainable here.

use serde::{Deserialize, Serialize};

use crate::error::{CbsaError, Result};
use crate::nn::{AttentionInit, EncoderLayer, Init, LayerNorm, MultiHeadAttention, ParamId, ParamStore, Session};
use crate::rng::{gaussian_vec, Rng};
use crate::tape::Var;
use crate::tensor::Tensor;

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Per-class image-side prototypes and the class-name token embeddings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassDictionary {
    pub prototypes: Tensor,
    pub name_embeddings: Tensor,
}

impl ClassDictionary {
    /// Random unit prototypes; each name embedding is its prototype plus
    /// Gaussian noise of total scale `name_noise`, re-normalized.
    pub fn generate(n_classes: usize, d: usize, name_noise: f64, rng: &mut Rng) -> Self {
        let protos: Vec<Vec<f64>> = (0..n_classes)
            .map(|_| unit(gaussian_vec(rng, d, 1.0)))
            .collect();
        let per_coord = name_noise / (d as f64).sqrt();
        let names: Vec<Vec<f64>> = protos
            .iter()
            .map(|p| {
                let noise = gaussian_vec(rng, d, per_coord);
                unit(p.iter().zip(noise).map(|(a, b)| a + b).collect())
            })
            .collect();
        Self {
            prototypes: Tensor::from_rows(&protos).expect("rectangular"),
            name_embeddings: Tensor::from_rows(&names).expect("rectangular"),
        }
    }

    pub fn from_parts(prototypes: Tensor, name_embeddings: Tensor) -> Result<Self> {
        if prototypes.dims() != name_embeddings.dims() {
            return Err(CbsaError::dim(format!(
                "prototypes {:?} and name embeddings {:?}",
                prototypes.shape(),
                name_embeddings.shape()
            )));
        }
        Ok(Self {
            prototypes,
            name_embeddings,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Semantic,
    Target,
}

/// Learnable context tokens: a semantic-aware prompt that steers the decoder
/// and a target prompt that is aligned with label-specific features.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptSet {
    pub semantic: ParamId,
    pub target: ParamId,
    pub n_tokens: usize,
    pub n_classes: usize,
    pub class_specific: bool,
}

impl PromptSet {
    pub fn new(
        store: &mut ParamStore,
        n_classes: usize,
        n_tokens: usize,
        d: usize,
        class_specific: bool,
        init_std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_tokens == 0 {
            return Err(CbsaError::Spec("prompt length must be at least 1".into()));
        }
        let rows = if class_specific { n_classes * n_tokens } else { n_tokens };
        let mut make = |name: &str, rng: &mut Rng| {
            let t = Tensor::matrix(rows, d, gaussian_vec(rng, rows * d, init_std)).expect("shape");
            store.add(name, t, true)
        };
        let semantic = make("prompt.semantic", rng);
        let target = make("prompt.target", rng);
        Ok(Self {
            semantic,
            target,
            n_tokens,
            n_classes,
            class_specific,
        })
    }

    pub fn param(&self, which: PromptKind) -> ParamId {
        match which {
            PromptKind::Semantic => self.semantic,
            PromptKind::Target => self.target,
        }
    }

    /// The `N x d` context tokens of class `k`; every class shares one block
    /// when prompts are not class-specific.
    pub fn tokens(&self, s: &mut Session, which: PromptKind, k: usize) -> Result<Var> {
        let p = s.param(self.param(which));
        if self.class_specific {
            s.tape.slice_rows(p, k * self.n_tokens, self.n_tokens)
        } else {
            Ok(p)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub depth: usize,
    pub n_heads: usize,
    pub ff_hidden: usize,
    /// Standard deviation of the residual-branch output projections.
    pub branch_std: f64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            n_heads: 4,
            ff_hidden: 64,
            branch_std: 0.01,
        }
    }
}

/// Frozen transformer that maps `[v_1 .. v_N, CLS_k]` to a unit text
/// embedding read from the last (class-name) position.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrozenTextEncoder {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
}

impl FrozenTextEncoder {
    pub fn new(store: &mut ParamStore, d: usize, cfg: TextEncoderConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(CbsaError::Spec("text encoder depth must be at least 1".into()));
        }
        let layers = (0..cfg.depth)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    &format!("text.layer{i}"),
                    d,
                    cfg.n_heads,
                    cfg.ff_hidden,
                    cfg.branch_std,
                    false,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            final_norm: LayerNorm::new(store, "text.final_norm", d, false),
        })
    }

    /// Encodes one prompt per class into a `C x d` matrix of unit rows.
    pub fn encode(
        &self,
        s: &mut Session,
        prompts: &PromptSet,
        dict: &ClassDictionary,
        which: PromptKind,
    ) -> Result<Var> {
        let c = dict.n_classes();
        if prompts.n_classes != c {
            return Err(CbsaError::dim(format!(
                "{} prompt classes against {c} dictionary classes",
                prompts.n_classes
            )));
        }
        let names = s.constant(dict.name_embeddings.clone());
        let mut seqs = Vec::with_capacity(2 * c);
        for k in 0..c {
            seqs.push(prompts.tokens(s, which, k)?);
            seqs.push(s.tape.slice_rows(names, k, 1)?);
        }
        let mut x = s.tape.concat_rows(&seqs)?;
        let seq_len = prompts.n_tokens + 1;
        let depth = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let last = i + 1 == depth;
            x = layer.forward_blocks(s, x, seq_len, last)?;
        }
        let x = self.final_norm.forward(s, x)?;
        s.tape.l2_normalize_rows(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub n_heads: usize,
    /// Gain on the query projection; higher values sharpen attention onto
    /// tokens similar to the query.
    pub sharpness: f64,
    pub noise: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            n_heads: 4,
            sharpness: 40.0,
            noise: 0.05,
        }
    }
}

/// Frozen multi-head self-attention over `[mean(f); f]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionPool {
    pub attn: MultiHeadAttention,
}

impl AttentionPool {
    pub fn new(store: &mut ParamStore, d: usize, cfg: PoolConfig, rng: &mut Rng) -> Result<Self> {
        let init = AttentionInit {
            query: Init::NearIdentity {
                gain: cfg.sharpness,
                noise: cfg.noise,
            },
            key: Init::NearIdentity {
                gain: 1.0,
                noise: cfg.noise,
            },
            value: Init::NearIdentity {
                gain: 1.0,
                noise: cfg.noise,
            },
            output: Init::NearIdentity {
                gain: 1.0,
                noise: cfg.noise,
            },
        };
        Ok(Self {
            attn: MultiHeadAttention::new(store, "pool", d, cfg.n_heads, init, false, rng)?,
        })
    }

    /// Returns the global feature `g` (`1 x d`) and local features `l`
    /// (`HW x d`), both with unit rows.
    pub fn forward(&self, s: &mut Session, f: Var) -> Result<(Var, Var)> {
        let hw = s.value(f).rows();
        let mean = s.tape.mean_rows(f);
        let seq = s.tape.concat_rows(&[mean, f])?;
        let out = self.attn.forward(s, seq, seq, seq)?;
        let out = s.tape.l2_normalize_rows(out)?;
        let g = s.tape.slice_rows(out, 0, 1)?;
        let l = s.tape.slice_rows(out, 1, hw)?;
        Ok((g, l))
    }

    /// Plain-tensor evaluation on a throwaway tape.
    pub fn pool(&self, store: &ParamStore, f: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut s = Session::new(store);
        let fv = s.constant(f.clone());
        let (g, l) = self.forward(&mut s, fv)?;
        Ok((s.value(g).clone(), s.value(l).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    struct Fixture {
        store: ParamStore,
        dict: ClassDictionary,
        prompts: PromptSet,
        text: FrozenTextEncoder,
        pool: AttentionPool,
    }

    fn fixture(n_tokens: usize, class_specific: bool) -> Fixture {
        let mut rng = substream(11, "enc");
        let mut store = ParamStore::new();
        let dict = ClassDictionary::generate(5, 32, 0.3, &mut rng);
        let prompts = PromptSet::new(&mut store, 5, n_tokens, 32, class_specific, 0.02, &mut rng).unwrap();
        let text = FrozenTextEncoder::new(&mut store, 32, TextEncoderConfig::default(), &mut rng).unwrap();
        let pool = AttentionPool::new(&mut store, 32, PoolConfig::default(), &mut rng).unwrap();
        Fixture {
            store,
            dict,
            prompts,
            text,
            pool,
        }
    }

    #[test]
    fn dictionary_rows_are_unit_and_names_track_prototypes() {
        let mut rng = substream(1, "dict");
        let dict = ClassDictionary::generate(12, 32, 0.3, &mut rng);
        for k in 0..12 {
            let p = dict.prototypes.row(k);
            let n = dict.name_embeddings.row(k);
            assert!((p.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((n.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            let cos: f64 = p.iter().zip(n).map(|(a, b)| a * b).sum();
            assert!(cos > 0.8, "class {k}: {cos}");
        }
    }

    #[test]
    fn encode_text_shape_norm_and_determinism() {
        let fx = fixture(8, true);
        let run = || {
            let mut s = Session::new(&fx.store);
            let t = fx.text.encode(&mut s, &fx.prompts, &fx.dict, PromptKind::Target).unwrap();
            s.value(t).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[5, 32]);
        for k in 0..5 {
            assert!((a.row(k).iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(a, run());
    }

    #[test]
    fn identical_prompts_and_names_give_identical_embeddings() {
        let mut fx = fixture(4, true);
        let shared = fx.store.get(fx.prompts.semantic).value.slice_rows(0, 4);
        let mut rows = Vec::new();
        for _ in 0..5 {
            rows.extend_from_slice(shared.data());
        }
        *fx.store.value_mut(fx.prompts.semantic) = Tensor::matrix(20, 32, rows).unwrap();
        let name0 = fx.dict.name_embeddings.row(0).to_vec();
        fx.dict.name_embeddings.row_mut(1).copy_from_slice(&name0);
        let mut s = Session::new(&fx.store);
        let t = fx.text.encode(&mut s, &fx.prompts, &fx.dict, PromptKind::Semantic).unwrap();
        assert_eq!(s.value(t).row(0), s.value(t).row(1));
    }

    #[test]
    fn sixteen_tokens_make_seventeen_position_sequences() {
        let fx = fixture(16, true);
        let mut s = Session::new(&fx.store);
        let tokens = fx.prompts.tokens(&mut s, PromptKind::Semantic, 3).unwrap();
        assert_eq!(s.value(tokens).rows() + 1, 17);
        let t = fx.text.encode(&mut s, &fx.prompts, &fx.dict, PromptKind::Semantic).unwrap();
        assert_eq!(s.value(t).shape(), &[5, 32]);
    }

    #[test]
    fn shared_prompt_aliases_one_block() {
        let fx = fixture(8, false);
        assert_eq!(fx.store.get(fx.prompts.semantic).value.shape(), &[8, 32]);
        let mut s = Session::new(&fx.store);
        let a = fx.prompts.tokens(&mut s, PromptKind::Target, 0).unwrap();
        let b = fx.prompts.tokens(&mut s, PromptKind::Target, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prompt_gradients_flow_and_frozen_weights_are_excluded() {
        let fx = fixture(4, true);
        let mut s = Session::new(&fx.store);
        let t = fx.text.encode(&mut s, &fx.prompts, &fx.dict, PromptKind::Target).unwrap();
        let w = s.constant(Tensor::matrix(5, 32, (0..160).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let prod = s.tape.mul(t, w).unwrap();
        let loss = s.tape.sum(prod);
        let grads = s.param_grads(loss).unwrap();
        let ids: Vec<ParamId> = grads.iter().map(|(id, _)| *id).collect();
        assert_eq!(ids, vec![fx.prompts.semantic, fx.prompts.target]);
        let target_grad = &grads[1].1;
        assert!(target_grad.data().iter().any(|&g| g != 0.0));
        assert!(grads[0].1.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn pool_shapes_and_identical_tokens() {
        let fx = fixture(4, true);
        let mut rng = substream(3, "pool");
        let f = Tensor::matrix(16, 32, gaussian_vec(&mut rng, 512, 1.0)).unwrap();
        let (g, l) = fx.pool.pool(&fx.store, &f).unwrap();
        assert_eq!(g.shape(), &[1, 32]);
        assert_eq!(l.shape(), &[16, 32]);

        let v = unit(gaussian_vec(&mut rng, 32, 1.0));
        let same = Tensor::from_rows(&vec![v; 16]).unwrap();
        let (g, l) = fx.pool.pool(&fx.store, &same).unwrap();
        for i in 0..16 {
            for (a, b) in l.row(i).iter().zip(g.row(0)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pool_is_permutation_equivariant_in_local_rows() {
        let fx = fixture(4, true);
        let mut rng = substream(4, "pool");
        let f = Tensor::matrix(16, 32, gaussian_vec(&mut rng, 512, 1.0)).unwrap();
        let order: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 16).collect();
        let permuted = Tensor::from_rows(&order.iter().map(|&i| f.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let (g1, l1) = fx.pool.pool(&fx.store, &f).unwrap();
        let (g2, l2) = fx.pool.pool(&fx.store, &permuted).unwrap();
        assert!(g1.max_abs_diff(&g2) < 1e-12);
        for (new_i, &old_i) in order.iter().enumerate() {
            for (a, b) in l2.row(new_i).iter().zip(l1.row(old_i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
