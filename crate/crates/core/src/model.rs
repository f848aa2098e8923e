//! The assembled model: frozen encoders, dual prompts, decoder and context head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{alignment_degrees, extract_label_specific, AlignmentConfig};
use crate::context::ContextHead;
use crate::encoders::{
    AttentionPool, ClassDictionary, FrozenTextEncoder, PoolConfig, PromptKind, PromptSet, TextEncoderConfig,
};
use crate::error::{CbsaError, Result};
use crate::nn::{DecoderLayer, ParamStore, Session};
use crate::rng::substream;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Which components are switched on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Target prompt against the pooled global feature.
    #[serde(rename = "tp")]
    Tp,
    /// Dual prompts with label-specific features.
    #[serde(rename = "tp+saa")]
    TpSaa,
    /// Dual prompts, label-specific features and context identification.
    #[default]
    #[serde(rename = "full", alias = "none")]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Tp, Ablation::TpSaa, Ablation::Full];

    pub fn uses_decoder(self) -> bool {
        self != Ablation::Tp
    }

    pub fn uses_context(self) -> bool {
        self == Ablation::Full
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Tp => "tp",
            Ablation::TpSaa => "tp+saa",
            Ablation::Full => "full",
        })
    }
}

impl FromStr for Ablation {
    type Err = CbsaError;

    /// `none` (nothing ablated) is an alias of `full`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tp" => Ok(Ablation::Tp),
            "tp+saa" | "tp_saa" => Ok(Ablation::TpSaa),
            "full" | "none" => Ok(Ablation::Full),
            other => Err(CbsaError::Spec(format!("unknown ablation '{other}' (expected none, tp, tp+saa or full)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_tokens: usize,
    pub class_specific: bool,
    pub prompt_init_std: f64,
    pub decoder_layers: usize,
    pub n_heads: usize,
    pub decoder_ff: usize,
    /// Near-identity decoder projections with this query gain; `None` for
    /// plain random projections.
    pub decoder_query_gain: Option<f64>,
    pub text: TextEncoderConfig,
    pub pool: PoolConfig,
    pub alignment: AlignmentConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_tokens: 8,
            class_specific: true,
            prompt_init_std: 0.02,
            decoder_layers: 2,
            n_heads: 4,
            decoder_ff: 64,
            decoder_query_gain: Some(16.0),
            text: TextEncoderConfig::default(),
            pool: PoolConfig::default(),
            alignment: AlignmentConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 || self.decoder_layers == 0 {
            return Err(CbsaError::Spec("n_tokens and decoder_layers must be at least 1".into()));
        }
        if !(self.prompt_init_std >= 0.0) {
            return Err(CbsaError::Spec("prompt_init_std must be non-negative".into()));
        }
        if self.decoder_query_gain.is_some_and(|g| !(g.is_finite() && g > 0.0)) {
            return Err(CbsaError::Spec("decoder_query_gain must be positive".into()));
        }
        self.alignment.validate()
    }
}

/// Text embeddings of one step, shared by every instance in a batch.
#[derive(Clone, Copy, Debug)]
pub struct TextVars {
    pub semantic: Option<Var>,
    pub target: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub ablation: Ablation,
    pub store: ParamStore,
    pub dict: ClassDictionary,
    pub prompts: PromptSet,
    pub text: FrozenTextEncoder,
    pub pool: AttentionPool,
    pub decoder: Vec<DecoderLayer>,
    pub head: Option<ContextHead>,
}

impl Model {
    /// Every component draws from its own named stream of `seed`, so switching
    /// a component off leaves the initialization of the others unchanged.
    pub fn new(cfg: ModelConfig, dict: ClassDictionary, ablation: Ablation, n_contexts: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (c, d) = (dict.n_classes(), dict.dim());
        let mut store = ParamStore::new();
        let prompts = PromptSet::new(
            &mut store,
            c,
            cfg.n_tokens,
            d,
            cfg.class_specific,
            cfg.prompt_init_std,
            &mut substream(seed, "init.prompts"),
        )?;
        let text = FrozenTextEncoder::new(&mut store, d, cfg.text, &mut substream(seed, "frozen.text"))?;
        let pool = AttentionPool::new(&mut store, d, cfg.pool, &mut substream(seed, "frozen.pool"))?;
        let decoder = if ablation.uses_decoder() {
            let mut rng = substream(seed, "init.decoder");
            (0..cfg.decoder_layers)
                .map(|i| DecoderLayer::new(&mut store, &format!("decoder{i}"), d, cfg.n_heads, cfg.decoder_ff, true, cfg.decoder_query_gain, &mut rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let head = if ablation.uses_context() {
            if n_contexts == 0 {
                return Err(CbsaError::Spec("context head needs K >= 1".into()));
            }
            Some(ContextHead::new(&mut store, d, n_contexts, &mut substream(seed, "init.context")))
        } else {
            None
        };
        Ok(Self {
            cfg,
            ablation,
            store,
            dict,
            prompts,
            text,
            pool,
            decoder,
            head,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.dict.n_classes()
    }

    pub fn text_vars(&self, s: &mut Session) -> Result<TextVars> {
        let target = self.text.encode(s, &self.prompts, &self.dict, PromptKind::Target)?;
        let semantic = if self.ablation.uses_decoder() {
            Some(self.text.encode(s, &self.prompts, &self.dict, PromptKind::Semantic)?)
        } else {
            None
        };
        Ok(TextVars { semantic, target })
    }

    /// Global and local features of one view through the frozen pool.
    pub fn pool_view(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        self.pool.pool(&self.store, features)
    }

    /// Alignment degrees (`1 x C`) of one pooled view.
    pub fn degrees(&self, s: &mut Session, text: &TextVars, g: &Tensor, l: &Tensor) -> Result<Var> {
        let z = match text.semantic {
            Some(t_s) => {
                let lv = s.constant(l.clone());
                extract_label_specific(s, lv, t_s, &self.decoder)?
            }
            None => {
                let c = self.n_classes();
                let rows: Vec<f64> = (0..c).flat_map(|_| g.data().iter().copied()).collect();
                s.constant(Tensor::matrix(c, g.len(), rows)?)
            }
        };
        alignment_degrees(s, z, text.target, &self.cfg.alignment)
    }

    /// Plain text embeddings for forward-only evaluation.
    pub fn text_tensors(&self) -> Result<(Option<Tensor>, Tensor)> {
        let mut s = Session::new(&self.store);
        let t = self.text_vars(&mut s)?;
        Ok((t.semantic.map(|v| s.value(v).clone()), s.value(t.target).clone()))
    }

    /// Forward-only evaluation of views. Returns each view's global feature
    /// and alignment degrees. Work may fan out over `threads`, but results
    /// keep input order and are identical for any thread count.
    pub fn evaluate(&self, views: &[Tensor], threads: usize) -> Result<Vec<(Tensor, Vec<f64>)>> {
        let (t_s, t_t) = self.text_tensors()?;
        let one = |f: &Tensor| -> Result<(Tensor, Vec<f64>)> {
            let (g, l) = self.pool_view(f)?;
            let mut s = Session::new(&self.store);
            let text = TextVars {
                semantic: t_s.as_ref().map(|t| s.constant(t.clone())),
                target: s.constant(t_t.clone()),
            };
            let p = self.degrees(&mut s, &text, &g, &l)?;
            Ok((g, s.value(p).data().to_vec()))
        };
        map_ordered(views, threads, one)
    }

    /// Context probabilities of stacked global features (`B x d`).
    pub fn context_probs(&self, g: &Tensor) -> Result<Option<Tensor>> {
        self.head.as_ref().map(|h| h.predict(&self.store, g)).transpose()
    }
}

/// `f` applied to every item, results in input order.
pub(crate) fn map_ordered<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    #[cfg(feature = "parallel")]
    if threads > 1 && items.len() > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CbsaError::Contract(format!("thread pool: {e}")))?;
        return pool.install(|| items.par_iter().map(&f).collect());
    }
    let _ = threads;
    items.iter().map(f).collect()
}

/// Stacks `1 x d` rows into an `n x d` matrix.
pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Tensor::len);
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(CbsaError::dim("rows of unequal width"));
        }
        data.extend_from_slice(r.data());
    }
    Tensor::matrix(rows.len(), d, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn model(ablation: Ablation) -> Model {
        let dict = ClassDictionary::generate(5, 16, 0.3, &mut substream(1, "dict"));
        let cfg = ModelConfig {
            n_tokens: 3,
            decoder_ff: 16,
            text: TextEncoderConfig { ff_hidden: 16, ..Default::default() },
            ..Default::default()
        };
        Model::new(cfg, dict, ablation, 2, 7).unwrap()
    }

    fn features(seed: u64) -> Tensor {
        let mut rng = substream(seed, "f");
        Tensor::matrix(4, 16, crate::rng::gaussian_vec(&mut rng, 64, 1.0)).unwrap()
    }

    #[test]
    fn zero_init_decoder_starts_from_semantic_embeddings() {
        let m = model(Ablation::TpSaa);
        let (g, l) = m.pool_view(&features(1)).unwrap();
        let mut s = Session::new(&m.store);
        let text = m.text_vars(&mut s).unwrap();
        let lv = s.constant(l);
        let z = extract_label_specific(&mut s, lv, text.semantic.unwrap(), &m.decoder).unwrap();
        assert_eq!(s.value(z), s.value(text.semantic.unwrap()));
        assert_eq!(g.dims(), (1, 16));
    }

    #[test]
    fn shared_initialization_across_ablations() {
        let a = model(Ablation::Tp);
        let b = model(Ablation::Full);
        assert!(a.decoder.is_empty() && a.head.is_none());
        assert_eq!(b.decoder.len(), 2);
        assert_eq!(a.store.get(a.prompts.target).value, b.store.get(b.prompts.target).value);
        let pa = a.pool.pool(&a.store, &features(2)).unwrap();
        let pb = b.pool.pool(&b.store, &features(2)).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn evaluation_is_thread_count_invariant() {
        let m = model(Ablation::Full);
        let views: Vec<Tensor> = (0..6).map(features).collect();
        let a = m.evaluate(&views, 1).unwrap();
        let b = m.evaluate(&views, 3).unwrap();
        assert_eq!(a.len(), 6);
        for ((ga, pa), (gb, pb)) in a.iter().zip(&b) {
            assert_eq!(ga, gb);
            assert_eq!(pa, pb);
            assert!(pa.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn ablation_names() {
        for a in Ablation::ALL {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert_eq!("none".parse::<Ablation>().unwrap(), Ablation::Full);
        assert!("saa".parse::<Ablation>().is_err());
    }
}
