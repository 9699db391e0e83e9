//! Splitting the visual embedding into identity and emotion halves.
//!
//! Two adapter MLPs (FC-GeLU-FC) map the shared 512-d feature to an
//! identity vector and an emotion vector of equal width. An emotion
//! classifier on the emotion branch pulls emotional content in; a
//! gradient-reversed emotion classifier on the identity branch pushes it
//! out. The control embedding fed to synthesis is the elementwise sum of
//! the two, and the halves may come from different portraits.

use crate::autodiff::{Arr, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Binder, LinearP, Mlp2, ParamStore};
use crate::visual::{VisualEmbedding, EMBED_DIM};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedding {
    pub values: Vec<f64>,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmotionEmbedding {
    pub values: Vec<f64>,
    pub source_id: String,
}

/// Sum of an identity and an emotion embedding; the two source ids may
/// differ, which is how cross-image control works.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlEmbedding {
    pub values: Vec<f64>,
    pub identity_source_id: String,
    pub emotion_source_id: String,
}

pub fn compose_control(alpha: &IdentityEmbedding, beta: &EmotionEmbedding) -> Result<ControlEmbedding> {
    if alpha.values.len() != beta.values.len() {
        return Err(Error::Config(format!(
            "control embedding halves disagree: {} vs {}",
            alpha.values.len(),
            beta.values.len()
        )));
    }
    Ok(ControlEmbedding {
        values: alpha.values.iter().zip(&beta.values).map(|(a, b)| a + b).collect(),
        identity_source_id: alpha.source_id.clone(),
        emotion_source_id: beta.source_id.clone(),
    })
}

/// Closed set of emotion category names for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionTaxonomy {
    names: Vec<String>,
}

impl EmotionTaxonomy {
    pub fn new(names: &[&str]) -> Self {
        EmotionTaxonomy { names: names.iter().map(|s| s.to_string()).collect() }
    }

    /// The eight MEAD-style categories.
    pub fn mead() -> Self {
        Self::new(&["angry", "contempt", "disgusted", "fear", "happy", "neutral", "sad", "surprised"])
    }

    /// The five ESD-style categories.
    pub fn esd() -> Self {
        Self::new(&["angry", "happy", "neutral", "sad", "surprise"])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, category: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == category)
            .ok_or_else(|| Error::Label(format!("'{category}' not in {:?}", self.names)))
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionLabel {
    pub category: String,
    /// 1..=3 where the dataset defines intensities; absent otherwise.
    pub intensity: Option<u8>,
}

impl EmotionLabel {
    pub fn new(category: &str, intensity: Option<u8>) -> Result<Self> {
        if let Some(i) = intensity {
            if !(1..=3).contains(&i) {
                return Err(Error::Label(format!("intensity {i} outside 1..=3")));
            }
        }
        Ok(EmotionLabel { category: category.to_string(), intensity })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DisentangleConfig {
    /// Width of both the identity and emotion embeddings (they are summed).
    pub d_c: usize,
    /// Hidden width of each adapter.
    pub hidden: usize,
    pub taxonomy: EmotionTaxonomy,
    /// GRL strength; 0 disables the adversarial signal.
    pub grl_scale: f64,
    /// Reproduce the literal GRL-outside-classifier ordering. Forward loss
    /// values are identical; only which parameters see reversed gradients
    /// changes.
    pub grl_after_cls: bool,
}

impl Default for DisentangleConfig {
    fn default() -> Self {
        DisentangleConfig {
            d_c: 256,
            hidden: 512,
            taxonomy: EmotionTaxonomy::mead(),
            grl_scale: 1.0,
            grl_after_cls: false,
        }
    }
}

/// Adapter + classifier parameters, living in a shared [`ParamStore`] under
/// groups {iam, eam, cls_beta, cls_alpha}.
#[derive(Clone, Debug)]
pub struct DisentangleModel {
    pub cfg: DisentangleConfig,
    pub iam: Mlp2,
    pub eam: Mlp2,
    pub cls_beta: LinearP,
    pub cls_alpha: LinearP,
}

impl DisentangleModel {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: DisentangleConfig) -> Self {
        let c = cfg.taxonomy.len();
        DisentangleModel {
            iam: Mlp2::new(store, rng, "iam", "adapter", EMBED_DIM, cfg.hidden, cfg.d_c),
            eam: Mlp2::new(store, rng, "eam", "adapter", EMBED_DIM, cfg.hidden, cfg.d_c),
            cls_beta: LinearP::new(store, rng, "cls_beta", "head", cfg.d_c, c),
            cls_alpha: LinearP::new(store, rng, "cls_alpha", "head", cfg.d_c, c),
            cfg,
        }
    }

    fn check_input(&self, e: &VisualEmbedding) -> Result<()> {
        e.validate()?;
        Ok(())
    }

    /// Identity branch for one embedding.
    pub fn iam_forward(&self, store: &ParamStore, e: &VisualEmbedding) -> Result<IdentityEmbedding> {
        self.check_input(e)?;
        let values = self.single_forward(store, e, true);
        Ok(IdentityEmbedding { values, source_id: e.source_id.clone() })
    }

    /// Emotion branch for one embedding.
    pub fn eam_forward(&self, store: &ParamStore, e: &VisualEmbedding) -> Result<EmotionEmbedding> {
        self.check_input(e)?;
        let values = self.single_forward(store, e, false);
        Ok(EmotionEmbedding { values, source_id: e.source_id.clone() })
    }

    fn single_forward(&self, store: &ParamStore, e: &VisualEmbedding, identity: bool) -> Vec<f64> {
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let x = g.leaf(embedding_row(e));
        let mlp = if identity { &self.iam } else { &self.eam };
        let y = mlp.forward(&mut g, &mut binder, store, x, false);
        g.value(y).row(0).to_vec()
    }

    /// Batched adapter forward on the tape; rows of `e_batch` are visual
    /// embeddings. Returns `(alpha, beta)` node handles.
    pub fn adapters_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        store: &ParamStore,
        e_batch: Var,
        trainable: bool,
    ) -> (Var, Var) {
        let alpha = self.iam.forward(g, binder, store, e_batch, trainable);
        let beta = self.eam.forward(g, binder, store, e_batch, trainable);
        (alpha, beta)
    }

    /// The two classifier losses on the tape. `labels` are taxonomy indices.
    pub fn emotion_losses_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        store: &ParamStore,
        alpha: Var,
        beta: Var,
        labels: &[usize],
        trainable: bool,
    ) -> (Var, Var) {
        let logits_beta = self.cls_beta.forward(g, binder, store, beta, trainable);
        let l_emo = g.softmax_cross_entropy(logits_beta, labels);

        let l_grl = if self.cfg.grl_after_cls {
            // literal ordering: the classifier itself also sees reversed grads
            let logits = self.cls_alpha.forward(g, binder, store, alpha, trainable);
            let reversed = g.grl(logits, self.cfg.grl_scale);
            g.softmax_cross_entropy(reversed, labels)
        } else {
            // standard ordering: the head trains normally, the adapter is reversed
            let reversed = g.grl(alpha, self.cfg.grl_scale);
            let logits = self.cls_alpha.forward(g, binder, store, reversed, trainable);
            g.softmax_cross_entropy(logits, labels)
        };
        (l_emo, l_grl)
    }

    /// Loss values for one (alpha, beta, label) triple, no training side
    /// effects.
    pub fn emotion_losses(
        &self,
        store: &ParamStore,
        alpha: &IdentityEmbedding,
        beta: &EmotionEmbedding,
        label: &EmotionLabel,
    ) -> Result<(f64, f64)> {
        let idx = self.cfg.taxonomy.index_of(&label.category)?;
        if alpha.values.len() != self.cfg.d_c || beta.values.len() != self.cfg.d_c {
            return Err(Error::Config("embedding width does not match d_c".into()));
        }
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let a = g.leaf(row_from(&alpha.values));
        let b = g.leaf(row_from(&beta.values));
        let (l_emo, l_grl) = self.emotion_losses_graph(&mut g, &mut binder, store, a, b, &[idx], false);
        Ok((g.scalar(l_emo), g.scalar(l_grl)))
    }
}

/// Widen one stored f32 embedding to an f64 row for the tape. Exact: every
/// f32 is representable as f64, so cached and fresh paths stay bit-equal.
pub fn embedding_row(e: &VisualEmbedding) -> Arr {
    Array2::from_shape_fn((1, e.values.len()), |(_, j)| e.values[j] as f64)
}

/// Stack embeddings into a batch matrix, one row each.
pub fn embedding_batch(es: &[&VisualEmbedding]) -> Arr {
    let d = es.first().map(|e| e.values.len()).unwrap_or(0);
    Array2::from_shape_fn((es.len(), d), |(i, j)| es[i].values[j] as f64)
}

pub fn row_from(v: &[f64]) -> Arr {
    Array2::from_shape_fn((1, v.len()), |(_, j)| v[j])
}
