//! The diagnosis network and its ablation variants.
//!
//! Feature extractor: five Conv→BN→ReLU→Pool stages, a 256-wide FC layer
//! with dropout, then (graph variants only) a similarity graph over the
//! batch and two TAGCN+BN layers. A linear classifier and, for adversarial
//! variants, a domain discriminator behind a gradient reversal layer sit on
//! top of the extracted features.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{grl, Discriminator, GrlConfig};
use crate::derive_seed;
use crate::diff::checkpoint::{load_checkpoint, save_checkpoint};
use crate::diff::{DiffArray, ParamGroup, Role, Scalar};
use crate::error::{Error, Result};
use crate::graph::{default_topk, graph_batchnorm, GraphBatch, TagcnLayer};
use crate::layers::{BatchNorm, Conv1d, Dense};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Max(usize),
    Adaptive(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    pub pool: Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub conv: Vec<ConvStage>,
    pub fc1: usize,
    pub fc1_dropout: f64,
    /// Dropout on the features the similarity graph is built from.
    pub graph_dropout: f64,
    pub tagcn: Vec<usize>,
    pub hops: usize,
    /// Neighbours kept per node; `None` means `max(2, ceil(nodes / 10))`.
    pub topk: Option<usize>,
    pub discriminator_hidden: usize,
    pub discriminator_dropout: f64,
    pub classes: usize,
}

impl ArchSpec {
    pub fn standard(classes: usize) -> Self {
        let stage = |kernel, channels, pool| ConvStage {
            kernel,
            stride: 1,
            channels,
            pool,
        };
        Self {
            conv: vec![
                stage(128, 16, Pool::Max(2)),
                stage(64, 32, Pool::Max(2)),
                stage(32, 64, Pool::Max(2)),
                stage(16, 128, Pool::Max(2)),
                stage(3, 128, Pool::Adaptive(4)),
            ],
            fc1: 256,
            fc1_dropout: 0.5,
            graph_dropout: 0.5,
            tagcn: vec![128, 256],
            hops: 2,
            topk: None,
            discriminator_hidden: 128,
            discriminator_dropout: 0.5,
            classes,
        }
    }

    pub fn with_hops(mut self, hops: usize) -> Self {
        self.hops = hops;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("build_model", format!("class count {} < 2", self.classes)));
        }
        if self.conv.is_empty() || self.tagcn.is_empty() {
            return Err(Error::invalid("build_model", "empty stage list"));
        }
        if self.topk == Some(0) {
            return Err(Error::invalid("build_model", "top-k must be at least 1"));
        }
        Ok(())
    }

    /// Flattened width of the convolutional output. Requires the last stage
    /// to end in adaptive pooling so that the width is input independent.
    pub fn flat_width(&self) -> Result<usize> {
        let last = self.conv.last().expect("validated");
        match last.pool {
            Pool::Adaptive(out) => Ok(out * last.channels),
            Pool::Max(_) => Err(Error::invalid("build_model", "last conv stage must use adaptive pooling")),
        }
    }

    /// Width of the features fed to the classifier and discriminator.
    pub fn embedding_width(&self, graph: bool) -> usize {
        if graph {
            *self.tagcn.last().expect("validated")
        } else {
            self.fc1
        }
    }

    /// Stable 64-bit fingerprint of the architecture.
    pub fn hash(&self) -> u64 {
        derive_seed(0, &serde_json::to_string(self).expect("serializable"))
    }
}

/// Non-graph divergence term added to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThirdLoss {
    None,
    Lmmd,
    Mmd,
    Mkmmd,
    Coral,
}

/// Which components a variant switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wiring {
    pub graph: bool,
    pub adversarial: bool,
    pub third: ThirdLoss,
}

impl Wiring {
    /// Target windows take part in training only when some term aligns
    /// the domains.
    pub fn uses_target(&self) -> bool {
        self.adversarial || self.third != ThirdLoss::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VariantId {
    Dsagcn,
    Cnn,
    Baseline,
    Udacnn,
    GcMmd,
    GcMkmmd,
    GcCoral,
}

impl VariantId {
    pub const ALL: [VariantId; 7] = [
        VariantId::Dsagcn,
        VariantId::Cnn,
        VariantId::Baseline,
        VariantId::Udacnn,
        VariantId::GcMmd,
        VariantId::GcMkmmd,
        VariantId::GcCoral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantId::Dsagcn => "DSAGCN",
            VariantId::Cnn => "CNN",
            VariantId::Baseline => "BASELINE",
            VariantId::Udacnn => "UDACNN",
            VariantId::GcMmd => "GC_MMD",
            VariantId::GcMkmmd => "GC_MKMMD",
            VariantId::GcCoral => "GC_CORAL",
        }
    }

    pub fn wiring(self) -> Wiring {
        let w = |graph, adversarial, third| Wiring {
            graph,
            adversarial,
            third,
        };
        match self {
            VariantId::Dsagcn => w(true, true, ThirdLoss::Lmmd),
            VariantId::Cnn => w(false, false, ThirdLoss::None),
            VariantId::Baseline => w(true, false, ThirdLoss::None),
            VariantId::Udacnn => w(false, true, ThirdLoss::Lmmd),
            VariantId::GcMmd => w(true, true, ThirdLoss::Mmd),
            VariantId::GcMkmmd => w(true, true, ThirdLoss::Mkmmd),
            VariantId::GcCoral => w(true, true, ThirdLoss::Coral),
        }
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantId {
    type Err = Error;

    /// Case-insensitive; `-` and `_` are interchangeable.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Taps<T: Scalar> {
    /// `[N, L]` standardized windows.
    pub input: DiffArray<T>,
    /// `[N, flat]` flattened convolutional output.
    pub cnn: DiffArray<T>,
    /// `[N, fc1]` after ReLU and dropout.
    pub fc1: DiffArray<T>,
    pub graph: Option<GraphBatch<T>>,
    /// `[N, tagcn]` graph features, absent for non-graph variants.
    pub tagcn: Option<DiffArray<T>>,
    /// Features the heads consume: `tagcn` when present, else `fc1`.
    pub embedding: DiffArray<T>,
    pub logits: DiffArray<T>,
    /// `[N]` probability of the source domain, adversarial variants only.
    pub domain_probs: Option<DiffArray<T>>,
}

pub const TAP_NAMES: [&str; 6] = ["input", "cnn", "fc1", "tagcn", "logits", "domain_probs"];

impl<T: Scalar> Taps<T> {
    pub fn get(&self, name: &str) -> Result<Option<&DiffArray<T>>> {
        Ok(match name {
            "input" => Some(&self.input),
            "cnn" => Some(&self.cnn),
            "fc1" => Some(&self.fc1),
            "tagcn" => self.tagcn.as_ref(),
            "logits" => Some(&self.logits),
            "domain_probs" => self.domain_probs.as_ref(),
            _ => {
                return Err(Error::UnknownTap {
                    name: name.to_string(),
                    valid: TAP_NAMES.join(", "),
                })
            }
        })
    }
}

/// Forward-pass switches.
#[derive(Debug, Clone, Copy)]
pub struct ForwardMode {
    pub train: bool,
    pub grl: GrlConfig,
    /// Training progress in `[0, 1]` for scheduled reversal strengths.
    pub progress: f64,
}

impl ForwardMode {
    pub fn eval() -> Self {
        Self {
            train: false,
            grl: GrlConfig::default(),
            progress: 1.0,
        }
    }

    pub fn train(grl: GrlConfig, progress: f64) -> Self {
        Self {
            train: true,
            grl,
            progress,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub variant: VariantId,
    pub arch: ArchSpec,
    pub convs: Vec<(Conv1d<T>, BatchNorm<T>, Pool)>,
    pub fc1: Dense<T>,
    pub tagcn: Vec<(TagcnLayer<T>, BatchNorm<T>)>,
    pub classifier: Dense<T>,
    pub discriminator: Option<Discriminator<T>>,
}

fn layer_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("init/{name}")))
}

/// Builds a freshly initialized model. Each layer draws from its own
/// seeded stream, so variants sharing a part start from identical weights.
pub fn build_model<T: Scalar>(variant: VariantId, arch: &ArchSpec, seed: u64) -> Result<Model<T>> {
    arch.validate()?;
    let wiring = variant.wiring();
    let mut convs = Vec::with_capacity(arch.conv.len());
    let mut channels = 1;
    for (i, st) in arch.conv.iter().enumerate() {
        let conv = Conv1d::new(channels, st.channels, st.kernel, st.stride, &mut layer_rng(seed, &format!("conv{i}")))?;
        convs.push((conv, BatchNorm::new(st.channels)?, st.pool));
        channels = st.channels;
    }
    let fc1 = Dense::new(arch.flat_width()?, arch.fc1, &mut layer_rng(seed, "fc1"))?;
    let mut tagcn = Vec::new();
    if wiring.graph {
        let mut width = arch.fc1;
        for (i, &out) in arch.tagcn.iter().enumerate() {
            let layer = TagcnLayer::new(width, out, arch.hops, &mut layer_rng(seed, &format!("tagcn{i}")))?;
            tagcn.push((layer, BatchNorm::new(out)?));
            width = out;
        }
    }
    let embed = arch.embedding_width(wiring.graph);
    let classifier = Dense::new(embed, arch.classes, &mut layer_rng(seed, "classifier"))?;
    let discriminator = if wiring.adversarial {
        let mut d = Discriminator::new(embed, arch.discriminator_hidden, &mut layer_rng(seed, "discriminator"))?;
        d.dropout = arch.discriminator_dropout;
        Some(d)
    } else {
        None
    };
    Ok(Model {
        variant,
        arch: arch.clone(),
        convs,
        fc1,
        tagcn,
        classifier,
        discriminator,
    })
}

/// Copies `[N][L]` windows into an `[N, L]` constant.
pub fn windows_to_array<T: Scalar>(windows: &[Vec<f32>]) -> Result<DiffArray<T>> {
    let n = windows.len();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let len = windows[0].len();
    if len == 0 || windows.iter().any(|w| w.len() != len) {
        return Err(Error::invalid("forward_pass", "windows must share a non-zero length"));
    }
    let data = windows.iter().flatten().map(|&v| T::lit(v as f64)).collect();
    DiffArray::new(&[n, len], data)
}

impl<T: Scalar> Model<T> {
    pub fn wiring(&self) -> Wiring {
        self.variant.wiring()
    }

    /// Runs the network on `input: [N, L]`. Graph variants build a single
    /// graph over all `N` rows, so callers concatenate source and target
    /// windows beforehand.
    pub fn forward(&mut self, input: &DiffArray<T>, mode: ForwardMode, rng: &mut impl Rng) -> Result<Taps<T>> {
        let (n, len) = match *input.shape() {
            [n, l] if n > 0 && l > 0 => (n, l),
            _ => return Err(Error::Empty("batch")),
        };
        let mut h = input.reshape(&[n, 1, len])?;
        for (conv, bn, pool) in self.convs.iter_mut() {
            h = bn.forward(&conv.forward(&h)?, mode.train)?.relu()?;
            h = match *pool {
                Pool::Max(w) => h.max_pool1d(w)?,
                Pool::Adaptive(out) => h.adaptive_max_pool1d(out)?,
            };
        }
        let flat = h.shape()[1] * h.shape()[2];
        let cnn = h.reshape(&[n, flat])?;
        let mut fc1 = self.fc1.forward(&cnn)?.relu()?;
        if mode.train {
            fc1 = fc1.dropout(self.arch.fc1_dropout, rng)?;
        }

        let (graph, tagcn) = if self.tagcn.is_empty() {
            (None, None)
        } else {
            let similarity = if mode.train {
                fc1.dropout(self.arch.graph_dropout, rng)?
            } else {
                fc1.clone()
            };
            let k = self.arch.topk.unwrap_or_else(|| default_topk(n)).min(n);
            let graph = GraphBatch::build(&similarity, k)?;
            let mut g = fc1.clone();
            for (layer, bn) in self.tagcn.iter_mut() {
                g = graph_batchnorm(&layer.forward(&g, &graph.normalized)?, bn, mode.train)?;
            }
            (Some(graph), Some(g))
        };
        let embedding = tagcn.clone().unwrap_or_else(|| fc1.clone());
        let logits = self.classifier.forward(&embedding)?;
        let domain_probs = match &self.discriminator {
            Some(d) => Some(d.forward(&grl(&embedding, &mode.grl, mode.progress)?, mode.train, rng)?),
            None => None,
        };
        Ok(Taps {
            input: input.clone(),
            cnn,
            fc1,
            graph,
            tagcn,
            embedding,
            logits,
            domain_probs,
        })
    }

    /// Feature extractor (θ_g), discriminator (θ_d) and classifier (θ_c)
    /// parameter groups. Every trainable parameter is in exactly one.
    pub fn param_groups(&self) -> Result<Vec<ParamGroup<T>>> {
        let mut g = ParamGroup::new("feature_extractor", Role::FeatureExtractor);
        for (name, p) in self.feature_params() {
            g.push(name, p)?;
        }
        let mut c = ParamGroup::new("classifier", Role::Classifier);
        c.push("classifier.weight", self.classifier.weight.clone())?;
        c.push("classifier.bias", self.classifier.bias.clone())?;
        let mut groups = vec![g];
        if let Some(d) = &self.discriminator {
            groups.push(d.param_group()?);
        }
        groups.push(c);
        Ok(groups)
    }

    fn feature_params(&self) -> Vec<(String, DiffArray<T>)> {
        let mut out = Vec::new();
        for (i, (conv, bn, _)) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), conv.weight.clone()));
            out.push((format!("conv{i}.bias"), conv.bias.clone()));
            out.push((format!("conv{i}.bn.gamma"), bn.gamma.clone()));
            out.push((format!("conv{i}.bn.beta"), bn.beta.clone()));
        }
        out.push(("fc1.weight".into(), self.fc1.weight.clone()));
        out.push(("fc1.bias".into(), self.fc1.bias.clone()));
        for (i, (layer, bn)) in self.tagcn.iter().enumerate() {
            out.push((format!("tagcn{i}.alpha"), layer.alpha.clone()));
            out.push((format!("tagcn{i}.bias"), layer.bias.clone()));
            out.push((format!("tagcn{i}.bn.gamma"), bn.gamma.clone()));
            out.push((format!("tagcn{i}.bn.beta"), bn.beta.clone()));
        }
        out
    }

    /// Every trainable parameter, named and in a stable order.
    pub fn named_params(&self) -> Vec<(String, DiffArray<T>)> {
        let mut out = self.feature_params();
        if let Some(d) = &self.discriminator {
            out.extend(d.params().into_iter().map(|(n, p)| (format!("discriminator.{n}"), p)));
        }
        out.push(("classifier.weight".into(), self.classifier.weight.clone()));
        out.push(("classifier.bias".into(), self.classifier.bias.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    fn norms_mut(&mut self) -> Vec<(String, &mut BatchNorm<T>)> {
        let mut out: Vec<(String, &mut BatchNorm<T>)> = Vec::new();
        for (i, (_, bn, _)) in self.convs.iter_mut().enumerate() {
            out.push((format!("conv{i}.bn"), bn));
        }
        for (i, (_, bn)) in self.tagcn.iter_mut().enumerate() {
            out.push((format!("tagcn{i}.bn"), bn));
        }
        out
    }

    fn running_stats(&mut self) -> Result<Vec<(String, DiffArray<T>)>> {
        let mut out = Vec::new();
        for (name, bn) in self.norms_mut() {
            let c = bn.running_mean.len();
            out.push((format!("{name}.running_mean"), DiffArray::new(&[c], bn.running_mean.clone())?));
            out.push((format!("{name}.running_var"), DiffArray::new(&[c], bn.running_var.clone())?));
        }
        Ok(out)
    }

    /// Saves parameters and batch-norm running statistics; the header
    /// records the variant and the architecture fingerprint.
    pub fn save(&mut self, path: &Path, extra: BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra;
        meta.insert("variant".into(), self.variant.name().into());
        meta.insert("arch_hash".into(), format!("{:016x}", self.arch.hash()));
        meta.insert("arch".into(), serde_json::to_string(&self.arch)?);
        let mut entries = self.named_params();
        entries.extend(self.running_stats()?);
        save_checkpoint(path, &meta, &entries)
    }

    /// Rebuilds a model from a checkpoint written by [`Model::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let meta = &ckpt.header.meta;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{k}` in checkpoint header")))
        };
        let variant: VariantId = field("variant")?.parse()?;
        let arch: ArchSpec = serde_json::from_str(field("arch")?)?;
        let hash = format!("{:016x}", arch.hash());
        if &hash != field("arch_hash")? {
            return Err(Error::Checkpoint(format!(
                "architecture fingerprint mismatch: header {}, rebuilt {hash}",
                field("arch_hash")?
            )));
        }
        let mut model = build_model(variant, &arch, 0)?;
        let mut entries = model.named_params();
        let stats = model.running_stats()?;
        entries.extend(stats.iter().cloned());
        ckpt.restore_into(&entries)?;
        let mut stats = stats.into_iter();
        for (_, bn) in model.norms_mut() {
            bn.running_mean = stats.next().expect("paired").1.to_vec();
            bn.running_var = stats.next().expect("paired").1.to_vec();
        }
        Ok(model)
    }
}
