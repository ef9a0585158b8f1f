//! Frozen-feature evaluation: linear probing (mean pool → LayerNorm →
//! classifier) and attentive probing (learnable query cross-attention →
//! SwiGLU → LayerNorm → classifier), plus Top-1/Top-5 accuracy.

use crate::augment::{crop_flip_normalize, eval_transform, AugmentConfig};
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ScottVit;
use crate::module::{impl_module, Module};
use crate::optim::AdamW;
use crate::tensor::{
    add, concat, cross_entropy, mean_rows, reshape, Scalar, Tape, Tensor,
};
use crate::transformer::{
    trunc_normal, LayerNormParams, Linear, MultiHeadAttention, SwiGluFfn,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::str::FromStr;

pub const ATTENTIVE_HEADS: usize = 6;
pub const PROBE_LR: f64 = 1e-3;
pub const PROBE_WD: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Linear,
    Attentive,
}

impl FromStr for ProbeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProbeKind::Linear),
            "attentive" => Ok(ProbeKind::Attentive),
            other => Err(Error::Config(format!(
                "unknown probe kind {other:?} (expected linear|attentive)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub classes: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(kind: ProbeKind, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("probe needs at least 2 classes, got {classes}")));
        }
        Ok(ProbeConfig { kind, classes, epochs: 100, batch: 32, lr: PROBE_LR, seed: 0 })
    }
}

/// Mean pool over tokens, LayerNorm, linear classifier.
#[derive(Debug, Clone)]
pub struct LinearProbe<T: Scalar> {
    pub norm: LayerNormParams<T>,
    pub head: Linear<T>,
}

impl_module!(LinearProbe { params: [], children: [norm, head], copy: [] });

impl<T: Scalar> LinearProbe<T> {
    pub fn init<R: Rng>(d: usize, classes: usize, rng: &mut R) -> Self {
        LinearProbe { norm: LayerNormParams::init(d), head: Linear::init(d, classes, rng) }
    }

    /// `[N, d]` frozen features → `[classes]` logits.
    pub fn forward(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let d = s.shape()[1];
        let pooled = reshape(&mean_rows(s)?, &[1, d])?;
        let classes = self.head.weight.shape()[1];
        reshape(&self.head.forward(&self.norm.forward(&pooled)?)?, &[classes])
    }
}

/// Learnable query cross-attention block over the frozen tokens.
#[derive(Debug, Clone)]
pub struct AttentiveProbe<T: Scalar> {
    pub query: Tensor<T>, // [1, d]
    pub attn: MultiHeadAttention<T>,
    pub ffn: SwiGluFfn<T>,
    pub norm: LayerNormParams<T>,
    pub head: Linear<T>,
}

impl_module!(AttentiveProbe { params: [query], children: [attn, ffn, norm, head], copy: [] });

impl<T: Scalar> AttentiveProbe<T> {
    pub fn init<R: Rng>(d: usize, classes: usize, rng: &mut R) -> Self {
        let hidden = (8.0 * d as f64 / 3.0).round() as usize;
        AttentiveProbe {
            query: Tensor::from_vec(trunc_normal(d, 0.02, rng), &[1, d]).expect("init shape"),
            attn: MultiHeadAttention::init(d, ATTENTIVE_HEADS, rng),
            ffn: SwiGluFfn::init(d, hidden, rng),
            norm: LayerNormParams::init(d),
            head: Linear::init(d, classes, rng),
        }
    }

    /// `[N, d]` frozen features → `[classes]` logits.
    pub fn forward(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let attended = self.attn.forward_kv(&self.query, s)?;
        let x = add(&self.query, &attended)?;
        let x = self.norm.forward(&self.ffn.forward(&x)?)?;
        let classes = self.head.weight.shape()[1];
        reshape(&self.head.forward(&x)?, &[classes])
    }
}

#[derive(Debug, Clone)]
pub enum Probe<T: Scalar> {
    Linear(LinearProbe<T>),
    Attentive(AttentiveProbe<T>),
}

impl<T: Scalar> Probe<T> {
    pub fn init<R: Rng>(kind: ProbeKind, d: usize, classes: usize, rng: &mut R) -> Self {
        match kind {
            ProbeKind::Linear => Probe::Linear(LinearProbe::init(d, classes, rng)),
            ProbeKind::Attentive => Probe::Attentive(AttentiveProbe::init(d, classes, rng)),
        }
    }

    pub fn kind(&self) -> ProbeKind {
        match self {
            Probe::Linear(_) => ProbeKind::Linear,
            Probe::Attentive(_) => ProbeKind::Attentive,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Probe::Linear(p) => p.head.weight.shape()[1],
            Probe::Attentive(p) => p.head.weight.shape()[1],
        }
    }

    pub fn forward(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Probe::Linear(p) => p.forward(s),
            Probe::Attentive(p) => p.forward(s),
        }
    }
}

impl<T: Scalar> Module<T> for Probe<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match self {
            Probe::Linear(p) => p.visit(prefix, f),
            Probe::Attentive(p) => p.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            Probe::Linear(p) => p.visit_mut(prefix, f),
            Probe::Attentive(p) => p.visit_mut(prefix, f),
        }
    }
    fn map(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        match self {
            Probe::Linear(p) => Probe::Linear(p.map(f)),
            Probe::Attentive(p) => Probe::Attentive(p.map(f)),
        }
    }
}

fn cosine_lr(frac: f64, peak: f64) -> f64 {
    peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Train a probe on frozen backbone features. The backbone is only ever run
/// outside any tape, so its parameters cannot receive gradients. Probe
/// training augmentation is crop + flip only.
pub fn train_probe<T: Scalar>(
    backbone: &ScottVit<T>,
    dataset: &Dataset<T>,
    train_cfg: &TrainConfig,
    cfg: &ProbeConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Probe<T>> {
    if dataset.is_empty() {
        return Err(Error::Data("probe training needs a nonempty dataset".into()));
    }
    let d = backbone.cfg.backbone.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = Probe::init(cfg.kind, d, cfg.classes, &mut rng);
    let mut opt: AdamW<T> = AdamW::new(0.9, 0.999, 1e-8);
    let aug = AugmentConfig {
        jitter_p: 0.0,
        grayscale_p: 0.0,
        blur_p: 0.0,
        ..train_cfg.augment()
    };
    let n = dataset.len();
    let total_steps = cfg.epochs * n.div_ceil(cfg.batch);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(((epoch as u64) << 32) | 0xFFFF_FFFF);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            // frozen features, computed outside any tape
            let mut feats = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                sample_rng.set_stream(((epoch as u64) << 32) | idx as u64);
                let view = crop_flip_normalize(
                    &dataset.samples[idx],
                    train_cfg.image_size,
                    &aug,
                    &mut sample_rng,
                )?;
                feats.push(backbone.forward_dense(&view)?.detach());
                labels.push(dataset.samples[idx].label.ok_or_else(|| {
                    Error::Data(format!("sample {idx} has no label"))
                })?);
            }
            let tape: Tape<T> = Tape::new();
            let watched = probe.map(&mut |p| tape.watch(p));
            let logits_rows: Vec<Tensor<T>> = feats
                .iter()
                .map(|s| {
                    let l = watched.forward(s)?;
                    reshape(&l, &[1, cfg.classes])
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor<T>> = logits_rows.iter().collect();
            let logits = concat(&refs, 0)?;
            let loss = cross_entropy(&logits, &labels)?;
            tape.backward(&loss)?;
            let mut grads: BTreeMap<String, Vec<T>> = BTreeMap::new();
            watched.visit("", &mut |name, t| {
                if let Some(g) = tape.grad(t) {
                    grads.insert(name.to_string(), g.data().to_vec());
                }
            });
            let lr = cosine_lr(step as f64 / total_steps.max(1) as f64, cfg.lr);
            opt.step(&mut probe, "", &grads, lr, PROBE_WD)?;
            step += 1;
            epoch_loss += loss.item().to_f64();
            batches += 1;
        }
        on_epoch(epoch, epoch_loss / batches.max(1) as f64);
    }
    Ok(probe)
}

/// Top-1 / Top-5 accuracy over a labeled dataset with the resize-then-
/// center-crop evaluation transform.
pub fn evaluate<T: Scalar>(
    backbone: &ScottVit<T>,
    probe: &Probe<T>,
    dataset: &Dataset<T>,
    train_cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::Contract("evaluate on an empty dataset".into()));
    }
    let aug = train_cfg.augment();
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for (idx, sample) in dataset.samples.iter().enumerate() {
        let label = sample
            .label
            .ok_or_else(|| Error::Data(format!("sample {idx} has no label")))?;
        let view = eval_transform(sample, train_cfg.image_size, &aug)?;
        let feats = backbone.forward_dense(&view)?;
        let logits = probe.forward(&feats)?;
        let scores = logits.data();
        let better = |l: usize| scores.iter().filter(|&&s| s > scores[l]).count();
        let rank = better(label);
        if rank == 0 {
            top1 += 1;
        }
        if rank < 5 {
            top5 += 1;
        }
    }
    let n = dataset.len() as f64;
    Ok((top1 as f64 / n, top5 as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::model::ModelConfig;
    use crate::transformer::BackboneConfig;

    fn tiny_backbone(seed: u64) -> ScottVit<f64> {
        let cfg = ModelConfig {
            backbone: BackboneConfig { embed_dim: 12, blocks: 1, heads: 2 },
            stem_mid_channels: 4,
        };
        ScottVit::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig::parse(
            "embed_dim=12\nblocks=1\nheads=2\nstem_mid_channels=4\nimage_size=32\n\
             epochs=1\nwarmup_epochs=0\nbatch=2",
        )
        .unwrap()
    }

    #[test]
    fn linear_probe_pools_by_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probe: LinearProbe<f64> = LinearProbe::init(2, 3, &mut rng);
        // [1,3] and [3,1] pool to [2,2]; identical tokens pool to themselves
        let toks = Tensor::from_vec(vec![1.0, 3.0, 3.0, 1.0], &[2, 2]).unwrap();
        let pooled = mean_rows(&toks).unwrap();
        assert_eq!(pooled.data(), &[2.0, 2.0]);
        let same = Tensor::from_vec(vec![0.5, -0.5, 0.5, -0.5], &[2, 2]).unwrap();
        let one = Tensor::from_vec(vec![0.5, -0.5], &[1, 2]).unwrap();
        let a = probe.forward(&same).unwrap();
        let b = probe.forward(&one).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_classifier_gives_uniform_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut probe: LinearProbe<f64> = LinearProbe::init(4, 5, &mut rng);
        probe.head = Linear::zeroed(4, 5);
        let toks = Tensor::from_vec((0..8).map(|i| i as f64).collect(), &[2, 4]).unwrap();
        let logits = probe.forward(&toks).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_probe_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probe: LinearProbe<f64> = LinearProbe::init(3, 4, &mut rng);
        let toks =
            Tensor::from_vec((0..12).map(|i| (i as f64).cos()).collect(), &[4, 3]).unwrap();
        let perm = crate::tensor::index_rows(&toks, &[2, 0, 3, 1]).unwrap();
        let a = probe.forward(&toks).unwrap();
        let b = probe.forward(&perm).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attentive_probe_single_token_and_identical_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probe: AttentiveProbe<f64> = AttentiveProbe::init(12, 3, &mut rng);
        let one = Tensor::from_vec((0..12).map(|i| i as f64 * 0.1).collect(), &[1, 12]).unwrap();
        let a = probe.forward(&one).unwrap();
        assert_eq!(a.shape(), &[3]);
        // identical tokens: output independent of how many copies there are
        let row: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let three = Tensor::from_vec([row.clone(), row.clone(), row.clone()].concat(), &[3, 12])
            .unwrap();
        let single = Tensor::from_vec(row, &[1, 12]).unwrap();
        let x = probe.forward(&three).unwrap();
        let y = probe.forward(&single).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn backbone_frozen_during_probe_training() {
        let backbone = tiny_backbone(4);
        let before: Vec<Vec<f64>> =
            backbone.named_params().iter().map(|(_, t)| t.to_f64_vec()).collect();
        let ds = synth_dataset::<f64>(4, 2, 32, 5).unwrap();
        let cfg = ProbeConfig {
            epochs: 2,
            batch: 2,
            ..ProbeConfig::new(ProbeKind::Linear, 2).unwrap()
        };
        train_probe(&backbone, &ds, &tiny_train_cfg(), &cfg, |_, _| {}).unwrap();
        let after: Vec<Vec<f64>> =
            backbone.named_params().iter().map(|(_, t)| t.to_f64_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn evaluate_oracle_classifier() {
        let backbone = tiny_backbone(6);
        let ds = synth_dataset::<f64>(6, 2, 32, 7).unwrap();
        // train long enough that the tiny synthetic problem is separable
        let cfg = ProbeConfig {
            epochs: 20,
            batch: 3,
            ..ProbeConfig::new(ProbeKind::Attentive, 2).unwrap()
        };
        let probe = train_probe(&backbone, &ds, &tiny_train_cfg(), &cfg, |_, _| {}).unwrap();
        let (top1, top5) = evaluate(&backbone, &probe, &ds, &tiny_train_cfg()).unwrap();
        assert!(top1 <= top5 + 1e-12);
        // 2 classes <= 5 -> top5 is definitionally perfect
        assert_eq!(top5, 1.0);
    }

    #[test]
    fn empty_dataset_is_contract_error() {
        let backbone = tiny_backbone(8);
        let mut ds = synth_dataset::<f64>(2, 2, 32, 0).unwrap();
        let probe = Probe::init(ProbeKind::Linear, 12, 2, &mut ChaCha8Rng::seed_from_u64(0));
        ds.samples.clear();
        assert!(matches!(
            evaluate(&backbone, &probe, &ds, &tiny_train_cfg()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_manual() {
        let logits = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 0.0, 0.0, 0.0], &[2, 3]).unwrap();
        let loss = cross_entropy(&logits, &[2, 0]).unwrap();
        // row 1: -log(e^3/(e^1+e^2+e^3)); row 2: -log(1/3)
        let z: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        let expected = (-(3f64.exp() / z).ln() + (3f64).ln()) / 2.0;
        assert!((loss.item() - expected).abs() < 1e-12);
    }
}
