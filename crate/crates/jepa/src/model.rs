//! The full tokenizer + encoder composite, wired for the two paths the
//! trainer needs: the sparse context pass over a holed image, and the dense
//! pass used for the EMA target and for downstream feature extraction.

use crate::error::Result;
use crate::masking::MaskSet;
use crate::module::impl_module;
#[cfg(test)]
use crate::module::Module;
use crate::sparse::{mask_to_pixel_holes, MaskedFeatureMap};
use crate::stem::{Stem, StemConfig};
use crate::tensor::{add, Scalar, Tensor};
use crate::transformer::{
    sinusoidal_positions, substitute_mask_tokens, BackboneConfig, Encoder, MaskToken,
};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub stem_mid_channels: usize,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig) -> Self {
        ModelConfig { backbone, stem_mid_channels: 64 }
    }

    pub fn stem(&self) -> StemConfig {
        StemConfig {
            in_channels: 3,
            mid_channels: self.stem_mid_channels,
            embed_dim: self.backbone.embed_dim,
        }
    }
}

/// Sparse tokenizer stem + mask token + fixed positions + encoder.
#[derive(Debug, Clone)]
pub struct ScottVit<T: Scalar> {
    pub stem: Stem<T>,
    pub mask_token: MaskToken<T>,
    pub encoder: Encoder<T>,
    pub cfg: ModelConfig,
}

impl_module!(ScottVit { params: [], children: [stem, mask_token, encoder], copy: [cfg] });

impl<T: Scalar> ScottVit<T> {
    pub fn init<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.backbone.validate()?;
        Ok(ScottVit {
            stem: Stem::init(cfg.stem(), rng),
            mask_token: MaskToken::init(cfg.backbone.embed_dim, rng),
            encoder: Encoder::init(&cfg.backbone, rng),
            cfg,
        })
    }

    /// Context pass: carve pixel holes per the mask, tokenize sparsely,
    /// substitute the mask embedding at masked positions, add positions,
    /// encode. Returns `[N, d]` with N the full token grid.
    pub fn forward_context(&self, image: &Tensor<T>, mask: &MaskSet) -> Result<Tensor<T>> {
        let holes = mask_to_pixel_holes(image, mask)?;
        self.forward_holed(&holes)
    }

    /// Same as `forward_context` but starting from an already-holed map.
    pub fn forward_holed(&self, holes: &MaskedFeatureMap<T>) -> Result<Tensor<T>> {
        let (tokens, active) = self.stem.tokenize(holes)?;
        let substituted = substitute_mask_tokens(&tokens, &active, &self.mask_token)?;
        let (gh, gw) = (holes.active.h / 16, holes.active.w / 16);
        let pos = sinusoidal_positions(gh, gw, self.cfg.backbone.embed_dim)?;
        self.encoder.forward(&add(&substituted, &pos)?)
    }

    /// Dense pass over an intact image: tokenize, add positions, encode.
    pub fn forward_dense(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let full = MaskedFeatureMap::from_dense(image.clone())?;
        let (tokens, _) = self.stem.tokenize(&full)?;
        let &[_, h, w] = image.shape() else { unreachable!("tokenize validated the shape") };
        let pos = sinusoidal_positions(h / 16, w / 16, self.cfg.backbone.embed_dim)?;
        self.encoder.forward(&add(&tokens, &pos)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> ScottVit<f64> {
        let cfg = ModelConfig {
            backbone: BackboneConfig { embed_dim: 8, blocks: 1, heads: 2 },
            stem_mid_channels: 4,
        };
        ScottVit::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn reference_param_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m7: ScottVit<f32> =
            ScottVit::init(ModelConfig::new(BackboneConfig::scott7()), &mut rng).unwrap();
        assert_eq!(m7.param_count(), 13_640_064);
        assert!((m7.param_count() as f64 - 13.6e6).abs() / 13.6e6 < 0.05);
        let m12: ScottVit<f32> =
            ScottVit::init(ModelConfig::new(BackboneConfig::scott12()), &mut rng).unwrap();
        assert!((m12.param_count() as f64 - 22.4e6).abs() / 22.4e6 < 0.05);
    }

    #[test]
    fn context_and_dense_shapes() {
        let model = tiny_model(1);
        let img = Tensor::from_vec(
            (0..3 * 32 * 32).map(|i| (i % 7) as f64 * 0.1).collect(),
            &[3, 32, 32],
        )
        .unwrap();
        let mask = MaskSet::from_indices(2, 2, [1usize, 2]);
        assert_eq!(model.forward_context(&img, &mask).unwrap().shape(), &[4, 8]);
        assert_eq!(model.forward_dense(&img).unwrap().shape(), &[4, 8]);
    }

    #[test]
    fn context_ignores_pixels_under_the_mask() {
        let model = tiny_model(2);
        let base: Vec<f64> = (0..3 * 32 * 32).map(|i| (i % 11) as f64 * 0.07).collect();
        let img = Tensor::from_vec(base.clone(), &[3, 32, 32]).unwrap();
        let mask = MaskSet::from_indices(2, 2, [0usize, 3]);
        let out1 = model.forward_context(&img, &mask).unwrap();
        // scribble over the masked patches (top-left and bottom-right 16x16)
        let mut scribbled = base;
        for ch in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    scribbled[ch * 32 * 32 + y * 32 + x] = 99.0;
                    scribbled[ch * 32 * 32 + (16 + y) * 32 + 16 + x] = -99.0;
                }
            }
        }
        let img2 = Tensor::from_vec(scribbled, &[3, 32, 32]).unwrap();
        let out2 = model.forward_context(&img2, &mask).unwrap();
        for (a, b) in out1.data().iter().zip(out2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn names_are_unique_and_stable() {
        let model = tiny_model(3);
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"stem.conv1.weight".to_string()));
        assert!(names.contains(&"mask_token.embedding".to_string()));
        assert!(names.contains(&"encoder.blocks.0.attn.query.weight".to_string()));
        assert!(names.contains(&"encoder.final_norm.gamma".to_string()));
    }
}
