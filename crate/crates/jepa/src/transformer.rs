//! The transformer side of the model: mask-token substitution, fixed 2-d
//! sinusoidal positions, pre-norm encoder blocks with SwiGLU FFNs, and the
//! shallow predictor. No class token and no classification head; the frozen
//! patch outputs are the downstream features.

use crate::error::{Error, Result};
use crate::module::impl_module;
use crate::tensor::{
    add, add_bias, concat, emit, layer_norm, matmul, mul, narrow, scale, silu, softmax_last,
    transpose2, Scalar, Tensor,
};
use rand::Rng;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl BackboneConfig {
    pub fn scott7() -> Self {
        BackboneConfig { embed_dim: 384, blocks: 7, heads: 4 }
    }

    pub fn scott12() -> Self {
        BackboneConfig { embed_dim: 384, blocks: 12, heads: 6 }
    }

    /// SwiGLU hidden width matching the 4d-MLP parameter budget.
    pub fn swiglu_hidden(&self) -> usize {
        (8.0 * self.embed_dim as f64 / 3.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl PredictorConfig {
    /// Depth-3 predictor at backbone width.
    pub fn standard(embed_dim: usize, heads: usize) -> Self {
        PredictorConfig { embed_dim, blocks: 3, heads }
    }
}

/// Sample a centered normal(0, std) truncated at two standard deviations.
pub(crate) fn trunc_normal<T: Scalar, R: Rng>(n: usize, std: f64, rng: &mut R) -> Vec<T> {
    let dist = rand_distr_normal(std);
    (0..n)
        .map(|_| {
            loop {
                let v = dist(rng);
                if v.abs() <= 2.0 * std {
                    return T::from_f64(v);
                }
            }
        })
        .collect()
}

// Box-Muller keeps us off extra distribution deps and stays reproducible.
fn rand_distr_normal<R: Rng>(std: f64) -> impl Fn(&mut R) -> f64 {
    move |rng: &mut R| {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>, // [in, out]
    pub bias: Tensor<T>,   // [out]
}

impl_module!(Linear { params: [weight, bias], children: [], copy: [] });

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::from_vec(trunc_normal(fan_in * fan_out, 0.02, rng), &[fan_in, fan_out])
                .expect("init shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        Linear { weight: Tensor::zeros(&[fan_in, fan_out]), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        add_bias(&matmul(x, &self.weight)?, &self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl_module!(LayerNormParams { params: [gamma, beta], children: [], copy: [] });

impl<T: Scalar> LayerNormParams<T> {
    pub fn init(d: usize) -> Self {
        LayerNormParams { gamma: Tensor::full(&[d], T::ONE), beta: Tensor::zeros(&[d]) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm(x, Some(&self.gamma), Some(&self.beta), LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T: Scalar> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub heads: usize,
}

impl_module!(MultiHeadAttention { params: [], children: [query, key, value, output], copy: [heads] });

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn init<R: Rng>(d: usize, heads: usize, rng: &mut R) -> Self {
        MultiHeadAttention {
            query: Linear::init(d, d, rng),
            key: Linear::init(d, d, rng),
            value: Linear::init(d, d, rng),
            output: Linear::init(d, d, rng),
            heads,
        }
    }

    /// Scaled dot-product self-attention over `[N, d]` tokens.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_kv(x, x)
    }

    /// Cross-attention: queries from `q_in`, keys/values from `kv_in`.
    pub fn forward_kv(&self, q_in: &Tensor<T>, kv_in: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.query.weight.shape()[1];
        let dh = d / self.heads;
        let q = self.query.forward(q_in)?;
        let k = self.key.forward(kv_in)?;
        let v = self.value.forward(kv_in)?;
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = narrow(&q, 1, h * dh, dh)?;
            let kh = narrow(&k, 1, h * dh, dh)?;
            let vh = narrow(&v, 1, h * dh, dh)?;
            let scores = scale(&matmul(&qh, &transpose2(&kh)?)?, 1.0 / (dh as f64).sqrt());
            let attn = softmax_last(&scores);
            head_outputs.push(matmul(&attn, &vh)?);
        }
        let refs: Vec<&Tensor<T>> = head_outputs.iter().collect();
        self.output.forward(&concat(&refs, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct SwiGluFfn<T: Scalar> {
    pub gate: Linear<T>,
    pub up: Linear<T>,
    pub down: Linear<T>,
}

impl_module!(SwiGluFfn { params: [], children: [gate, up, down], copy: [] });

impl<T: Scalar> SwiGluFfn<T> {
    pub fn init<R: Rng>(d: usize, hidden: usize, rng: &mut R) -> Self {
        SwiGluFfn {
            gate: Linear::init(d, hidden, rng),
            up: Linear::init(d, hidden, rng),
            down: Linear::init(hidden, d, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let gated = mul(&silu(&self.gate.forward(x)?), &self.up.forward(x)?)?;
        self.down.forward(&gated)
    }
}

/// Pre-norm encoder block: x += MHSA(LN(x)); x += SwiGLU(LN(x)).
#[derive(Debug, Clone)]
pub struct Block<T: Scalar> {
    pub norm1: LayerNormParams<T>,
    pub attn: MultiHeadAttention<T>,
    pub norm2: LayerNormParams<T>,
    pub ffn: SwiGluFfn<T>,
}

impl_module!(Block { params: [], children: [norm1, attn, norm2, ffn], copy: [] });

impl<T: Scalar> Block<T> {
    pub fn init<R: Rng>(d: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        Block {
            norm1: LayerNormParams::init(d),
            attn: MultiHeadAttention::init(d, heads, rng),
            norm2: LayerNormParams::init(d),
            ffn: SwiGluFfn::init(d, hidden, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = add(x, &self.attn.forward(&self.norm1.forward(x)?)?)?;
        add(&x, &self.ffn.forward(&self.norm2.forward(&x)?)?)
    }
}

/// Stack of encoder blocks with a final LayerNorm.
#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    pub blocks: Vec<Block<T>>,
    pub final_norm: LayerNormParams<T>,
}

impl_module!(Encoder { params: [], children: [blocks, final_norm], copy: [] });

impl<T: Scalar> Encoder<T> {
    pub fn init<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let hidden = cfg.swiglu_hidden();
        Encoder {
            blocks: (0..cfg.blocks)
                .map(|_| Block::init(cfg.embed_dim, cfg.heads, hidden, rng))
                .collect(),
            final_norm: LayerNormParams::init(cfg.embed_dim),
        }
    }

    pub fn forward(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = tokens.clone();
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.final_norm.forward(&x)
    }
}

/// The shared learnable mask embedding e_M.
#[derive(Debug, Clone)]
pub struct MaskToken<T: Scalar> {
    pub embedding: Tensor<T>, // [d]
}

impl_module!(MaskToken { params: [embedding], children: [], copy: [] });

impl<T: Scalar> MaskToken<T> {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        MaskToken {
            embedding: Tensor::from_vec(trunc_normal(d, 0.02, rng), &[d]).expect("init shape"),
        }
    }
}

/// Replace every inactive token row with the shared mask embedding; active
/// rows pass through unchanged.
pub fn substitute_mask_tokens<T: Scalar>(
    tokens: &Tensor<T>,
    activity: &[bool],
    mask_token: &MaskToken<T>,
) -> Result<Tensor<T>> {
    let &[n, d] = tokens.shape() else {
        return Err(Error::Dim(format!("expected [N, d] tokens, got {:?}", tokens.shape())));
    };
    if activity.len() != n {
        return Err(Error::Dim(format!(
            "activity length {} != token count {n}",
            activity.len()
        )));
    }
    if mask_token.embedding.shape() != [d] {
        return Err(Error::Dim(format!(
            "mask token shape {:?} != [{d}]",
            mask_token.embedding.shape()
        )));
    }
    let em = mask_token.embedding.data();
    let td = tokens.data();
    let mut out = Vec::with_capacity(n * d);
    for (i, &visible) in activity.iter().enumerate() {
        if visible {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        } else {
            out.extend_from_slice(em);
        }
    }
    let flags: std::rc::Rc<Vec<bool>> = std::rc::Rc::new(activity.to_vec());
    Ok(emit(&[tokens, &mask_token.embedding], out, vec![n, d], move || {
        Box::new(move |g, needs| {
            let gt = needs[0].then(|| {
                let mut gt = vec![T::ZERO; n * d];
                for (i, &visible) in flags.iter().enumerate() {
                    if visible {
                        gt[i * d..(i + 1) * d].copy_from_slice(&g[i * d..(i + 1) * d]);
                    }
                }
                gt
            });
            let ge = needs[1].then(|| {
                let mut ge = vec![T::ZERO; d];
                for (i, &visible) in flags.iter().enumerate() {
                    if !visible {
                        for (a, &b) in ge.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *a += b;
                        }
                    }
                }
                ge
            });
            vec![gt, ge]
        })
    }))
}

/// Fixed 2-d factorized sinusoidal positions: d/4 frequencies per axis,
/// rows laid out `[sin(x), cos(x), sin(y), cos(y)]` in row-major token order.
pub fn sinusoidal_positions<T: Scalar>(grid_h: usize, grid_w: usize, d: usize) -> Result<Tensor<T>> {
    if d % 4 != 0 {
        return Err(Error::Config(format!(
            "positional embedding needs embed dim divisible by 4, got {d}"
        )));
    }
    let quarter = d / 4;
    let n = grid_h * grid_w;
    let mut out = Vec::with_capacity(n * d);
    let omega = |i: usize| 1.0 / 10000f64.powf(i as f64 / quarter as f64);
    for y in 0..grid_h {
        for x in 0..grid_w {
            for i in 0..quarter {
                out.push(T::from_f64((x as f64 * omega(i)).sin()));
            }
            for i in 0..quarter {
                out.push(T::from_f64((x as f64 * omega(i)).cos()));
            }
            for i in 0..quarter {
                out.push(T::from_f64((y as f64 * omega(i)).sin()));
            }
            for i in 0..quarter {
                out.push(T::from_f64((y as f64 * omega(i)).cos()));
            }
        }
    }
    Tensor::from_vec(out, &[n, d])
}

/// The shallow predictor: a small standard transformer at backbone width.
#[derive(Debug, Clone)]
pub struct Predictor<T: Scalar> {
    pub blocks: Vec<Block<T>>,
    pub final_norm: LayerNormParams<T>,
}

impl_module!(Predictor { params: [], children: [blocks, final_norm], copy: [] });

impl<T: Scalar> Predictor<T> {
    pub fn init<R: Rng>(cfg: &PredictorConfig, rng: &mut R) -> Self {
        let hidden = BackboneConfig { embed_dim: cfg.embed_dim, blocks: cfg.blocks, heads: cfg.heads }
            .swiglu_hidden();
        Predictor {
            blocks: (0..cfg.blocks)
                .map(|_| Block::init(cfg.embed_dim, cfg.heads, hidden, rng))
                .collect(),
            final_norm: LayerNormParams::init(cfg.embed_dim),
        }
    }

    pub fn forward(&self, s_x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = s_x.clone();
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.final_norm.forward(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig { embed_dim: 8, blocks: 1, heads: 2 }
    }

    #[test]
    fn variant_configs() {
        assert_eq!((BackboneConfig::scott7().blocks, BackboneConfig::scott7().heads), (7, 4));
        assert_eq!((BackboneConfig::scott12().blocks, BackboneConfig::scott12().heads), (12, 6));
        BackboneConfig::scott7().validate().unwrap();
    }

    #[test]
    fn substitute_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mt: MaskToken<f64> = MaskToken::init(2, &mut rng);
        let tokens = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        // all active: identity
        let out = substitute_mask_tokens(&tokens, &[true, true, true], &mt).unwrap();
        assert_eq!(out.data(), tokens.data());
        // all inactive: every row is e_M
        let out = substitute_mask_tokens(&tokens, &[false, false, false], &mt).unwrap();
        let em = mt.embedding.data();
        assert_eq!(out.data(), &[em[0], em[1], em[0], em[1], em[0], em[1]]);
        // mixed
        let out = substitute_mask_tokens(&tokens, &[true, false, true], &mt).unwrap();
        assert_eq!(&out.data()[0..2], &[1.0, 2.0]);
        assert_eq!(&out.data()[2..4], em);
        assert_eq!(&out.data()[4..6], &[5.0, 6.0]);
    }

    #[test]
    fn positions_origin_and_range() {
        let pos: Tensor<f64> = sinusoidal_positions(14, 14, 384).unwrap();
        let row0 = &pos.data()[..384];
        for i in 0..96 {
            assert_eq!(row0[i], 0.0); // sin(x=0)
            assert_eq!(row0[96 + i], 1.0); // cos(x=0)
            assert_eq!(row0[192 + i], 0.0); // sin(y=0)
            assert_eq!(row0[288 + i], 1.0); // cos(y=0)
        }
        assert!(pos.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn positions_all_rows_distinct() {
        let pos: Tensor<f64> = sinusoidal_positions(14, 14, 384).unwrap();
        let d = 384;
        for a in 0..196 {
            for b in a + 1..196 {
                let ra = &pos.data()[a * d..(a + 1) * d];
                let rb = &pos.data()[b * d..(b + 1) * d];
                assert!(ra != rb, "rows {a} and {b} identical");
            }
        }
    }

    #[test]
    fn positions_need_dim_divisible_by_4() {
        assert!(sinusoidal_positions::<f64>(2, 2, 6).is_err());
    }

    #[test]
    fn zeroed_output_projections_make_identity_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny_cfg();
        let mut block: Block<f64> = Block::init(cfg.embed_dim, cfg.heads, 20, &mut rng);
        block.attn.output = Linear::zeroed(8, 8);
        block.ffn.down = Linear::zeroed(20, 8);
        let x = Tensor::from_vec((0..24).map(|i| i as f64 * 0.1).collect(), &[3, 8]).unwrap();
        let y = block.forward(&x).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance_one_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_cfg();
        let block: Block<f64> = Block::init(cfg.embed_dim, cfg.heads, 20, &mut rng);
        let n = 5;
        let x = Tensor::from_vec(
            (0..n * 8).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.13).collect(),
            &[n, 8],
        )
        .unwrap();
        let y = block.forward(&x).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let xp = crate::tensor::index_rows(&x, &perm).unwrap();
        let yp = block.forward(&xp).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..8 {
                let a = yp.data()[i * 8 + j];
                let b = y.data()[p * 8 + j];
                assert!((a - b).abs() < 1e-10, "perm mismatch at ({i}, {j})");
            }
        }
    }

    #[test]
    fn predictor_depth_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = PredictorConfig::standard(8, 2);
        assert_eq!(cfg.blocks, 3);
        let pred: Predictor<f64> = Predictor::init(&cfg, &mut rng);
        assert_eq!(pred.blocks.len(), 3);
        let x = Tensor::from_vec((0..40).map(|i| i as f64 * 0.01).collect(), &[5, 8]).unwrap();
        assert_eq!(pred.forward(&x).unwrap().shape(), &[5, 8]);
    }

    #[test]
    fn encoder_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_cfg();
        let enc: Encoder<f64> = Encoder::init(&cfg, &mut rng);
        let x = Tensor::from_vec((0..16).map(|i| i as f64 * 0.2).collect(), &[2, 8]).unwrap();
        let a = enc.forward(&x).unwrap();
        let b = enc.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
