//! Masked feature maps and the submanifold sparse layer family.
//!
//! A [`MaskedFeatureMap`] pairs a `[C, H, W]` feature tensor with a binary
//! activity map. Sparse layers compute only where the kernel center covers
//! an active input position, so a patch-aligned hole pattern survives the
//! whole stem instead of getting diluted by padding and overlap.

use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::tensor::{emit, Scalar, Tensor};
use std::rc::Rc;

/// Binary activity map over spatial positions (true = non-empty).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivityMap {
    pub h: usize,
    pub w: usize,
    cells: Vec<bool>,
}

impl ActivityMap {
    pub fn full(h: usize, w: usize) -> Self {
        ActivityMap { h, w, cells: vec![true; h * w] }
    }

    pub fn empty(h: usize, w: usize) -> Self {
        ActivityMap { h, w, cells: vec![false; h * w] }
    }

    pub fn from_cells(h: usize, w: usize, cells: Vec<bool>) -> Self {
        assert_eq!(cells.len(), h * w);
        ActivityMap { h, w, cells }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.w + x]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count_active(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_full(&self) -> bool {
        self.cells.iter().all(|&c| c)
    }
}

/// A spatial feature map `[C, H, W]` paired with its activity map.
/// Features at inactive positions are exactly zero.
#[derive(Debug, Clone)]
pub struct MaskedFeatureMap<T: Scalar> {
    pub features: Tensor<T>,
    pub active: ActivityMap,
}

impl<T: Scalar> MaskedFeatureMap<T> {
    /// Wrap a dense tensor as a fully active map.
    pub fn from_dense(features: Tensor<T>) -> Result<Self> {
        let &[_, h, w] = features.shape() else {
            return Err(Error::Dim(format!(
                "expected [C, H, W] features, got {:?}",
                features.shape()
            )));
        };
        Ok(MaskedFeatureMap { features, active: ActivityMap::full(h, w) })
    }

    /// Zero the features at inactive positions and pair them with `active`.
    /// The zeroing is a recorded op, so gradients at inactive positions are
    /// exactly zero as well.
    pub fn new(features: Tensor<T>, active: ActivityMap) -> Result<Self> {
        let &[c, h, w] = features.shape() else {
            return Err(Error::Dim(format!(
                "expected [C, H, W] features, got {:?}",
                features.shape()
            )));
        };
        if (active.h, active.w) != (h, w) {
            return Err(Error::Dim(format!(
                "activity map {}x{} does not match feature map {h}x{w}",
                active.h, active.w
            )));
        }
        let features = apply_activity(&features, &active, c);
        Ok(MaskedFeatureMap { features, active })
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }
}

fn apply_activity<T: Scalar>(x: &Tensor<T>, active: &ActivityMap, c: usize) -> Tensor<T> {
    let plane = active.h * active.w;
    let mask: Rc<Vec<bool>> = Rc::new(active.cells.clone());
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask[i % plane] { v } else { T::ZERO })
        .collect();
    let mask2 = Rc::clone(&mask);
    emit(&[x], data, vec![c, active.h, active.w], move || {
        Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                g.iter()
                    .enumerate()
                    .map(|(i, &v)| if mask2[i % plane] { v } else { T::ZERO })
                    .collect()
            })]
        })
    })
}

/// Activity propagation of a submanifold conv: an output cell is active iff
/// the kernel-center input position is active. Centers that fall outside the
/// image count as inactive.
pub fn conv_activity(active: &ActivityMap, kernel: usize, stride: usize, padding: usize) -> ActivityMap {
    let half = (kernel - 1) / 2;
    let ho = (active.h + 2 * padding - kernel) / stride + 1;
    let wo = (active.w + 2 * padding - kernel) / stride + 1;
    let mut cells = vec![false; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            let cy = (stride * i + half) as isize - padding as isize;
            let cx = (stride * j + half) as isize - padding as isize;
            if cy >= 0 && (cy as usize) < active.h && cx >= 0 && (cx as usize) < active.w {
                cells[i * wo + j] = active.get(cy as usize, cx as usize);
            }
        }
    }
    ActivityMap::from_cells(ho, wo, cells)
}

/// Activity propagation of the stride-2 max-blur-pool: nearest-neighbor
/// downsample (kernel-center rule with stride 2).
pub fn pool_activity(active: &ActivityMap) -> ActivityMap {
    let ho = active.h.div_ceil(2);
    let wo = active.w.div_ceil(2);
    let mut cells = vec![false; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            cells[i * wo + j] = active.get(2 * i, 2 * j);
        }
    }
    ActivityMap::from_cells(ho, wo, cells)
}

/// Submanifold sparse 2-d convolution. Inactive input taps contribute
/// nothing; inactive outputs are zero.
pub fn sparse_conv2d<T: Scalar>(
    x: &MaskedFeatureMap<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<MaskedFeatureMap<T>> {
    let &[cout, cin, k, k2] = weight.shape() else {
        return Err(Error::Dim(format!(
            "expected [Cout, Cin, K, K] weight, got {:?}",
            weight.shape()
        )));
    };
    if k != k2 || k % 2 == 0 {
        return Err(Error::Dim(format!("kernel must be square with odd size, got {k}x{k2}")));
    }
    if bias.shape() != [cout] {
        return Err(Error::Dim(format!("bias shape {:?} != [{cout}]", bias.shape())));
    }
    if x.channels() != cin {
        return Err(Error::Dim(format!(
            "input has {} channels, weight expects {cin}",
            x.channels()
        )));
    }
    let (h, w) = (x.active.h, x.active.w);
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::Geometry(format!(
            "input {h}x{w} too small for kernel {k} with padding {padding}"
        )));
    }
    let active_out = conv_activity(&x.active, k, stride, padding);
    let (ho, wo) = (active_out.h, active_out.w);

    // weight transposed to [ky][kx][cin][cout] so the inner accumulation
    // runs contiguously over cout
    let wd = weight.data();
    let mut wt = vec![T::ZERO; k * k * cin * cout];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    wt[((ky * k + kx) * cin + ci) * cout + co] =
                        wd[((co * cin + ci) * k + ky) * k + kx];
                }
            }
        }
    }
    let wt = Rc::new(wt);
    let xd = x.features.data_rc();
    let bd = bias.data();
    let plane = h * w;
    let oplane = ho * wo;
    let mut out = vec![T::ZERO; cout * oplane];
    let in_active = Rc::new(x.active.clone());
    let out_active = Rc::new(active_out.clone());
    let mut col = vec![T::ZERO; cout];
    for i in 0..ho {
        for j in 0..wo {
            if !out_active.get(i, j) {
                continue;
            }
            col.copy_from_slice(bd);
            for ky in 0..k {
                let iy = (stride * i + ky) as isize - padding as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                let iy = iy as usize;
                for kx in 0..k {
                    let ix = (stride * j + kx) as isize - padding as isize;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let ix = ix as usize;
                    if !in_active.get(iy, ix) {
                        continue;
                    }
                    let wrow = &wt[(ky * k + kx) * cin * cout..];
                    for ci in 0..cin {
                        let xv = xd[ci * plane + iy * w + ix];
                        if xv == T::ZERO {
                            continue;
                        }
                        let ws = &wrow[ci * cout..(ci + 1) * cout];
                        for (acc, &wv) in col.iter_mut().zip(ws) {
                            *acc += xv * wv;
                        }
                    }
                }
            }
            for co in 0..cout {
                out[co * oplane + i * wo + j] = col[co];
            }
        }
    }

    let features = emit(
        &[&x.features, weight, bias],
        out,
        vec![cout, ho, wo],
        move || {
            let (xd, wt, in_active, out_active) = (xd, wt, in_active, out_active);
            Box::new(move |g, needs| {
                let mut gx = needs[0].then(|| vec![T::ZERO; cin * plane]);
                let mut gw = needs[1].then(|| vec![T::ZERO; cout * cin * k * k]);
                let mut gb = needs[2].then(|| vec![T::ZERO; cout]);
                let mut gcol = vec![T::ZERO; cout];
                for i in 0..ho {
                    for j in 0..wo {
                        if !out_active.get(i, j) {
                            continue;
                        }
                        for co in 0..cout {
                            gcol[co] = g[co * oplane + i * wo + j];
                        }
                        if let Some(gb) = gb.as_mut() {
                            for (b, &gv) in gb.iter_mut().zip(&gcol) {
                                *b += gv;
                            }
                        }
                        for ky in 0..k {
                            let iy = (stride * i + ky) as isize - padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let iy = iy as usize;
                            for kx in 0..k {
                                let ix = (stride * j + kx) as isize - padding as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let ix = ix as usize;
                                if !in_active.get(iy, ix) {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xv = xd[ci * plane + iy * w + ix];
                                    let ws = &wt[((ky * k + kx) * cin + ci) * cout..][..cout];
                                    if let Some(gx) = gx.as_mut() {
                                        let mut acc = T::ZERO;
                                        for (&gv, &wv) in gcol.iter().zip(ws) {
                                            acc += gv * wv;
                                        }
                                        gx[ci * plane + iy * w + ix] += acc;
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        for (co, &gv) in gcol.iter().enumerate() {
                                            gw[((co * cin + ci) * k + ky) * k + kx] += gv * xv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx, gw, gb]
            })
        },
    );
    Ok(MaskedFeatureMap { features, active: active_out })
}

/// ReLU on active positions; activity unchanged.
pub fn sparse_relu<T: Scalar>(x: &MaskedFeatureMap<T>) -> MaskedFeatureMap<T> {
    MaskedFeatureMap {
        features: crate::tensor::relu(&x.features),
        active: x.active.clone(),
    }
}

const BLUR_TAPS: [f64; 3] = [1.0, 2.0, 1.0];

/// Sparse max-blur-pool: stride-1 max pool (3x3) over active taps, then a
/// binomial blur renormalized over active taps, then stride-2 subsampling.
/// Output activity is the nearest-neighbor downsample of input activity.
pub fn sparse_max_blur_pool<T: Scalar>(
    x: &MaskedFeatureMap<T>,
    kernel: usize,
    stride: usize,
) -> Result<MaskedFeatureMap<T>> {
    if kernel != 3 || stride != 2 {
        return Err(Error::Contract(format!(
            "max-blur-pool supports kernel=3 stride=2 only, got kernel={kernel} stride={stride}"
        )));
    }
    let c = x.channels();
    let (h, w) = (x.active.h, x.active.w);
    let plane = h * w;
    let active_out = pool_activity(&x.active);
    let (ho, wo) = (active_out.h, active_out.w);
    let oplane = ho * wo;
    let xd = x.features.data_rc();
    let active = Rc::new(x.active.clone());

    // stride-1 max pool over active taps, recording argmax for backward
    let mut pooled = vec![T::ZERO; c * plane];
    let mut argmax = vec![0u32; c * plane];
    for y in 0..h {
        for xx in 0..w {
            if !active.get(y, xx) {
                continue;
            }
            for ch in 0..c {
                let mut best = T::from_f64(f64::NEG_INFINITY);
                let mut best_idx = 0u32;
                for dy in -1isize..=1 {
                    let ny = y as isize + dy;
                    if ny < 0 || ny as usize >= h {
                        continue;
                    }
                    for dx in -1isize..=1 {
                        let nx = xx as isize + dx;
                        if nx < 0 || nx as usize >= w {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if !active.get(ny, nx) {
                            continue;
                        }
                        let v = xd[ch * plane + ny * w + nx];
                        if v > best {
                            best = v;
                            best_idx = (ny * w + nx) as u32;
                        }
                    }
                }
                pooled[ch * plane + y * w + xx] = best;
                argmax[ch * plane + y * w + xx] = best_idx;
            }
        }
    }
    let argmax = Rc::new(argmax);
    let pooled = Rc::new(pooled);

    // blur at sampled centers, renormalized over active in-bounds taps
    let mut out = vec![T::ZERO; c * oplane];
    for i in 0..ho {
        for j in 0..wo {
            if !active_out.get(i, j) {
                continue;
            }
            let (cy, cx) = (2 * i, 2 * j);
            let mut denom = 0.0f64;
            for dy in -1isize..=1 {
                let ny = cy as isize + dy;
                if ny < 0 || ny as usize >= h {
                    continue;
                }
                for dx in -1isize..=1 {
                    let nx = cx as isize + dx;
                    if nx < 0 || nx as usize >= w {
                        continue;
                    }
                    if active.get(ny as usize, nx as usize) {
                        denom += BLUR_TAPS[(dy + 1) as usize] * BLUR_TAPS[(dx + 1) as usize];
                    }
                }
            }
            for ch in 0..c {
                let mut acc = T::ZERO;
                for dy in -1isize..=1 {
                    let ny = cy as isize + dy;
                    if ny < 0 || ny as usize >= h {
                        continue;
                    }
                    for dx in -1isize..=1 {
                        let nx = cx as isize + dx;
                        if nx < 0 || nx as usize >= w {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if !active.get(ny, nx) {
                            continue;
                        }
                        let wgt = BLUR_TAPS[(dy + 1) as usize] * BLUR_TAPS[(dx + 1) as usize] / denom;
                        acc += T::from_f64(wgt) * pooled[ch * plane + ny * w + nx];
                    }
                }
                out[ch * oplane + i * wo + j] = acc;
            }
        }
    }

    let out_active_rc = Rc::new(active_out.clone());
    let features = emit(&[&x.features], out, vec![c, ho, wo], move || {
        let (active, out_active, argmax) = (active, out_active_rc, argmax);
        Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = vec![T::ZERO; c * plane];
                for i in 0..ho {
                    for j in 0..wo {
                        if !out_active.get(i, j) {
                            continue;
                        }
                        let (cy, cx) = (2 * i, 2 * j);
                        let mut denom = 0.0f64;
                        for dy in -1isize..=1 {
                            let ny = cy as isize + dy;
                            if ny < 0 || ny as usize >= h {
                                continue;
                            }
                            for dx in -1isize..=1 {
                                let nx = cx as isize + dx;
                                if nx < 0 || nx as usize >= w {
                                    continue;
                                }
                                if active.get(ny as usize, nx as usize) {
                                    denom +=
                                        BLUR_TAPS[(dy + 1) as usize] * BLUR_TAPS[(dx + 1) as usize];
                                }
                            }
                        }
                        for dy in -1isize..=1 {
                            let ny = cy as isize + dy;
                            if ny < 0 || ny as usize >= h {
                                continue;
                            }
                            for dx in -1isize..=1 {
                                let nx = cx as isize + dx;
                                if nx < 0 || nx as usize >= w {
                                    continue;
                                }
                                let (ny, nx) = (ny as usize, nx as usize);
                                if !active.get(ny, nx) {
                                    continue;
                                }
                                let wgt = T::from_f64(
                                    BLUR_TAPS[(dy + 1) as usize] * BLUR_TAPS[(dx + 1) as usize]
                                        / denom,
                                );
                                for ch in 0..c {
                                    let gv = g[ch * oplane + i * wo + j] * wgt;
                                    let src = argmax[ch * plane + ny * w + nx] as usize;
                                    gx[ch * plane + src] += gv;
                                }
                            }
                        }
                    }
                }
                gx
            })]
        })
    });
    Ok(MaskedFeatureMap { features, active: active_out })
}

/// Punch patch-size holes into an image: the activity map is zeroed on every
/// pixel of every masked patch, and the features there are zeroed too.
pub fn mask_to_pixel_holes<T: Scalar>(image: &Tensor<T>, mask: &MaskSet) -> Result<MaskedFeatureMap<T>> {
    let &[_, h, w] = image.shape() else {
        return Err(Error::Dim(format!(
            "expected [C, H, W] image, got {:?}",
            image.shape()
        )));
    };
    if h % mask.grid_h != 0 || w % mask.grid_w != 0 {
        return Err(Error::Geometry(format!(
            "image {h}x{w} not divisible by patch grid {}x{}",
            mask.grid_h, mask.grid_w
        )));
    }
    let (ph, pw) = (h / mask.grid_h, w / mask.grid_w);
    if ph != pw {
        return Err(Error::Geometry(format!("non-square patches {ph}x{pw}")));
    }
    let mut cells = vec![true; h * w];
    for idx in mask.masked_indices() {
        let (gr, gc) = (idx / mask.grid_w, idx % mask.grid_w);
        for y in gr * ph..(gr + 1) * ph {
            for x in gc * pw..(gc + 1) * pw {
                cells[y * w + x] = false;
            }
        }
    }
    MaskedFeatureMap::new(image.clone(), ActivityMap::from_cells(h, w, cells))
}
