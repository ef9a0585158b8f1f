//! Qualitative patch-feature analysis: PCA over patch features pooled
//! across images, foreground segmentation by thresholding the first
//! component, a second-stage PCA over the foreground patches, and RGB
//! rendering of the result as an upsampled patch grid.

use crate::error::{Error, Result};
use std::path::Path;

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

/// Patch features pooled from one or more images, with per-row provenance.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    /// row-major `rows x dim`
    pub data: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
    /// (image id, patch index) per row
    pub provenance: Vec<(usize, usize)>,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f64>, rows: usize, dim: usize, provenance: Vec<(usize, usize)>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Dim(format!(
                "feature matrix: {} values for {rows}x{dim}",
                data.len()
            )));
        }
        if provenance.len() != rows {
            return Err(Error::Dim(format!(
                "feature matrix: {} provenance entries for {rows} rows",
                provenance.len()
            )));
        }
        Ok(FeatureMatrix { data, rows, dim, provenance })
    }
}

#[derive(Debug, Clone)]
pub struct PcaResult {
    /// `k x dim`, orthonormal
    pub components: Vec<f64>,
    /// `rows x k`: centered rows projected onto the components
    pub projections: Vec<f64>,
    /// nonnegative, nonincreasing
    pub explained_variance: Vec<f64>,
    pub k: usize,
}

/// PCA by power iteration with deflation. Components have their
/// largest-magnitude loading positive so renders are reproducible.
pub fn pca(x: &FeatureMatrix, k: usize) -> Result<PcaResult> {
    if k == 0 || x.rows < k {
        return Err(Error::Contract(format!(
            "pca: need rows >= k >= 1, got rows {} and k {k}",
            x.rows
        )));
    }
    let (n, d) = (x.rows, x.dim);
    // center columns
    let mut centered = x.data.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| centered[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[i * d + j] -= mean;
        }
    }
    let total_var: f64 = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if total_var < 1e-24 {
        return Err(Error::Degenerate("pca: zero-variance data".into()));
    }

    let mut components = Vec::with_capacity(k * d);
    let mut explained = Vec::with_capacity(k);
    let mut work = centered.clone();
    for comp in 0..k {
        // deterministic start vector, not orthogonal to anything by accident
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 / (1.0 + (comp + j) as f64)).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        let mut converged = false;
        for _ in 0..POWER_MAX_ITERS {
            // w = (XᵀX/n) v without materializing the covariance
            let mut xv = vec![0.0; n];
            for i in 0..n {
                let row = &work[i * d..(i + 1) * d];
                xv[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            let mut w = vec![0.0; d];
            for i in 0..n {
                let row = &work[i * d..(i + 1) * d];
                for (wj, &rj) in w.iter_mut().zip(row) {
                    *wj += xv[i] * rj;
                }
            }
            for wj in w.iter_mut() {
                *wj /= n as f64;
            }
            let new_lambda = norm(&w);
            if new_lambda < 1e-30 {
                lambda = 0.0;
                converged = true;
                break;
            }
            for wj in w.iter_mut() {
                *wj /= new_lambda;
            }
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let delta_flip: f64 =
                w.iter().zip(&v).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
            v = w;
            lambda = new_lambda;
            if delta.min(delta_flip) < POWER_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Degenerate(format!(
                "pca: power iteration failed to converge for component {comp}"
            )));
        }
        if lambda < 1e-30 {
            // deflated data has no variance left; fill with a deterministic
            // unit vector orthogonal to the previous components
            v = orthogonal_fill(&components, d)?;
        }
        // sign convention: largest-magnitude loading positive
        let (imax, _) = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap();
        if v[imax] < 0.0 {
            for vj in v.iter_mut() {
                *vj = -*vj;
            }
        }
        explained.push(lambda);
        // deflate: remove the component from the working data
        for i in 0..n {
            let row = &mut work[i * d..(i + 1) * d];
            let proj: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (rj, &vj) in row.iter_mut().zip(&v) {
                *rj -= proj * vj;
            }
        }
        components.extend_from_slice(&v);
    }

    let mut projections = vec![0.0; n * k];
    for i in 0..n {
        let row = &centered[i * d..(i + 1) * d];
        for c in 0..k {
            let comp = &components[c * d..(c + 1) * d];
            projections[i * k + c] = row.iter().zip(comp).map(|(a, b)| a * b).sum();
        }
    }
    Ok(PcaResult { components, projections, explained_variance: explained, k })
}

/// First standard basis vector that survives Gram-Schmidt against the
/// components collected so far.
fn orthogonal_fill(components: &[f64], d: usize) -> Result<Vec<f64>> {
    for basis in 0..d {
        let mut v = vec![0.0; d];
        v[basis] = 1.0;
        for comp in components.chunks(d) {
            let proj: f64 = v.iter().zip(comp).map(|(a, b)| a * b).sum();
            for (vj, &cj) in v.iter_mut().zip(comp) {
                *vj -= proj * cj;
            }
        }
        let n = norm(&v);
        if n > 1e-6 {
            for vj in v.iter_mut() {
                *vj /= n;
            }
            return Ok(v);
        }
    }
    Err(Error::Degenerate("pca: no orthogonal direction left".into()))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Foreground = rows whose first projection exceeds the threshold. When both
/// sides are populated and the positive side is the larger one, the split is
/// flipped so the smaller population is called foreground.
pub fn foreground_split(pca_result: &PcaResult, threshold: f64) -> Vec<bool> {
    let k = pca_result.k;
    let first: Vec<f64> = pca_result.projections.iter().step_by(k).copied().collect();
    let mut fg: Vec<bool> = first.iter().map(|&p| p > threshold).collect();
    let pos = fg.iter().filter(|&&b| b).count();
    let neg = fg.len() - pos;
    if pos > neg && neg > 0 {
        for b in fg.iter_mut() {
            *b = !*b;
        }
    }
    fg
}

/// An RGB patch-grid rendering: first three second-stage components
/// min-max scaled to [0, 255] per component; background patches black.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub grid_h: usize,
    pub grid_w: usize,
    /// `grid_h * grid_w` RGB triples
    pub patch_colors: Vec<[u8; 3]>,
}

impl RenderedImage {
    /// Upsample each patch to `patch x patch` pixels and write a PNG.
    pub fn write_png(&self, path: &Path, patch: usize) -> Result<()> {
        let (h, w) = (self.grid_h * patch, self.grid_w * patch);
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for (i, color) in self.patch_colors.iter().enumerate() {
            let (gy, gx) = (i / self.grid_w, i % self.grid_w);
            for dy in 0..patch {
                for dx in 0..patch {
                    img.put_pixel(
                        (gx * patch + dx) as u32,
                        (gy * patch + dy) as u32,
                        image::Rgb(*color),
                    );
                }
            }
        }
        img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
    }
}

/// Second-stage PCA over the foreground rows of a pooled feature matrix,
/// rendered per image. `foreground` flags each row of `x`; every image in
/// `x.provenance` must use the same `grid_h x grid_w` token grid.
pub fn second_stage_pca_render(
    x: &FeatureMatrix,
    foreground: &[bool],
    grid_h: usize,
    grid_w: usize,
) -> Result<(PcaResult, Vec<(usize, RenderedImage)>)> {
    if foreground.len() != x.rows {
        return Err(Error::Dim(format!(
            "foreground flags {} != rows {}",
            foreground.len(),
            x.rows
        )));
    }
    let fg_rows: Vec<usize> =
        (0..x.rows).filter(|&i| foreground[i]).collect();
    if fg_rows.len() < 3 {
        return Err(Error::Degenerate(format!(
            "second-stage pca needs at least 3 foreground rows, got {}",
            fg_rows.len()
        )));
    }
    let mut data = Vec::with_capacity(fg_rows.len() * x.dim);
    let mut provenance = Vec::with_capacity(fg_rows.len());
    for &i in &fg_rows {
        data.extend_from_slice(&x.data[i * x.dim..(i + 1) * x.dim]);
        provenance.push(x.provenance[i]);
    }
    let fg_matrix = FeatureMatrix::new(data, fg_rows.len(), x.dim, provenance.clone())?;
    let k = 3.min(fg_rows.len());
    let second = pca(&fg_matrix, k)?;

    // per-component min-max scale to [0, 255]; a flat component maps to mid-gray
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for row in second.projections.chunks(second.k) {
        for (c, &v) in row.iter().enumerate() {
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }
    let scale = |c: usize, v: f64| -> u8 {
        if hi[c] - lo[c] < 1e-12 {
            128
        } else {
            (255.0 * (v - lo[c]) / (hi[c] - lo[c])).round().clamp(0.0, 255.0) as u8
        }
    };

    let mut image_ids: Vec<usize> = x.provenance.iter().map(|&(id, _)| id).collect();
    image_ids.sort_unstable();
    image_ids.dedup();
    let mut renders = Vec::with_capacity(image_ids.len());
    for &id in &image_ids {
        let mut colors = vec![[0u8; 3]; grid_h * grid_w];
        for (row, &(img, patch)) in provenance.iter().enumerate() {
            if img != id {
                continue;
            }
            if patch >= colors.len() {
                return Err(Error::Dim(format!(
                    "patch index {patch} outside {grid_h}x{grid_w} grid"
                )));
            }
            let proj = &second.projections[row * second.k..(row + 1) * second.k];
            let mut color = [128u8; 3];
            for c in 0..second.k {
                color[c] = scale(c, proj[c]);
            }
            colors[patch] = color;
        }
        renders.push((id, RenderedImage { grid_h, grid_w, patch_colors: colors }));
    }
    Ok((second, renders))
}

/// CSV of first-stage projections with provenance:
/// `image_id,patch_index,foreground,proj_0,...`.
pub fn projections_csv(x: &FeatureMatrix, result: &PcaResult, foreground: &[bool]) -> String {
    let mut out = String::from("image_id,patch_index,foreground");
    for c in 0..result.k {
        out.push_str(&format!(",proj_{c}"));
    }
    out.push('\n');
    for i in 0..x.rows {
        let (img, patch) = x.provenance[i];
        out.push_str(&format!("{img},{patch},{}", u8::from(foreground[i])));
        for c in 0..result.k {
            out.push_str(&format!(",{}", result.projections[i * result.k + c]));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_matrix() -> FeatureMatrix {
        // points on the line y = 2x in 2-d
        let pts: Vec<f64> = (0..20)
            .flat_map(|i| {
                let t = i as f64 - 10.0;
                [t, 2.0 * t]
            })
            .collect();
        FeatureMatrix::new(pts, 20, 2, (0..20).map(|i| (0, i)).collect()).unwrap()
    }

    #[test]
    fn rank_one_geometry() {
        let r = pca(&line_matrix(), 2).unwrap();
        let c0 = &r.components[0..2];
        // first component parallel to (1, 2)/sqrt(5)
        let expect = [1.0 / 5f64.sqrt(), 2.0 / 5f64.sqrt()];
        assert!((c0[0] - expect[0]).abs() < 1e-8 && (c0[1] - expect[1]).abs() < 1e-8);
        assert!(r.explained_variance[1].abs() < 1e-8);
    }

    #[test]
    fn components_orthonormal_and_variances_sorted() {
        let data: Vec<f64> = (0..50 * 8)
            .map(|i| ((i * 2654435761usize % 1000) as f64 / 1000.0 - 0.5) * (1.0 + (i % 8) as f64))
            .collect();
        let x = FeatureMatrix::new(data, 50, 8, (0..50).map(|i| (0, i)).collect()).unwrap();
        let r = pca(&x, 3).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = r.components[a * 8..(a + 1) * 8]
                    .iter()
                    .zip(&r.components[b * 8..(b + 1) * 8])
                    .map(|(p, q)| p * q)
                    .sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-8, "dot({a},{b}) = {dot}");
            }
        }
        assert!(r.explained_variance.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        assert!(r.explained_variance.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let x = FeatureMatrix::new(vec![1.0; 10 * 3], 10, 3, (0..10).map(|i| (0, i)).collect())
            .unwrap();
        assert!(matches!(pca(&x, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn foreground_split_cases() {
        let mk = |projs: Vec<f64>| PcaResult {
            components: vec![1.0],
            k: 1,
            explained_variance: vec![1.0],
            projections: projs,
        };
        // all positive -> everything foreground
        let fg = foreground_split(&mk(vec![1.0, 2.0, 0.5]), 0.0);
        assert_eq!(fg, vec![true, true, true]);
        // symmetric -> half/half, positive side kept
        let fg = foreground_split(&mk(vec![1.0, -1.0, 2.0, -2.0]), 0.0);
        assert_eq!(fg, vec![true, false, true, false]);
        // majority positive -> flipped so the minority is foreground
        let fg = foreground_split(&mk(vec![1.0, 2.0, 3.0, -1.0]), 0.0);
        assert_eq!(fg, vec![false, false, false, true]);
    }

    #[test]
    fn foreground_uses_only_first_column() {
        let a = PcaResult {
            components: vec![],
            k: 2,
            explained_variance: vec![],
            projections: vec![1.0, 5.0, -1.0, -5.0],
        };
        let b = PcaResult {
            components: vec![],
            k: 2,
            explained_variance: vec![],
            projections: vec![1.0, -7.0, -1.0, 7.0],
        };
        assert_eq!(foreground_split(&a, 0.0), foreground_split(&b, 0.0));
    }

    #[test]
    fn render_flat_components_are_mid_gray() {
        // foreground rows vary along a single direction: the second and
        // third components carry no variance, so G and B pin to mid-gray
        let mut data = vec![0.0; 6 * 4];
        for i in 0..4 {
            data[i * 4] = i as f64; // rank-1 foreground
        }
        for (i, item) in data.iter_mut().enumerate().skip(16) {
            *item = (i as f64) * 0.1; // background, never rendered
        }
        let x = FeatureMatrix::new(data, 6, 4, (0..6).map(|i| (0, i)).collect()).unwrap();
        let fg = vec![true, true, true, true, false, false];
        let (second, renders) = second_stage_pca_render(&x, &fg, 2, 3).unwrap();
        assert!(second.explained_variance[1].abs() < 1e-10);
        assert_eq!(renders.len(), 1);
        let img = &renders[0].1;
        for patch in 0..4 {
            let [_, g, b] = img.patch_colors[patch];
            assert_eq!((g, b), (128, 128));
        }
        // first component spans the full scale across the foreground
        let reds: Vec<u8> = (0..4).map(|p| img.patch_colors[p][0]).collect();
        assert!(reds.contains(&0) && reds.contains(&255));
        for patch in 4..6 {
            assert_eq!(img.patch_colors[patch], [0, 0, 0]);
        }
    }

    #[test]
    fn too_few_foreground_rows() {
        let x = line_matrix();
        let mut fg = vec![false; 20];
        fg[0] = true;
        fg[1] = true;
        assert!(matches!(
            second_stage_pca_render(&x, &fg, 4, 5),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn render_dims_and_png_determinism() {
        use tempfile::tempdir;
        let data: Vec<f64> = (0..12 * 4).map(|i| ((i * 7919 % 97) as f64) / 97.0).collect();
        let x = FeatureMatrix::new(data, 12, 4, (0..12).map(|i| (0, i)).collect()).unwrap();
        let first = pca(&x, 3).unwrap();
        let fg = foreground_split(&first, 0.0);
        if fg.iter().filter(|&&b| b).count() < 3 {
            return; // construction-dependent; covered elsewhere
        }
        let (_, renders) = second_stage_pca_render(&x, &fg, 3, 4).unwrap();
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        renders[0].1.write_png(&p1, 16).unwrap();
        renders[0].1.write_png(&p2, 16).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        let img = image::open(&p1).unwrap();
        assert_eq!((img.width(), img.height()), (4 * 16, 3 * 16));
    }

    #[test]
    fn rotation_invariance_of_projections() {
        // rotate all rows by a fixed 2-d rotation; projections match up to sign
        let x = line_matrix();
        let (c, s) = (0.6f64, 0.8f64);
        let rotated: Vec<f64> = x
            .data
            .chunks(2)
            .flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
            .collect();
        let y = FeatureMatrix::new(rotated, 20, 2, x.provenance.clone()).unwrap();
        let rx = pca(&x, 1).unwrap();
        let ry = pca(&y, 1).unwrap();
        let same: bool = rx
            .projections
            .iter()
            .zip(&ry.projections)
            .all(|(a, b)| (a - b).abs() < 1e-8);
        let flipped: bool = rx
            .projections
            .iter()
            .zip(&ry.projections)
            .all(|(a, b)| (a + b).abs() < 1e-8);
        assert!(same || flipped);
    }
}
