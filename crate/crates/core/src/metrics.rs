//! Evaluation metrics: masked L1, Fréchet distance between feature sets,
//! and the density / coverage manifold metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::PixelMask;
use crate::rng::{stream_rng, streams};
use crate::tokenizer::PatchTokenizer;

/// Output dimension of the random-projection features.
pub const RANDPROJ_DIM: usize = 64;

/// Mean absolute difference over preserved pixels (mask = 1), averaged over
/// channels.
pub fn masked_l1(generated: &Image, source: &Image, mask: &PixelMask) -> Result<f64> {
    if !generated.same_shape(source) || (mask.height(), mask.width()) != (source.height(), source.width()) {
        return Err(Error::invalid("masked L1: image and mask shapes differ"));
    }
    let kept = mask.preserved_count();
    if kept == 0 {
        return Err(Error::invalid("masked L1: preserved region is empty"));
    }
    let c = source.channels();
    let total: f64 = generated
        .data()
        .chunks(c)
        .zip(source.data().chunks(c))
        .zip(mask.keep())
        .filter(|(_, &k)| k)
        .map(|((g, s), _)| g.iter().zip(s).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>())
        .sum();
    Ok(total / (kept * c) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Generated,
}

#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub dim: usize,
    /// Row-major, `n × dim`.
    pub data: Vec<f64>,
    pub provenance: Provenance,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::invalid(format!("{} values do not form rows of width {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature set".into()));
        }
        Ok(FeatureSet { dim, data, provenance })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug)]
pub enum FeatureMode<'a> {
    /// Mean of the codewords of the image's token grid.
    Latent(&'a PatchTokenizer),
    /// Fixed Gaussian projection of raw pixels to [`RANDPROJ_DIM`] values.
    RandProj { seed: u64 },
}

impl FeatureMode<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            FeatureMode::Latent(_) => "latent",
            FeatureMode::RandProj { .. } => "randproj",
        }
    }
}

pub fn extract_features(images: &[Image], mode: FeatureMode, provenance: Provenance) -> Result<FeatureSet> {
    let Some(first) = images.first() else {
        return Err(Error::invalid("no images to embed"));
    };
    if images.iter().any(|im| !im.same_shape(first)) {
        return Err(Error::invalid("images must share one shape"));
    }
    match mode {
        FeatureMode::Latent(tok) => {
            let d = tok.codebook().dim();
            let rows: Vec<Vec<f64>> = images
                .par_iter()
                .map(|im| {
                    let grid = tok.encode(im)?;
                    let mut acc = vec![0.0f64; d];
                    for &t in grid.tokens() {
                        for (a, &v) in acc.iter_mut().zip(tok.codebook().codeword(t)) {
                            *a += v as f64;
                        }
                    }
                    acc.iter_mut().for_each(|a| *a /= grid.len() as f64);
                    Ok(acc)
                })
                .collect::<Result<_>>()?;
            FeatureSet::new(d, rows.concat(), provenance)
        }
        FeatureMode::RandProj { seed } => {
            let n_in = first.data().len();
            let mut rng = stream_rng(seed, streams::PROJECTION);
            let scale = 1.0 / (n_in as f64).sqrt();
            let proj: Vec<f64> = (0..RANDPROJ_DIM * n_in)
                .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); z * scale })
                .collect();
            let rows: Vec<Vec<f64>> = images
                .par_iter()
                .map(|im| {
                    proj.chunks(n_in)
                        .map(|w| w.iter().zip(im.data()).map(|(&a, &x)| a * x as f64).sum())
                        .collect()
                })
                .collect();
            FeatureSet::new(RANDPROJ_DIM, rows.concat(), provenance)
        }
    }
}

fn mean_cov(f: &FeatureSet) -> (DVector<f64>, DMatrix<f64>) {
    let (n, q) = (f.len(), f.dim);
    let x = DMatrix::from_row_slice(n, q, &f.data);
    let mu = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `‖μ_A−μ_B‖² + Tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2})` with both covariances
/// regularized by `1e-6·I`. The trace term uses the eigenvalues of the
/// symmetric `√Σ_A Σ_B √Σ_A`, which share the spectrum of `Σ_A Σ_B`.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::invalid(format!("feature dimensions differ: {} vs {}", a.dim, b.dim)));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("Fréchet distance needs at least two samples per set"));
    }
    let q = a.dim;
    let (mu_a, mut sa) = mean_cov(a);
    let (mu_b, mut sb) = mean_cov(b);
    let reg = DMatrix::identity(q, q) * 1e-6;
    sa += &reg;
    sb += &reg;
    let root_a = sym_sqrt(&sa);
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let d = (mu_a - mu_b).norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::NonFinite("Fréchet distance".into()));
    }
    Ok(d.max(0.0))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance from each real point to its k-th nearest other real point.
fn knn_radii(real: &FeatureSet, k: usize) -> Result<Vec<f64>> {
    let n = real.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k must lie in [1, {}), got {k}", n)));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist(real.row(i), real.row(j))).collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1]
        })
        .collect())
}

fn check_pair(real: &FeatureSet, fake: &FeatureSet) -> Result<()> {
    if real.dim != fake.dim {
        return Err(Error::invalid(format!("feature dimensions differ: {} vs {}", real.dim, fake.dim)));
    }
    if fake.is_empty() {
        return Err(Error::invalid("no generated features"));
    }
    Ok(())
}

/// `(1/kM) Σ_j Σ_i 1[fake_j ∈ B(real_i, NND_k(real_i))]` with closed balls.
pub fn density(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<f64> {
    check_pair(real, fake)?;
    let radii = knn_radii(real, k)?;
    let hits: usize = (0..fake.len())
        .into_par_iter()
        .map(|j| (0..real.len()).filter(|&i| dist(fake.row(j), real.row(i)) <= radii[i]).count())
        .sum();
    Ok(hits as f64 / (k * fake.len()) as f64)
}

/// Fraction of real points whose k-NN ball holds at least one fake point.
pub fn coverage(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<f64> {
    check_pair(real, fake)?;
    let radii = knn_radii(real, k)?;
    let covered = (0..real.len())
        .into_par_iter()
        .filter(|&i| (0..fake.len()).any(|j| dist(fake.row(j), real.row(i)) <= radii[i]))
        .count();
    Ok(covered as f64 / real.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub masked_l1: Option<f64>,
    pub frechet: f64,
    pub density: f64,
    pub coverage: f64,
    pub n_real: usize,
    pub n_generated: usize,
    pub feature_mode: String,
    pub k: usize,
}

impl MetricReport {
    /// Fréchet, density and coverage of `fake` against `real`.
    pub fn compute(real: &FeatureSet, fake: &FeatureSet, k: usize, feature_mode: &str, masked_l1: Option<f64>) -> Result<Self> {
        Ok(MetricReport {
            masked_l1,
            frechet: frechet_distance(real, fake)?,
            density: density(real, fake, k)?,
            coverage: coverage(real, fake, k)?,
            n_real: real.len(),
            n_generated: fake.len(),
            feature_mode: feature_mode.to_string(),
            k,
        })
    }

    /// `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(l1) = self.masked_l1 {
            out += &format!("masked_l1 = {l1:.6}\n");
        }
        out += &format!("frechet = {:.6}\n", self.frechet);
        out += &format!("density = {:.6}\n", self.density);
        out += &format!("coverage = {:.6}\n", self.coverage);
        out += &format!("n_real = {}\n", self.n_real);
        out += &format!("n_generated = {}\n", self.n_generated);
        out += &format!("feature_mode = {}\n", self.feature_mode);
        out += &format!("k = {}\n", self.k);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(dim: usize, data: &[f64]) -> FeatureSet {
        FeatureSet::new(dim, data.to_vec(), Provenance::Real).unwrap()
    }

    #[test]
    fn masked_l1_offset() {
        let a = Image::filled(4, 4, 3, 0.2).unwrap();
        let b = Image::filled(4, 4, 3, 0.3).unwrap();
        let m = PixelMask::all_preserved(4, 4).unwrap();
        assert!((masked_l1(&b, &a, &m).unwrap() - 0.1).abs() < 1e-6);
        assert_eq!(masked_l1(&a, &a, &m).unwrap(), 0.0);
        let none = PixelMask::new(4, 4, vec![false; 16]).unwrap();
        assert!(masked_l1(&a, &b, &none).is_err());
    }

    #[test]
    fn frechet_one_dimensional() {
        // same spread, means 0 and 1
        let a = set(1, &[-1.0, 1.0, -1.0, 1.0]);
        let b = set(1, &[0.0, 2.0, 0.0, 2.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-6);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn density_coverage_extremes() {
        let real = set(2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let far = set(2, &[100.0, 100.0]);
        assert_eq!(density(&real, &far, 1).unwrap(), 0.0);
        assert_eq!(coverage(&real, &far, 1).unwrap(), 0.0);
        assert_eq!(coverage(&real, &real, 1).unwrap(), 1.0);
        assert!(density(&real, &real, 4).is_err());
        assert!(density(&real, &real, 0).is_err());
    }

    #[test]
    fn report_keys_in_order() {
        let r = MetricReport {
            masked_l1: Some(0.5),
            frechet: 1.0,
            density: 0.9,
            coverage: 0.8,
            n_real: 10,
            n_generated: 12,
            feature_mode: "randproj".into(),
            k: 5,
        };
        let text = r.to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys, ["masked_l1", "frechet", "density", "coverage", "n_real", "n_generated", "feature_mode", "k"]);
    }
}
