//! Labelled datasets: the synthetic Gaussian-cluster generator and the IDX
//! (MNIST-style) loader.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream, streams};
use crate::tensor::Tensor;

/// Flat row-major feature storage with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {classes} classes")));
        }
        Ok(Dataset { dim, classes, features, labels })
    }

    pub fn empty(dim: usize, classes: usize) -> Self {
        Dataset { dim, classes, features: vec![], labels: vec![] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn push(&mut self, x: &[f64], y: usize) {
        assert_eq!(x.len(), self.dim);
        assert!(y < self.classes);
        self.features.extend_from_slice(x);
        self.labels.push(y);
    }

    /// `(batch, dim)` features and labels for the given rows.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.x(i));
        }
        (Tensor::matrix(idx.len(), self.dim, data), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn features(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.features.clone())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.dim, self.classes);
        for &i in idx {
            out.push(self.x(i), self.y(i));
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Gaussian class clusters with a label-invariant semantic direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub classes: usize,
    /// One mean per class.
    pub means: Vec<Vec<f64>>,
    /// One `dim × dim` covariance per class (row-major).
    pub covariances: Vec<Vec<f64>>,
    /// Unit vector orthogonal to every between-class mean difference.
    pub direction: Vec<f64>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Means `±s·e₀` (K = 2) or `s·e_k` (K > 2), isotropic `σ²I`, and
    /// semantic direction `e_{dim-1}`.
    pub fn standard(
        dim: usize,
        classes: usize,
        separation: f64,
        sigma: f64,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        if classes < 2 || dim <= classes {
            return Err(Error::InvalidArgument(format!(
                "synthetic data needs 2 <= classes < dim, got classes={classes}, dim={dim}"
            )));
        }
        let means = (0..classes)
            .map(|k| {
                let mut m = vec![0.0; dim];
                if classes == 2 {
                    m[0] = if k == 0 { -separation } else { separation };
                } else {
                    m[k] = separation;
                }
                m
            })
            .collect();
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = sigma * sigma;
        }
        let mut direction = vec![0.0; dim];
        direction[dim - 1] = 1.0;
        Ok(SyntheticSpec {
            dim,
            classes,
            means,
            covariances: vec![cov; classes],
            direction,
            train_per_class,
            test_per_class,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let shapes_ok = self.means.len() == self.classes
            && self.covariances.len() == self.classes
            && self.means.iter().all(|m| m.len() == self.dim)
            && self.covariances.iter().all(|c| c.len() == self.dim * self.dim)
            && self.direction.len() == self.dim;
        if !shapes_ok {
            return Err(Error::InvalidArgument("synthetic spec arrays do not match dim/classes".into()));
        }
        let norm: f64 = self.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("semantic direction has norm {norm}, expected 1")));
        }
        for a in 0..self.classes {
            for b in a + 1..self.classes {
                let dot: f64 = (0..self.dim)
                    .map(|i| (self.means[a][i] - self.means[b][i]) * self.direction[i])
                    .sum();
                if dot.abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "semantic direction not orthogonal to mean difference of classes {a},{b}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Lower-triangular Cholesky factor; fails unless the matrix is positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return Err(Error::InvalidArgument("covariance is not positive definite".into()));
                }
                l[i * n + j] = d.sqrt();
            } else {
                if (a[i * n + j] - a[j * n + i]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument("covariance is not symmetric".into()));
                }
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Draws exactly `per_class` points from each cluster, interleaved by class.
fn draw<R: Rng>(spec: &SyntheticSpec, factors: &[Vec<f64>], per_class: usize, rng: &mut R) -> Dataset {
    let n = spec.dim;
    let mut ds = Dataset::empty(n, spec.classes);
    let mut z = vec![0.0; n];
    let mut x = vec![0.0; n];
    for _ in 0..per_class {
        for k in 0..spec.classes {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let l = &factors[k];
            for i in 0..n {
                x[i] = spec.means[k][i] + (0..=i).map(|j| l[i * n + j] * z[j]).sum::<f64>();
            }
            ds.push(&x, k);
        }
    }
    ds
}

/// Train and test splits, deterministic in `spec.seed`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let factors = spec
        .covariances
        .iter()
        .map(|c| cholesky(c, spec.dim))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = stream(spec.seed, streams::DATA);
    let train = draw(spec, &factors, spec.train_per_class, &mut rng);
    let test = draw(spec, &factors, spec.test_per_class, &mut rng);
    Ok((train, test))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Parse an IDX image/label pair; pixels are scaled by `1/255`.
pub fn parse_idx(
    images: &[u8],
    labels: &[u8],
    classes: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<Dataset> {
    let magic = be_u32(images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(images_path, format!("bad magic {magic:#010x}, expected 0x00000803")));
    }
    let count = be_u32(images, 4, images_path)? as usize;
    let rows = be_u32(images, 8, images_path)? as usize;
    let cols = be_u32(images, 12, images_path)? as usize;
    let magic = be_u32(labels, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(labels_path, format!("bad magic {magic:#010x}, expected 0x00000801")));
    }
    let label_count = be_u32(labels, 4, labels_path)? as usize;
    if label_count != count {
        return Err(Error::format(
            labels_path,
            format!("{label_count} labels for {count} images"),
        ));
    }
    let dim = rows * cols;
    let pixels = &images[16..];
    if pixels.len() != count * dim {
        return Err(Error::format(
            images_path,
            format!("payload has {} bytes, header declares {}", pixels.len(), count * dim),
        ));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != count {
        return Err(Error::format(labels_path, "label payload length disagrees with header"));
    }
    let ys: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    if let Some(y) = ys.iter().find(|&&y| y >= classes) {
        return Err(Error::format(labels_path, format!("label {y} out of range for {classes} classes")));
    }
    let xs = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    if dim == 0 {
        return Err(Error::format(images_path, "zero-sized images"));
    }
    Dataset::new(dim, classes, xs, ys)
}

pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let ib = read_all(images)?;
    let lb = read_all(labels)?;
    parse_idx(&ib, &lb, classes, images, labels)
}
