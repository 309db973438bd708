//! Datasets: synthetic Gaussian mixtures, IDX ingestion, splits and a binary cache.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::Example;
use crate::rng;

const CACHE_MAGIC: &[u8; 4] = b"CRMD";
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_classes: usize, feature_dim: usize, examples: Vec<Example>) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.y >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: ex.y,
                    num_classes,
                });
            }
            if ex.x.len() != feature_dim {
                return Err(Error::LengthMismatch(format!(
                    "example {i} has {} features, dataset declares {feature_dim}",
                    ex.x.len()
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            num_classes,
            feature_dim,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.y).collect()
    }

    pub fn refs(&self) -> Vec<&Example> {
        self.examples.iter().collect()
    }

    /// Writes the binary cache file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::new(CACHE_MAGIC);
        w.u32(self.name.len() as u32);
        w.bytes(self.name.as_bytes());
        w.u32(self.num_classes as u32);
        w.u32(self.feature_dim as u32);
        w.u64(self.examples.len() as u64);
        for ex in &self.examples {
            w.u32(ex.y as u32);
            w.f64s(&ex.x);
        }
        w.finish(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let buf = fs::read(path)?;
        let mut r = Reader::open(&buf, CACHE_MAGIC)?;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.bytes(name_len, "name")?)
            .map_err(|_| Error::Malformed("dataset name is not UTF-8".into()))?
            .to_string();
        let num_classes = r.u32("class count")? as usize;
        let feature_dim = r.u32("feature dim")? as usize;
        let n = r.u64("example count")? as usize;
        let record = 4 + 8 * feature_dim;
        if n.saturating_mul(record) != r.remaining() {
            return Err(Error::Malformed(format!(
                "{n} examples of dim {feature_dim} need {} bytes, {} present",
                n.saturating_mul(record),
                r.remaining()
            )));
        }
        let mut examples = Vec::with_capacity(n);
        for _ in 0..n {
            let y = r.u32("label")? as usize;
            let x = r.f64s(feature_dim, "features")?;
            examples.push(Example::new(x, y));
        }
        r.expect_end()?;
        Dataset::new(name, num_classes, feature_dim, examples)
    }
}

/// Gaussian mixture with one diagonal-covariance component per class.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmSpec {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for GmmSpec {
    /// Three overlapping unit-variance classes in the plane.
    fn default() -> Self {
        GmmSpec {
            means: vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 3.0]],
            variances: vec![vec![1.0, 1.0]; 3],
            weights: vec![1.0 / 3.0; 3],
            num_samples: 10_000,
            seed: 0,
        }
    }
}

impl GmmSpec {
    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k == 0 {
            return Err(Error::Config("mixture needs at least one class".into()));
        }
        if self.variances.len() != k || self.weights.len() != k {
            return Err(Error::Config(format!(
                "{k} means but {} variance rows and {} weights",
                self.variances.len(),
                self.weights.len()
            )));
        }
        let d = self.dim();
        if d == 0 {
            return Err(Error::Config("mixture features need at least one dimension".into()));
        }
        for (c, (m, v)) in self.means.iter().zip(&self.variances).enumerate() {
            if m.len() != d || v.len() != d {
                return Err(Error::Config(format!("class {c}: mean/variance dims differ from {d}")));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("class {c}: non-finite mean")));
            }
            if v.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::Config(format!("class {c}: variances must be positive")));
            }
        }
        if self.weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("mixture weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// One draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Example {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut y = self.weights.len() - 1;
        for (c, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc && *w > 0.0 {
                y = c;
                break;
            }
        }
        // rounding can leave u ≥ Σw; fall back to the last class with mass
        if self.weights[y] == 0.0 {
            y = self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
        }
        let mut x = vec![0.0; self.dim()];
        rng::fill_normal(rng, &mut x);
        for ((xi, m), v) in x.iter_mut().zip(&self.means[y]).zip(&self.variances[y]) {
            *xi = m + v.sqrt() * *xi;
        }
        Example::new(x, y)
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Example> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// `spec.num_samples` i.i.d. draws from the mixture.
pub fn gen_gmm(spec: &GmmSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, "gmm", 0);
    let examples = spec.sample_n(spec.num_samples, &mut rng);
    Dataset::new("gmm", spec.num_classes(), spec.dim(), examples)
}

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Malformed(format!("truncated IDX header ({what})")))
}

/// Reads an IDX image/label pair. Pixels are mapped to `[0, 1]` and then
/// normalized with mean 0.5 and standard deviation 0.5.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = fs::read(images_path.as_ref())?;
    let labels = fs::read(labels_path.as_ref())?;
    let name = images_path
        .as_ref()
        .file_name()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    parse_idx(&name, &images, &labels)
}

pub fn parse_idx(name: &str, images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = be_u32(labels, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(images, 4, "image count")? as usize;
    let rows = be_u32(images, 8, "rows")? as usize;
    let cols = be_u32(images, 12, "cols")? as usize;
    let n_labels = be_u32(labels, 4, "label count")? as usize;
    if n != n_labels {
        return Err(Error::LengthMismatch(format!("{n} images but {n_labels} labels")));
    }
    let d = rows * cols;
    let pixels = &images[16..];
    let label_bytes = &labels[8..];
    if pixels.len() != n * d {
        return Err(Error::Malformed(format!(
            "image payload has {} bytes, header implies {}",
            pixels.len(),
            n * d
        )));
    }
    if label_bytes.len() != n {
        return Err(Error::Malformed(format!(
            "label payload has {} bytes, header implies {n}",
            label_bytes.len()
        )));
    }
    let num_classes = label_bytes.iter().copied().max().map_or(0, |m| m as usize + 1);
    let examples = pixels
        .chunks_exact(d.max(1))
        .zip(label_bytes)
        .map(|(px, &y)| {
            let x = px.iter().map(|&p| (f64::from(p) / 255.0 - 0.5) / 0.5).collect();
            Example::new(x, y as usize)
        })
        .collect();
    Dataset::new(name, num_classes, d, examples)
}

/// Disjoint uniformly random train/calibration/test subsets of the given sizes.
pub fn split_dataset(ds: Dataset, sizes: (usize, usize, usize), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = sizes;
    let total = a
        .checked_add(b)
        .and_then(|s| s.checked_add(c))
        .ok_or_else(|| Error::InvalidArgument("split sizes overflow".into()))?;
    if total > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "split sizes sum to {total} but the dataset has {} examples",
            ds.len()
        )));
    }
    let mut r = rng::stream(seed, "split", 0);
    let perm = rng::permutation(&mut r, ds.len());
    let mut slots: Vec<Option<Example>> = ds.examples.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<Example> {
        perm[range].iter().map(|&i| slots[i].take().unwrap()).collect()
    };
    let train = take(0..a);
    let cal = take(a..a + b);
    let test = take(a + b..total);
    let mk = |suffix: &str, ex| Dataset::new(format!("{}/{suffix}", ds.name), ds.num_classes, ds.feature_dim, ex);
    Ok((mk("train", train)?, mk("cal", cal)?, mk("test", test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, px: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(px);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IDX_LABELS_MAGIC, labels.len() as u32] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn idx_fixture_decodes_exactly() {
        // Two 2×2 images. Expected values: (p/255 − 0.5)/0.5, row-major.
        let images = idx_images(2, 2, 2, &[0, 255, 51, 204, 255, 0, 0, 255]);
        let labels = idx_labels(&[7, 2]);
        let ds = parse_idx("fixture", &images, &labels).unwrap();
        assert_eq!(ds.feature_dim, 4);
        assert_eq!(ds.labels(), vec![7, 2]);
        assert_eq!(ds.examples[0].x, vec![-1.0, 1.0, -0.6, 0.6000000000000001]);
        assert_eq!(ds.examples[1].x, vec![1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn idx_labels_with_image_magic_are_rejected() {
        let images = idx_images(1, 1, 1, &[0]);
        let mut labels = idx_labels(&[0]);
        labels[..4].copy_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        assert!(matches!(
            parse_idx("x", &images, &labels),
            Err(Error::BadMagic { expected: IDX_LABELS_MAGIC, found: IDX_IMAGES_MAGIC })
        ));
    }

    #[test]
    fn idx_count_mismatch_and_truncation() {
        let images = idx_images(2, 1, 1, &[0, 1]);
        assert!(matches!(parse_idx("x", &images, &idx_labels(&[0])), Err(Error::LengthMismatch(_))));
        let short = idx_images(2, 2, 2, &[0, 1, 2]);
        assert!(matches!(parse_idx("x", &short, &idx_labels(&[0, 1])), Err(Error::Malformed(_))));
        assert!(matches!(parse_idx("x", &images[..10], &idx_labels(&[0])), Err(Error::Malformed(_))));
    }

    #[test]
    fn gmm_degenerate_covariance_sits_on_means() {
        let spec = GmmSpec {
            variances: vec![vec![1e-12, 1e-12]; 3],
            num_samples: 300,
            ..GmmSpec::default()
        };
        let ds = gen_gmm(&spec).unwrap();
        for ex in &ds.examples {
            for (x, m) in ex.x.iter().zip(&spec.means[ex.y]) {
                assert!((x - m).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn gmm_point_mass_weights() {
        let spec = GmmSpec {
            weights: vec![1.0, 0.0, 0.0],
            num_samples: 500,
            ..GmmSpec::default()
        };
        assert!(gen_gmm(&spec).unwrap().examples.iter().all(|e| e.y == 0));
    }

    #[test]
    fn gmm_class_means_match_spec() {
        let spec = GmmSpec {
            num_samples: 100_000,
            seed: 3,
            ..GmmSpec::default()
        };
        let ds = gen_gmm(&spec).unwrap();
        for c in 0..3 {
            let xs: Vec<&Example> = ds.examples.iter().filter(|e| e.y == c).collect();
            let n = xs.len() as f64;
            assert!((n / 1e5 - 1.0 / 3.0).abs() < 0.01);
            for j in 0..2 {
                let mean = xs.iter().map(|e| e.x[j]).sum::<f64>() / n;
                let sigma = spec.variances[c][j].sqrt();
                assert!((mean - spec.means[c][j]).abs() < 3.0 * sigma / n.sqrt(), "class {c} dim {j}: {mean}");
            }
        }
    }

    #[test]
    fn gmm_is_bitwise_reproducible() {
        let spec = GmmSpec::default();
        assert_eq!(gen_gmm(&spec).unwrap(), gen_gmm(&spec).unwrap());
    }

    #[test]
    fn gmm_validation() {
        let bad = GmmSpec { weights: vec![0.5, 0.3, 0.1], ..GmmSpec::default() };
        assert!(bad.validate().is_err());
        let bad = GmmSpec { variances: vec![vec![1.0, 0.0]; 3], ..GmmSpec::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn splits_are_disjoint_exact_and_reproducible() {
        let ds = gen_gmm(&GmmSpec { num_samples: 100, ..GmmSpec::default() }).unwrap();
        let (a, b, c) = split_dataset(ds.clone(), (60, 25, 10), 4).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 25, 10));
        let mut seen: Vec<&Example> = a.examples.iter().chain(&b.examples).chain(&c.examples).collect();
        seen.sort_by(|p, q| p.x.partial_cmp(&q.x).unwrap());
        seen.dedup();
        assert_eq!(seen.len(), 95);
        let (a2, _, _) = split_dataset(ds.clone(), (60, 25, 10), 4).unwrap();
        assert_eq!(a, a2);

        let n = ds.len();
        let (all, _, _) = split_dataset(ds.clone(), (n, 0, 0), 1).unwrap();
        let mut got = all.examples.clone();
        let mut want = ds.examples.clone();
        got.sort_by(|p, q| p.x.partial_cmp(&q.x).unwrap());
        want.sort_by(|p, q| p.x.partial_cmp(&q.x).unwrap());
        assert_eq!(got, want);

        assert!(split_dataset(ds, (90, 20, 0), 0).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.crmd");
        let ds = gen_gmm(&GmmSpec { num_samples: 50, ..GmmSpec::default() }).unwrap();
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Malformed(_))));
    }
}
