use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Shape, Tensor};
use super::DynfitError;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub label: usize,
}

/// Labelled classification data.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input: Shape,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    input: Shape,
    classes: usize,
    samples: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    x: Vec<f64>,
    label: usize,
}

impl Dataset {
    pub fn new(input: Shape, classes: usize, samples: Vec<Sample>) -> Result<Self, DynfitError> {
        if classes == 0 {
            return Err(DynfitError::Config("dataset needs at least one class".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.x.shape != input || s.label >= classes {
                return Err(DynfitError::ShapeMismatch(format!("sample {i} does not match the dataset header")));
            }
        }
        Ok(Self { input, classes, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn one_hot(&self, label: usize) -> Vec<f64> {
        let mut t = vec![0.0; self.classes];
        t[label] = 1.0;
        t
    }

    /// Inputs and one-hot targets of the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> (Vec<Tensor>, Vec<Vec<f64>>) {
        idx.iter().map(|&i| (self.samples[i].x.clone(), self.one_hot(self.samples[i].label))).unzip()
    }

    pub fn all(&self) -> (Vec<Tensor>, Vec<Vec<f64>>) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head = Dataset { samples: self.samples[..n].to_vec(), ..self.clone_header() };
        let tail = Dataset { samples: self.samples[n..].to_vec(), ..self.clone_header() };
        (head, tail)
    }

    fn clone_header(&self) -> Dataset {
        Dataset { input: self.input, classes: self.classes, samples: Vec::new() }
    }

    pub fn from_json_str(text: &str) -> Result<Self, DynfitError> {
        let f: DatasetFile = serde_json::from_str(text)?;
        let samples = f
            .samples
            .into_iter()
            .map(|r| Ok(Sample { x: Tensor::new(f.input, r.x)?, label: r.label }))
            .collect::<Result<Vec<_>, DynfitError>>()?;
        Dataset::new(f.input, f.classes, samples)
    }

    pub fn to_json_string(&self) -> String {
        let f = DatasetFile {
            input: self.input,
            classes: self.classes,
            samples: self.samples.iter().map(|s| SampleRecord { x: s.x.data.clone(), label: s.label }).collect(),
        };
        serde_json::to_string(&f).expect("dataset serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DynfitError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DynfitError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text)
    }

    /// Two-feature XOR: label is whether the signs of the features differ.
    pub fn xor(n: usize, seed: u64, noise: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let (a, b) = (i % 2, (i / 2) % 2);
                let sx = |bit: usize, rng: &mut ChaCha8Rng| if bit == 1 { 1.0 } else { -1.0 } + rng.gen_range(-noise..=noise);
                let x = vec![sx(a, &mut rng), sx(b, &mut rng)];
                Sample { x: Tensor { shape: Shape::flat(2), data: x }, label: a ^ b }
            })
            .collect();
        Self { input: Shape::flat(2), classes: 2, samples }
    }

    /// Gaussian-ish blobs around `classes` well separated centres.
    pub fn blobs(n: usize, features: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres: Vec<Vec<f64>> = (0..classes).map(|_| (0..features).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let samples = (0..n)
            .map(|i| {
                let label = i % classes;
                let x = centres[label].iter().map(|c| c + rng.gen_range(-0.3..0.3)).collect();
                Sample { x: Tensor { shape: Shape::flat(features), data: x }, label }
            })
            .collect();
        Self { input: Shape::flat(features), classes, samples }
    }

    /// 4-class single-channel `size x size` images: horizontal bar, vertical
    /// bar, wrapped diagonal, and a 2x2 block, with random offsets and noise.
    pub fn patterns(n: usize, size: usize, seed: u64, noise: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = size.max(4);
        let mut samples: Vec<Sample> = (0..n)
            .map(|i| {
                let label = i % 4;
                let mut img = vec![0.0; size * size];
                let off = rng.gen_range(1..size - 1);
                for k in 0..size {
                    let (r, c) = match label {
                        0 => (off, k),
                        1 => (k, off),
                        2 => (k, (k + off) % size),
                        _ => {
                            let lo = off.min(size - 2);
                            (lo + k % 2, lo + (k / 2) % 2)
                        }
                    };
                    img[r * size + c] = 1.0;
                }
                img.iter_mut().for_each(|v| *v += rng.gen_range(-noise..=noise));
                Sample { x: Tensor { shape: Shape::image(1, size, size), data: img }, label }
            })
            .collect();
        samples.shuffle(&mut rng);
        Self { input: Shape::image(1, size, size), classes: 4, samples }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic_and_balanced() {
        let a = Dataset::patterns(40, 8, 5, 0.1);
        assert_eq!(a, Dataset::patterns(40, 8, 5, 0.1));
        for c in 0..4 {
            assert_eq!(a.samples.iter().filter(|s| s.label == c).count(), 10);
        }
        let x = Dataset::xor(8, 1, 0.0);
        assert_eq!(x.samples[3].x.data, vec![1.0, 1.0]);
        assert_eq!(x.samples[3].label, 0);
        assert_eq!(x.samples[1].label, 1);
    }

    #[test]
    fn json_round_trip() {
        let d = Dataset::blobs(12, 3, 3, 2);
        assert_eq!(Dataset::from_json_str(&d.to_json_string()).unwrap(), d);
        assert!(Dataset::from_json_str(r#"{"input":{"c":2,"h":1,"w":1},"classes":2,"samples":[{"x":[1.0],"label":0}]}"#).is_err());
    }
}
