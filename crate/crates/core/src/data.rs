//! Synthetic long-tailed Gaussian-cluster data and mini-batch assembly.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::loss::ClassCounts;
use crate::rng::{substream, LabRng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub input_dim: usize,
    /// Training instances of the largest class.
    pub n_max: usize,
    /// `n_max / n_min`.
    pub ratio: f64,
    /// Radius of the sphere the class means are placed on.
    pub class_sep: f64,
    pub noise_sigma: f64,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            input_dim: 32,
            n_max: 500,
            ratio: 100.0,
            class_sep: 3.0,
            noise_sigma: 1.0,
            test_per_class: 100,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(LabError::contract(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if !(self.ratio >= 1.0) || !self.ratio.is_finite() {
            return Err(LabError::contract(format!(
                "imbalance ratio {} must be >= 1",
                self.ratio
            )));
        }
        if (self.n_max as f64) < self.ratio {
            return Err(LabError::contract(format!(
                "n_max {} smaller than imbalance ratio {}",
                self.n_max, self.ratio
            )));
        }
        if self.input_dim == 0 || self.test_per_class == 0 {
            return Err(LabError::contract(
                "input_dim and test_per_class must be positive",
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.class_sep >= 0.0) {
            return Err(LabError::contract(
                "noise_sigma and class_sep must be nonnegative",
            ));
        }
        Ok(())
    }
}

/// Exponential profile `n_k = round(n_max · ratio^(-k/(K-1)))`, at least 1.
pub fn class_count_profile(classes: usize, n_max: usize, ratio: f64) -> Result<ClassCounts> {
    if classes < 2 {
        return Err(LabError::contract(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if !(ratio >= 1.0) || (n_max as f64) < ratio {
        return Err(LabError::contract(format!(
            "invalid profile: n_max {n_max}, ratio {ratio}"
        )));
    }
    let last = (classes - 1) as f64;
    let counts = (0..classes)
        .map(|k| {
            let n = (n_max as f64 * ratio.powf(-(k as f64) / last)).round();
            (n as usize).max(1)
        })
        .collect();
    ClassCounts::new(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongTailDataset {
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
    pub counts: ClassCounts,
}

impl LongTailDataset {
    pub fn num_classes(&self) -> usize {
        self.counts.num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.train_x.last_dim()
    }

    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_y.len()
    }

    /// Rows and labels of the training set at `idx`.
    pub fn train_batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            self.train_x.select_rows(idx)?,
            idx.iter().map(|&i| self.train_y[i]).collect(),
        ))
    }

    pub fn test_batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            self.test_x.select_rows(idx)?,
            idx.iter().map(|&i| self.test_y[i]).collect(),
        ))
    }

    /// Writes a CSV dump: a `#` header line with the class counts, then one
    /// `split,label,x0..` row per sample.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut file = File::create(path)?;
        let counts: Vec<String> = self
            .counts
            .as_slice()
            .iter()
            .map(usize::to_string)
            .collect();
        writeln!(
            file,
            "#bflab-dataset v1 classes={} input_dim={} counts={}",
            self.num_classes(),
            self.input_dim(),
            counts.join(";")
        )?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["split".to_string(), "label".to_string()];
        header.extend((0..self.input_dim()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (split, x, y) in [
            ("train", &self.train_x, &self.train_y),
            ("test", &self.test_x, &self.test_y),
        ] {
            for (row, label) in x.rows().zip(y) {
                let mut rec = vec![split.to_string(), label.to_string()];
                rec.extend(row.iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let meta = first
            .trim()
            .strip_prefix("#bflab-dataset v1 ")
            .ok_or_else(|| LabError::Format("missing dataset header line".into()))?;
        let field = |key: &str| {
            meta.split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| LabError::Format(format!("header lacks {key}")))
        };
        let dim: usize = field("input_dim")?
            .parse()
            .map_err(|_| LabError::Format("bad input_dim".into()))?;
        let counts = field("counts")?
            .split(';')
            .map(|c| {
                c.parse::<usize>()
                    .map_err(|_| LabError::Format(format!("bad count {c:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let counts = ClassCounts::new(counts)?;

        let mut rd = csv::Reader::from_reader(reader);
        let (mut train_x, mut train_y, mut test_x, mut test_y) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != dim + 2 {
                return Err(LabError::Format(format!(
                    "row has {} fields, expected {}",
                    rec.len(),
                    dim + 2
                )));
            }
            let label: usize = rec[1]
                .parse()
                .map_err(|_| LabError::Format("bad label".into()))?;
            let vals = (2..rec.len())
                .map(|j| {
                    rec[j]
                        .parse::<f64>()
                        .map_err(|_| LabError::Format("bad feature".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            match &rec[0] {
                "train" => {
                    train_x.extend(vals);
                    train_y.push(label);
                }
                "test" => {
                    test_x.extend(vals);
                    test_y.push(label);
                }
                other => return Err(LabError::Format(format!("unknown split {other:?}"))),
            }
        }
        let mut seen = vec![0usize; counts.num_classes()];
        for &y in &train_y {
            *seen
                .get_mut(y)
                .ok_or_else(|| LabError::Format(format!("label {y} out of range")))? += 1;
        }
        if seen != counts.as_slice() {
            return Err(LabError::Format(
                "train labels disagree with header counts".into(),
            ));
        }
        Ok(Self {
            train_x: Tensor::new(vec![train_y.len(), dim], train_x)?,
            train_y,
            test_x: Tensor::new(vec![test_y.len(), dim], test_x)?,
            test_y,
            counts,
        })
    }
}

/// Class means on a sphere of radius `class_sep`; samples are the mean plus
/// isotropic Gaussian noise. Pure function of `spec`, seed included.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<LongTailDataset> {
    spec.validate()?;
    let counts = class_count_profile(spec.classes, spec.n_max, spec.ratio)?;
    let mut rng = substream(spec.seed, Stream::Dataset);
    let d = spec.input_dim;

    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm * spec.class_sep).collect()
        })
        .collect();

    let mut draw = |per_class: &dyn Fn(usize) -> usize| {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (k, mean) in means.iter().enumerate() {
            for _ in 0..per_class(k) {
                xs.extend(
                    mean.iter()
                        .map(|m| m + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)),
                );
                ys.push(k);
            }
        }
        (xs, ys)
    };
    let (train_x, train_y) = draw(&|k| counts.get(k));
    let (test_x, test_y) = draw(&|_| spec.test_per_class);

    Ok(LongTailDataset {
        train_x: Tensor::new(vec![train_y.len(), d], train_x)?,
        train_y,
        test_x: Tensor::new(vec![test_y.len(), d], test_x)?,
        test_y,
        counts,
    })
}

/// One shuffled pass over the training set in batches of `batch_size`.
/// A final batch with fewer than 2 samples is dropped.
pub fn make_batches(
    ds: &LongTailDataset,
    batch_size: usize,
    rng: &mut LabRng,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(LabError::contract("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..ds.train_len()).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}
