#![allow(clippy::needless_range_loop)]

use bflab::batchformer::{BatchFormerModel, ModelConfig};
use bflab::config::LabConfig;
use bflab::data::{generate_dataset, make_batches, DatasetSpec, LongTailDataset};
use bflab::loss::LossKind;
use bflab::metrics::{split_accuracy, GroupRule};
use bflab::rng::{substream, LabRng, Stream};
use bflab::tensor::Tensor;
use bflab::train::{evaluate, train, ScheduleKind};
use rand::Rng;

type Mat = Vec<Vec<f64>>;

fn uniform(rng: &mut LabRng, rows: usize, cols: usize) -> Mat {
    let b = 1.0 / (rows as f64).sqrt();
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-b..=b)).collect())
        .collect()
}

fn bias(rng: &mut LabRng, fan_in: usize, n: usize) -> Vec<f64> {
    let b = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-b..=b)).collect()
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            (0..b.len())
                .map(|j| b[j] + r.iter().zip(w).map(|(xi, wr)| xi * wr[j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn t_mul(a: &Mat, d: &Mat) -> Mat {
    // aᵀ · d
    let (k, n) = (a[0].len(), d[0].len());
    let mut out = vec![vec![0.0; n]; k];
    for (ar, dr) in a.iter().zip(d) {
        for i in 0..k {
            for j in 0..n {
                out[i][j] += ar[i] * dr[j];
            }
        }
    }
    out
}

fn mul_t(d: &Mat, w: &Mat) -> Mat {
    // d · wᵀ
    d.iter()
        .map(|r| {
            w.iter()
                .map(|wr| wr.iter().zip(r).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

fn col_sum(d: &Mat) -> Vec<f64> {
    (0..d[0].len())
        .map(|j| d.iter().map(|r| r[j]).sum())
        .collect()
}

/// A plain MLP classifier trained without any encoder, written out by hand.
struct Mlp {
    w: [Mat; 3],
    b: [Vec<f64>; 3],
    vw: [Mat; 3],
    vb: [Vec<f64>; 3],
}

impl Mlp {
    fn new(c: &ModelConfig, seed: u64) -> Self {
        let mut rng = substream(seed, Stream::Init);
        let dims = [
            (c.input_dim, c.hidden_dim),
            (c.hidden_dim, c.feature_dim),
            (c.feature_dim, c.classes),
        ];
        let mut w: Vec<Mat> = Vec::new();
        let mut b: Vec<Vec<f64>> = Vec::new();
        for (i, o) in dims {
            w.push(uniform(&mut rng, i, o));
            b.push(bias(&mut rng, i, o));
        }
        let zw: Vec<Mat> = w
            .iter()
            .map(|m| vec![vec![0.0; m[0].len()]; m.len()])
            .collect();
        let zb: Vec<Vec<f64>> = b.iter().map(|v| vec![0.0; v.len()]).collect();
        Self {
            w: w.try_into().unwrap(),
            b: b.try_into().unwrap(),
            vw: zw.try_into().unwrap(),
            vb: zb.try_into().unwrap(),
        }
    }

    fn forward(&self, x: &Mat) -> (Mat, Mat, Mat, Mat) {
        let h1 = affine(x, &self.w[0], &self.b[0]);
        let a1: Mat = h1
            .iter()
            .map(|r| r.iter().map(|v| v.max(0.0)).collect())
            .collect();
        let f = affine(&a1, &self.w[1], &self.b[1]);
        let z = affine(&f, &self.w[2], &self.b[2]);
        (h1, a1, f, z)
    }

    fn step(&mut self, x: &Mat, y: &[usize], prior: &[f64], lr: f64, mom: f64, wd: f64) -> f64 {
        let (h1, a1, f, z) = self.forward(x);
        let n = x.len() as f64;
        let mut loss = 0.0;
        let dz: Mat = z
            .iter()
            .zip(y)
            .map(|(r, &t)| {
                let s: Vec<f64> = r.iter().zip(prior).map(|(a, b)| a + b).collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let tot: f64 = e.iter().sum();
                loss += -(s[t] - m - tot.ln()) / n;
                e.iter()
                    .enumerate()
                    .map(|(j, v)| (v / tot - if j == t { 1.0 } else { 0.0 }) / n)
                    .collect()
            })
            .collect();
        let df = mul_t(&dz, &self.w[2]);
        let da1 = mul_t(&df, &self.w[1]);
        let dh1: Mat = da1
            .iter()
            .zip(&h1)
            .map(|(d, h)| {
                d.iter()
                    .zip(h)
                    .map(|(a, b)| if *b > 0.0 { *a } else { 0.0 })
                    .collect()
            })
            .collect();
        let grads = [
            (t_mul(x, &dh1), col_sum(&dh1)),
            (t_mul(&a1, &df), col_sum(&df)),
            (t_mul(&f, &dz), col_sum(&dz)),
        ];
        for (l, (gw, gb)) in grads.into_iter().enumerate() {
            for i in 0..gw.len() {
                for j in 0..gw[0].len() {
                    let v = &mut self.vw[l][i][j];
                    *v = mom * *v + gw[i][j] + wd * self.w[l][i][j];
                    self.w[l][i][j] -= lr * *v;
                }
            }
            for j in 0..gb.len() {
                let v = &mut self.vb[l][j];
                *v = mom * *v + gb[j] + wd * self.b[l][j];
                self.b[l][j] -= lr * *v;
            }
        }
        loss
    }

    fn predict(&self, x: &Mat) -> Vec<usize> {
        self.forward(x)
            .3
            .iter()
            .map(|r| {
                let mut best = 0;
                for (j, v) in r.iter().enumerate() {
                    if *v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

fn rows(t: &Tensor) -> Mat {
    t.rows().map(<[f64]>::to_vec).collect()
}

fn small_config() -> LabConfig {
    let mut c = LabConfig {
        data: DatasetSpec {
            classes: 5,
            input_dim: 6,
            n_max: 60,
            ratio: 20.0,
            test_per_class: 20,
            ..DatasetSpec::default()
        },
        ..LabConfig::default()
    };
    c.model.hidden_dim = 10;
    c.model.feature_dim = 8;
    c.train.epochs = 4;
    c.train.batch_size = 16;
    c.train.lr_milestones = vec![3];
    c.set_seed(5);
    c
}

#[test]
fn batchformer_off_matches_hand_written_baseline() {
    for loss in [LossKind::CrossEntropy, LossKind::BalancedSoftmax] {
        let mut c = small_config();
        c.train.batchformer = false;
        c.train.loss = loss;
        let ds = generate_dataset(&c.data).unwrap();
        let record = train(&c, &ds).unwrap().record;

        let mut mlp = Mlp::new(&c.model, c.train.seed);
        let prior: Vec<f64> = match loss {
            LossKind::CrossEntropy => vec![0.0; 5],
            LossKind::BalancedSoftmax => ds
                .counts
                .as_slice()
                .iter()
                .map(|&n| (n as f64).ln())
                .collect(),
        };
        let mut shuffle = substream(c.train.seed, Stream::Shuffle);
        let test_x = rows(&ds.test_x);
        for (epoch, rec) in record.epochs.iter().enumerate() {
            let lr = c.train.base_lr * if epoch >= 3 { 0.1 } else { 1.0 };
            let mut losses = Vec::new();
            for batch in make_batches(&ds, c.train.batch_size, &mut shuffle).unwrap() {
                let (x, y) = ds.train_batch(&batch).unwrap();
                losses.push(mlp.step(
                    &rows(&x),
                    &y,
                    &prior,
                    lr,
                    c.train.momentum,
                    c.train.weight_decay,
                ));
            }
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            assert!(
                (mean - rec.train_loss).abs() < 1e-9,
                "epoch {epoch}: {mean} vs {}",
                rec.train_loss
            );
            let m = split_accuracy(&mlp.predict(&test_x), &ds.test_y, &ds.counts, c.group_rule)
                .unwrap();
            assert_eq!(m, rec.metrics, "epoch {epoch}");
        }
    }
}

#[test]
fn same_seed_same_record() {
    let c = small_config();
    let ds = generate_dataset(&c.data).unwrap();
    let mut a = train(&c, &ds).unwrap().record;
    let mut b = train(&c, &ds).unwrap().record;
    for r in [&mut a, &mut b] {
        r.wall_time_s = 0.0;
        for e in &mut r.epochs {
            e.wall_time_s = 0.0;
        }
    }
    assert_eq!(a, b);
}

#[test]
fn different_seeds_differ() {
    let mut c = small_config();
    let ds = generate_dataset(&c.data).unwrap();
    let a = train(&c, &ds).unwrap().record;
    c.set_seed(6);
    let b = train(&c, &ds).unwrap().record;
    assert_ne!(a.epochs[0].train_loss, b.epochs[0].train_loss);
}

#[test]
fn untrained_model_is_near_chance() {
    let mut accs = Vec::new();
    for seed in 0..5 {
        let spec = DatasetSpec {
            seed,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let m = BatchFormerModel::init(ModelConfig::default(), seed).unwrap();
        accs.push(evaluate(&m, &ds, GroupRule::Tertile, 256).unwrap().all);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.1).abs() <= 0.05, "{accs:?}");
}

/// Backbone computes `[relu(x), relu(-x)]` then the class-mean projections;
/// the classifier is the identity. On noise-free data every sample lands on
/// its own mean, which has the largest inner product with itself.
fn oracle_model(ds: &LongTailDataset, means: &[Vec<f64>]) -> BatchFormerModel {
    let d = ds.input_dim();
    let k = ds.num_classes();
    let config = ModelConfig {
        input_dim: d,
        hidden_dim: 2 * d,
        feature_dim: k,
        classes: k,
        heads: 4,
        ..ModelConfig::default()
    };
    let mut m = BatchFormerModel::init(config, 0).unwrap();
    let mut w1 = Tensor::zeros(&[d, 2 * d]);
    for i in 0..d {
        w1.data_mut()[i * 2 * d + i] = 1.0;
        w1.data_mut()[i * 2 * d + d + i] = -1.0;
    }
    let mut w2 = Tensor::zeros(&[2 * d, k]);
    for (c, mean) in means.iter().enumerate() {
        for i in 0..d {
            w2.data_mut()[i * k + c] = mean[i];
            w2.data_mut()[(d + i) * k + c] = -mean[i];
        }
    }
    let set = |m: &mut BatchFormerModel, name: &str, t: Tensor| {
        let id = m.store.find(name).unwrap();
        *m.store.value_mut(id) = t;
    };
    set(&mut m, "backbone.fc1.weight", w1);
    set(&mut m, "backbone.fc1.bias", Tensor::zeros(&[2 * d]));
    set(&mut m, "backbone.fc2.weight", w2);
    set(&mut m, "backbone.fc2.bias", Tensor::zeros(&[k]));
    set(&mut m, "classifier.weight", Tensor::eye(k));
    set(&mut m, "classifier.bias", Tensor::zeros(&[k]));
    m
}

#[test]
fn oracle_weights_score_perfectly_on_clean_data() {
    let spec = DatasetSpec {
        classes: 8,
        noise_sigma: 0.0,
        test_per_class: 5,
        ..DatasetSpec::default()
    };
    let ds = generate_dataset(&spec).unwrap();
    let means: Vec<Vec<f64>> = (0..8)
        .map(|c| {
            ds.test_y
                .iter()
                .position(|&y| y == c)
                .map(|i| ds.test_x.row(i).to_vec())
                .unwrap()
        })
        .collect();
    let m = evaluate(&oracle_model(&ds, &means), &ds, GroupRule::Tertile, 7).unwrap();
    assert_eq!((m.all, m.many, m.medium, m.few), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn cosine_and_constant_schedules_run() {
    for s in [ScheduleKind::Cosine, ScheduleKind::Constant] {
        let mut c = small_config();
        c.train.lr_schedule = s;
        c.train.epochs = 2;
        let ds = generate_dataset(&c.data).unwrap();
        let r = train(&c, &ds).unwrap().record;
        assert_eq!(r.epochs.len(), 2);
        assert!(r.epochs.iter().all(|e| e.train_loss.is_finite()));
    }
}

fn head_class_loss(m: &BatchFormerModel, ds: &LongTailDataset) -> f64 {
    let idx: Vec<usize> = (0..ds.train_len())
        .filter(|&i| ds.train_y[i] == 0)
        .collect();
    let (x, y) = ds.train_batch(&idx).unwrap();
    let mut g = bflab::Graph::new();
    let mut f = bflab::nn::Frame::frozen(&mut g, &m.store);
    let xv = f.graph.constant(x);
    let logits = m.plain_forward(&mut f, xv).unwrap();
    let l = bflab::loss::cross_entropy(&mut g, logits, &y).unwrap();
    g.value(l).item().unwrap()
}

#[test]
fn head_class_loss_drops_over_first_epochs() {
    let mut c = LabConfig::default();
    let ds = generate_dataset(&c.data).unwrap();
    let mut losses = Vec::new();
    for epochs in [1, 5] {
        c.train.epochs = epochs;
        losses.push(head_class_loss(&train(&c, &ds).unwrap().model, &ds));
    }
    assert!(losses[1] < losses[0], "{losses:?}");
}
