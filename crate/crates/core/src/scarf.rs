//! Contrastive pretraining on tabular rows.
//!
//! A positive pair is a row and a copy of it in which a random subset of
//! columns has been overwritten with draws from each column's empirical
//! marginal. Every other row of the batch acts as a negative. Both views go
//! through the encoder `f` and the projection head `g`; the loss is InfoNCE
//! over cosine similarities. Only `f` is used downstream.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, read_to_string, write_csv_with, write_json};
use crate::matrix::Matrix;
use crate::neural::{Activation, AdamState, DenseNet, Gradients, WeightsFile};
use crate::rng::{derive_indexed, derive_seed, Rng};

/// Width of the latent representation.
pub const LATENT_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScarfConfig {
    /// Encoder layer widths after the input; the last must be [`LATENT_DIM`].
    pub encoder_dims: Vec<usize>,
    /// Projection-head widths after the latent layer.
    pub head_dims: Vec<usize>,
    pub corruption_rate: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ScarfConfig {
    fn default() -> Self {
        ScarfConfig {
            encoder_dims: vec![64, 64, LATENT_DIM],
            head_dims: vec![LATENT_DIM, LATENT_DIM],
            corruption_rate: 0.3,
            temperature: 1.0,
            epochs: 15,
            batch_size: 16,
            learning_rate: 0.001,
            seed: 0,
        }
    }
}

impl ScarfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(Error::Config(format!(
                "corruption rate must be in [0,1], got {}",
                self.corruption_rate
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2 for in-batch negatives, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.encoder_dims.last() != Some(&LATENT_DIM) {
            return Err(Error::Config(format!(
                "encoder must end at width {LATENT_DIM}, got {:?}",
                self.encoder_dims
            )));
        }
        if self.head_dims.is_empty() {
            return Err(Error::Config("projection head needs at least one layer".into()));
        }
        Ok(())
    }
}

/// Per-column empirical values of the training matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSampler {
    columns: Vec<Vec<f64>>,
}

impl MarginalSampler {
    pub fn from_matrix(train: &Matrix) -> Result<Self> {
        if train.n_rows() == 0 || train.n_cols() == 0 {
            return Err(Error::Data("marginal sampler needs a non-empty matrix".into()));
        }
        Ok(MarginalSampler {
            columns: (0..train.n_cols()).map(|c| train.column(c)).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn draw(&self, col: usize, rng: &mut Rng) -> f64 {
        let vals = &self.columns[col];
        vals[rng.below(vals.len())]
    }
}

/// `⌈rate·d⌉`, ignoring float dust such as `0.3·40 = 12.000000000000002`.
pub fn corruption_count(rate: f64, d: usize) -> usize {
    ((rate * d as f64 - 1e-9).ceil().max(0.0) as usize).min(d)
}

/// Corrupted copy of `row` plus the replaced column indices.
pub fn corrupt_with_mask(row: &[f64], sampler: &MarginalSampler, rate: f64, rng: &mut Rng) -> (Vec<f64>, Vec<usize>) {
    assert_eq!(row.len(), sampler.width(), "row width differs from sampler");
    let k = corruption_count(rate, row.len());
    let idx = rng.sample_indices(row.len(), k);
    let mut out = row.to_vec();
    for &c in &idx {
        out[c] = sampler.draw(c, rng);
    }
    (out, idx)
}

pub fn corrupt(row: &[f64], sampler: &MarginalSampler, rate: f64, rng: &mut Rng) -> Vec<f64> {
    corrupt_with_mask(row, sampler, rate, rng).0
}

fn corrupt_matrix(x: &Matrix, sampler: &MarginalSampler, rate: f64, rng: &mut Rng) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.n_rows() {
        let c = corrupt(x.row(r), sampler, rate, rng);
        out.row_mut(r).copy_from_slice(&c);
    }
    out
}

fn unit_rows(m: &Matrix) -> (Vec<Vec<f64>>, Vec<f64>) {
    m.rows()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-12 {
                (r.iter().map(|v| v / n).collect(), n)
            } else {
                (vec![0.0; r.len()], 0.0)
            }
        })
        .unzip()
}

/// InfoNCE with cosine similarity: the mean over anchors of
/// `logsumexp_j(s_ij) − s_ii`, where `s_ij = cos(anchor_i, positive_j) / τ`.
pub fn info_nce(anchors: &Matrix, positives: &Matrix, temperature: f64) -> Result<f64> {
    info_nce_with_grad(anchors, positives, temperature).map(|(l, _, _)| l)
}

/// Loss and its gradients with respect to `anchors` and `positives`.
/// Zero vectors have cosine 0 with everything and receive zero gradient.
pub fn info_nce_with_grad(anchors: &Matrix, positives: &Matrix, temperature: f64) -> Result<(f64, Matrix, Matrix)> {
    if anchors.n_rows() != positives.n_rows() || anchors.n_cols() != positives.n_cols() {
        return Err(Error::Shape(format!(
            "anchors {}x{} vs positives {}x{}",
            anchors.n_rows(),
            anchors.n_cols(),
            positives.n_rows(),
            positives.n_cols()
        )));
    }
    let n = anchors.n_rows();
    if n == 0 {
        return Err(Error::Shape("InfoNCE needs at least one pair".into()));
    }
    if !anchors.all_finite() || !positives.all_finite() {
        return Err(Error::NonFinite("InfoNCE input".into()));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let m = anchors.n_cols();
    let (ua, na) = unit_rows(anchors);
    let (up, np) = unit_rows(positives);

    let mut loss = 0.0;
    // dL/ds_ij = (softmax_ij − δ_ij) / N
    let mut gs = vec![0.0; n * n];
    for i in 0..n {
        let s: Vec<f64> = (0..n)
            .map(|j| ua[i].iter().zip(&up[j]).map(|(a, b)| a * b).sum::<f64>() / temperature)
            .collect();
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = s.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += lse - s[i];
        for j in 0..n {
            let p = (s[j] - lse).exp();
            gs[i * n + j] = (p - f64::from(u8::from(i == j))) / n as f64;
        }
    }
    loss /= n as f64;

    let mut gua = vec![vec![0.0; m]; n];
    let mut gup = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..n {
            let g = gs[i * n + j] / temperature;
            if g == 0.0 {
                continue;
            }
            for k in 0..m {
                gua[i][k] += g * up[j][k];
                gup[j][k] += g * ua[i][k];
            }
        }
    }
    // through u = x / |x|: dL/dx = (g − (g·u) u) / |x|
    let back = |gu: &[Vec<f64>], u: &[Vec<f64>], norms: &[f64]| -> Matrix {
        let mut out = Matrix::zeros(n, m);
        for r in 0..n {
            if norms[r] == 0.0 {
                continue;
            }
            let dot: f64 = gu[r].iter().zip(&u[r]).map(|(a, b)| a * b).sum();
            for (k, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (gu[r][k] - dot * u[r][k]) / norms[r];
            }
        }
        out
    };
    Ok((loss, back(&gua, &ua, &na), back(&gup, &up, &np)))
}

/// Encoder `f` and projection head `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub encoder: DenseNet,
    pub head: DenseNet,
}

#[derive(Serialize, Deserialize)]
struct EncoderWeightsFile {
    version: u32,
    encoder: WeightsFile,
    head: WeightsFile,
}

impl EncoderWeights {
    pub fn init(input_dim: usize, config: &ScarfConfig, rng: &mut Rng) -> Result<Self> {
        let mut enc_dims = vec![input_dim];
        enc_dims.extend(&config.encoder_dims);
        let encoder = DenseNet::init(&enc_dims, &vec![Activation::Relu; enc_dims.len() - 1], rng)?;
        let mut head_dims = vec![LATENT_DIM];
        head_dims.extend(&config.head_dims);
        let head = DenseNet::mlp(&head_dims, rng)?;
        Ok(EncoderWeights { encoder, head })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &EncoderWeightsFile {
                version: crate::neural::WEIGHTS_VERSION,
                encoder: self.encoder.to_file(),
                head: self.head.to_file(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: EncoderWeightsFile = serde_json::from_str(&read_to_string(path)?)?;
        if f.version != crate::neural::WEIGHTS_VERSION {
            return Err(Error::Version {
                expected: crate::neural::WEIGHTS_VERSION,
                found: f.version.to_string(),
            });
        }
        let w = EncoderWeights {
            encoder: DenseNet::from_file(f.encoder)?,
            head: DenseNet::from_file(f.head)?,
        };
        if w.encoder.output_dim() != LATENT_DIM || w.head.input_dim() != LATENT_DIM {
            return Err(Error::Shape(format!(
                "encoder must emit {LATENT_DIM} values into the head"
            )));
        }
        Ok(w)
    }

    /// Contrastive loss of one batch of pairs and the summed gradients of both nets.
    pub fn pair_loss_and_grads(
        &self,
        x: &Matrix,
        x_corrupt: &Matrix,
        temperature: f64,
    ) -> Result<(f64, Gradients, Gradients)> {
        let fa = self.encoder.forward(x)?;
        let fp = self.encoder.forward(x_corrupt)?;
        let ha = self.head.forward(&fa.output)?;
        let hp = self.head.forward(&fp.output)?;
        let (loss, ga, gp) = info_nce_with_grad(&ha.output, &hp.output, temperature)?;
        let (mut g_head, g_fa) = self.head.backward(&ha, &ga)?;
        let (g_head_p, g_fp) = self.head.backward(&hp, &gp)?;
        g_head.add_assign(&g_head_p);
        let (mut g_enc, _) = self.encoder.backward(&fa, &g_fa)?;
        let (g_enc_p, _) = self.encoder.backward(&fp, &g_fp)?;
        g_enc.add_assign(&g_enc_p);
        Ok((loss, g_enc, g_head))
    }

    pub fn pair_loss(&self, x: &Matrix, x_corrupt: &Matrix, temperature: f64) -> Result<f64> {
        let a = self.head.predict(&self.encoder.predict(x)?)?;
        let p = self.head.predict(&self.encoder.predict(x_corrupt)?)?;
        info_nce(&a, &p, temperature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub weights: EncoderWeights,
    pub history: Vec<EpochLoss>,
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size).filter(|b| b.len() >= 2)
}

/// Train `f` and `g` for the configured number of epochs; returns the final weights.
pub fn pretrain(config: &ScarfConfig, train: &Matrix, val: Option<&Matrix>) -> Result<PretrainOutput> {
    config.validate()?;
    if train.n_rows() < 2 {
        return Err(Error::Data("pretraining needs at least two rows".into()));
    }
    if !train.all_finite() {
        return Err(Error::NonFinite("training matrix".into()));
    }
    let sampler = MarginalSampler::from_matrix(train)?;
    if let Some(v) = val {
        if v.n_cols() != train.n_cols() {
            return Err(Error::Shape(format!(
                "validation matrix has {} columns, training has {}",
                v.n_cols(),
                train.n_cols()
            )));
        }
    }

    let mut init_rng = Rng::new(derive_seed(config.seed, "scarf/init"));
    let mut weights = EncoderWeights::init(train.n_cols(), config, &mut init_rng)?;
    let mut adam_enc = AdamState::new(&weights.encoder, config.learning_rate);
    let mut adam_head = AdamState::new(&weights.head, config.learning_rate);
    let epoch_master = derive_seed(config.seed, "scarf/epoch");

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = Rng::new(derive_indexed(epoch_master, epoch as u64));
        let mut order: Vec<usize> = (0..train.n_rows()).collect();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in batches(&order, config.batch_size) {
            let x = train.select_rows(batch);
            let xc = corrupt_matrix(&x, &sampler, config.corruption_rate, &mut rng);
            let (loss, g_enc, g_head) = weights.pair_loss_and_grads(&x, &xc, config.temperature)?;
            adam_enc.step(&mut weights.encoder, &g_enc)?;
            adam_head.step(&mut weights.head, &g_head)?;
            total += loss;
            count += 1;
        }
        let train_loss = total / count.max(1) as f64;
        let val_loss = match val {
            Some(v) => validation_loss(&weights, &sampler, v, config)?,
            None => None,
        };
        log::info!(
            "epoch {}/{}: train {:.5} val {}",
            epoch + 1,
            config.epochs,
            train_loss,
            val_loss.map_or("-".to_string(), |v| format!("{v:.5}"))
        );
        history.push(EpochLoss {
            epoch: epoch + 1,
            train_loss,
            val_loss,
        });
    }
    Ok(PretrainOutput { weights, history })
}

/// Mean loss over fixed corrupted validation pairs; the corruption stream is
/// re-seeded from the master seed so every epoch sees the same pairs.
fn validation_loss(weights: &EncoderWeights, sampler: &MarginalSampler, val: &Matrix, config: &ScarfConfig) -> Result<Option<f64>> {
    let mut rng = Rng::new(derive_seed(config.seed, "scarf/val"));
    let vc = corrupt_matrix(val, sampler, config.corruption_rate, &mut rng);
    let order: Vec<usize> = (0..val.n_rows()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches(&order, config.batch_size) {
        total += weights.pair_loss(&val.select_rows(batch), &vc.select_rows(batch), config.temperature)?;
        count += 1;
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Latent representations from the encoder alone.
pub fn encode(weights: &EncoderWeights, rows: &Matrix) -> Result<Matrix> {
    if rows.n_cols() != weights.input_dim() {
        return Err(Error::Shape(format!(
            "rows have {} columns, encoder expects {}",
            rows.n_cols(),
            weights.input_dim()
        )));
    }
    const BLOCK: usize = 512;
    let blocks: Vec<Vec<usize>> = (0..rows.n_rows())
        .collect::<Vec<_>>()
        .chunks(BLOCK)
        .map(<[usize]>::to_vec)
        .collect();
    let parts = blocks
        .par_iter()
        .map(|idx| weights.encoder.predict(&rows.select_rows(idx)))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = parts.iter().flat_map(|m| m.values().iter().copied()).collect();
    let names = (0..LATENT_DIM).map(|i| format!("e{i}")).collect();
    Matrix::from_vec(rows.n_rows(), LATENT_DIM, values)?.with_col_names(names)
}

/// `epoch,train_loss,val_loss`; missing validation loss written empty.
pub fn write_history_csv(path: &Path, history: &[EpochLoss]) -> Result<()> {
    write_csv_with(path, |w| {
        w.write_record(["epoch", "train_loss", "val_loss"])?;
        for h in history {
            w.write_record([
                h.epoch.to_string(),
                fmt_f64(h.train_loss),
                h.val_loss.map(fmt_f64).unwrap_or_default(),
            ])?;
        }
        Ok(())
    })
}
