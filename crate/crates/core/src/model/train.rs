use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, LossConfig, Model};
use crate::error::{Error, Result};
use crate::exec::{map_collect, ExecMode};
use crate::tensor::{Grads, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Linear learning-rate warm-up length in optimizer steps.
    pub warmup_steps: usize,
    /// Shuffling and dropout seed.
    pub seed: u64,
    /// Restore the parameters of the epoch with the lowest dev loss.
    pub select_best: bool,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            warmup_steps: 0,
            seed: 0,
            select_best: true,
            exec: ExecMode::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Grads,
    v: Grads,
    t: i32,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        AdamState {
            m: params.zero_grads(),
            v: params.zero_grads(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = &grads.tensors[i].data;
            let m = &mut self.m.tensors[i].data;
            let v = &mut self.v.tensors[i].data;
            for j in 0..p.data.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                p.data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-example training loss.
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_loss: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub dev_metrics: BTreeMap<String, f64>,
    pub clamped: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
}

fn sample_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (position as u64).wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// Mean loss over `examples` (no dropout).
pub fn mean_loss(model: &Model, examples: &[Example], cfg: &LossConfig, exec: ExecMode) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let losses = map_collect(exec, examples, |ex| model.loss(ex, cfg));
    losses.iter().sum::<f64>() / examples.len() as f64
}

/// Teacher-forced maximum-likelihood training with Adam.
///
/// Per-example gradients are computed independently (in parallel under
/// [`ExecMode::Parallel`]) and summed in batch order, so runs are
/// reproducible bit-for-bit across execution modes. `on_epoch` may return
/// dev metrics to record in the log.
pub fn train<F>(
    model: &mut Model,
    train_set: &[Example],
    dev_set: &[Example],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainingLog>
where
    F: FnMut(usize, &Model) -> BTreeMap<String, f64>,
{
    cfg.validate()?;
    loss_cfg.validate()?;
    let mut adam = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut step = 0;
    let dropout = model.config().dropout > 0.0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut clamped = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(usize, &Example)> = chunk.iter().map(|&i| (i, &train_set[i])).collect();
            let m: &Model = model;
            let results = map_collect(cfg.exec, &batch, |&(i, ex)| {
                let seed = dropout.then(|| sample_seed(cfg.seed, epoch, i));
                m.loss_and_grads(ex, loss_cfg, seed)
            });
            let mut grads = model.params().zero_grads();
            let mut batch_loss = 0.0;
            for (l, g, c) in &results {
                batch_loss += l;
                clamped += c;
                grads.add_assign(g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: b,
                    loss: batch_loss,
                });
            }
            let scale = 1.0 / batch.len() as f64;
            grads.scale(scale);
            if cfg.clip_norm > 0.0 {
                let norm = grads.global_norm();
                if norm > cfg.clip_norm {
                    grads.scale(cfg.clip_norm / norm);
                }
            }
            adam.step(model.params_mut(), &grads, cfg.lr_at(step), cfg);
            step += 1;
            total += batch_loss;
            log.step_losses.push(batch_loss * scale);
        }
        let dev_loss = (!dev_set.is_empty()).then(|| mean_loss(model, dev_set, loss_cfg, cfg.exec));
        if let Some(dl) = dev_loss {
            if !dl.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: dl,
                });
            }
            if best.as_ref().is_none_or(|(b, _)| dl < *b) {
                best = Some((dl, model.params().clone()));
                log.best_epoch = Some(epoch);
            }
        }
        let dev_metrics = on_epoch(epoch, model);
        let entry = EpochLog {
            epoch,
            train_loss: total / train_set.len().max(1) as f64,
            dev_loss,
            dev_metrics,
            clamped,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} train_loss {:.4} dev_loss {} ({:.1}s)",
            epoch,
            entry.train_loss,
            dev_loss.map_or("-".into(), |d| format!("{d:.4}")),
            entry.seconds
        );
        log.epochs.push(entry);
    }
    if cfg.select_best {
        if let Some((_, params)) = best {
            *model.params_mut() = params;
        }
    } else {
        log.best_epoch = None;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{SettingSpec, Tokenizer, TokenizerKind};
    use crate::corpus::{gen_synthetic_corpus, SynthConfig};
    use crate::model::{prepare_example, ModelConfig};

    fn setup(n: usize) -> (Model, Vec<Example>) {
        let corpus = gen_synthetic_corpus(5, n, &SynthConfig::default()).unwrap();
        let words: Vec<&str> = corpus
            .iter()
            .flat_map(|s| s.source.iter().chain(&s.target))
            .map(String::as_str)
            .collect();
        let tok = Tokenizer::fit(TokenizerKind::Whitespace, words, 5);
        let spec = SettingSpec::baseline();
        let ex = corpus.iter().map(|s| prepare_example(s, &spec, &tok).unwrap()).collect();
        let model = Model::new(ModelConfig {
            d_model: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ff_dim: 32,
            vocab_size: crate::codec::SubwordTokenizer::vocab_size(&tok),
            type_count: 5,
            dropout: 0.1,
            ..ModelConfig::default()
        })
        .unwrap();
        (model, ex)
    }

    fn cfg(exec: ExecMode) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 2,
            lr: 3e-3,
            exec,
            select_best: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_drops_within_one_epoch() {
        let (mut model, ex) = setup(10);
        let mut c = cfg(ExecMode::Sequential);
        c.batch_size = 10;
        c.epochs = 8;
        let log = train(&mut model, &ex, &[], &LossConfig::default(), &c, |_, _| BTreeMap::new()).unwrap();
        assert!(log.step_losses.last().unwrap() < log.step_losses.first().unwrap());
    }

    #[test]
    fn exec_modes_are_bit_identical() {
        let (m0, ex) = setup(8);
        let mut a = m0.clone();
        let mut b = m0;
        let la = train(&mut a, &ex, &ex[..2], &LossConfig::default(), &cfg(ExecMode::Parallel), |_, _| BTreeMap::new()).unwrap();
        let lb = train(&mut b, &ex, &ex[..2], &LossConfig::default(), &cfg(ExecMode::Sequential), |_, _| BTreeMap::new()).unwrap();
        assert_eq!(la.step_losses, lb.step_losses);
        assert_eq!(a.params().values(), b.params().values());
    }

    #[test]
    fn divergence_is_reported() {
        let (mut model, ex) = setup(4);
        let id = model.params().ids().next().unwrap();
        model.params_mut().get_mut(id).data[0] = f64::NAN;
        let mut c = cfg(ExecMode::Sequential);
        c.batch_size = 4;
        let err = train(&mut model, &ex, &[], &LossConfig::default(), &c, |_, _| BTreeMap::new());
        assert!(matches!(err, Err(Error::Diverged { .. })));
    }
}
