//! Teacher-forced training on toy data with ADAM and warmup, metrics
//! logging and resumable checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ToyConfig, ToySample};
use crate::decoder::evaluate_accuracy;
use crate::error::{Error, Result};
use crate::model::{init_model, model_input, model_loss, recognize_batch, stack, ModelConfig, Rectifier, Variant};
use crate::optim::{adam_step, AdamConfig, AdamState, LrSchedule, ScheduleMode};
use crate::tensor::{Element, Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub samples: usize,
    pub data: ToyConfig,
    /// Greedy evaluation on the training set every this many steps.
    pub eval_every: u64,
    /// Stop as soon as an evaluation reaches 100% sequence accuracy.
    pub stop_when_perfect: bool,
}

impl TrainConfig {
    pub fn toy(variant: Variant) -> Self {
        Self {
            model: ModelConfig::toy(variant),
            schedule: LrSchedule {
                base_lr: 0.028,
                warmup: 200,
                mode: ScheduleMode::Multiply,
            },
            adam: AdamConfig::default(),
            batch_size: 16,
            iterations: 2000,
            seed: 0,
            samples: 64,
            data: ToyConfig::default(),
            eval_every: 50,
            stop_when_perfect: true,
        }
    }

    pub fn reference(variant: Variant) -> Self {
        Self {
            model: ModelConfig::reference(variant),
            schedule: LrSchedule {
                base_lr: 0.02,
                warmup: 6000,
                mode: ScheduleMode::Multiply,
            },
            adam: AdamConfig::default(),
            batch_size: 768,
            iterations: 300_000,
            seed: 0,
            samples: 1024,
            data: ToyConfig {
                height: 32,
                width: 100,
                scale: 2,
                max_len: 8,
                ..ToyConfig::default()
            },
            eval_every: 1000,
            stop_when_perfect: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.data.validate()?;
        if self.batch_size == 0 || self.samples == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch size, sample count and eval interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Training-set sequence accuracy, when evaluated at this step.
    pub seq_acc: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,loss,lr,seq_acc\n");
    for r in rows {
        let acc = r.seq_acc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.lr, acc));
    }
    out
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    step: u64,
    config: TrainConfig,
}

/// Training state over a fixed, pre-rendered sample set.
pub struct Trainer<T: Element> {
    pub cfg: TrainConfig,
    pub params: ParamStore<T>,
    pub optim: AdamState<T>,
    inputs: Vec<Tensor<T>>,
    texts: Vec<String>,
}

impl<T: Element> Trainer<T> {
    pub fn new(cfg: TrainConfig, samples: &[ToySample]) -> Result<Self> {
        let params = init_model(&cfg.model, cfg.seed)?;
        Self::with_params(cfg, samples, params, AdamState::new())
    }

    fn with_params(cfg: TrainConfig, samples: &[ToySample], params: ParamStore<T>, optim: AdamState<T>) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::Contract("training needs at least one sample".into()));
        }
        let inputs = samples
            .iter()
            .map(|s| model_input(&cfg.model, &s.image, &Rectifier::Boxes(&s.boxes)))
            .collect::<Result<_>>()?;
        Ok(Self {
            texts: samples.iter().map(|s| s.text.clone()).collect(),
            cfg,
            params,
            optim,
            inputs,
        })
    }

    pub fn step(&self) -> u64 {
        self.optim.step
    }

    /// Sample indices of the batch used at optimiser step `step` (1-based).
    /// Each epoch is a fresh permutation seeded by `(seed, epoch)`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.inputs.len();
        let b = self.cfg.batch_size.min(n);
        let per_epoch = n.div_ceil(b) as u64;
        let (epoch, k) = ((step - 1) / per_epoch, ((step - 1) % per_epoch) as usize);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch);
        order.shuffle(&mut rng);
        order[k * b..((k + 1) * b).min(n)].to_vec()
    }

    /// Teacher-forced loss of the next batch without updating anything.
    pub fn batch_loss(&self, step: u64) -> Result<f64> {
        let idx = self.batch_indices(step);
        let mut g = Graph::new();
        let loss = self.build_loss(&mut g, &idx)?;
        Ok(g.value(loss).data()[0].to_f64_lossy())
    }

    fn build_loss(&self, g: &mut Graph<T>, idx: &[usize]) -> Result<crate::tensor::Var> {
        let x = stack(&idx.iter().map(|&i| &self.inputs[i]).collect::<Vec<_>>())?;
        let texts: Vec<&str> = idx.iter().map(|&i| self.texts[i].as_str()).collect();
        let xv = g.input(x)?;
        model_loss(g, &self.params, &self.cfg.model, xv, &texts)
    }

    /// One optimiser step; returns the batch loss and learning rate.
    pub fn train_step(&mut self) -> Result<(f64, f64)> {
        let step = self.optim.step + 1;
        let lr = self.cfg.schedule.at(step)?;
        let idx = self.batch_indices(step);
        let mut g = Graph::new();
        let loss = self.build_loss(&mut g, &idx)?;
        let value = g.value(loss).data()[0].to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        self.params.zero_grad();
        g.backward_into(loss, &mut self.params)?;
        adam_step(&mut self.params, &mut self.optim, lr, &self.cfg.adam)?;
        Ok((value, lr))
    }

    /// Greedy transcriptions of every training sample.
    pub fn predictions(&self) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(self.inputs.len());
        for chunk in self.inputs.chunks(self.cfg.batch_size.max(1)) {
            let x = stack(&chunk.iter().collect::<Vec<_>>())?;
            out.extend(recognize_batch(&self.params, &self.cfg.model, &x)?.into_iter().map(|d| d.text));
        }
        Ok(out)
    }

    /// Sequence accuracy on the training set under the 37-class protocol.
    pub fn accuracy(&self) -> Result<f64> {
        evaluate_accuracy(&self.predictions()?, &self.texts)
    }

    /// Runs until `cfg.iterations` steps or, if enabled, perfect accuracy.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricRow)) -> Result<Vec<MetricRow>> {
        let mut rows = Vec::new();
        while self.optim.step < self.cfg.iterations {
            let (loss, lr) = self.train_step()?;
            let step = self.optim.step;
            let seq_acc = if step % self.cfg.eval_every == 0 || step == self.cfg.iterations {
                Some(self.accuracy()?)
            } else {
                None
            };
            let row = MetricRow { step, loss, lr, seq_acc };
            on_row(&row);
            rows.push(row);
            if self.cfg.stop_when_perfect && seq_acc == Some(1.0) {
                break;
            }
        }
        Ok(rows)
    }

    /// Writes `params/`, `optim/` (manifest format) and `train_state.json`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.params.save_dir(&dir.join("params"))?;
        self.optim.to_store()?.save_dir(&dir.join("optim"))?;
        let st = TrainState {
            step: self.optim.step,
            config: self.cfg.clone(),
        };
        fs::write(dir.join("train_state.json"), serde_json::to_vec_pretty(&st)?)?;
        Ok(())
    }

    /// Restores a checkpoint; the samples must be the ones it was trained on.
    pub fn load_checkpoint(dir: &Path, samples: &[ToySample]) -> Result<Self> {
        let st: TrainState = serde_json::from_slice(&fs::read(dir.join("train_state.json"))?)?;
        let params = ParamStore::load_dir(&dir.join("params"))?;
        let optim = AdamState::from_store(&ParamStore::load_dir(&dir.join("optim"))?, st.step);
        Self::with_params(st.config, samples, params, optim)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Element> {
    pub params: ParamStore<T>,
    pub metrics: Vec<MetricRow>,
    pub steps: u64,
    pub final_accuracy: f64,
}

/// Generates the configured toy set and trains on it.
pub fn train<T: Element>(cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let samples = crate::data::generate_dataset(cfg.samples, &cfg.data, cfg.seed)?;
    let mut t = Trainer::<T>::new(cfg.clone(), &samples)?;
    let metrics = t.run(|_| {})?;
    let final_accuracy = match metrics.last().and_then(|r| r.seq_acc) {
        Some(a) => a,
        None => t.accuracy()?,
    };
    Ok(TrainOutcome {
        steps: t.step(),
        params: t.params,
        metrics,
        final_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> (TrainConfig, Vec<ToySample>) {
        let cfg = TrainConfig {
            samples: 4,
            batch_size: 2,
            iterations: 3,
            eval_every: 100,
            ..TrainConfig::toy(variant)
        };
        let samples = crate::data::generate_dataset(cfg.samples, &cfg.data, cfg.seed).unwrap();
        (cfg, samples)
    }

    #[test]
    fn batches_cover_each_epoch() {
        let (cfg, samples) = tiny(Variant::Plain);
        let t = Trainer::<f32>::new(cfg, &samples).unwrap();
        let mut seen: Vec<usize> = [1, 2].iter().flat_map(|&s| t.batch_indices(s)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        assert_eq!(t.batch_indices(5), t.batch_indices(5));
    }

    #[test]
    fn first_loss_is_uniform_entropy() {
        let (cfg, samples) = tiny(Variant::Port);
        let mut t = Trainer::<f32>::new(cfg, &samples).unwrap();
        let (loss, lr) = t.train_step().unwrap();
        assert!((loss - 100f64.ln()).abs() < 1e-4);
        assert!((lr - 0.028 * 200f64.powf(-1.5)).abs() < 1e-12);
    }

    #[test]
    fn runs_are_bit_identical() {
        let (cfg, samples) = tiny(Variant::Stn);
        let run = || {
            let mut t = Trainer::<f64>::new(cfg.clone(), &samples).unwrap();
            t.run(|_| {}).unwrap().iter().map(|r| r.loss).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn metrics_csv_schema() {
        let rows = [
            MetricRow {
                step: 1,
                loss: 4.5,
                lr: 0.1,
                seq_acc: None,
            },
            MetricRow {
                step: 2,
                loss: 4.0,
                lr: 0.2,
                seq_acc: Some(0.5),
            },
        ];
        assert_eq!(metrics_csv(&rows), "step,loss,lr,seq_acc\n1,4.5,0.1,\n2,4,0.2,0.5\n");
    }
}
