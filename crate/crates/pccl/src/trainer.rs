//! The joint training loop, the baseline regimes assembled from the same
//! pieces, and the ablation harness.
//!
//! Losses and their gradients with respect to the softmax outputs are
//! computed on the host by `pccl_core`. The gradient with respect to each
//! logit tensor `z` is then injected as a constant `G`, and the scalar
//! `Σ z·G` is back-propagated through the networks, which yields exactly
//! the parameter gradients of the joint objective.

use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};
use pccl_core::data::{self, Sample};
use pccl_core::ema;
use pccl_core::losses::{self, LossComponents};
use pccl_core::metrics::MetricReport;
use pccl_core::{ops, BaselineMode, LossBundle, LossToggles, ProbMap, TrainConfig};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint;
use crate::dataset::Prepared;
use crate::error::{Error, Result};
use crate::eval::{self, grad_tensor, images_tensor, logit_map, stack_masks};
use crate::history::{EpochRecord, HistoryWriter, Record, StepRecord};
use crate::models::Segmenter;
use crate::optim::Sgd;

/// Standard deviation and clip of the input noise the mean-teacher
/// baseline adds before the teacher forward.
const MT_NOISE_STD: f64 = 0.1;
const MT_NOISE_CLIP: f32 = 0.2;

pub const CHECKPOINT_FILE: &str = "model1.safetensors";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const TEST_REPORT_FILE: &str = "test_report.csv";

#[derive(Clone, Copy)]
enum Stream {
    Model1 = 1,
    Model2,
    Labelled,
    Unlabelled,
    Augment,
    Noise,
}

fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn stream_seed(seed: u64, stream: Stream) -> u64 {
    stream_rng(seed, stream).next_u64()
}

/// Everything that evolves during training.
pub struct TrainState {
    pub config: TrainConfig,
    pub mode: BaselineMode,
    /// Losses actually optimised: the mode's toggles with zero-weight
    /// losses switched off.
    pub toggles: LossToggles,
    /// Lightweight student; the only model used at inference.
    pub model1: Segmenter,
    /// Transformer student.
    pub model2: Option<Segmenter>,
    /// EMA of `model2`, or of `model1` in the single-student baselines.
    pub teacher: Option<Segmenter>,
    opt1: Sgd,
    opt2: Option<Sgd>,
    pub epoch: usize,
    pub global_step: u64,
    pub best_val_dsc: Option<f64>,
    noise_rng: ChaCha8Rng,
}

/// Loss bundle and parameter gradients of one step, before the update.
pub struct StepGradients {
    pub bundle: LossBundle,
    pub grads: GradStore,
}

fn probs_of(logits: &Tensor) -> Result<ProbMap> {
    Ok(ops::softmax(&logit_map(logits)?))
}

fn add_rows(dst: &mut [f64], src: &[f64], offset: usize, weight: f64) {
    for (d, s) in dst[offset..offset + src.len()].iter_mut().zip(src) {
        *d += weight * s;
    }
}

/// `Σ logits·G` for the gradient `g` taken with respect to `probs`.
fn surrogate(logits: &Tensor, probs: &ProbMap, g: &[f64], device: &Device) -> Result<Tensor> {
    let dz = ops::softmax_backward(probs, g);
    Ok((logits * grad_tensor(&dz, probs.shape(), device)?)?.sum_all()?)
}

impl TrainState {
    pub fn new(config: &TrainConfig, mode: BaselineMode, device: &Device) -> Result<Self> {
        config.validate()?;
        let (spec1, spec2) = config.segmenter_specs();
        let toggles = mode.toggles(&config.ablation).effective(&config.loss_weights);
        let model1 = Segmenter::build(&spec1, stream_seed(config.seed, Stream::Model1), device)?;
        let model2 = if mode.uses_second_student() {
            Some(Segmenter::build(&spec2, stream_seed(config.seed, Stream::Model2), device)?)
        } else {
            None
        };
        let teacher = match mode {
            BaselineMode::Pccl => Some(model2.as_ref().expect("pccl has two students").duplicate()?),
            BaselineMode::Mt | BaselineMode::Ict => Some(model1.duplicate()?),
            BaselineMode::Cps | BaselineMode::SupervisedOnly => None,
        };
        let sgd = |m: &Segmenter| Sgd::new(m.store(), config.learning_rate, config.momentum, config.weight_decay);
        Ok(Self {
            opt1: sgd(&model1),
            opt2: model2.as_ref().map(sgd),
            config: config.clone(),
            mode,
            toggles,
            model1,
            model2,
            teacher,
            epoch: 0,
            global_step: 0,
            best_val_dsc: None,
            noise_rng: stream_rng(config.seed, Stream::Noise),
        })
    }

    /// Whether steps draw an unlabelled batch.
    pub fn uses_unlabelled(&self) -> bool {
        self.mode != BaselineMode::SupervisedOnly
    }

    /// The student the teacher tracks.
    fn teacher_student(&self) -> &Segmenter {
        match self.mode {
            BaselineMode::Pccl => self.model2.as_ref().expect("pccl has two students"),
            _ => &self.model1,
        }
    }

    fn check_batches(&self, labelled: &[Sample], unlabelled: &[Sample]) -> Result<()> {
        if labelled.len() != self.config.labelled_batch {
            return Err(Error::Usage(format!(
                "labelled batch has {} images, configured {}",
                labelled.len(),
                self.config.labelled_batch
            )));
        }
        let expected = if self.uses_unlabelled() { self.config.unlabelled_batch } else { 0 };
        if unlabelled.len() != expected {
            return Err(Error::Usage(format!("unlabelled batch has {} images, expected {expected}", unlabelled.len())));
        }
        if labelled.iter().any(|s| s.mask.is_none()) {
            return Err(Error::Usage("labelled batch contains an image without a mask".into()));
        }
        Ok(())
    }

    /// Forward passes, losses and back-propagation of one step. Parameters
    /// are not modified, but normalisation running statistics advance.
    pub fn compute_gradients(&mut self, labelled: &[Sample], unlabelled: &[Sample]) -> Result<StepGradients> {
        self.check_batches(labelled, unlabelled)?;
        let device = self.model1.device().clone();
        let cfg = self.config.clone();
        let t = self.toggles;
        let bl = labelled.len();
        let bu = unlabelled.len();
        let all: Vec<&Sample> = labelled.iter().chain(unlabelled).collect();
        let x = images_tensor(&all, &device)?;
        let y = stack_masks(&all[..bl])?;
        let mut c = LossComponents::default();

        let z1 = self.model1.forward(&x, true)?;
        let p1 = probs_of(&z1)?;
        let mut g1 = vec![0.0; p1.shape().len()];
        let (sup1, gs1) = losses::supervised_loss_grad(&p1.slice_batch(0, bl)?, &y)?;
        c.sup1 = sup1;
        add_rows(&mut g1, &gs1, 0, 1.0);

        let mut two = None;
        if let Some(m2) = &self.model2 {
            let z2 = m2.forward(&x, true)?;
            let p2 = probs_of(&z2)?;
            let mut g2 = vec![0.0; p2.shape().len()];
            let (sup2, gs2) = losses::supervised_loss_grad(&p2.slice_batch(0, bl)?, &y)?;
            c.sup2 = sup2;
            add_rows(&mut g2, &gs2, 0, 1.0);
            let row = p1.shape().plane() * p1.shape().classes;
            if t.semi {
                let cs = losses::cross_supervision_grads(&p1.slice_batch(bl, bu)?, &p2.slice_batch(bl, bu)?)?;
                c.semi1 = cs.semi1;
                c.semi2 = cs.semi2;
                add_rows(&mut g1, &cs.grad1, bl * row, cfg.loss_weights.lambda);
                add_rows(&mut g2, &cs.grad2, bl * row, cfg.loss_weights.lambda);
            }
            if t.mac {
                let (mac, m1, m2g) = losses::mac_grad(&p1, &p2)?;
                c.mac = mac;
                add_rows(&mut g1, &m1, 0, cfg.loss_weights.beta);
                add_rows(&mut g2, &m2g, 0, cfg.loss_weights.beta);
            }
            two = Some((z2, p2, g2));
        }

        let mut extra = None;
        if t.con {
            let noisy = if self.mode == BaselineMode::Mt { Some(self.noisy(&x.narrow(0, bl, bu)?)?) } else { None };
            let teacher = self.teacher.as_ref().expect("consistency needs a teacher");
            let tau = cfg.loss_weights.tau;
            let sigma = cfg.mix_ratio;
            if let Some(noisy) = noisy {
                let pt = probs_of(&teacher.forward(&noisy, false)?.detach())?;
                let (con, gc) = losses::interpolation_consistency_grad(&p1.slice_batch(bl, bu)?, &pt, &pt, sigma)?;
                c.con = con;
                let row = p1.shape().plane() * p1.shape().classes;
                add_rows(&mut g1, &gc, bl * row, tau);
            } else {
                let half = bu / 2;
                let xu = x.narrow(0, bl, bu)?;
                let (xi, xj) = (xu.narrow(0, 0, half)?, xu.narrow(0, half, half)?);
                let pti = probs_of(&teacher.forward(&xi, false)?.detach())?;
                let ptj = probs_of(&teacher.forward(&xj, false)?.detach())?;
                let mixed = ((&xi * sigma)? + (&xj * (1.0 - sigma))?)?;
                let student = match self.mode {
                    BaselineMode::Pccl => self.model2.as_ref().expect("pccl has two students"),
                    _ => &self.model1,
                };
                let zm = student.forward(&mixed, true)?;
                let pm = probs_of(&zm)?;
                let (con, gc) = losses::interpolation_consistency_grad(&pm, &pti, &ptj, sigma)?;
                c.con = con;
                let gm: Vec<f64> = gc.iter().map(|v| tau * v).collect();
                extra = Some((zm, pm, gm));
            }
        }

        let bundle = losses::total_loss(&c, &cfg.loss_weights, &t);
        let mut objective = surrogate(&z1, &p1, &g1, &device)?;
        if let Some((z2, p2, g2)) = &two {
            objective = (objective + surrogate(z2, p2, g2, &device)?)?;
        }
        if let Some((zm, pm, gm)) = &extra {
            objective = (objective + surrogate(zm, pm, gm, &device)?)?;
        }
        let grads = objective.backward()?;
        Ok(StepGradients { bundle, grads })
    }

    fn noisy(&mut self, x: &Tensor) -> Result<Tensor> {
        let normal = Normal::new(0.0, MT_NOISE_STD).expect("finite std");
        let noise: Vec<f32> = (0..x.elem_count())
            .map(|_| (normal.sample(&mut self.noise_rng) as f32).clamp(-MT_NOISE_CLIP, MT_NOISE_CLIP))
            .collect();
        Ok((x + Tensor::from_vec(noise, x.shape(), x.device())?)?)
    }

    /// One optimizer step per student, then one teacher update.
    pub fn apply_gradients(&mut self, grads: &GradStore) -> Result<()> {
        self.opt1.step(grads)?;
        if let Some(opt2) = &mut self.opt2 {
            opt2.step(grads)?;
        }
        if let Some(teacher) = &self.teacher {
            teacher.ema_from(self.teacher_student(), ema::decay_at(self.global_step, self.config.ema_decay))?;
        }
        self.global_step += 1;
        Ok(())
    }

    /// A full training step on already augmented batches.
    pub fn train_step(&mut self, labelled: &[Sample], unlabelled: &[Sample]) -> Result<LossBundle> {
        let step = self.compute_gradients(labelled, unlabelled)?;
        self.apply_gradients(&step.grads)?;
        Ok(step.bundle)
    }

    fn step_record(&self, b: &LossBundle) -> StepRecord {
        let t = self.toggles;
        let two = self.model2.is_some();
        StepRecord {
            step: self.global_step,
            epoch: self.epoch,
            sup1: b.sup1,
            sup2: two.then_some(b.sup2),
            semi1: t.semi.then_some(b.semi1),
            semi2: t.semi.then_some(b.semi2),
            con: t.con.then_some(b.con),
            mac: t.mac.then_some(b.mac),
            total: b.total,
            lr: self.opt1.learning_rate(),
        }
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub history: Vec<Record>,
    pub best_val_dsc: Option<f64>,
    /// Test metrics of the best `model1`, when there is a test set.
    pub test: Option<MetricReport>,
    /// The best `model1`.
    pub model: Segmenter,
    pub checkpoint: Option<PathBuf>,
}

/// Cycles through the unlabelled pool in freshly shuffled passes.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        Self { order: (0..len).collect(), pos: len, rng }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Trains `mode` on prepared data. With `out_dir`, writes the best-model
/// checkpoint, the history and the test report there.
pub fn train_prepared(
    config: &TrainConfig,
    mode: BaselineMode,
    data: &Prepared,
    out_dir: Option<&Path>,
    device: &Device,
) -> Result<TrainOutcome> {
    let mut state = TrainState::new(config, mode, device)?;
    if data.labelled.len() < config.labelled_batch {
        return Err(Error::Dataset(format!(
            "{} labelled images cannot fill a batch of {}",
            data.labelled.len(),
            config.labelled_batch
        )));
    }
    if state.uses_unlabelled() && data.unlabelled.is_empty() {
        return Err(Error::Dataset(format!("mode {mode} needs unlabelled images but the split left none")));
    }
    let mut writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
            Some(HistoryWriter::create(&dir.join(HISTORY_FILE))?)
        }
        None => None,
    };
    let ckpt_path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let mut history = Vec::new();
    let mut record = |r: Record, history: &mut Vec<Record>| -> Result<()> {
        if let Some(w) = writer.as_mut() {
            w.write(&r)?;
        }
        history.push(r);
        Ok(())
    };
    let best = state.model1.duplicate()?;
    let mut labelled_rng = stream_rng(config.seed, Stream::Labelled);
    let mut augment_rng = stream_rng(config.seed, Stream::Augment);
    let mut pool = Cycler::new(data.unlabelled.len(), stream_rng(config.seed, Stream::Unlabelled));
    let mut order: Vec<usize> = (0..data.labelled.len()).collect();
    for epoch in 0..config.epochs {
        state.epoch = epoch;
        order.shuffle(&mut labelled_rng);
        let mut totals = 0.0;
        let mut steps = 0u64;
        for chunk in order.chunks_exact(config.labelled_batch) {
            let labelled: Vec<Sample> =
                chunk.iter().map(|&i| data::augment(&data.labelled[i], &config.augment, &mut augment_rng)).collect();
            let unlabelled: Vec<Sample> = if state.uses_unlabelled() {
                (0..config.unlabelled_batch).map(|_| data.unlabelled[pool.next()].clone()).collect()
            } else {
                Vec::new()
            };
            let bundle = state.train_step(&labelled, &unlabelled)?;
            if !bundle.total.is_finite() {
                return Err(Error::Dataset(format!("loss diverged at step {}", state.global_step)));
            }
            totals += bundle.total;
            steps += 1;
            record(Record::Step(state.step_record(&bundle)), &mut history)?;
        }
        let mut rec = EpochRecord {
            epoch,
            steps,
            mean_total: totals / steps.max(1) as f64,
            val_dsc: None,
            val_hd95: None,
            val_asd: None,
            best_val_dsc: None,
        };
        let improved = if data.val.is_empty() {
            true
        } else {
            let report = eval::evaluate(&state.model1, &data.val)?;
            rec.val_dsc = Some(report.dsc);
            rec.val_hd95 = Some(report.hd95);
            rec.val_asd = Some(report.asd);
            let better = state.best_val_dsc.is_none_or(|b| report.dsc > b);
            if better {
                state.best_val_dsc = Some(report.dsc);
            }
            rec.best_val_dsc = state.best_val_dsc;
            better
        };
        if improved {
            best.copy_from(&state.model1)?;
            if let Some(path) = &ckpt_path {
                checkpoint::save(&best, Some(config), &[("mode", mode.to_string()), ("toggles", state.toggles.label())], path)?;
            }
        }
        record(Record::Epoch(rec), &mut history)?;
    }
    let test = if data.test.is_empty() { None } else { Some(eval::evaluate(&best, &data.test)?) };
    if let (Some(dir), Some(report)) = (out_dir, &test) {
        eval::write_report_csv(report, &dir.join(TEST_REPORT_FILE))?;
    }
    Ok(TrainOutcome { history, best_val_dsc: state.best_val_dsc, test, model: best, checkpoint: ckpt_path })
}

/// Loads `root`, then trains. Dataset and configuration problems surface
/// before the first step.
pub fn train(config: &TrainConfig, root: &Path, mode: BaselineMode, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let data = crate::dataset::prepare(root, config)?;
    train_prepared(config, mode, &data, Some(out_dir), &Device::Cpu)
}

pub fn run_baseline(mode: BaselineMode, config: &TrainConfig, root: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    train(config, root, mode, out_dir)
}

/// The four loss configurations of the ablation, in table order.
pub const ABLATION_ROWS: [LossToggles; 4] = [
    LossToggles { semi: true, con: false, mac: false },
    LossToggles { semi: true, con: true, mac: false },
    LossToggles { semi: true, con: false, mac: true },
    LossToggles { semi: true, con: true, mac: true },
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub toggles: LossToggles,
    pub report: MetricReport,
}

/// Fully trains every ablation row on prepared data and evaluates each
/// best model on the test set.
pub fn ablate_prepared(
    config: &TrainConfig,
    data: &Prepared,
    out_dir: Option<&Path>,
    device: &Device,
) -> Result<Vec<AblationRow>> {
    if data.test.is_empty() {
        return Err(Error::Dataset("ablation needs a test split".into()));
    }
    ABLATION_ROWS
        .iter()
        .map(|&toggles| {
            let cfg = TrainConfig { ablation: toggles, ..config.clone() };
            let dir = out_dir.map(|d| d.join(format!("ablation_{}", toggles.label())));
            let outcome = train_prepared(&cfg, BaselineMode::Pccl, data, dir.as_deref(), device)?;
            Ok(AblationRow { toggles, report: outcome.test.expect("test split is non-empty") })
        })
        .collect()
}

pub fn ablate(config: &TrainConfig, root: &Path, out_dir: &Path) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let data = crate::dataset::prepare(root, config)?;
    let rows = ablate_prepared(config, &data, Some(out_dir), &Device::Cpu)?;
    write_ablation_csv(&rows, &out_dir.join("ablation.csv"))?;
    Ok(rows)
}

/// `rows,semi,con,mac,dsc,hd95,asd`, one line per configuration.
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Dataset(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["losses", "semi", "con", "mac", "dsc", "hd95", "asd"]).map_err(csv_err)?;
    for r in rows {
        let t = r.toggles;
        w.write_record([
            t.label(),
            t.semi.to_string(),
            t.con.to_string(),
            t.mac.to_string(),
            format!("{:.4}", r.report.dsc),
            format!("{:.4}", r.report.hd95),
            format!("{:.4}", r.report.asd),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(Error::io(path))
}
