mod common;

use candle_core::{Device, Tensor, D};
use common::{phantoms, tiny_config, tiny_data, unlabelled};
use pccl::eval::{grad_tensor, images_tensor, logit_map, stack_masks};
use pccl::history::Record;
use pccl::trainer::{train_prepared, TrainState};
use pccl::Segmenter;
use pccl_core::data::Sample;
use pccl_core::{ema, losses, ops, BaselineMode};

fn steps(history: &[Record]) -> Vec<&pccl::history::StepRecord> {
    history
        .iter()
        .filter_map(|r| match r {
            Record::Step(s) => Some(s),
            _ => None,
        })
        .collect()
}

fn batch(seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    (phantoms(1, seed, "l"), unlabelled(phantoms(4, seed + 100, "u")))
}

fn param_vars(m: &Segmenter) -> Vec<candle_core::Var> {
    m.store().params().values().cloned().collect()
}

#[test]
fn supervised_only_records_only_the_supervised_loss() {
    let out = train_prepared(&tiny_config(1), BaselineMode::SupervisedOnly, &tiny_data(1), None, &Device::Cpu).unwrap();
    let s = steps(&out.history);
    assert!(!s.is_empty());
    for r in s {
        assert!(r.sup2.is_none() && r.semi1.is_none() && r.semi2.is_none() && r.con.is_none() && r.mac.is_none());
        assert_eq!(r.total, r.sup1);
    }
}

#[test]
fn supervised_only_needs_no_unlabelled_images() {
    let mut data = tiny_data(2);
    data.unlabelled.clear();
    assert!(train_prepared(&tiny_config(2), BaselineMode::SupervisedOnly, &data, None, &Device::Cpu).is_ok());
    assert!(train_prepared(&tiny_config(2), BaselineMode::Pccl, &data, None, &Device::Cpu).is_err());
}

#[test]
fn repeated_steps_reduce_the_loss_for_most_seeds() {
    let mut improved = 0;
    for seed in 0..5 {
        let cfg = tiny_config(seed);
        let mut state = TrainState::new(&cfg, BaselineMode::Pccl, &Device::Cpu).unwrap();
        let (l, u) = batch(seed);
        let first = state.train_step(&l, &u).unwrap().total;
        for _ in 0..6 {
            state.train_step(&l, &u).unwrap();
        }
        let last = state.compute_gradients(&l, &u).unwrap().bundle.total;
        if last < first {
            improved += 1;
        }
    }
    assert!(improved >= 3, "loss fell for {improved} of 5 seeds");
}

#[test]
fn teacher_follows_the_ema_of_its_student() {
    for mode in [BaselineMode::Pccl, BaselineMode::Mt, BaselineMode::Ict] {
        let cfg = tiny_config(3);
        let mut state = TrainState::new(&cfg, mode, &Device::Cpu).unwrap();
        let (l, u) = batch(3);
        for step in 0..3u64 {
            let before = state.teacher.as_ref().unwrap().flat_params().unwrap();
            state.train_step(&l, &u).unwrap();
            let student = match mode {
                BaselineMode::Pccl => state.model2.as_ref().unwrap(),
                _ => &state.model1,
            };
            let s = student.flat_params().unwrap();
            let after = state.teacher.as_ref().unwrap().flat_params().unwrap();
            let d = ema::decay_at(step, cfg.ema_decay);
            for ((b, s), a) in before.iter().flatten().zip(s.iter().flatten()).zip(after.iter().flatten()) {
                let want = d * *b as f64 + (1.0 - d) * *s as f64;
                assert!((*a as f64 - want).abs() <= 1e-6, "{mode} step {step}: {a} vs {want}");
            }
        }
        assert_eq!(state.global_step, 3);
    }
}

#[test]
fn teacher_parameters_receive_no_gradient() {
    for mode in [BaselineMode::Pccl, BaselineMode::Mt, BaselineMode::Ict] {
        let mut state = TrainState::new(&tiny_config(4), mode, &Device::Cpu).unwrap();
        let (l, u) = batch(4);
        let step = state.compute_gradients(&l, &u).unwrap();
        assert!(step.bundle.con > 0.0 || mode == BaselineMode::Pccl);
        for v in param_vars(state.teacher.as_ref().unwrap()) {
            assert!(step.grads.get(v.as_tensor()).is_none(), "{mode}: teacher has a gradient");
        }
        assert!(param_vars(&state.model1).iter().any(|v| step.grads.get(v.as_tensor()).is_some()));
    }
}

#[test]
fn pseudo_labels_do_not_pass_gradient_to_their_producer() {
    let dev = Device::Cpu;
    let state = TrainState::new(&tiny_config(5), BaselineMode::Pccl, &dev).unwrap();
    let (m1, m2) = (&state.model1, state.model2.as_ref().unwrap());
    let (_, u) = batch(5);
    let x = images_tensor(&u.iter().collect::<Vec<_>>(), &dev).unwrap();
    let (z1, z2) = (m1.forward(&x, true).unwrap(), m2.forward(&x, true).unwrap());
    let (p1, p2) = (ops::softmax(&logit_map(&z1).unwrap()), ops::softmax(&logit_map(&z2).unwrap()));
    let cs = losses::cross_supervision_grads(&p1, &p2).unwrap();
    // semi1 uses the labels of model2; only model1 may be moved by it
    let dz = ops::softmax_backward(&p1, &cs.grad1);
    let objective = (&z1 * grad_tensor(&dz, p1.shape(), &dev).unwrap()).unwrap().sum_all().unwrap();
    let grads = objective.backward().unwrap();
    assert!(param_vars(m2).iter().all(|v| grads.get(v.as_tensor()).is_none()));
    let moved = param_vars(m1).iter().filter(|v| grads.get(v.as_tensor()).is_some()).count();
    assert!(moved > 0);
}

#[test]
fn injected_gradient_matches_native_cross_entropy() {
    let dev = Device::Cpu;
    for spec in [SpecKind::Light, SpecKind::Transformer] {
        let state = TrainState::new(&tiny_config(6), BaselineMode::Pccl, &dev).unwrap();
        let model = match spec {
            SpecKind::Light => &state.model1,
            SpecKind::Transformer => state.model2.as_ref().unwrap(),
        };
        let samples = phantoms(2, 6, "s");
        let refs: Vec<&Sample> = samples.iter().collect();
        let x = images_tensor(&refs, &dev).unwrap();
        let y = stack_masks(&refs).unwrap();

        let z = model.forward(&x, false).unwrap();
        let p = ops::softmax(&logit_map(&z).unwrap());
        let (_, g) = losses::ce_loss_grad(&p, &y).unwrap();
        let dz = ops::softmax_backward(&p, &g);
        let injected = (&z * grad_tensor(&dz, p.shape(), &dev).unwrap()).unwrap().sum_all().unwrap().backward().unwrap();

        let z = model.forward(&x, false).unwrap();
        let m = z.max_keepdim(1).unwrap().detach();
        let lse = (z.broadcast_sub(&m).unwrap().exp().unwrap().sum_keepdim(1).unwrap().log().unwrap() + &m).unwrap();
        let logp = z.broadcast_sub(&lse).unwrap();
        let labels: Vec<f32> = y.as_slice().iter().map(|&v| v as f32).collect();
        let fg = Tensor::from_vec(labels, (2, 1, common::SIZE, common::SIZE), &dev).unwrap();
        let onehot = Tensor::cat(&[(1.0 - &fg).unwrap(), fg], 1).unwrap();
        let n = (2 * common::SIZE * common::SIZE) as f64;
        let ce = ((logp * onehot).unwrap().sum_all().unwrap() * (-1.0 / n)).unwrap();
        let native = ce.backward().unwrap();

        let mut worst = 0f32;
        for v in param_vars(model) {
            let a = injected.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = native.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let scale = b.iter().fold(0f32, |m, x| m.max(x.abs())).max(1e-6);
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max((x - y).abs() / scale);
            }
        }
        assert!(worst < 1e-3, "worst relative deviation {worst}");
    }
    let _ = D::Minus1;
}

enum SpecKind {
    Light,
    Transformer,
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data(7);
    let a = train_prepared(&tiny_config(7), BaselineMode::Pccl, &data, None, &Device::Cpu).unwrap();
    let b = train_prepared(&tiny_config(7), BaselineMode::Pccl, &data, None, &Device::Cpu).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.flat_params().unwrap(), b.model.flat_params().unwrap());
}

#[test]
fn cps_equals_pccl_without_consistency_and_agreement() {
    let data = tiny_data(8);
    let mut cfg = tiny_config(8);
    let cps = train_prepared(&cfg, BaselineMode::Cps, &data, None, &Device::Cpu).unwrap();
    cfg.loss_weights.tau = 0.0;
    cfg.loss_weights.beta = 0.0;
    let pccl = train_prepared(&cfg, BaselineMode::Pccl, &data, None, &Device::Cpu).unwrap();
    assert_eq!(cps.history, pccl.history);
    assert_eq!(cps.model.flat_params().unwrap(), pccl.model.flat_params().unwrap());
}

#[test]
fn disabled_loss_equals_zero_weight() {
    let data = tiny_data(9);
    let mut off = tiny_config(9);
    off.ablation.mac = false;
    let mut zero = tiny_config(9);
    zero.loss_weights.beta = 0.0;
    let a = train_prepared(&off, BaselineMode::Pccl, &data, None, &Device::Cpu).unwrap();
    let b = train_prepared(&zero, BaselineMode::Pccl, &data, None, &Device::Cpu).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.flat_params().unwrap(), b.model.flat_params().unwrap());
}

#[test]
fn mean_teacher_history_has_no_cross_or_agreement_terms() {
    let out = train_prepared(&tiny_config(10), BaselineMode::Mt, &tiny_data(10), None, &Device::Cpu).unwrap();
    for r in steps(&out.history) {
        assert!(r.sup2.is_none() && r.semi1.is_none() && r.semi2.is_none() && r.mac.is_none());
        assert!(r.con.is_some());
    }
}

#[test]
fn recorded_total_is_the_weighted_sum() {
    let cfg = tiny_config(11);
    for mode in BaselineMode::ALL {
        let out = train_prepared(&cfg, mode, &tiny_data(11), None, &Device::Cpu).unwrap();
        for r in steps(&out.history) {
            let sum = r.bundle().weighted_sum(&cfg.loss_weights);
            assert!((sum - r.total).abs() <= 1e-6, "{mode} step {}: {sum} vs {}", r.step, r.total);
        }
    }
}

#[test]
fn run_writes_checkpoint_history_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_prepared(&tiny_config(12), BaselineMode::Pccl, &tiny_data(12), Some(dir.path()), &Device::Cpu).unwrap();
    for f in [pccl::trainer::CHECKPOINT_FILE, pccl::trainer::HISTORY_FILE, pccl::trainer::TEST_REPORT_FILE] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    assert_eq!(pccl::history::read(&dir.path().join(pccl::trainer::HISTORY_FILE)).unwrap(), out.history);
    assert_eq!(out.test.unwrap().per_image.len(), 3);
}

#[test]
fn best_model_is_kept_not_the_last() {
    let mut cfg = tiny_config(13);
    cfg.epochs = 3;
    let out = train_prepared(&cfg, BaselineMode::SupervisedOnly, &tiny_data(13), None, &Device::Cpu).unwrap();
    let val: Vec<f64> = out
        .history
        .iter()
        .filter_map(|r| match r {
            Record::Epoch(e) => e.val_dsc,
            _ => None,
        })
        .collect();
    let best = val.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val_dsc, Some(best));
    let report = pccl::eval::evaluate(&out.model, &tiny_data(13).val).unwrap();
    assert!((report.dsc - best).abs() < 1e-9);
}

#[test]
fn wrong_batch_sizes_are_rejected() {
    let mut state = TrainState::new(&tiny_config(14), BaselineMode::Pccl, &Device::Cpu).unwrap();
    let (l, u) = batch(14);
    assert!(state.train_step(&l, &u[..2]).is_err());
    assert!(state.train_step(&phantoms(2, 1, "x"), &u).is_err());
    assert!(state.train_step(&unlabelled(l.clone()), &u).is_err());
}
