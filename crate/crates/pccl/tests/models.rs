use candle_core::{DType, Device, Tensor};
use pccl::models::Segmenter;
use pccl::nn::count_macs;
use pccl_core::arch::{profile, Scale, SegmenterSpec};

fn desk_specs(size: usize) -> [SegmenterSpec; 2] {
    [SegmenterSpec::lightweight(Scale::Desk, size, 2), SegmenterSpec::transformer(Scale::Desk, size, 2)]
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap()
}

#[test]
fn built_parameter_counts_match_profiles() {
    for scale in [Scale::Paper, Scale::Desk] {
        let size = if scale == Scale::Paper { 224 } else { 64 };
        for spec in [SegmenterSpec::lightweight(scale, size, 2), SegmenterSpec::transformer(scale, size, 2)] {
            let model = Segmenter::build(&spec, 0, &Device::Cpu).unwrap();
            assert_eq!(model.count_parameters(), profile(&spec).params, "{:?} {:?}", spec.kind, scale);
        }
    }
}

#[test]
fn paper_scale_counts_near_published() {
    let light = Segmenter::build(&SegmenterSpec::lightweight(Scale::Paper, 448, 2), 0, &Device::Cpu).unwrap();
    let trans = Segmenter::build(&SegmenterSpec::transformer(Scale::Paper, 448, 2), 0, &Device::Cpu).unwrap();
    let rel = |got: u64, want: f64| (got as f64 - want).abs() / want;
    assert!(rel(light.count_parameters(), 1.47e6) <= 0.02, "{}", light.count_parameters());
    assert!(rel(trans.count_parameters(), 27.15e6) <= 0.03, "{}", trans.count_parameters());
    assert!(rel(light.count_flops(448), 7.03e9) <= 0.10, "{}", light.count_flops(448));
    assert!(rel(trans.count_flops(448), 71.17e9) <= 0.10, "{}", trans.count_flops(448));
}

#[test]
fn counted_macs_match_profile() {
    for size in [32, 64] {
        for spec in desk_specs(size) {
            let model = Segmenter::build(&spec, 3, &Device::Cpu).unwrap();
            let x = Tensor::zeros((1, 3, size, size), DType::F32, &Device::Cpu).unwrap();
            let (_, macs) = count_macs(|| model.forward(&x, false).unwrap());
            assert_eq!(macs, profile(&spec).macs, "{:?} at {size}", spec.kind);
        }
    }
}

#[test]
fn forward_shapes_and_finiteness() {
    for spec in desk_specs(64) {
        let model = Segmenter::build(&spec, 1, &Device::Cpu).unwrap();
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        for train in [false, true] {
            let y = model.forward(&x, train).unwrap();
            assert_eq!(y.dims(), &[2, 2, 64, 64]);
            let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|x| x.is_finite()));
        }
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let model = Segmenter::build(&desk_specs(64)[0], 1, &Device::Cpu).unwrap();
    let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
    let err = model.forward(&x, false).unwrap_err().to_string();
    assert!(err.contains("64"), "{err}");
}

#[test]
fn construction_rejects_untileable_size() {
    let spec = SegmenterSpec::transformer(Scale::Desk, 48, 2);
    assert!(Segmenter::build(&spec, 0, &Device::Cpu).is_err());
}

#[test]
fn eval_forward_is_deterministic_and_seeded() {
    for spec in desk_specs(64) {
        let a = Segmenter::build(&spec, 5, &Device::Cpu).unwrap();
        let b = Segmenter::build(&spec, 5, &Device::Cpu).unwrap();
        let c = Segmenter::build(&spec, 6, &Device::Cpu).unwrap();
        assert_eq!(a.flat_params().unwrap(), b.flat_params().unwrap());
        assert_ne!(a.flat_params().unwrap(), c.flat_params().unwrap());
        let x = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let y1 = a.forward(&x, false).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let y2 = a.forward(&x, false).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y1, y2);
    }
}

#[test]
fn batched_eval_equals_single_samples() {
    for spec in desk_specs(64) {
        let model = Segmenter::build(&spec, 2, &Device::Cpu).unwrap();
        let x = Tensor::rand(0f32, 1.0, (4, 3, 64, 64), &Device::Cpu).unwrap();
        let batched = model.forward(&x, false).unwrap();
        for i in 0..4 {
            let single = model.forward(&x.narrow(0, i, 1).unwrap(), false).unwrap();
            let diff = max_abs_diff(&batched.narrow(0, i, 1).unwrap(), &single);
            assert!(diff < 1e-4, "{:?} sample {i}: {diff}", spec.kind);
        }
    }
}

#[test]
fn copied_parameters_reach_the_forward_pass() {
    for spec in desk_specs(32) {
        let a = Segmenter::build(&spec, 1, &Device::Cpu).unwrap();
        let b = Segmenter::build(&spec, 2, &Device::Cpu).unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let want = b.forward(&x, false).unwrap();
        a.copy_from(&b).unwrap();
        assert_eq!(max_abs_diff(&a.forward(&x, false).unwrap(), &want), 0.0);
    }
}
