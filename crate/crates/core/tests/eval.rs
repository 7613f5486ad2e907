use kiop::data::Split;
use kiop::eval::{accuracy, gradcam, resource_report};
use kiop::geometry::{PromptInit, RingPartition, VisualPrompt};
use kiop::models::{zoo, Conv, Dense, FrozenModel, GlobalPool, Layer, Network, Stage};
use kiop::KiopError;
use kiop_tape::Tensor;

fn constant_features() -> FrozenModel {
    let conv = Conv { weight: Tensor::zeros([2, 3, 3, 3]), bias: Some(Tensor::full([2], 1.0)), stride: 1, pad: 1 };
    let net = Network {
        arch: "constant".into(),
        input_channels: 3,
        stages: vec![Stage { name: "block1".into(), layers: vec![Layer::Conv(conv), Layer::Relu] }],
        pool: GlobalPool::Avg,
        head: Dense { weight: Tensor::new([2, 2], vec![1.0, 0.5, -1.0, 0.2]).unwrap(), bias: Tensor::zeros([2]) },
    };
    FrozenModel::register("c", net, 8)
}

#[test]
fn constant_activations_give_a_constant_map() {
    let model = constant_features();
    let prompt = VisualPrompt::init(RingPartition::new(&[8, 12], 3).unwrap(), PromptInit::Uniform { lo: -1.0, hi: 1.0 }, 1);
    let x = Tensor::from_fn([2, 3, 8, 8], |i| (i % 5) as f32);
    let cam = gradcam(&x, &model, &prompt, 1, Some("block1"), Some(0)).unwrap();
    assert_eq!(cam.heatmaps.shape(), &[2, 12, 12]);
    let first = cam.heatmaps.data()[0];
    assert!(cam.heatmaps.data().iter().all(|&v| v == first));
    assert_eq!(cam.composite, prompt.compose_tensor(&x, 1).unwrap());
}

#[test]
fn maps_are_normalized_and_saved() {
    let model = FrozenModel::register("a", zoo::toy_cnn(10, [4, 8], 3), 32);
    let prompt = VisualPrompt::init(RingPartition::default_two_model(), PromptInit::Uniform { lo: -1.0, hi: 1.0 }, 2);
    let x = Tensor::from_fn([2, 3, 32, 32], |i| ((i * 13) % 17) as f32 / 8.0 - 1.0);
    for depth in [1, 2] {
        let cam = gradcam(&x, &model, &prompt, depth, None, None).unwrap();
        let side = prompt.partition().sides()[depth];
        assert_eq!(cam.heatmaps.shape(), &[2, side, side]);
        assert!(cam.heatmaps.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(cam.layer, "block2");
    }
    let cam = gradcam(&x, &model, &prompt, 1, Some("block1"), Some(4)).unwrap();
    assert_eq!(cam.classes, vec![4, 4]);
    let dir = tempfile::tempdir().unwrap();
    let files = cam.save(dir.path()).unwrap();
    assert_eq!(files.len(), 4);
    let img = image::open(dir.path().join("heatmap_1.png")).unwrap().to_luma8();
    assert_eq!((img.width(), img.height()), (36, 36));
    assert!(matches!(gradcam(&x, &model, &prompt, 1, Some("head"), None), Err(KiopError::UnknownLayer(_))));
}

#[test]
fn accuracy_bounds() {
    let split = Split { images: Tensor::zeros([7, 3, 2, 2]), labels: vec![0, 1, 2, 0, 1, 2, 0] };
    let zeros = |x: &Tensor| Ok(Tensor::from_fn([x.shape()[0], 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 }));
    let acc = accuracy(&split, 3, zeros).unwrap();
    assert!((acc - 3.0 / 7.0).abs() < 1e-12);
    assert_eq!(accuracy(&split, 2, zeros).unwrap(), acc);
}

#[test]
fn report_counts() {
    let prompt = VisualPrompt::init(RingPartition::default_two_model(), PromptInit::Zeros, 0);
    let models = [
        FrozenModel::register("r18", zoo::resnet18(10, 0), 32),
        FrozenModel::register("toy", zoo::toy_cnn(10, zoo::TOY_WIDTHS, 0), 32),
    ];
    let r = resource_report(&prompt, &models.iter().collect::<Vec<_>>());
    assert_eq!(r.trainable_params, prompt.param_count());
    assert_eq!(r.trainable_params, 46_080);
    assert_eq!(r.prompt_bytes, prompt.to_bytes().len());
    assert!(r.models[0].params > 11_000_000);
    assert!(r.models[0].bytes >= 4 * r.models[0].params, "weights plus running statistics");
    let text = r.to_string();
    assert!(text.contains("46080 trainable parameters") && text.contains("r18 (resnet18)"));
}
