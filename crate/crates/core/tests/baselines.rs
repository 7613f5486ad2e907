use kiop::baselines::{restore_head, vanilla_dfkd, HeadSnapshot, VanillaConfig};
use kiop::models::{digest, zoo, FrozenModel};
use kiop::synthesis::SynthesisConfig;
use kiop::KiopError;
use kiop_tape::Tensor;

fn synth() -> SynthesisConfig {
    SynthesisConfig { steps: 2, batch_size: 4, z_dim: 8, generator_width: 8, discriminator_hidden: 16, embedding_dim: 8, seed: 2, ..SynthesisConfig::default() }
}

#[test]
fn vanilla_moves_only_the_copy() {
    let a = FrozenModel::register("a", zoo::toy_cnn(6, [4, 8], 1), 16);
    let b = FrozenModel::register("b", zoo::toy_cnn(4, [4, 8], 2), 16);
    let cfg = VanillaConfig { iterations: 2, batch_size: 4, lr: 1e-2, seed: 1 };
    let original = a.net().clone();
    let mut digests = Vec::new();
    let out = vanilla_dfkd(a.net().clone(), &b, &cfg, &synth(), |m| {
        digests.push(m.student_digest.clone());
        Ok(())
    })
    .unwrap();
    a.assert_frozen().unwrap();
    assert_eq!(a.net(), &original);
    assert_ne!(digests[0], digest(&original));
    assert_ne!(digests[0], digests[1]);
    assert_eq!(out.snapshot, HeadSnapshot::capture(&original));
    assert_eq!(out.student.class_count(), 4);
    let x = Tensor::zeros([2, 3, 16, 16]);
    assert_eq!(out.student.logits(&x).unwrap().shape(), &[2, 4]);
    assert_eq!(out.metrics.len(), 2);
    assert_eq!(out.metrics[1].base.bank_sizes, vec![0, 8]);

    let mut restored = out.student.clone();
    restore_head(&mut restored, &out.snapshot).unwrap();
    assert_eq!(restored.head, original.head);
    assert_eq!(restored.class_count(), 6);
    for (s, o) in restored.stages.iter().zip(&original.stages) {
        assert_ne!(s, o, "stage {} should have drifted", s.name);
    }
    let twice = {
        let mut r = restored.clone();
        restore_head(&mut r, &out.snapshot).unwrap();
        r
    };
    assert_eq!(twice, restored);
}

#[test]
fn snapshot_shape_is_checked() {
    let mut net = zoo::toy_cnn(6, [4, 8], 1);
    let other = HeadSnapshot::capture(&zoo::toy_cnn(6, [4, 16], 1));
    assert!(matches!(restore_head(&mut net, &other), Err(KiopError::SnapshotMismatch(_))));
    let bad = VanillaConfig { iterations: 0, ..VanillaConfig::default() };
    let b = FrozenModel::register("b", zoo::toy_cnn(4, [4, 8], 2), 16);
    assert!(vanilla_dfkd(net, &b, &bad, &synth(), |_| Ok(())).err().unwrap().is_config());
}
