use kiop::geometry::{PromptInit, RingPartition, VisualPrompt};
use kiop::KiopError;
use kiop_tape::{Graph, Tensor};
use proptest::prelude::*;

/// Hole side plus even ring widths, so every ring sits centered.
fn partition_strategy() -> impl Strategy<Value = (Vec<usize>, usize)> {
    (1usize..12, prop::collection::vec(1usize..6, 1..4), 1usize..4).prop_map(|(hole, widths, channels)| {
        let mut sides = vec![hole];
        for w in widths {
            let last = *sides.last().unwrap();
            sides.push(last + 2 * w);
        }
        (sides, channels)
    })
}

fn ramp(shape: [usize; 4], offset: f32) -> Tensor {
    Tensor::from_fn(shape, |i| ((i * 37 + 11) % 101) as f32 / 50.0 - 1.0 + offset)
}

fn crop_center(x: &Tensor, side: usize) -> Tensor {
    let s = x.shape().to_vec();
    let off = (s[2] - side) / 2;
    Tensor::from_fn([s[0], s[1], side, side], |i| {
        let (b, rest) = (i / (s[1] * side * side), i % (s[1] * side * side));
        let (c, rest) = (rest / (side * side), rest % (side * side));
        let (y, xx) = (rest / side, rest % side);
        x.data()[((b * s[1] + c) * s[2] + y + off) * s[3] + xx + off]
    })
}

#[test]
fn paper_partitions_and_counts() {
    let two = RingPartition::new(&[32, 36, 128], 3).unwrap();
    assert_eq!(two.rings(), 2);
    assert_eq!(3 * two.ring_pixels(1), 3 * (36 * 36 - 32 * 32));
    assert_eq!(two.param_count(), 816 + 45_264);
    assert_eq!(RingPartition::new(&[32, 36, 128, 224], 3).unwrap().rings(), 3);
    assert_eq!(RingPartition::new(&[32, 128], 3).unwrap().param_count(), 46_080);
    assert!(matches!(RingPartition::new(&[32, 32, 128], 3), Err(KiopError::InvalidPartition(_))));
}

#[test]
fn zero_init_and_determinism() {
    let p = RingPartition::default_two_model();
    let zero = VisualPrompt::init(p.clone(), PromptInit::Zeros, 9);
    for r in 1..=2 {
        assert!(zero.live_params(r).iter().all(|&v| v == 0.0));
    }
    let a = VisualPrompt::init(p.clone(), PromptInit::Uniform { lo: -0.1, hi: 0.1 }, 7);
    let b = VisualPrompt::init(p, PromptInit::Uniform { lo: -0.1, hi: 0.1 }, 7);
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(a.param_count(), 46_080);
    assert!(a.live_params(2).iter().all(|v| (-0.1..0.1).contains(v)));
}

#[test]
fn checkpoint_is_bit_exact() {
    let prompt = VisualPrompt::init(RingPartition::new(&[32, 36, 128, 224], 3).unwrap(), PromptInit::Uniform { lo: -3.0, hi: 3.0 }, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.kiop");
    prompt.save(&path).unwrap();
    let back = VisualPrompt::load(&path).unwrap();
    assert_eq!(back, prompt);
    assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes());
}

#[test]
fn checkpoint_layout_by_hand() {
    // hole 1, one ring of side 3, one channel: eight live values
    let mut prompt = VisualPrompt::init(RingPartition::new(&[1, 3], 1).unwrap(), PromptInit::Zeros, 0);
    for (i, v) in prompt.rings_mut()[0].data_mut().iter_mut().enumerate() {
        *v = i as f32;
    }
    let bytes = prompt.to_bytes();
    assert_eq!(&bytes[..5], b"KIOP1");
    let ints: Vec<u32> = bytes[5..21].chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(ints, [1, 1, 1, 3]);
    let vals: Vec<f32> = bytes[21..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    // top band, bottom band, left band, right band
    assert_eq!(vals, [0.0, 1.0, 2.0, 6.0, 7.0, 8.0, 3.0, 5.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn masks_tile_the_canvas((sides, channels) in partition_strategy()) {
        let p = RingPartition::new(&sides, channels).unwrap();
        let outer = *sides.last().unwrap();
        let mut cover = vec![0u32; outer * outer];
        let hole_off = (outer - sides[0]) / 2;
        for y in 0..sides[0] {
            for x in 0..sides[0] {
                cover[(y + hole_off) * outer + x + hole_off] += 1;
            }
        }
        let mut total = sides[0] * sides[0];
        for ring in 1..=p.rings() {
            let side = sides[ring];
            let off = (outer - side) / 2;
            let mask = p.ring_mask(ring);
            for y in 0..side {
                for x in 0..side {
                    if mask.data()[y * side + x] == 1.0 {
                        cover[(y + off) * outer + x + off] += 1;
                    }
                }
            }
            total += p.ring_pixels(ring);
            prop_assert_eq!(p.ring_pixels(ring), side * side - sides[ring - 1] * sides[ring - 1]);
        }
        prop_assert_eq!(total, outer * outer);
        prop_assert!(cover.iter().all(|&c| c == 1));
    }

    #[test]
    fn interior_and_nesting((sides, channels) in partition_strategy(), seed in 0u64..1000) {
        let p = RingPartition::new(&sides, channels).unwrap();
        let prompt = VisualPrompt::init(p.clone(), PromptInit::Uniform { lo: -1.0, hi: 1.0 }, seed);
        let x = ramp([2, channels, sides[0], sides[0]], seed as f32 * 1e-3);
        for d in 1..=p.rings() {
            let out = prompt.compose_tensor(&x, d).unwrap();
            prop_assert_eq!(out.shape(), &[2, channels, sides[d], sides[d]]);
            prop_assert_eq!(&crop_center(&out, sides[0]), &x);
            if d < p.rings() {
                let next = prompt.compose_tensor(&x, d + 1).unwrap();
                prop_assert_eq!(&crop_center(&next, sides[d]), &out);
            }
        }
    }

    #[test]
    fn round_trip_any_partition((sides, channels) in partition_strategy(), seed in 0u64..1000) {
        let prompt = VisualPrompt::init(RingPartition::new(&sides, channels).unwrap(), PromptInit::Uniform { lo: -5.0, hi: 5.0 }, seed);
        let back = VisualPrompt::from_bytes(&prompt.to_bytes()).unwrap();
        prop_assert_eq!(back, prompt);
    }
}

#[test]
fn gradient_support_follows_masks() {
    let p = RingPartition::new(&[4, 8, 12, 16], 2).unwrap();
    let prompt = VisualPrompt::init(p.clone(), PromptInit::Uniform { lo: -1.0, hi: 1.0 }, 1);
    let x = ramp([1, 2, 4, 4], 0.0);
    for depth in 1..=3 {
        let g = Graph::new();
        let bound = prompt.bind(&g, true);
        let xv = g.param(x.clone());
        let out = bound.compose(xv, depth).unwrap();
        let weights = g.constant(Tensor::from_fn(out.shape(), |i| 1.0 + (i % 7) as f32));
        let loss = out.mul(weights).unwrap().sum_all();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(xv).unwrap().data().iter().all(|&v| v != 0.0));
        for ring in 1..=3 {
            let grad = grads.get(bound.ring(ring));
            if ring > depth {
                assert!(grad.is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
                continue;
            }
            let grad = grad.unwrap();
            let mask = p.ring_mask(ring);
            let plane = mask.numel();
            for (i, &v) in grad.data().iter().enumerate() {
                assert_eq!(v != 0.0, mask.data()[i % plane] == 1.0, "ring {ring} depth {depth} index {i}");
            }
        }
    }
}
