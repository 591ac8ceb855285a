use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spine_neural::checkpoint::{self, MAGIC};
use spine_neural::params::uniform;
use spine_neural::{DType, ParamStore, Tape, Tensor};

fn store(seed: u64, shapes: &[Vec<usize>]) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (i, sh) in shapes.iter().enumerate() {
        s.insert(format!("layer{i}.weight"), uniform(sh, 3.0, &mut rng), i % 2 == 0);
    }
    s
}

#[test]
fn header_layout_is_byte_exact() {
    let mut s = ParamStore::new();
    s.insert("a", Tensor::from_f64(vec![2], &[1.0, -2.0]).unwrap(), true);
    let bytes = checkpoint::to_bytes(&s, DType::F64, &BTreeMap::new()).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let index: serde_json::Value = serde_json::from_slice(&bytes[16..16 + n]).unwrap();
    assert_eq!(index["tensors"]["a"]["offset"], 0);
    assert_eq!(index["tensors"]["a"]["dtype"], "f64");
    assert_eq!(&bytes[16 + n..16 + n + 8], &1.0f64.to_le_bytes());
    assert_eq!(bytes.len(), 16 + n + 16);
}

#[test]
fn file_round_trip_and_load_into() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let src = store(1, &[vec![3, 4], vec![5], vec![2, 2, 2]]);
    let meta = BTreeMap::from([("epoch".to_string(), "7".to_string())]);
    checkpoint::save(&src, &path, DType::F64, &meta).unwrap();

    let mut dst = store(2, &[vec![3, 4], vec![5], vec![2, 2, 2]]);
    assert_ne!(dst.hash(), src.hash());
    let index = checkpoint::load_into(&mut dst, &path).unwrap();
    assert_eq!(dst.hash(), src.hash());
    assert_eq!(index.metadata["epoch"], "7");
    assert!(index.tensors["layer0.weight"].trainable);
    assert!(!index.tensors["layer1.weight"].trainable);

    let mut wrong = store(3, &[vec![3, 4], vec![6], vec![2, 2, 2]]);
    assert!(checkpoint::load_into(&mut wrong, &path).is_err());
    assert!(checkpoint::from_bytes(b"NOTACKPT00000000").is_err());
}

#[test]
fn f32_checkpoint_rounds_to_single_precision() {
    let src = store(4, &[vec![10]]);
    let bytes = checkpoint::to_bytes(&src, DType::F32, &BTreeMap::new()).unwrap();
    let (_, t) = checkpoint::from_bytes(&bytes).unwrap();
    for (a, b) in src.value("layer0.weight").unwrap().data().iter().zip(t["layer0.weight"].data()) {
        assert_eq!(*a as f32 as f64, *b);
    }
}

proptest! {
    #[test]
    fn f64_round_trip_is_bit_exact(seed in 0u64..1000, dims in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..5)) {
        let src = store(seed, &dims);
        let bytes = checkpoint::to_bytes(&src, DType::F64, &BTreeMap::new()).unwrap();
        let (_, tensors) = checkpoint::from_bytes(&bytes).unwrap();
        for (name, p) in src.iter() {
            prop_assert_eq!(&tensors[name], &p.value);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::<f64>::new();
        let x = t.constant(uniform(&[2, 3, 4], 1.0, &mut rng));
        let y = t.permute(x, &[1, 2, 0]).unwrap();
        let z = t.permute(y, &[2, 0, 1]).unwrap();
        prop_assert_eq!(t.value(z), t.value(x));
    }

    #[test]
    fn broadcast_add_gradient_sums_over_broadcast_axes(seed in 0u64..1000, rows in 1usize..6, cols in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::<f64>::new();
        let a = t.leaf(uniform(&[rows, cols], 1.0, &mut rng), true);
        let b = t.leaf(uniform(&[cols], 1.0, &mut rng), true);
        let c = t.add(a, b).unwrap();
        let s = t.sum(c);
        t.backward_scalar(s).unwrap();
        prop_assert!(t.grad(b).unwrap().data().iter().all(|&g| g == rows as f64));
        prop_assert!(t.grad(a).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn sigmoid_and_softmax_ranges(seed in 0u64..1000, scale in 0.1f64..200.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::<f64>::new();
        let x = t.constant(uniform(&[3, 7], scale, &mut rng));
        let s = t.sigmoid(x);
        let m = t.softmax(x);
        prop_assert!(t.value(s).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let m = t.value(m);
        for r in 0..3 {
            let row: f64 = m.data()[r * 7..(r + 1) * 7].iter().sum();
            prop_assert!((row - 1.0).abs() < 1e-12);
        }
    }
}
