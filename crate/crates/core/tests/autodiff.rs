use dauhst::autodiff::{
    check_primitive, concat, decode_archive, encode_archive, grad_check, read_archive, write_archive,
    ParamStore, Primitive, PrimitiveKind, Tape, Tensor,
};
use dauhst::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let tape = Tape::new();
    let s = tape.constant(t(&[2], &[0.0, 0.0])).softmax(0).unwrap();
    assert_eq!(s.value().data(), [0.5, 0.5]);
}

#[test]
fn matmul_identity() {
    let tape = Tape::new();
    let a = Tensor::randn(&[3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let out = tape
        .constant(Tensor::identity(3))
        .matmul(tape.constant(a.clone()))
        .unwrap();
    assert_eq!(*out.value(), a);
}

#[test]
fn unit_conv_doubles() {
    let tape = Tape::new();
    let x = Tensor::randn(&[4, 5, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let k = Tensor::from_fn(&[1, 1, 3, 3], |i| if i / 3 == i % 3 { 2.0 } else { 0.0 });
    let y = tape
        .constant(x.clone())
        .conv2d(tape.constant(k), None, 1, 0)
        .unwrap();
    assert_eq!(*y.value(), x.map(|v| 2.0 * v));
}

#[test]
fn gelu_at_zero() {
    let tape = Tape::new();
    assert_eq!(
        tape.constant(Tensor::scalar(0.0)).gelu().unwrap().value().data(),
        [0.0]
    );
}

#[test]
fn square_gradient() {
    let tape = Tape::new();
    let x = tape.param("x", Tensor::scalar(3.0));
    let loss = x.mul(x).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.by_name()["x"].data(), [6.0]);
    assert_eq!(g.wrt(x).unwrap().data(), [6.0]);
}

#[test]
fn disconnected_parameter_gets_zero_gradient() {
    let tape = Tape::new();
    let p = tape.param("p", Tensor::ones(&[2, 2]));
    let x = tape.param("x", Tensor::scalar(1.5));
    let loss = x.scale(2.0).unwrap().sum().unwrap();
    let late = tape.param("late", Tensor::ones(&[3]));
    let g = tape.backward(loss).unwrap();
    assert_eq!(*g.wrt(p).unwrap(), Tensor::zeros(&[2, 2]));
    assert_eq!(g.by_name()["p"], Tensor::zeros(&[2, 2]));
    assert_eq!(g.by_name()["late"], Tensor::zeros(&[3]));
    assert!(g.wrt(late).is_none());
}

#[test]
fn shared_names_accumulate() {
    let tape = Tape::new();
    let a = tape.param("w", Tensor::scalar(2.0));
    let b = tape.param("w", Tensor::scalar(2.0));
    let loss = a.mul(b).unwrap().sum().unwrap();
    assert_eq!(tape.backward(loss).unwrap().by_name()["w"].data(), [4.0]);
}

#[test]
fn backward_errors() {
    let tape = Tape::new();
    let x = tape.param("x", Tensor::ones(&[2]));
    let y = x.scale(2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(s)) if s == [2]));
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(c), Err(Error::DetachedLoss)));
    let folded = c.scale(3.0).unwrap();
    assert!(matches!(tape.backward(folded), Err(Error::DetachedLoss)));
    assert_eq!(tape.entry_count(), 1);
}

#[test]
fn shape_errors_name_the_primitive() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::ones(&[2, 3]));
    let b = tape.constant(Tensor::ones(&[2, 2]));
    let err = a.matmul(b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains('3'), "{err}");
    let err = a.add(b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
    assert!(a.softmax(2).is_err());
    assert!(a.reshape(&[5]).is_err());
    assert!(a.permute(&[0, 0]).is_err());
}

#[test]
fn primitive_names_round_trip() {
    for k in PrimitiveKind::ALL {
        assert_eq!(k.name().parse::<PrimitiveKind>().unwrap(), k);
    }
    assert!(matches!(
        "dropout".parse::<PrimitiveKind>(),
        Err(Error::UnknownPrimitive(_))
    ));
    assert_eq!(
        Primitive::Narrow {
            axis: 0,
            start: 0,
            len: 1
        }
        .kind(),
        Some(PrimitiveKind::Split)
    );
}

#[test]
fn every_primitive_passes_gradient_check() {
    for kind in PrimitiveKind::ALL {
        for seed in 0..10 {
            let err = check_primitive(kind, seed, 1e-5).unwrap();
            assert!(err <= 1e-4, "{kind} seed {seed}: {err}");
        }
    }
}

#[test]
fn grad_check_examples() {
    let x = Tensor::randn(&[2, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let err = grad_check(
        |tape, v| {
            let g = tape.constant(Tensor::from_fn(&[4], |i| 0.5 + i as f64));
            let b = tape.constant(Tensor::from_fn(&[4], |i| i as f64 * 0.1));
            // weighted so the sum is not invariant to the input
            let w = tape.constant(Tensor::from_fn(&[2, 4], |i| (i as f64).sin()));
            v[0].layer_norm(g, b, 1e-6)?.mul(w)?.sum()
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");

    let tape = Tape::new();
    let c = tape.input(Tensor::full(&[5], 0.7));
    let loss = c.softmax(0).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(c).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    let err = grad_check(|_, v| v[0].softmax(0)?.sum(), &[Tensor::full(&[5], 0.7)], 1e-5).unwrap();
    assert!(err <= 1e-8, "{err}");

    let tape = Tape::new();
    let x = tape.input(Tensor::ones(&[2, 3]));
    let loss = x.reshape(&[6]).unwrap().sum().unwrap();
    assert_eq!(
        *tape.backward(loss).unwrap().wrt(x).unwrap(),
        Tensor::ones(&[2, 3])
    );
    let err = grad_check(
        |_, v| v[0].reshape(&[3, 2])?.sum(),
        &[Tensor::ones(&[2, 3])],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = tape.constant(Tensor::randn(&[6, 6, 3], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn(&[3, 3, 3, 4], 1.0, &mut rng));
        let y = x
            .conv2d(k, None, 1, 1)
            .unwrap()
            .gelu()
            .unwrap()
            .softmax(2)
            .unwrap();
        y.value().data().to_vec()
    };
    assert_eq!(run(), run());
}

fn random_store(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    s.insert("b/weight", Tensor::randn(&[2, 3], 1.0, &mut rng))
        .unwrap();
    s.insert("a/bias", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
    s.insert("c/ü", Tensor::randn(&[1, 2, 1, 2], 1.0, &mut rng))
        .unwrap();
    s.quantize_f32();
    s
}

#[test]
fn archive_layout_and_round_trip() {
    let store = random_store(5);
    let bytes = encode_archive(&store);
    assert_eq!(&bytes[..4], b"DTA1");
    // first record is the lexicographically smallest name
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 6);
    assert_eq!(&bytes[8..14], b"a/bias");
    assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[18..22].try_into().unwrap()), 4);
    let v0 = f32::from_le_bytes(bytes[22..26].try_into().unwrap());
    assert_eq!(v0 as f64, store.get("a/bias").unwrap().data()[0]);

    let back = decode_archive(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back, store);
    assert_eq!(encode_archive(&back), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dta");
    write_archive(&path, &store).unwrap();
    assert_eq!(read_archive(&path).unwrap(), store);
}

#[test]
fn archive_rejects_malformed_bytes() {
    let bytes = encode_archive(&random_store(6));
    let p = Path::new("bad.dta");
    assert!(decode_archive(b"DTA2", p).is_err());
    assert!(decode_archive(&bytes[..bytes.len() - 1], p).is_err());
    let mut dup = bytes.clone();
    dup.extend_from_slice(&bytes[4..]);
    assert!(decode_archive(&dup, p).is_err());
}

#[test]
fn param_store_is_lexicographic_and_unique() {
    let mut s = random_store(1);
    let names: Vec<&str> = s.names().collect();
    assert_eq!(names, ["a/bias", "b/weight", "c/ü"]);
    assert!(s.insert("a/bias", Tensor::ones(&[4])).is_err());
    assert!(s.set("a/bias", Tensor::ones(&[5])).is_err());
}

fn perm_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec(1usize..4, 1..5).prop_flat_map(|shape| {
        let n = shape.len();
        (Just(shape), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
    })
}

proptest! {
    #[test]
    fn permute_then_inverse_is_identity((shape, perm) in perm_strategy(), seed in any::<u64>()) {
        let tape = Tape::new();
        let x = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let y = tape.constant(x.clone()).permute(&perm).unwrap().permute(&inv).unwrap();
        prop_assert_eq!(&*y.value(), &x);
    }

    #[test]
    fn concat_then_split_restores_operands(
        rows in 1usize..4,
        widths in prop::collection::vec(1usize..4, 1..4),
        seed in any::<u64>(),
    ) {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts: Vec<Tensor> = widths.iter().map(|&w| Tensor::randn(&[rows, w, 2], 1.0, &mut rng)).collect();
        let vars: Vec<_> = parts.iter().map(|p| tape.constant(p.clone())).collect();
        let joined = concat(&vars, 1).unwrap();
        let back = tape.split(joined, 1, &widths).unwrap();
        for (b, p) in back.iter().zip(&parts) {
            prop_assert_eq!(&*b.value(), p);
        }
    }
}
