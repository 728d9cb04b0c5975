use proptest::prelude::*;
use vessel_uda::metrics::{acc, ahd, auc, dsc};
use vessel_uda::tensor::Tensor;

fn mask(bits: &[bool]) -> Tensor {
    Tensor::new(&[1, 1, 6, 6], bits.iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap()
}

proptest! {
    #[test]
    fn dsc_and_ahd_are_symmetric(a in prop::collection::vec(any::<bool>(), 36), b in prop::collection::vec(any::<bool>(), 36)) {
        let (a, b) = (mask(&a), mask(&b));
        let (ab, ba) = (dsc(&a, &b), dsc(&b, &a));
        match (ab, ba) {
            (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
            (x, y) => prop_assert_eq!(x.is_err(), y.is_err()),
        }
        prop_assert_eq!(ahd(&a, &b).unwrap(), ahd(&b, &a).unwrap());
    }

    #[test]
    fn auc_is_invariant_to_monotone_transforms_and_complements(
        scores in prop::collection::hash_set(-1000i32..1000, 36),
        labels in prop::collection::vec(any::<bool>(), 36),
    ) {
        prop_assume!(labels.iter().any(|&b| b) && labels.iter().any(|&b| !b));
        let values: Vec<f64> = scores.into_iter().map(|s| f64::from(s) / 1000.0).collect();
        let s = Tensor::new(&[1, 1, 6, 6], values).unwrap();
        let gt = mask(&labels);
        let base = auc(&s, &gt).unwrap();
        prop_assert_eq!(auc(&s.map(|v| v * v * v), &gt).unwrap(), base);
        let flipped = auc(&s.map(|v| 1.0 - v), &gt).unwrap();
        prop_assert!((base + flipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_of_complement(p in prop::collection::vec(any::<bool>(), 36), g in prop::collection::vec(any::<bool>(), 36)) {
        let (p, g) = (mask(&p), mask(&g));
        let inverse = p.map(|v| 1.0 - v);
        prop_assert!((acc(&p, &g).unwrap() - (1.0 - acc(&inverse, &g).unwrap())).abs() < 1e-12);
    }
}
