#![allow(dead_code)]

pub mod grad_cases;

use celldefect::arch::{ArchBuilder, ArchSpec, Op};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small random spec that uses every op kind: a stem, a separable column
/// and an attention-condenser column joined by a concat, then a reduction
/// tail ending in a classifier.
pub fn random_spec(seed: u64) -> ArchSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_range(12..24);
    let w = rng.random_range(12..24);
    let mut b = ArchBuilder::new(&format!("random{seed}"), [1, rng.random_range(1..4), h, w]);
    let x = b.input();
    let stem = b.conv(&x, rng.random_range(2..9), 3, rng.random_range(1..3), 1);
    let stem = b.batchnorm(&stem);
    let stem = b.relu(&stem);

    b.column(Some("a"));
    let a = b.depthwise(&stem, 3, 1);
    let a = b.pointwise(&a, rng.random_range(2..9));
    let a = b.relu(&a);

    b.column(Some("b"));
    let width = rng.random_range(2..9);
    let v = b.vac(&stem, rng.random_range(1..3), rng.random_range(2..4));
    let v = b.pointwise(&v, width);

    b.column(None);
    let cat = b.concat(&[&a, &v]);
    let t = b.aads(&cat, 2);
    let t = if rng.random_bool(0.5) {
        b.pointwise_strided(&t, rng.random_range(2..9), 2)
    } else {
        b.conv(&t, rng.random_range(2..9), 3, 1, 1)
    };
    let t = b.maxpool(&t, 2, 1);
    let t = b.gap(&t);
    let t = b.fc(&t, 2);
    b.output(&t);
    let mut spec = b.build().expect("random spec is valid");
    for node in &mut spec.nodes {
        if let Op::Conv { bias, .. } | Op::DepthwiseConv { bias, .. } | Op::PointwiseConv { bias, .. } | Op::Fc { bias, .. } =
            &mut node.op
        {
            *bias = rng.random_bool(0.7);
        }
    }
    spec
}

/// Plain three-stage CNN on full-size cell images, used where the reference
/// network would be too slow to train from scratch inside a test.
pub fn small_cnn() -> ArchSpec {
    let mut b = ArchBuilder::new("small", [1, 1, 300, 300]);
    let x = b.input();
    let mut t = x;
    for (i, width) in [8, 16, 32].into_iter().enumerate() {
        t = b.conv(&t, width, 3, 1, 1);
        t = b.relu(&t);
        if i < 2 {
            t = b.aads(&t, 4);
        }
    }
    let g = b.gap(&t);
    let f = b.fc(&g, 2);
    b.output(&f);
    b.build().expect("small spec is valid")
}
