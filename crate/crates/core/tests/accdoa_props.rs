use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use seldkit::accdoa::{decode, encode, AccdoaTensor};
use seldkit::events::{EventList, EventRecord};
use seldkit::geometry::{angular_distance, cart_to_sph, sph_to_cart, Vec3};

mod support;

/// Collision-free lists: each (frame, class) cell is used at most once.
fn event_list() -> impl Strategy<Value = (usize, usize, EventList)> {
    (1usize..12, 1usize..6).prop_flat_map(|(frames, classes)| {
        let cells = prop::collection::btree_set((0..frames, 0..classes), 0..=frames * classes);
        let angles = prop::collection::vec((-180.0f64..180.0, -90.0f64..=90.0), frames * classes);
        (cells, angles).prop_map(move |(cells, angles)| {
            let list = cells
                .into_iter()
                .zip(angles)
                .map(|((t, c), (az, el))| EventRecord::new(t, c, az, el))
                .collect();
            (frames, classes, list)
        })
    })
}

fn assert_close(a: &AccdoaTensor, b: &AccdoaTensor, tol: f64) {
    assert_eq!(a.tensor().shape(), b.tensor().shape());
    let d = a.tensor().max_abs_diff(b.tensor()) as f64;
    assert!(d <= tol, "max diff {d}");
}

proptest! {
    #[test]
    fn encode_decode_round_trip((frames, classes, events) in event_list(), tau in 0.01f64..0.99) {
        let enc = encode(&events, frames, classes).unwrap();
        prop_assert_eq!(enc.collisions, 0);
        for t in 0..frames {
            for c in 0..classes {
                let n = seldkit::geometry::norm(enc.target.vector(t, c));
                prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-6);
            }
        }
        let again = encode(&decode(&enc.target, tau), frames, classes).unwrap();
        assert_close(&again.target, &enc.target, 1e-6);
    }

    #[test]
    fn decode_is_monotone_in_tau(
        values in prop::collection::vec(-1.0f32..1.0, 4 * 3 * 3),
        t1 in -0.5f64..1.5,
        dt in 0.0f64..1.0,
    ) {
        let p = AccdoaTensor::from_tensor(seldkit::Tensor::new([4, 3, 3], values).unwrap()).unwrap();
        let lo: Vec<_> = decode(&p, t1).iter().map(|r| (r.frame, r.class_id)).collect();
        let hi: Vec<_> = decode(&p, t1 + dt).iter().map(|r| (r.frame, r.class_id)).collect();
        prop_assert!(hi.iter().all(|k| lo.contains(k)));
    }
}

#[test]
fn spherical_round_trip_1000_angles() {
    let mut rng = support::rng(11);
    for _ in 0..1000 {
        let az: f64 = rng.gen_range(-180.0..180.0);
        let el: f64 = rng.gen_range(-89.9..89.9);
        let (az2, el2) = cart_to_sph(sph_to_cart(az, el));
        let daz = ((az2 - az + 540.0) % 360.0) - 180.0;
        assert!(
            daz.abs() < 1e-4 && (el2 - el).abs() < 1e-4,
            "{az},{el} -> {az2},{el2}"
        );
    }
}

/// Rotation matrix from a random unit quaternion.
fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let q: Vec<f64> = (0..4).map(|_| StandardNormal.sample(rng)).collect();
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn apply(r: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [0, 1, 2].map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

#[test]
fn angular_distance_is_rotation_invariant() {
    let mut rng = support::rng(12);
    for _ in 0..500 {
        let a = sph_to_cart(rng.gen_range(-180.0..180.0), rng.gen_range(-90.0..=90.0));
        let b = sph_to_cart(rng.gen_range(-180.0..180.0), rng.gen_range(-90.0..=90.0));
        let r = random_rotation(&mut rng);
        let d0 = angular_distance(a, b).unwrap();
        let d1 = angular_distance(apply(&r, a), apply(&r, b)).unwrap();
        assert!((d0 - d1).abs() < 1e-6, "{d0} vs {d1}");
    }
}
