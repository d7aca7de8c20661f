//! Sphere initialization and SDF-query behavior of the object field, all
//! checked against the analytic sphere distance.

use diffcore::{Tape, Tensor};
use hoirec::geom;
use hoirec::scene::{init_sphere, FieldEval, ObjectField, TransformedField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

const RADIUS: f64 = 0.1;

fn fitted() -> &'static ObjectField {
    static FIELD: OnceLock<ObjectField> = OnceLock::new();
    FIELD.get_or_init(|| init_sphere(RADIUS, 7).expect("sphere fit reaches tolerance"))
}

fn random_points(n: usize, half: f64, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            [
                (rng.random::<f64>() - 0.5) * 2.0 * half,
                (rng.random::<f64>() - 0.5) * 2.0 * half,
                (rng.random::<f64>() - 0.5) * 2.0 * half,
            ]
        })
        .collect()
}

#[test]
fn center_value_is_minus_radius() {
    let v = fitted().query(&[[0.0, 0.0, 0.0]]).unwrap();
    assert!((v[0] + RADIUS).abs() < 0.005, "phi(0) = {}", v[0]);
}

#[test]
fn surface_value_is_zero() {
    let pts: Vec<[f64; 3]> = (0..32)
        .map(|k| {
            let a = k as f64 * 0.39;
            let b = k as f64 * 0.17;
            [
                RADIUS * a.cos() * b.sin(),
                RADIUS * a.sin() * b.sin(),
                RADIUS * b.cos(),
            ]
        })
        .collect();
    for (p, v) in pts.iter().zip(fitted().query(&pts).unwrap()) {
        assert!(v.abs() < 0.005, "phi({p:?}) = {v}");
    }
}

#[test]
fn mean_absolute_residual_under_tolerance() {
    let pts = random_points(1000, 0.2, 11);
    let vals = fitted().query(&pts).unwrap();
    let mean: f64 = pts
        .iter()
        .zip(vals.iter())
        .map(|(p, v)| (v - (geom::norm(*p) - RADIUS)).abs())
        .sum::<f64>()
        / pts.len() as f64;
    assert!(mean < 0.005, "mean residual {mean}");
}

#[test]
fn gradient_norm_near_unit_after_eikonal_fit() {
    let pts = random_points(100, 0.18, 23);
    let (_, grads) = fitted().query_grad(&pts).unwrap();
    for g in grads {
        let n = geom::norm(g);
        assert!((0.9..=1.1).contains(&n), "gradient norm {n}");
    }
}

#[test]
fn query_rejects_non_finite_points() {
    assert!(fitted().query(&[[f64::NAN, 0.0, 0.0]]).is_err());
}

#[test]
fn eval_is_deterministic() {
    let pts = random_points(64, 0.15, 3);
    let a = fitted().query(&pts).unwrap();
    let b = fitted().query(&pts).unwrap();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

fn eval_transformed(
    field: &ObjectField,
    rot_aa: [f64; 3],
    t: [f64; 3],
    pts: &[[f64; 3]],
) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = field.vars(&mut tape, false);
    let aa = tape.constant(Tensor::from_vec(rot_aa.to_vec()));
    let tv = tape.constant(Tensor::from_vec(t.to_vec()));
    let rot = hoirec::geom::rodrigues_var(&mut tape, aa).unwrap();
    let bound = hoirec::scene::BoundField { field, vars };
    let tf = TransformedField { inner: bound, rot, t: tv };
    let p = tape
        .constant(Tensor::new(vec![pts.len(), 3], pts.iter().flatten().copied().collect()).unwrap());
    let out = tf.eval(&mut tape, p).unwrap();
    tape.value(out).data().to_vec()
}

#[test]
fn identity_transform_equals_field_pointwise() {
    let pts = random_points(50, 0.15, 31);
    let direct = fitted().query(&pts).unwrap();
    let via = eval_transformed(fitted(), [0.0; 3], [0.0; 3], &pts);
    for (a, b) in direct.iter().zip(via.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn pure_translation_shifts_queries() {
    let t = [0.03, -0.02, 0.05];
    let pts = random_points(50, 0.1, 37);
    let shifted: Vec<[f64; 3]> = pts.iter().map(|p| geom::add(*p, t)).collect();
    let direct = fitted().query(&shifted).unwrap();
    let via = eval_transformed(fitted(), [0.0; 3], t, &pts);
    for (a, b) in direct.iter().zip(via.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn transform_composition_matches_composed_transform() {
    let t1 = geom::RigidTransform::from_axis_angle([0.3, -0.1, 0.2], [0.02, 0.01, -0.03]);
    let t2 = geom::RigidTransform::from_axis_angle([-0.2, 0.4, 0.1], [-0.01, 0.03, 0.02]);
    let composed = t1.compose(&t2);
    let pts = random_points(40, 0.1, 41);

    // Nested evaluators: phi(T1 (T2 x))
    let field = fitted();
    let mut tape = Tape::new();
    let vars = field.vars(&mut tape, false);
    let mk = |tape: &mut Tape, tr: &geom::RigidTransform| {
        let r = tape.constant(Tensor::new(vec![3, 3], tr.rot.concat()).unwrap());
        let t = tape.constant(Tensor::from_vec(tr.t.to_vec()));
        (r, t)
    };
    let (r1, tv1) = mk(&mut tape, &t1);
    let (r2, tv2) = mk(&mut tape, &t2);
    let bound = hoirec::scene::BoundField { field, vars: vars.clone() };
    let inner = TransformedField { inner: bound, rot: r1, t: tv1 };
    let nested = TransformedField { inner, rot: r2, t: tv2 };
    let p = tape
        .constant(Tensor::new(vec![pts.len(), 3], pts.iter().flatten().copied().collect()).unwrap());
    let out_nested = nested.eval(&mut tape, p).unwrap();

    let (rc, tc) = mk(&mut tape, &composed);
    let bound2 = hoirec::scene::BoundField { field, vars };
    let direct = TransformedField { inner: bound2, rot: rc, t: tc };
    let out_direct = direct.eval(&mut tape, p).unwrap();

    for (a, b) in tape
        .value(out_nested)
        .data()
        .iter()
        .zip(tape.value(out_direct).data().iter())
    {
        assert!((a - b).abs() < 1e-9);
    }
}
