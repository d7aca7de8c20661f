//! Scratch probe for sphere-fit hyperparameters.
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn metrics(f: &hoirec::scene::ObjectField, r: f64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let pts: Vec<[f64; 3]> = (0..1000)
        .map(|_| {
            [
                (rng.random::<f64>() - 0.5) * 0.4,
                (rng.random::<f64>() - 0.5) * 0.4,
                (rng.random::<f64>() - 0.5) * 0.4,
            ]
        })
        .collect();
    let vals = f.query(&pts).unwrap();
    let mean = pts
        .iter()
        .zip(vals.iter())
        .map(|(p, v)| (v - (hoirec::geom::norm(*p) - r)).abs())
        .sum::<f64>()
        / 1000.0;
    let center = (f.query(&[[0.0, 0.0, 0.0]]).unwrap()[0] + r).abs();
    let surf: Vec<[f64; 3]> = (0..64)
        .map(|k| {
            let a = k as f64 * 0.39;
            let b = k as f64 * 0.17;
            [r * a.cos() * b.sin(), r * a.sin() * b.sin(), r * b.cos()]
        })
        .collect();
    let smax = f
        .query(&surf)
        .unwrap()
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    (mean, center, smax)
}

fn main() {
    for seed in [7u64, 29] {
        let mut field = hoirec::scene::ObjectField::geometric(seed);
        let res = field.fit_sphere_probe(0.1, 2500, 5e-3, seed);
        let (mean, center, smax) = metrics(&field, 0.1);
        println!(
            "seed={seed} residual={res:.5} box_mean={mean:.5} center={center:.5} surf_max={smax:.5}"
        );
    }
}
