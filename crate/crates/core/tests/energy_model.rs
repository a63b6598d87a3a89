use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

use seqspace::checkpoint::{self, load_checkpoint, save_checkpoint};
use seqspace::model::FourierEncoder;
use seqspace::table::default_channels;
use seqspace::{Architecture, EnergyModel, VoxelTable, Want};

fn model(d: usize, seed: u64, fourier_scale: f64) -> EnergyModel {
    let arch = Architecture {
        m: 12,
        widths: vec![10, 9, 8],
        omega0: 1.3,
        fourier_scale,
        head_scale: 1.0,
    };
    EnergyModel::init(d, &arch, seed, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect()
}

fn matrix(v: &Value) -> Vec<Vec<f64>> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|r| {
            r.as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_f64().unwrap())
                .collect()
        })
        .collect()
}

/// Straight re-implementation of the forward pass from the checkpoint JSON.
fn naive_energy(ckpt: &Value, u: &[f64]) -> f64 {
    let params = &ckpt["params"];
    let omega0 = ckpt["meta"]["omega0"].as_f64().unwrap();
    let b = matrix(&params["B"]);
    let mut h: Vec<f64> = b
        .iter()
        .map(|row| {
            (2.0 * std::f64::consts::PI * row.iter().zip(u).map(|(a, x)| a * x).sum::<f64>()).sin()
        })
        .collect();
    h.extend(b.iter().map(|row| {
        (2.0 * std::f64::consts::PI * row.iter().zip(u).map(|(a, x)| a * x).sum::<f64>()).cos()
    }));
    for layer in params["layers"].as_array().unwrap() {
        let w = matrix(&layer["W"]);
        let bias: Vec<f64> = layer["b"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        h = w
            .iter()
            .zip(&bias)
            .map(|(row, bi)| {
                (omega0 * (row.iter().zip(&h).map(|(a, x)| a * x).sum::<f64>() + bi)).sin()
            })
            .collect();
    }
    let head = matrix(&params["head"]["W"]);
    let hb = params["head"]["b"][0].as_f64().unwrap();
    head[0].iter().zip(&h).map(|(a, x)| a * x).sum::<f64>() + hb
}

#[test]
fn energy_matches_naive_forward_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..5 {
        let m = model(3, seed, 1.0);
        let ckpt: Value = serde_json::from_str(&checkpoint::to_json(&m)).unwrap();
        for _ in 0..20 {
            let u = gaussian(3, &mut rng);
            let a = m.energy(&u).unwrap();
            let b = naive_energy(&ckpt, &u);
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn encoding_is_periodic_for_integer_frequencies() {
    let enc = FourierEncoder::new(3, 1, vec![1.0, 2.0, -3.0]).unwrap();
    for &u in &[0.0, 0.17, -1.4, 2.9] {
        let a = enc.encode(&[u]).unwrap();
        let b = enc.encode(&[u + 1.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    assert!(enc.encode(&[0.0, 1.0]).is_err());
}

#[test]
fn features_and_energy_bounded_by_head() {
    let m = model(4, 3, 1.0);
    let bound: f64 = m.head.w.iter().map(|w| w.abs()).sum::<f64>() + m.head.b.abs();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let u: Vec<f64> = gaussian(4, &mut rng).iter().map(|v| 10.0 * v).collect();
        assert!(m.energy(&u).unwrap().abs() <= bound);
    }
}

#[test]
fn score_and_laplacian_match_finite_differences() {
    let m = model(3, 4, 0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..30 {
        let u = gaussian(3, &mut rng);
        let ev = m.evaluate(&u, Want::ALL).unwrap();
        let score = ev.score.unwrap();
        let step = |k: usize, h: f64| {
            let mut v = u.clone();
            v[k] += h;
            m.energy(&v).unwrap()
        };
        let second = |k: usize, h: f64| (step(k, h) - 2.0 * ev.energy + step(k, -h)) / (h * h);
        let mut lap = 0.0;
        for k in 0..3 {
            let h = 1e-5;
            let fd = -(step(k, h) - step(k, -h)) / (2.0 * h);
            assert!((fd - score[k]).abs() < 1e-7 * (1.0 + score[k].abs()));
            // Extrapolated second difference, O(h⁴).
            lap += (4.0 * second(k, 1e-3) - second(k, 2e-3)) / 3.0;
        }
        let exact = ev.laplacian.unwrap();
        assert!((lap - exact).abs() < 1e-5 * (1.0 + exact.abs()));
        // Reverse-mode and tangent-mode gradients agree.
        let jet = m.evaluate(&u, Want::SCORE).unwrap().score.unwrap();
        for k in 0..3 {
            assert!((jet[k] - score[k]).abs() < 1e-12 * (1.0 + score[k].abs()));
        }
    }
}

#[test]
fn directional_curvature_is_quadratic_form() {
    let m = model(2, 5, 1.0);
    let u = [0.3, -0.8];
    let axes = m.axis_curvatures(&u).unwrap();
    let lap = m.laplacian(&u).unwrap();
    assert!((axes.iter().sum::<f64>() - lap).abs() < 1e-10);
    let e1 = m.second_directional(&u, &[1.0, 0.0]).unwrap();
    assert!((e1 - axes[0]).abs() < 1e-12 * (1.0 + e1.abs()));
    let diag = m.second_directional(&u, &[1.0, 1.0]).unwrap();
    let anti = m.second_directional(&u, &[1.0, -1.0]).unwrap();
    // v1ᵀHv1 + v2ᵀHv2 = 2 tr H for v = (1, ±1).
    assert!((diag + anti - 2.0 * (axes[0] + axes[1])).abs() < 1e-10);
}

#[test]
fn batch_equals_single_point_bitwise() {
    let m = model(5, 6, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table = VoxelTable::new(default_channels(5), gaussian(5 * 40, &mut rng)).unwrap();
    let batch = m.energy_batch(&table, Want::ALL).unwrap();
    for (i, ev) in batch.iter().enumerate() {
        let single = m.evaluate(table.row(i), Want::ALL).unwrap();
        assert_eq!(ev.energy.to_bits(), single.energy.to_bits());
        assert_eq!(
            ev.laplacian.unwrap().to_bits(),
            single.laplacian.unwrap().to_bits()
        );
        for (a, b) in ev
            .score
            .as_ref()
            .unwrap()
            .iter()
            .zip(single.score.as_ref().unwrap())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let m = model(5, 7, 1.0);
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(back.meta, m.meta);
    let u = [0.1, 0.2, -0.3, 0.4, 0.5];
    assert_eq!(
        back.energy(&u).unwrap().to_bits(),
        m.energy(&u).unwrap().to_bits()
    );
    let first = std::fs::read(&path).unwrap();
    save_checkpoint(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn wrong_dimension_is_an_input_error() {
    let m = model(5, 8, 1.0);
    assert!(matches!(
        m.energy(&[0.0; 4]),
        Err(seqspace::Error::Input(_))
    ));
    assert!(matches!(
        m.score(&[f64::NAN, 0.0, 0.0, 0.0, 0.0]),
        Err(seqspace::Error::Input(_))
    ));
}
