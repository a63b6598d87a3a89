use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use seqspace::checkpoint;
use seqspace::dsm::dsm_loss;
use seqspace::geometry::{
    barrier_height, basin_width, descend, find_basins, line_profile, FlowConfig,
};
use seqspace::io::sha256_hex;
use seqspace::longitudinal::{run_longitudinal, LongitudinalConfig, Roi, RoiSelector};
use seqspace::phantom::{sample, Component, MixtureSpec};
use seqspace::table::default_channels;
use seqspace::train::LrSchedule;
use seqspace::{train, Architecture, EnergyModel, NormMethod, TrainConfig, TrainTrace, VoxelTable};

const SIGMA: f64 = 0.1;

fn mixture() -> MixtureSpec {
    MixtureSpec::new(vec![
        Component {
            weight: 0.7,
            mean: vec![0.0, 0.0],
            var: vec![0.25, 0.25],
        },
        Component {
            weight: 0.3,
            mean: vec![3.0, 0.0],
            var: vec![0.25, 0.25],
        },
    ])
    .unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        sigma: SIGMA,
        epochs: 30,
        batch_size: 256,
        learning_rate: 3e-3,
        schedule: LrSchedule::Cosine,
        seed: 4,
        norm: NormMethod::None,
        architecture: Architecture {
            m: 32,
            widths: vec![32, 32],
            ..Architecture::default()
        },
        ..TrainConfig::default()
    }
}

fn data() -> &'static (VoxelTable, Vec<usize>) {
    static DATA: OnceLock<(VoxelTable, Vec<usize>)> = OnceLock::new();
    DATA.get_or_init(|| {
        let s = sample(&mixture(), 3000, 9).unwrap();
        (s.table, s.labels)
    })
}

fn trained() -> &'static (EnergyModel, TrainTrace) {
    static MODEL: OnceLock<(EnergyModel, TrainTrace)> = OnceLock::new();
    MODEL.get_or_init(|| train(&data().0, &config()).unwrap())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn training_approaches_the_loss_floor() {
    let (model, trace) = trained();
    assert_eq!(trace.epoch_loss.len(), 30);
    assert!(trace.epoch_loss.iter().all(|l| l.is_finite()));

    // One shared noisy sample, so the three losses differ by score error only.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let clean: Vec<f64> = data()
        .0
        .values()
        .iter()
        .cycle()
        .take(2 * 3000 * 4)
        .copied()
        .collect();
    let noise: Vec<f64> = clean
        .iter()
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            SIGMA * z
        })
        .collect();
    let untrained = EnergyModel::init(
        2,
        &config().architecture,
        4,
        &mut ChaCha8Rng::seed_from_u64(4),
    )
    .unwrap();
    let fitted = dsm_loss(model, &clean, &noise, SIGMA).unwrap();
    let initial = dsm_loss(&untrained, &clean, &noise, SIGMA).unwrap();

    let mix = mixture();
    let inv_var = 1.0 / (SIGMA * SIGMA);
    let rows = clean.len() / 2;
    let (mut floor, mut trivial) = (0.0, 0.0);
    for r in 0..rows {
        let e = &noise[2 * r..2 * r + 2];
        let a: Vec<f64> = (0..2).map(|k| clean[2 * r + k] + e[k]).collect();
        let s = mix.analytic_score(SIGMA, &a);
        floor += (0..2)
            .map(|k| (-s[k] - e[k] * inv_var).powi(2))
            .sum::<f64>();
        trivial += (0..2).map(|k| (e[k] * inv_var).powi(2)).sum::<f64>();
    }
    floor /= rows as f64;
    trivial /= rows as f64;

    assert!(fitted < trivial, "{fitted} vs zero score {trivial}");
    assert!(fitted < initial);
    // Most of the learnable gap is closed.
    assert!(
        fitted - floor < 0.3 * (trivial - floor),
        "fitted {fitted}, floor {floor}, trivial {trivial}"
    );
}

#[test]
fn training_is_deterministic() {
    let mut cfg = config();
    cfg.epochs = 2;
    let (a, ta) = train(&data().0, &cfg).unwrap();
    let (b, tb) = train(&data().0, &cfg).unwrap();
    assert_eq!(checkpoint::to_json(&a), checkpoint::to_json(&b));
    assert_eq!(ta.rng_digest, tb.rng_digest);
    cfg.seed += 1;
    let (c, _) = train(&data().0, &cfg).unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn learned_score_points_at_the_modes() {
    let (model, _) = trained();
    let mix = mixture();
    let mut agree = 0;
    let probes = [
        [1.0, 0.0],
        [-1.0, 0.0],
        [0.0, 1.0],
        [0.0, -1.0],
        [2.0, 0.8],
        [4.0, -0.8],
        [3.0, 1.0],
    ];
    for u in &probes {
        let s = model.score(u).unwrap();
        let t = mix.analytic_score(SIGMA, u);
        let cos = s.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>()
            / (s.iter().map(|v| v * v).sum::<f64>().sqrt()
                * t.iter().map(|v| v * v).sum::<f64>().sqrt());
        if cos > 0.9 {
            agree += 1;
        }
    }
    assert!(agree >= probes.len() - 1, "{agree}");
}

#[test]
fn descent_is_monotone() {
    let (model, _) = trained();
    let flow = FlowConfig::default();
    for u in data().0.rows().step_by(60) {
        let d = descend(model, u, &flow).unwrap();
        assert!(d.energies.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(d.energies.len(), d.steps + 1);
        assert_eq!(*d.energies.last().unwrap(), d.energy);
    }
}

#[test]
fn basins_sit_on_the_modes() {
    let (model, _) = trained();
    let seeds = data()
        .0
        .select(&(0..3000).step_by(10).collect::<Vec<_>>())
        .unwrap();
    let map = find_basins(model, &seeds, &FlowConfig::default()).unwrap();
    assert_eq!(map.minima.len(), 2, "{:?}", map.minima);
    let near = |target: &[f64]| {
        map.minima
            .iter()
            .position(|m| dist(&m.location, target) < 0.3)
    };
    let h = near(&[0.0, 0.0]).expect("healthy minimum");
    let t = near(&[3.0, 0.0]).expect("tumour minimum");
    assert_ne!(h, t);
    // The heavier mode is the deeper one.
    assert!(map.minima[h].energy < map.minima[t].energy);

    let labels = &data().1;
    let mut right = 0;
    for (k, i) in (0..3000).step_by(10).enumerate() {
        let want = if labels[i] == 0 { h } else { t };
        if map.assignment[k] == Some(want) {
            right += 1;
        }
    }
    assert!(right as f64 >= 0.9 * 300.0, "{right}");

    let profile = line_profile(
        model,
        &map.minima[h].location,
        &map.minima[t].location,
        512,
        0.1,
    )
    .unwrap();
    let barrier = barrier_height(&profile).expect("two wells along the line");
    assert!(barrier.height > 0.0);
    let i = profile.local_minima()[0];
    let width = basin_width(&profile, i, 0.5).unwrap();
    assert!(width.width > 0.0 && width.width < 3.0 * 1.2);
}

fn rois() -> (Roi, Roi) {
    let (table, labels) = data();
    let pick = |c: usize| -> Vec<usize> {
        (0..table.n())
            .filter(|&i| labels[i] == c && dist(table.row(i), &mixture().components[c].mean) < 0.5)
            .take(100)
            .collect()
    };
    (
        Roi {
            name: "healthy".into(),
            selector: RoiSelector::Rows(pick(0)),
        },
        Roi {
            name: "tumour".into(),
            selector: RoiSelector::Rows(pick(1)),
        },
    )
}

fn small_cfg() -> LongitudinalConfig {
    LongitudinalConfig {
        basin_seeds: 200,
        n_perm: 500,
        ..LongitudinalConfig::default()
    }
}

fn healthy_followup(shift: f64, seed: u64) -> VoxelTable {
    let spec = MixtureSpec::gaussian(vec![0.0, 0.0], vec![0.25, 0.25]).unwrap();
    let s = sample(&spec, 600, seed).unwrap();
    let rows: Vec<Vec<f64>> = s.table.rows().map(|r| vec![r[0] + shift, r[1]]).collect();
    VoxelTable::from_rows(default_channels(2), &rows).unwrap()
}

#[test]
fn longitudinal_without_followups() {
    let (model, _) = trained();
    let (h, t) = rois();
    let out = run_longitudinal(model, &data().0, &h, &t, &[], &small_cfg()).unwrap();
    let report = &out.report;
    assert!(report.timepoints.is_empty());
    assert!(report.final_summary.is_none());
    assert_eq!(
        report.digests.model,
        sha256_hex(checkpoint::to_json(model).as_bytes())
    );
    assert_eq!(report.digests.config, small_cfg().digest());
    assert_eq!(out.plots.len(), 1);
    assert_eq!(out.plots[0].energy.len(), data().0.masked_indices().len());
    assert!((out.frame.length - 3.0).abs() < 0.2);
    let back = seqspace::longitudinal::LongitudinalReport::from_json(&report.to_json()).unwrap();
    assert_eq!(&back, report);
}

#[test]
fn longitudinal_detects_a_shift_toward_the_tumour() {
    let (model, _) = trained();
    let (h, t) = rois();
    let followups = vec![
        ("same".to_string(), healthy_followup(0.0, 31)),
        ("moved".to_string(), healthy_followup(0.6, 32)),
    ];
    let cfg = small_cfg();
    let out = run_longitudinal(model, &data().0, &h, &t, &followups, &cfg).unwrap();
    let tp = &out.report.timepoints;
    assert_eq!(tp.len(), 2);
    assert_eq!(out.plots.len(), 3);
    assert!(tp[0].drift.abs() < 0.1, "{}", tp[0].drift);
    assert!((tp[1].drift - 0.6).abs() < 0.1, "{}", tp[1].drift);
    assert!(tp[1].delta_e > 0.0);
    assert!(tp[1].p_perm < 0.01);
    let fin = out.report.final_summary.as_ref().unwrap();
    assert_eq!(fin.label, "moved");
    assert_eq!(fin.drift, tp[1].drift);

    let again = run_longitudinal(model, &data().0, &h, &t, &followups, &cfg).unwrap();
    assert_eq!(again.report.to_json(), out.report.to_json());
}

#[test]
fn longitudinal_rejects_bad_inputs() {
    let (model, _) = trained();
    let (h, t) = rois();
    let wrong =
        VoxelTable::from_rows(default_channels(3), &[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
    let err = run_longitudinal(
        model,
        &data().0,
        &h,
        &t,
        &[("x".into(), wrong)],
        &small_cfg(),
    )
    .unwrap_err();
    assert!(matches!(err, seqspace::Error::Input(_)));

    let same = Roi {
        name: "tumour".into(),
        selector: h.selector.clone(),
    };
    assert!(run_longitudinal(model, &data().0, &h, &same, &[], &small_cfg()).is_err());

    let out_of_range = Roi {
        name: "tumour".into(),
        selector: RoiSelector::Rows(vec![5000]),
    };
    let err = run_longitudinal(model, &data().0, &h, &out_of_range, &[], &small_cfg()).unwrap_err();
    assert!(matches!(err, seqspace::Error::Input(_)));
}
