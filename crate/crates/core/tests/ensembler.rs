use eri_core::encoders::{save_checkpoint, CheckpointMeta, Hyperparams};
use eri_core::ensembler::{
    combine, ensemble_predict, incremental_report, incremental_scores, EnsembleSpec,
};
use eri_core::featstore::{generate, Split, SynthSpec};
use eri_core::objectives::{mean_pcc, mse};
use eri_core::trainer::{evaluate, predict, train, PredictionTable};
use eri_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const N: usize = 500;
const MEMBERS: usize = 5;

/// Targets uniform on [0,1]; each member = target + N(0, 0.1²) noise.
fn simulate(seed: u64) -> (Tensor<f64>, Vec<PredictionTable>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let target: Vec<[f64; 7]> = (0..N).map(|_| std::array::from_fn(|_| rng.random())).collect();
    let members = (0..MEMBERS)
        .map(|_| PredictionTable {
            sample_ids: (0..N).map(|i| format!("s{i}")).collect(),
            rows: target
                .iter()
                .map(|t| std::array::from_fn(|j| t[j] + noise.sample(&mut rng)))
                .collect(),
        })
        .collect();
    let t = Tensor::matrix(N, 7, target.iter().flatten().copied().collect()).unwrap();
    (t, members)
}

#[test]
fn averaging_independent_noise_helps() {
    let ids: Vec<String> = (0..MEMBERS).map(|i| format!("m{i}")).collect();
    let w = vec![1.0 / MEMBERS as f64; MEMBERS];
    let (mut pcc_wins, mut mse_wins, mut monotone) = (0, 0, 0);
    for seed in 0..100 {
        let (target, members) = simulate(seed);
        let full = combine(&members, &w).unwrap().to_tensor().unwrap();
        let singles: Vec<Tensor<f64>> = members.iter().map(|m| m.to_tensor().unwrap()).collect();
        let avg_pcc = singles.iter().map(|p| mean_pcc(p, &target).unwrap().mean_pcc).sum::<f64>()
            / MEMBERS as f64;
        let avg_mse = singles.iter().map(|p| mse(p, &target).unwrap()).sum::<f64>() / MEMBERS as f64;
        if mean_pcc(&full, &target).unwrap().mean_pcc > avg_pcc {
            pcc_wins += 1;
        }
        if mse(&full, &target).unwrap() < avg_mse {
            mse_wins += 1;
        }
        let rows = incremental_scores(&members, &w, &ids, &target).unwrap();
        assert_eq!(rows.len(), MEMBERS);
        if rows.windows(2).all(|p| p[1].mean_pcc >= p[0].mean_pcc) {
            monotone += 1;
        }
    }
    assert!(pcc_wins >= 95, "{pcc_wins}");
    assert!(mse_wins >= 95, "{mse_wins}");
    assert!(monotone >= 95, "{monotone}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn full_ensemble_ignores_member_order(
        vals in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 7 * 3), 2..6),
        rot in 0usize..6,
    ) {
        let tables: Vec<PredictionTable> = vals
            .iter()
            .map(|v| PredictionTable {
                sample_ids: vec!["a".into(), "b".into(), "c".into()],
                rows: v.chunks(7).map(|c| c.try_into().unwrap()).collect(),
            })
            .collect();
        let m = tables.len();
        let w = vec![1.0 / m as f64; m];
        let mut shuffled = tables.clone();
        shuffled.rotate_left(rot % m);
        shuffled.swap(0, m - 1);
        prop_assert_eq!(combine(&tables, &w).unwrap(), combine(&shuffled, &w).unwrap());
    }

    #[test]
    fn single_unit_weight_is_identity(v in prop::collection::vec(0.0f64..1.0, 14)) {
        let t = PredictionTable {
            sample_ids: vec!["a".into(), "b".into()],
            rows: v.chunks(7).map(|c| c.try_into().unwrap()).collect(),
        };
        prop_assert_eq!(combine(&[t.clone()], &[1.0]).unwrap(), t);
    }
}

#[test]
fn checkpoint_members() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&SynthSpec::micro(), 2).unwrap();
    let hp = Hyperparams {
        hidden_dim: 16,
        num_heads: 2,
        num_layers: 1,
        batch_size: 4,
        max_epochs: 2,
        ..Default::default()
    };
    let mut paths = Vec::new();
    for seed in 0..3 {
        let out = train(&ds, &hp, seed).unwrap();
        let p = dir.path().join(format!("run{seed}.ckpt"));
        save_checkpoint(&out.checkpoint.model, &out.checkpoint.meta, &p).unwrap();
        paths.push((p, out.checkpoint.model));
    }

    let one = EnsembleSpec::uniform(vec![paths[0].0.clone()]);
    let alone = predict(&paths[0].1, &ds, Split::Val).unwrap();
    assert_eq!(ensemble_predict(&one, &ds, Split::Val).unwrap(), alone);
    let rows = incremental_report(&one, &ds, Split::Val).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].member_id, "run0");
    assert_eq!(rows[0].mean_pcc, evaluate(&paths[0].1, &ds, Split::Val).unwrap().mean_pcc);

    let twin = EnsembleSpec::uniform(vec![paths[1].0.clone(), paths[1].0.clone()]);
    assert_eq!(
        ensemble_predict(&twin, &ds, Split::Val).unwrap(),
        predict(&paths[1].1, &ds, Split::Val).unwrap()
    );

    let three = EnsembleSpec::uniform(paths.iter().map(|p| p.0.clone()).collect());
    let rows = incremental_report(&three, &ds, Split::Val).unwrap();
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), [1, 2, 3]);
    let weighted = EnsembleSpec {
        weights: Some(vec![0.5, 0.25, 0.25]),
        ..three.clone()
    };
    assert!(ensemble_predict(&weighted, &ds, Split::Val).is_ok());
    let bad = EnsembleSpec {
        weights: Some(vec![0.5, 0.5, 0.5]),
        ..three
    };
    assert!(ensemble_predict(&bad, &ds, Split::Val).is_err());

    // a member trained on a different feature width
    let narrow = SynthSpec {
        streams: vec![eri_core::featstore::StreamSpec {
            id: "visual".into(),
            dim: 5,
            hop_seconds: 0.2,
        }],
        ..SynthSpec::micro()
    };
    let other = train(&generate(&narrow, 0).unwrap(), &hp, 0).unwrap();
    let q = dir.path().join("narrow.ckpt");
    save_checkpoint(&other.checkpoint.model, &CheckpointMeta::default(), &q).unwrap();
    let mixed = EnsembleSpec::uniform(vec![paths[0].0.clone(), q]);
    let err = ensemble_predict(&mixed, &ds, Split::Val).unwrap_err().to_string();
    assert!(err.contains("narrow.ckpt"), "{err}");
}
