// SPDX-License-Identifier: Apache-2.0

use std::collections::HashSet;
use std::sync::OnceLock;

use proptest::prelude::*;

use sgva::adapter::AdapterParams;
use sgva::embank::{generate_synthetic_bank, read_bank, write_bank, EmbeddingBank, Split, SyntheticBankSpec};
use sgva::episodes::{nth_episode, SamplingConfig, SamplingMode};
use sgva::harness::{ci95, ExperimentConfig};
use sgva::infer::{build_prototypes, predict, similarity_vector, NaiveBayes, PredictMode};
use sgva::losses::LossFlags;
use sgva::model::episode_loss;
use sgva::optim::SgvaParams;
use sgva::rng::Purpose;
use sgva::textpath::init_prompts;

fn shared_bank() -> &'static EmbeddingBank {
    static BANK: OnceLock<EmbeddingBank> = OnceLock::new();
    BANK.get_or_init(|| generate_synthetic_bank(&SyntheticBankSpec::small()).unwrap())
}

fn params(bank: &EmbeddingBank, k_shot: usize, seed: u64) -> SgvaParams {
    let dims = bank.dims();
    SgvaParams {
        adapter: Some(AdapterParams::init(dims.d_v, 16, [0.3, 0.7], seed).unwrap()),
        prompts: Some(init_prompts(k_shot, 4, dims.d_e, seed).unwrap()),
        step_count: 0,
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mode() -> impl Strategy<Value = SamplingMode> {
    prop_oneof![
        Just(SamplingMode::MetaTrainBase),
        Just(SamplingMode::MetaValNovel),
        Just(SamplingMode::MetaTestNovel),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bank_bytes_round_trip(seed in 0u64..1000, n_classes in 6usize..12, d_v in 4usize..20, noise in 0.0f64..2.0) {
        let spec = SyntheticBankSpec {
            seed,
            n_classes,
            samples_per_class: 6,
            d_v: d_v + 16,
            noise_sigma: noise,
            ..SyntheticBankSpec::small()
        };
        let bank = generate_synthetic_bank(&spec).unwrap();
        let mut bytes = Vec::new();
        write_bank(&bank, &mut bytes).unwrap();
        let back = read_bank(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &bank);
        let mut again = Vec::new();
        write_bank(&back, &mut again).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn episodes_are_balanced_and_leak_free(
        mode in mode(),
        n_way in 2usize..6,
        k_shot in 1usize..5,
        queries in 1usize..8,
        seed in 0u64..1000,
        index in 0u64..1000,
    ) {
        let bank = shared_bank();
        let cfg = SamplingConfig { mode, n_way, k_shot, queries_per_class: queries, episode_count: 1, seed };
        let purpose = match mode {
            SamplingMode::MetaTrainBase => Purpose::TrainEpisodes,
            SamplingMode::MetaValNovel => Purpose::ValEpisodes,
            _ => Purpose::EvalEpisodes,
        };
        let ep = nth_episode(bank, &cfg, purpose, index).unwrap();
        prop_assert_eq!(&ep, &nth_episode(bank, &cfg, purpose, index).unwrap());
        let split = match mode {
            SamplingMode::MetaTrainBase => Split::Base,
            SamplingMode::MetaValNovel => Split::NovelVal,
            _ => Split::NovelTest,
        };
        let allowed: HashSet<u32> = bank.classes_in(split).into_iter().collect();
        let distinct: HashSet<u32> = ep.class_ids.iter().copied().collect();
        prop_assert_eq!(distinct.len(), n_way);
        prop_assert!(distinct.is_subset(&allowed));

        let support: HashSet<usize> = ep.support.iter().copied().collect();
        prop_assert_eq!(support.len(), n_way * k_shot);
        prop_assert!(ep.query.iter().all(|q| !support.contains(q)));
        prop_assert_eq!(ep.query.len(), n_way * queries);
        for c in 0..n_way {
            prop_assert_eq!(ep.query_labels.iter().filter(|&&l| l == c).count(), queries);
            for &row in ep.support_of(c) {
                prop_assert_eq!(bank.samples()[row].class_id, ep.class_ids[c]);
            }
        }
        for (&row, &label) in ep.query.iter().zip(&ep.query_labels) {
            prop_assert_eq!(bank.samples()[row].class_id, ep.class_ids[label]);
        }
    }

    #[test]
    fn loss_ignores_query_order(seed in 0u64..1000, k_shot in 1usize..3, rotate in 1usize..10) {
        let bank = shared_bank();
        let cfg = SamplingConfig {
            mode: SamplingMode::MetaTrainBase,
            n_way: 3,
            k_shot,
            queries_per_class: 3,
            episode_count: 1,
            seed,
        };
        let ep = nth_episode(bank, &cfg, Purpose::TrainEpisodes, 0).unwrap();
        let mut shuffled = ep.clone();
        shuffled.query.rotate_left(rotate % ep.query.len());
        shuffled.query_labels.rotate_left(rotate % ep.query.len());
        shuffled.query.reverse();
        shuffled.query_labels.reverse();
        let p = params(bank, k_shot, seed);
        let flags = LossFlags::default();
        let a = episode_loss(&p, bank, &ep, &flags, 5.0).unwrap();
        let b = episode_loss(&p, bank, &shuffled, &flags, 5.0).unwrap();
        prop_assert!((a.total - b.total).abs() < 1e-12);
        for ((name, ga), (_, gb)) in a.grads.tensors().iter().zip(b.grads.tensors()) {
            prop_assert!(max_diff(ga, gb) < 1e-12, "{}", name);
        }
    }

    #[test]
    fn similarities_ignore_feature_scale(seed in 0u64..1000, scale in 0.01f64..100.0, row in 0usize..1600) {
        let bank = shared_bank();
        let cfg = SamplingConfig { episode_count: 1, seed, ..SamplingConfig::default() };
        let ep = nth_episode(bank, &cfg, Purpose::EvalEpisodes, 0).unwrap();
        let p = params(bank, 1, seed);
        let protos = build_prototypes(&ep, &p, bank).unwrap();
        let x = bank.feature(row % bank.len());
        let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
        let a = similarity_vector(x, &protos, &p, bank).unwrap();
        let b = similarity_vector(&scaled, &protos, &p, bank).unwrap();
        prop_assert!(max_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn single_space_picks_ignore_shifts(
        d in prop::collection::vec(-1.0f64..1.0, 10),
        shift_a in -3.0f64..3.0,
        shift_c in -3.0f64..3.0,
    ) {
        let mut shifted = d.clone();
        for v in &mut shifted[..5] {
            *v += shift_a;
        }
        for v in &mut shifted[5..] {
            *v += shift_c;
        }
        for mode in [PredictMode::VisionOnly, PredictMode::CrossModalOnly, PredictMode::FusedLogsum] {
            let a = predict(&d, mode, None, 0.07).unwrap();
            let b = predict(&shifted, mode, None, 0.07).unwrap();
            prop_assert_eq!(a.predicted, b.predicted);
        }
    }

    #[test]
    fn naive_bayes_ignores_support_order(
        vectors in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 9),
        query in prop::collection::vec(-1.0f64..1.0, 6),
        rotate in 0usize..9,
    ) {
        let labels: Vec<usize> = (0..9).map(|i| i / 3).collect();
        let nb = NaiveBayes::fit(&vectors, &labels, 3).unwrap();
        let mut v2 = vectors.clone();
        let mut l2 = labels.clone();
        v2.rotate_left(rotate);
        l2.rotate_left(rotate);
        let nb2 = NaiveBayes::fit(&v2, &l2, 3).unwrap();
        let a = nb.log_likelihoods(&query).unwrap();
        let b = nb2.log_likelihoods(&query).unwrap();
        prop_assert!(max_diff(&a, &b) < 1e-9);
        prop_assert!(nb.variances.iter().all(|&v| v >= sgva::infer::NB_VARIANCE_FLOOR));
    }

    #[test]
    fn ci_is_nonnegative_and_shift_invariant(xs in prop::collection::vec(0.0f64..1.0, 2..50), shift in -1.0f64..1.0) {
        let c = ci95(&xs);
        prop_assert!(c >= 0.0);
        let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        prop_assert!((ci95(&shifted) - c).abs() < 1e-9);
    }

    #[test]
    fn config_survives_toml(
        n_way in 2usize..10,
        k_shot in 1usize..6,
        lr in 1e-5f64..1.0,
        tau2 in 0.5f64..30.0,
        kd in any::<bool>(),
        seed in any::<u32>(),
    ) {
        let overrides: Vec<(String, String)> = vec![
            ("sampling.n_way".into(), n_way.to_string()),
            ("sampling.k_shot".into(), k_shot.to_string()),
            ("optim.lr".into(), format!("{lr:?}")),
            ("loss.tau2".into(), format!("{tau2:?}")),
            ("loss.kd".into(), kd.to_string()),
            ("seed".into(), seed.to_string()),
        ];
        let cfg = ExperimentConfig::parse("", &overrides).unwrap();
        prop_assert_eq!(cfg.optim.lr, lr);
        let back = ExperimentConfig::parse(&cfg.to_toml(), &[]).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.content_hash(), cfg.content_hash());
    }
}
