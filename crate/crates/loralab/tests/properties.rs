//! Randomized property tests for the structural invariants: transparency of
//! fresh attachments, exact gating and scaling laws of the filter, merge
//! equivalence, batch equivariance, and the config/checkpoint round trips.

use proptest::collection::vec as pvec;
use proptest::prelude::*;

use loralab::checkpoint::{load_checkpoint, save_checkpoint};
use loralab::rng::stream;
use loralab::runspec::RunSpec;
use loralab::task::{SyntheticTask, TaskKind};
use loralab::train::{AdamParams, OptimizerKind, Precision, TrainConfig};
use loralab::{
    AdaptedModel, AdapterPlacement, FilterScope, FilterSite, Graph, LoraAdapter, MatrixName,
    ModelConfig, Similarity, TaskAwareFilter, Tensor,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// clamp01 is exact at and beyond its boundaries, never merely close.
    #[test]
    fn clamp01_lands_exactly_inside_the_unit_interval(
        values in pvec(-1e6f64..1e6, 1..48),
    ) {
        let g = Graph::new();
        let t = Tensor::from_vec(&[values.len()], values.clone()).unwrap();
        let clamped = g.clamp01(&t).unwrap().to_vec();
        for (raw, c) in values.iter().zip(&clamped) {
            if *raw <= 0.0 {
                prop_assert_eq!(*c, 0.0);
            } else if *raw >= 1.0 {
                prop_assert_eq!(*c, 1.0);
            } else {
                prop_assert_eq!(*c, *raw);
            }
        }
    }

    /// Reassociating a single-precision matrix chain moves the result by
    /// no more than 1e-5.
    #[test]
    fn matmul_association_error_stays_bounded(
        a in pvec(-1.0f32..1.0, 64),
        b in pvec(-1.0f32..1.0, 64),
        c in pvec(-1.0f32..1.0, 64),
    ) {
        let g = Graph::new();
        let a = Tensor::from_vec(&[8, 8], a).unwrap();
        let b = Tensor::from_vec(&[8, 8], b).unwrap();
        let c = Tensor::from_vec(&[8, 8], c).unwrap();
        let left = g.matmul(&g.matmul(&a, &b).unwrap(), &c).unwrap();
        let right = g.matmul(&a, &g.matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-5);
    }

    /// Tensors the loss never touches end the backward pass without a
    /// gradient.
    #[test]
    fn unused_tensors_get_no_gradient(
        used in pvec(-2.0f64..2.0, 4),
        unused in pvec(-2.0f64..2.0, 6),
    ) {
        let g = Graph::new();
        let x = Tensor::from_vec(&[4], used.clone()).unwrap().trained();
        let w = Tensor::from_vec(&[4], used).unwrap().trained();
        let bystander = Tensor::from_vec(&[6], unused).unwrap().trained();
        let loss = g.sum_all(&g.mul(&x, &w).unwrap()).unwrap();
        g.backward(&loss).unwrap();
        prop_assert!(x.grad().is_some());
        prop_assert!(bystander.grad().is_none());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// A freshly built adapter computes exactly the base product.
    #[test]
    fn fresh_adapters_are_transparent(
        m in 2usize..10,
        n in 2usize..10,
        cols in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = stream(seed, "prop.adapter");
        let w0 = Tensor::<f64>::randn(&mut rng, &[m, n], 1.0);
        let adapter = LoraAdapter::new(w0.clone(), m.min(n), 16.0, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&mut rng, &[n, cols], 1.0);
        let g = Graph::new();
        let adapted = adapter.forward(&g, &x).unwrap().to_vec();
        let base = g.matmul(&w0, &x).unwrap().to_vec();
        prop_assert_eq!(adapted, base);
    }

    /// A freshly built filter is the identity on every input.
    #[test]
    fn fresh_filters_are_transparent(
        d in 1usize..16,
        rows in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = stream(seed, "prop.filter");
        let rank = 1 + (seed as usize % d.max(1));
        let filter = TaskAwareFilter::<f64>::new(d, rank.min(d), Similarity::Cosine, &mut rng).unwrap();
        let h: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g = Graph::new();
        let out = filter.apply(&g, &Tensor::from_vec(&[rows, d], h.clone()).unwrap()).unwrap();
        prop_assert_eq!(out.to_vec(), h);
    }

    /// After training-like edits to B, multiplying by the merged weight
    /// reproduces the two-path forward within single-precision tolerance.
    #[test]
    fn merged_weights_reproduce_the_adapter_forward(
        m in 2usize..10,
        n in 2usize..10,
        cols in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = stream(seed, "prop.merge");
        let rank = 1 + (seed as usize % m.min(n));
        let w0 = Tensor::<f32>::randn(&mut rng, &[m, n], 0.7);
        let mut adapter = LoraAdapter::new(w0, rank, 16.0, &mut rng).unwrap();
        adapter.matrix_b().modify(|bv| {
            for v in bv.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        });
        let x = Tensor::<f32>::randn(&mut rng, &[n, cols], 1.0);

        let g = Graph::new();
        let unmerged = adapter.forward(&g, &x).unwrap();
        let w_ft = adapter.merge().unwrap();
        let merged = g.matmul(&w_ft, &x).unwrap();
        prop_assert!(merged.max_abs_diff(&unmerged) <= 1e-5);
    }

    /// The filter's additive delta scales linearly under positive scaling
    /// of the token row.
    #[test]
    fn filter_delta_is_positively_homogeneous(
        d in 2usize..16,
        c in prop_oneof![Just(0.5f64), Just(2.0), Just(10.0), 0.1f64..20.0],
        seed in any::<u64>(),
    ) {
        let mut rng = stream(seed, "prop.homogeneity");
        let rank = 1 + (seed as usize % d);
        let filter = TaskAwareFilter::<f64>::new(d, rank, Similarity::Cosine, &mut rng).unwrap();
        filter.t_up().modify(|v| {
            for x in v.iter_mut() {
                *x = rng.random_range(-0.8..0.8);
            }
        });
        let h: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();

        let delta = |input: Vec<f64>| {
            let g = Graph::new();
            let out = filter.apply(&g, &Tensor::from_vec(&[1, d], input.clone()).unwrap()).unwrap();
            out.to_vec().iter().zip(&input).map(|(o, i)| o - i).collect::<Vec<f64>>()
        };
        let base = delta(h.clone());
        let scaled = delta(h.iter().map(|v| v * c).collect());
        for (s, b) in scaled.iter().zip(&base) {
            let expect = c * b;
            if expect.abs() > 1e-9 {
                let rel = (s - expect).abs() / expect.abs().max(s.abs());
                prop_assert!(rel <= 1e-5, "rel {rel} at c={c}");
            }
        }
    }

    /// Token rows anti-aligned with the task vector pass through the
    /// filter exactly unchanged.
    #[test]
    fn anti_aligned_rows_pass_through_exactly(
        d in 2usize..16,
        seed in any::<u64>(),
    ) {
        let mut rng = stream(seed, "prop.gate");
        let filter = TaskAwareFilter::<f64>::new(d, 1 + (seed as usize % d), Similarity::Cosine, &mut rng).unwrap();
        filter.t_up().modify(|v| v.iter_mut().for_each(|x| *x = 0.3));
        let t = filter.task_vector().to_vec();
        let mut h: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let dot: f64 = h.iter().zip(&t).map(|(a, b)| a * b).sum();
        if dot > 0.0 {
            h.iter_mut().for_each(|v| *v = -*v);
        }
        let g = Graph::new();
        let out = filter.apply(&g, &Tensor::from_vec(&[1, d], h.clone()).unwrap()).unwrap();
        prop_assert_eq!(out.to_vec(), h);
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        vocab_size: 16,
        max_seq_len: 8,
        num_classes: 3,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Each sequence is encoded independently, so permuting the batch
    /// permutes the logit rows bit-for-bit.
    #[test]
    fn permuting_the_batch_permutes_the_logits(
        batch in pvec(pvec(0usize..16, 1..8), 2..5),
        seed in any::<u64>(),
    ) {
        let config = small_config();
        let placement = AdapterPlacement::lora_on([MatrixName::WO], 2)
            .with_filters_on_all_layers(1, 4);
        let model = AdaptedModel::<f32>::build(&config, &placement, seed).unwrap();

        let mut rng = stream(seed, "prop.permutation");
        let mut order: Vec<usize> = (0..batch.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let permuted: Vec<Vec<usize>> = order.iter().map(|&i| batch[i].clone()).collect();

        let g = Graph::new();
        let straight = model.forward(&g, &batch).unwrap().to_vec();
        let g = Graph::new();
        let shuffled = model.forward(&g, &permuted).unwrap().to_vec();

        let classes = config.num_classes;
        for (row, &src) in order.iter().enumerate() {
            let got = &shuffled[row * classes..(row + 1) * classes];
            let want = &straight[src * classes..(src + 1) * classes];
            prop_assert_eq!(got, want);
        }
    }
}

/// Strategy for run specs that pass validation: dimensions agree, ranks fit
/// the adapted matrices, and the task fits the model.
fn valid_runspec() -> impl Strategy<Value = RunSpec> {
    let model = (1usize..=3, 1usize..=3, 1usize..=4, 2usize..=4).prop_map(
        |(layers, width_per_head, heads, classes)| ModelConfig {
            num_layers: layers,
            hidden_dim: 4 * width_per_head * heads,
            num_heads: heads,
            ffn_dim: 8 * width_per_head,
            vocab_size: 32,
            max_seq_len: 12,
            num_classes: classes,
        },
    );
    let placement = (0u8..64, 1usize..=4, 0.5f64..32.0, proptest::bool::ANY, 1usize..=4).prop_map(
        |(mask, rank, alpha, filters_everywhere, filter_rank)| {
            let targets = MatrixName::ALL
                .into_iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, name)| name)
                .collect();
            AdapterPlacement {
                lora_targets: targets,
                lora_rank: rank,
                lora_alpha: (alpha * 4.0).round() / 4.0,
                filter_layers: if filters_everywhere { [0].into() } else { Default::default() },
                filter_rank,
                filter_site: FilterSite::PostFfn,
                filter_scope: FilterScope::Shared,
                similarity: Similarity::Dot,
            }
        },
    );
    let task = (2usize..=4, 4usize..=12, 8usize..=64).prop_map(|(classes, seq_len, size)| {
        SyntheticTask {
            kind: TaskKind::NeedleToken,
            seq_len,
            vocab_size: 32,
            num_classes: classes,
            train_size: size,
            val_size: size / 2 + 1,
        }
    });
    let train = (0usize..=5, 1usize..=4, 1usize..=4, any::<u64>(), proptest::bool::ANY).prop_map(
        |(steps, batch, eval_every, seed, adam)| TrainConfig {
            steps,
            batch_size: batch,
            learning_rate: 0.0025,
            optimizer: if adam {
                OptimizerKind::Adam(AdamParams::default())
            } else {
                OptimizerKind::Sgd
            },
            seed,
            eval_every,
            precision: if adam { Precision::Single } else { Precision::Double },
        },
    );
    (model, placement, task, train).prop_map(|(model, placement, mut task, train)| {
        task.num_classes = model.num_classes;
        let spec = RunSpec { model, placement, task, train, sweep: None };
        // Ranks are generated small enough for every matrix; filters use
        // layer 0 which always exists. Re-check so a future constraint
        // change fails loudly here instead of inside the property.
        spec.validate().expect("strategy produced an invalid spec");
        spec
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    /// Echoing a resolved config and re-parsing it reproduces the exact
    /// run description.
    #[test]
    fn resolved_configs_are_fixed_points(spec in valid_runspec()) {
        let echo = spec.resolved().unwrap();
        let reparsed = RunSpec::parse(&echo, "echo").unwrap();
        prop_assert_eq!(spec, reparsed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Saving and loading a model reproduces every tensor bit-for-bit.
    #[test]
    fn checkpoints_round_trip_bitwise(
        mask in 0u8..64,
        rank in 1usize..=2,
        seed in any::<u64>(),
    ) {
        let config = small_config();
        let targets: std::collections::BTreeSet<MatrixName> = MatrixName::ALL
            .into_iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, name)| name)
            .collect();
        let placement = AdapterPlacement {
            lora_targets: targets,
            lora_rank: rank,
            filter_layers: [0].into(),
            filter_rank: 3,
            ..AdapterPlacement::default()
        };
        let model = AdaptedModel::<f32>::build(&config, &placement, seed).unwrap();

        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model).unwrap();
        let (loaded, manifest) = load_checkpoint::<f32>(&path).unwrap();
        prop_assert_eq!(manifest.seed, seed);

        let originals = model.named_tensors();
        let reloaded = loaded.named_tensors();
        prop_assert_eq!(originals.len(), reloaded.len());
        for (a, b) in originals.iter().zip(&reloaded) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(a.trainable, b.trainable);
            prop_assert_eq!(a.tensor.data_bits(), b.tensor.data_bits(), "tensor {}", a.name);
        }
    }
}
