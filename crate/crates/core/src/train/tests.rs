use proptest::prelude::*;

use super::*;
use crate::checkpoint::ModelKind;
use crate::eval::validation_objective;
use crate::heads::DistributionParams;
use crate::hivae::HivaeConfig;
use crate::mae::MaeConfig;
use crate::model::Imputer;
use crate::schema::{compute_train_stats, AttributeSpec, ColumnStats, DatasetSchema, TrainStats, VariableType};
use crate::synth::{carve_blocks, sample_population, Block, BlockDesign, CopulaSpec, Marginal};

fn mixed_spec(seed: u64) -> CopulaSpec {
    let types = [
        Marginal::Real { loc: 1.0, scale: 2.0 },
        Marginal::Real { loc: -3.0, scale: 0.5 },
        Marginal::Categorical { probs: vec![0.2, 0.5, 0.3] },
        Marginal::Ordinal { probs: vec![0.1, 0.4, 0.3, 0.2] },
        Marginal::Count { rate: 2.5 },
        Marginal::Positive { log_loc: 0.5, log_scale: 0.3 },
    ];
    let attrs = types.iter().enumerate().map(|(j, m)| AttributeSpec::new(format!("v{j}"), m.var_type())).collect();
    let schema = DatasetSchema::new(1, attrs).unwrap();
    let p = types.len();
    let sigma = (0..p).map(|i| (0..p).map(|j| if i == j { 1.0 } else { 0.4 }).collect()).collect();
    CopulaSpec::new(schema, sigma, types.to_vec(), seed).unwrap()
}

/// Two overlapping sources over the mixed schema.
fn sources(n_a: usize, n_b: usize, seed: u64) -> (DatasetSchema, Vec<HeteroTable>) {
    let spec = mixed_spec(seed);
    let design = BlockDesign {
        blocks: vec![
            Block { name: "A".into(), rows: n_a, columns: vec![0, 1, 2, 3] },
            Block { name: "B".into(), rows: n_b, columns: vec![0, 3, 4, 5] },
        ],
    };
    let pop = sample_population(&spec, design.total_rows()).unwrap();
    (spec.schema.clone(), carve_blocks(&pop, &design).unwrap())
}

fn stats_of(schema: &DatasetSchema, tables: &[HeteroTable]) -> TrainStats {
    compute_train_stats(&merge_tables(tables, schema).unwrap(), schema).unwrap()
}

fn tiny(kind: ModelKind) -> ModelConfig {
    match kind {
        ModelKind::Hivae => ModelConfig::Hivae(HivaeConfig {
            d_s: 2,
            d_z: 3,
            d_y_shared: 6,
            d_y_specific: 2,
            hidden: vec![16],
            ..Default::default()
        }),
        ModelKind::Mae => ModelConfig::Mae(MaeConfig {
            d_model: 8,
            heads: 2,
            ffn_hidden: 16,
            encoder_blocks: 1,
            decoder_blocks: 1,
            d_y: 8,
        }),
    }
}

fn quick(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        mask_ratio: 0.5,
        batch_size: 32,
        epochs: 3,
        stage2_epochs: if kind == ModelKind::Mae { 1 } else { 0 },
        learning_rate: 1e-3,
        ..TrainConfig::default_for(&tiny(kind))
    }
}

fn full_rows(n: usize, p: usize) -> Vec<Vec<Cell>> {
    (0..n).map(|i| (0..p).map(|j| Some((i * p + j) as f64)).collect()).collect()
}

#[test]
fn default_schedules_match_the_published_settings() {
    let h = TrainConfig::hivae();
    assert_eq!((h.mask_ratio, h.batch_size, h.epochs, h.patience), (0.99, 1024, 1000, Some(50)));
    assert_eq!((h.learning_rate, h.weight_decay, h.anneal_end_epoch), (4.6e-5, 0.097, 100));
    assert_eq!((h.beta_s_max, h.beta_z_max), (0.0002, 0.00007));
    let m = TrainConfig::mae();
    assert_eq!((m.mask_ratio, m.batch_size, m.epochs, m.stage2_epochs), (0.99, 32, 300, 10));
    assert_eq!((m.learning_rate, m.weight_decay), (5e-4, 2.5e-4));
    h.validate().unwrap();
    m.validate().unwrap();
}

#[test]
fn kl_weights_start_at_zero_and_cap_at_epoch_100() {
    let cfg = TrainConfig::hivae();
    assert_eq!(cfg.betas(0), (0.0, 0.0));
    assert!((cfg.betas(50).0 - 0.0001).abs() < 1e-18);
    assert_eq!(cfg.betas(100), (0.0002, 0.00007));
    assert_eq!(cfg.betas(700), cfg.betas(100));
    let linear = TrainConfig { beta_schedule: BetaSchedule::Linear, ..cfg };
    assert!((linear.betas(500).0 - 0.0001).abs() < 1e-18);
    assert_eq!(linear.betas(1000).0, 0.0002);
}

#[test]
fn mask_ratio_bounds_depend_on_the_loss_mode() {
    let masked = TrainConfig { mask_ratio: 0.0, ..TrainConfig::hivae() };
    assert!(masked.validate().is_err());
    let recon = TrainConfig { loss_mode: LossMode::Reconstruction, ..masked };
    recon.validate().unwrap();
    assert!(TrainConfig { mask_ratio: 1.0, ..recon }.validate().is_err());
}

#[test]
fn masked_fraction_concentrates_at_alpha() {
    let rows = full_rows(1000, 1000);
    let refs: Vec<&[Cell]> = rows.iter().map(|r| r.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let b = mask_augment(refs, &vec![true; 1000], 0.99, LossMode::Masked, None, &mut rng);
    let frac = b.target_count() as f64 / 1e6;
    assert!((frac - 0.99).abs() <= 0.001, "masked fraction {frac}");
    assert_eq!(b.visible.iter().filter(|v| **v).count() + b.target_count(), 1_000_000);
}

#[test]
fn tiny_alpha_leaves_the_input_untouched() {
    let rows = full_rows(50, 7);
    let refs: Vec<&[Cell]> = rows.iter().map(|r| r.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = mask_augment(refs, &[true; 7], 1e-12, LossMode::Masked, None, &mut rng);
    assert!(b.visible.iter().all(|&v| v));
    assert_eq!(b.target_count(), 0);
}

#[test]
fn seeded_plans_repeat_and_consecutive_plans_differ() {
    let rows = full_rows(20, 50);
    let plan = |rng: &mut ChaCha8Rng, alpha| {
        let refs: Vec<&[Cell]> = rows.iter().map(|r| r.as_slice()).collect();
        mask_augment(refs, &[true; 50], alpha, LossMode::Masked, None, rng).targets
    };
    let mut a = ChaCha8Rng::seed_from_u64(3);
    let mut b = ChaCha8Rng::seed_from_u64(3);
    let first = plan(&mut a, 0.99);
    assert_eq!(first, plan(&mut b, 0.99));
    // 1000 cells at 0.99: two draws agree with probability 0.9802^1000 < 1e-8
    assert_ne!(first, plan(&mut a, 0.99));

    let hundred = full_rows(1, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = || {
        let refs: Vec<&[Cell]> = hundred.iter().map(|r| r.as_slice()).collect();
        mask_augment(refs, &[true; 100], 0.5, LossMode::Masked, None, &mut rng).targets
    };
    assert_ne!(draw(), draw());
}

#[test]
fn masked_cells_enter_the_model_as_missing() {
    let (schema, tables) = sources(40, 40, 1);
    let merged = merge_tables(&tables, &schema).unwrap();
    let stats = stats_of(&schema, &tables);
    let codec = crate::heads::Codec::new(&schema, &stats).unwrap();
    let refs: Vec<&[Cell]> = merged.rows().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = mask_augment(refs.clone(), &[true; 6], 0.5, LossMode::Masked, None, &mut rng);
    let hidden: Vec<Vec<Cell>> = (0..batch.n_rows())
        .map(|i| (0..6).map(|j| if batch.is_visible(i, j) { refs[i][j] } else { None }).collect())
        .collect();
    let via_mask = codec.encode_rows(refs.iter().copied(), Some(&batch.visible));
    let via_none = codec.encode_rows(hidden.iter().map(|r| r.as_slice()), None);
    assert_eq!(via_mask, via_none);
}

#[test]
fn reconstruction_targets_the_visible_cells() {
    let rows = [vec![Some(1.0), None, Some(2.0)], vec![Some(3.0), Some(4.0), Some(5.0)]];
    let refs: Vec<&[Cell]> = rows.iter().map(|r| r.as_slice()).collect();
    let fixed = vec![true, false, false, false, true, false];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = mask_augment(refs.clone(), &[true; 3], 0.5, LossMode::Reconstruction, Some(&fixed), &mut rng);
    assert_eq!(b.targets, vec![false, false, true, true, false, true]);
    let m = mask_augment(refs, &[true, true, false], 0.5, LossMode::Masked, Some(&fixed), &mut rng);
    assert_eq!(m.targets, vec![true, false, false, false, true, false]);
    assert!(!m.visible[2] && !m.visible[5]);
}

fn hivae_parts(model: &HivaeModel, batch: &MaskedBatch<'_>, bs: f64, bz: f64) -> (f64, f64, f64, f64) {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let parts = model.loss_graph(&mut g, &p, batch, bs, bz, &mut rng).unwrap();
    let v = |x| g.value(x).item();
    (v(parts.total), v(parts.nll), v(parts.kl_s), v(parts.kl_z))
}

fn hivae_fixture() -> (HivaeModel, Vec<Vec<Cell>>) {
    let (schema, tables) = sources(30, 30, 2);
    let stats = stats_of(&schema, &tables);
    let ModelConfig::Hivae(cfg) = tiny(ModelKind::Hivae) else { unreachable!() };
    let model = HivaeModel::new(&schema, &stats, cfg, 5).unwrap();
    let merged = merge_tables(&tables, &schema).unwrap();
    (model, merged.rows().map(|r| r.to_vec()).collect())
}

#[test]
fn hivae_loss_is_likelihood_plus_weighted_kl() {
    let (model, rows) = hivae_fixture();
    let refs: Vec<&[Cell]> = rows.iter().map(|r| r.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = mask_augment(refs, &[true; 6], 0.7, LossMode::Masked, None, &mut rng);
    let (total, nll, kl_s, kl_z) = hivae_parts(&model, &batch, 0.3, 0.2);
    assert!(nll > 0.0 && kl_s >= -1e-9 && kl_z >= -1e-9);
    assert!((total - (nll + 0.3 * kl_s + 0.2 * kl_z)).abs() <= 1e-9 * total.abs().max(1.0));
    let (bare, bare_nll, _, _) = hivae_parts(&model, &batch, 0.0, 0.0);
    assert_eq!(bare, bare_nll);
    assert_eq!(bare_nll, nll);

    let cfg = TrainConfig::hivae();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert_eq!(hivae_loss(&model, &batch, 0, &cfg, &mut rng).unwrap(), nll);
}

#[test]
fn empty_target_set_leaves_only_the_kl_terms() {
    let (model, rows) = hivae_fixture();
    let refs: Vec<&[Cell]> = rows.iter().map(|r| r.as_slice()).collect();
    let batch = MaskedBatch { targets: vec![false; rows.len() * 6], ..MaskedBatch::unmasked(refs, 6) };
    let (total, nll, kl_s, kl_z) = hivae_parts(&model, &batch, 0.5, 2.0);
    assert_eq!(nll, 0.0);
    assert_eq!(total, 0.5 * kl_s + 2.0 * kl_z);
}

#[test]
fn one_hot_categorical_prediction_costs_nothing() {
    let head = crate::heads::ColumnHead::new(
        VariableType::Categorical(3),
        ColumnStats::Categorical { probs: vec![0.3, 0.3, 0.4] },
    )
    .unwrap();
    assert_eq!(head.nll(&[0.0, 1e3, 0.0], head.target(2.0), None), 0.0);
    assert_eq!(DistributionParams::Categorical { pi: vec![0.0, 1.0, 0.0] }.log_prob(2.0).unwrap(), 0.0);
}

fn micro_mae() -> (MaeModel, Vec<Vec<Cell>>) {
    let schema = DatasetSchema::new(
        1,
        vec![
            AttributeSpec::new("r", VariableType::Real),
            AttributeSpec::new("p", VariableType::Positive),
            AttributeSpec::new("n", VariableType::Count),
            AttributeSpec::new("c", VariableType::Categorical(3)),
        ],
    )
    .unwrap();
    let stats = TrainStats {
        schema_version: 1,
        columns: vec![
            ColumnStats::Real { mean: 0.5, std: 2.0 },
            ColumnStats::Positive { log_mean: 0.3, log_std: 0.7 },
            ColumnStats::Count { mean: 2.0, log1p_mean: 1.0, log1p_std: 0.5 },
            ColumnStats::Categorical { probs: vec![0.2, 0.3, 0.5] },
        ],
    };
    let cfg = MaeConfig { d_model: 8, heads: 2, ffn_hidden: 12, encoder_blocks: 1, decoder_blocks: 1, d_y: 6 };
    let mut model = MaeModel::new(&schema, &stats, cfg, 9).unwrap();
    model.mark_trained();
    let rows = vec![
        vec![Some(1.5), Some(2.0), Some(3.0), Some(2.0)],
        vec![Some(-0.7), None, Some(0.0), Some(3.0)],
        vec![Some(4.0), Some(0.6), Some(1.0), None],
    ];
    (model, rows)
}

#[test]
fn mae_loss_matches_a_per_cell_log_prob_oracle() {
    let (model, rows) = micro_mae();
    let refs: Vec<&[Cell]> = rows.iter().map(|r| r.as_slice()).collect();
    let fixed = vec![true, false, true, false, false, false, true, true, false, true, false, false];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = mask_augment(refs.clone(), &[true; 4], 0.5, LossMode::Masked, Some(&fixed), &mut rng);
    let loss = mae_loss(&model, &batch).unwrap();

    let mut oracle = 0.0;
    for i in 0..3 {
        let shown: Vec<Cell> = (0..4).map(|j| if batch.is_visible(i, j) { rows[i][j] } else { None }).collect();
        let gamma = model.predict(&[&shown]).unwrap().remove(0);
        for j in 0..4 {
            if !batch.is_target(i, j) {
                continue;
            }
            let x = rows[i][j].unwrap();
            // the loss scores continuous columns on the standardized scale
            let jacobian = match &model.stats().columns[j] {
                ColumnStats::Real { std, .. } => -std.ln(),
                ColumnStats::Positive { log_std, .. } => -log_std.ln() - x.ln(),
                _ => 0.0,
            };
            oracle += -gamma[j].log_prob(x).unwrap() + jacobian;
        }
    }
    assert!(batch.target_count() == 5);
    assert!((loss - oracle).abs() < 1e-9 * oracle.abs().max(1.0), "{loss} vs {oracle}");
}

#[test]
fn doubling_the_batch_doubles_the_loss() {
    let (model, rows) = micro_mae();
    let fixed = vec![true, false, true, false, false, false, true, true, false, true, false, false];
    let once: Vec<&[Cell]> = rows.iter().map(|r| r.as_slice()).collect();
    let twice: Vec<&[Cell]> = once.iter().chain(once.iter()).copied().collect();
    let doubled: Vec<bool> = fixed.iter().chain(fixed.iter()).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = mae_loss(&model, &mask_augment(once, &[true; 4], 0.5, LossMode::Masked, Some(&fixed), &mut rng)).unwrap();
    let b =
        mae_loss(&model, &mask_augment(twice, &[true; 4], 0.5, LossMode::Masked, Some(&doubled), &mut rng)).unwrap();
    assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs(), "{b} vs 2 x {a}");
}

#[test]
fn flat_history_stops_after_patience() {
    assert_eq!(early_stop(&[1.0; 51], 50), EarlyStop { stop: true, best: 0 });
    assert_eq!(early_stop(&[1.0; 50], 50), EarlyStop { stop: false, best: 0 });
    let improving: Vec<f64> = (0..1000).map(|t| 1.0 / (t + 1) as f64).collect();
    for t in 1..=improving.len() {
        assert!(!early_stop(&improving[..t], 50).stop);
    }
}

fn reference_scan(history: &[f64], patience: usize) -> Option<(usize, usize)> {
    let mut best = f64::INFINITY;
    let mut best_at = 0;
    let mut since = 0;
    for (t, &v) in history.iter().enumerate() {
        if v < best {
            best = v;
            best_at = t;
            since = 0;
        } else {
            since += 1;
        }
        if since >= patience {
            return Some((t, best_at));
        }
    }
    None
}

proptest! {
    #[test]
    fn early_stop_replays_a_reference_scan(
        history in proptest::collection::vec(0.0f64..1.0, 1..120),
        patience in 1usize..20,
    ) {
        let first_stop = (1..=history.len()).find(|&t| early_stop(&history[..t], patience).stop);
        match reference_scan(&history, patience) {
            Some((t, best)) => {
                prop_assert_eq!(first_stop, Some(t + 1));
                prop_assert_eq!(early_stop(&history[..=t], patience).best, best);
            }
            None => prop_assert_eq!(first_stop, None),
        }
    }

    #[test]
    fn masking_never_touches_missing_or_inactive_cells(
        seed in 0u64..500,
        alpha in 0.01f64..0.99,
    ) {
        let rows: Vec<Vec<Cell>> = (0..8)
            .map(|i| (0..5).map(|j| ((i + j) % 3 != 0).then_some(1.0)).collect())
            .collect();
        let refs: Vec<&[Cell]> = rows.iter().map(|r| r.as_slice()).collect();
        let active = [true, false, true, true, true];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = mask_augment(refs, &active, alpha, LossMode::Masked, None, &mut rng);
        for i in 0..8 {
            for j in 0..5 {
                let live = rows[i][j].is_some() && active[j];
                prop_assert!(live || (!b.is_visible(i, j) && !b.is_target(i, j)));
                prop_assert!(!(b.is_visible(i, j) && b.is_target(i, j)));
            }
        }
    }
}

fn new_model(kind: ModelKind, schema: &DatasetSchema, tables: &[HeteroTable]) -> Model {
    Model::new(schema, &stats_of(schema, tables), &tiny(kind), 3).unwrap()
}

#[test]
fn training_is_bit_reproducible() {
    let (schema, tables) = sources(60, 40, 4);
    for kind in [ModelKind::Hivae, ModelKind::Mae] {
        let cfg = quick(kind);
        let mut a = new_model(kind, &schema, &tables);
        let mut b = new_model(kind, &schema, &tables);
        let ha = train(&mut a, &tables, &tables, &cfg, None).unwrap();
        let hb = train(&mut b, &tables, &tables, &cfg, None).unwrap();
        assert_eq!(ha, hb);
        assert!(a.params().iter().zip(b.params().iter()).all(|(x, y)| x == y));
        let row = vec![Some(1.0), None, Some(2.0), None, None, None];
        assert_eq!(a.predict(&[&row]).unwrap(), b.predict(&[&row]).unwrap());
    }
}

#[test]
fn mae_history_records_both_stages() {
    let (schema, tables) = sources(50, 30, 5);
    let mut model = new_model(ModelKind::Mae, &schema, &tables);
    let cfg = TrainConfig { epochs: 3, stage2_epochs: 2, ..quick(ModelKind::Mae) };
    let h = train(&mut model, &tables, &[], &cfg, None).unwrap();
    assert_eq!((h.stage_epochs(1), h.stage_epochs(2)), (3, 2));
    assert_eq!(h.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    assert!(h.records.iter().all(|r| r.attention_pairs > 0 && r.train_loss.is_finite()));
    assert_eq!(h.best_epoch, Some(4));
    assert_eq!(h.attention_flops(8), h.attention_pairs() as f64 * 32.0);
}

#[test]
fn single_fully_observed_source_makes_the_stages_equivalent() {
    let spec = mixed_spec(6);
    let pop = sample_population(&spec, 70).unwrap();
    let tables = vec![pop.with_tag("only")];
    let schema = spec.schema.clone();
    let cfg = quick(ModelKind::Mae);
    let mut first = new_model(ModelKind::Mae, &schema, &tables);
    let mut second = new_model(ModelKind::Mae, &schema, &tables);
    train(&mut first, &tables, &[], &TrainConfig { epochs: 2, stage2_epochs: 0, ..cfg.clone() }, None).unwrap();
    train(&mut second, &tables, &[], &TrainConfig { epochs: 0, stage2_epochs: 2, ..cfg }, None).unwrap();
    assert!(first.params().iter().zip(second.params().iter()).all(|(x, y)| x == y));
}

#[test]
fn model_keeps_the_best_validated_parameters() {
    let (schema, tables) = sources(60, 40, 7);
    let cfg = TrainConfig { epochs: 6, patience: Some(2), ..quick(ModelKind::Hivae) };
    let mut model = new_model(ModelKind::Hivae, &schema, &tables);
    let h = train(&mut model, &tables, &tables, &cfg, None).unwrap();
    let objectives: Vec<f64> = h.records.iter().filter_map(|r| r.val_objective).collect();
    let verdict = early_stop(&objectives, 2);
    assert_eq!(h.best_epoch, Some(verdict.best));
    assert_eq!(h.stopped_early, verdict.stop);
    let again = validation_objective(&model, &tables, cfg.mask_ratio, cfg.seed ^ VALIDATION_SALT).unwrap();
    assert_eq!(Some(again), h.best_objective);
}

#[test]
fn run_directory_holds_config_metrics_and_checkpoints() {
    let (schema, tables) = sources(40, 20, 8);
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(ModelKind::Hivae);
    let mut model = new_model(ModelKind::Hivae, &schema, &tables);
    train(&mut model, &tables, &tables, &cfg, Some(dir.path())).unwrap();

    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(config["model_kind"], "hivae");
    assert_eq!(config["train"]["epochs"], 3);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_objective,beta_s,beta_z");
    assert_eq!(lines.len(), 4);
    for name in ["last.json", "best.json"] {
        let m = Checkpoint::load(&dir.path().join(name)).unwrap().to_model().unwrap();
        assert_eq!(m.kind(), ModelKind::Hivae);
    }
    let best = Checkpoint::load(&dir.path().join("best.json")).unwrap().to_model().unwrap();
    assert!(best.params().iter().zip(model.params().iter()).all(|(x, y)| x == y));
}

#[test]
fn reconstruction_without_kl_decreases_the_loss() {
    let (schema, tables) = sources(300, 200, 9);
    let cfg = TrainConfig {
        mask_ratio: 0.0,
        loss_mode: LossMode::Reconstruction,
        beta_s_max: 0.0,
        beta_z_max: 0.0,
        batch_size: 50,
        epochs: 20,
        learning_rate: 1e-3,
        weight_decay: 0.0,
        ..TrainConfig::hivae()
    };
    let mut model = new_model(ModelKind::Hivae, &schema, &tables);
    let h = train(&mut model, &tables, &[], &cfg, None).unwrap();
    let losses: Vec<f64> = h.records.iter().map(|r| r.train_loss).collect();
    assert_eq!(losses.len(), 20);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn fixed_mask_pattern_is_reused_every_epoch() {
    let (schema, tables) = sources(40, 20, 10);
    let cfg = TrainConfig { mask_augmentation: false, ..quick(ModelKind::Hivae) };
    let mut a = new_model(ModelKind::Hivae, &schema, &tables);
    let mut b = new_model(ModelKind::Hivae, &schema, &tables);
    let ha = train(&mut a, &tables, &[], &cfg, None).unwrap();
    let hb = train(&mut b, &tables, &[], &TrainConfig { mask_augmentation: true, ..cfg }, None).unwrap();
    assert_ne!(ha, hb);
}
