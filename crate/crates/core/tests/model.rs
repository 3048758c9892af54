mod common;

use common::*;
use condaformer::attention::Merge;
use condaformer::harness::suite::{gradcheck_config, random_cloud};
use condaformer::harness::{gen_scene, SceneRecipe};
use condaformer::model::{
    batch_loss_and_grads, fit, predict, train_step, Mixer, ModelConfig, Network, Sample, TrainConfig, Variant,
};
use condaformer::nn::functional::Mode;
use condaformer::nn::{checkpoint, AdamW, Ctx, ParamStore};
use condaformer::{Error, Matrix, PointCloud64};

#[test]
fn default_architecture() {
    let cfg = ModelConfig::default();
    let st = cfg.stages();
    assert_eq!(st.iter().map(|s| s.channels).collect::<Vec<_>>(), [96, 192, 384, 384]);
    assert_eq!(st.iter().map(|s| s.depth).collect::<Vec<_>>(), [2, 2, 6, 2]);
    assert_eq!(st.iter().map(|s| s.heads).collect::<Vec<_>>(), [6, 12, 24, 24]);
    assert!(st.iter().all(|s| s.window_voxels == 8));

    let mut store = ParamStore::<f32>::new(0);
    let net = Network::new(&mut store, &cfg).unwrap();
    for (s, stage) in net.stages.iter().enumerate() {
        assert_eq!(stage.blocks.len(), st[s].depth);
        for b in &stage.blocks {
            let Mixer::Planes { attn, pre_lse, post_lse, .. } = &b.op.mixer else { panic!("planar operator expected") };
            assert!(pre_lse.is_some() && post_lse.is_some());
            for p in &attn.planes {
                assert_eq!(p.width, st[s].channels / 3);
                assert_eq!(p.heads, st[s].heads / 3);
            }
        }
    }
    assert_eq!(net.stages.iter().flat_map(|s| &s.blocks).filter(|b| b.shifted).count(), 1 + 1 + 3 + 1);
}

fn variants() -> Vec<(&'static str, ModelConfig)> {
    let base = ModelConfig::default();
    vec![
        ("cubic", ModelConfig { variant: Variant::Cubic, ..base.clone() }),
        ("daformer", ModelConfig { variant: Variant::DaFormer, ..base.clone() }),
        ("condaformer", base.clone()),
        ("condaformer, separate tables", ModelConfig { rpe_share: false, ..base.clone() }),
        ("condaformer, summed planes", ModelConfig { merge: Merge::NoSplit, ..base.clone() }),
    ]
}

#[test]
fn variant_parameter_counts_match_closed_form() {
    let mut rest = None;
    let mut totals = Vec::new();
    for (name, cfg) in variants() {
        let mut store = ParamStore::<f32>::new(0);
        let net = Network::new(&mut store, &cfg).unwrap();
        for (s, stage) in net.stages.iter().enumerate() {
            let sp = &stage.spec;
            for b in &stage.blocks {
                let want = op_count(sp.channels, sp.window_voxels as usize, cfg.variant, cfg.merge, cfg.rpe_share);
                assert_eq!(b.op.param_count(), want, "{name} stage {}", s + 1);
            }
        }
        assert_eq!(store.trainable_count(), net.param_count(), "{name}");
        let r = net.param_count() - ops_total(&cfg);
        assert_eq!(*rest.get_or_insert(r), r, "{name}: non-attention parameters differ");
        totals.push(net.param_count());
    }
    let tables: usize = ModelConfig::default()
        .stages()
        .iter()
        .map(|s| s.depth * rpe_count(s.window_voxels as usize, s.channels / 3))
        .sum();
    assert_eq!(totals[3] - totals[2], 2 * tables);
    let lse: usize = ModelConfig::default().stages().iter().map(|s| s.depth * 2 * lse_count(s.channels)).sum();
    assert_eq!(totals[2] - totals[1], lse);
}

fn toy_sample(cfg: &ModelConfig, seed: u64) -> (PointCloud64, Sample<f64>) {
    let cloud = random_cloud(120, 6.0, cfg.num_classes, seed);
    let s = Sample::prepare(&cloud, cfg).unwrap();
    (cloud, s)
}

#[test]
fn zeroed_output_layers_make_blocks_identities() {
    for v in Variant::ALL {
        assert_eq!(residual_identity_err(v), 0.0, "{v:?}");
    }
}

#[test]
fn point_permutation_permutes_logits() {
    for v in Variant::ALL {
        let err = permutation_err(v);
        assert!(err <= 1e-9, "{v:?}: {err}");
    }
}

#[test]
fn points_in_one_voxel_share_logits() {
    let cfg = gradcheck_config(Variant::ConDaFormer);
    let (_, sample) = toy_sample(&cfg, 6);
    let (net, store) = Network::build::<f64>(&cfg, 0).unwrap();
    let logits = net.segment(&mut Ctx::new(&store, Mode::Eval), &sample).unwrap();
    let mut shared = 0;
    for i in 0..sample.points() {
        for j in i + 1..sample.points() {
            if sample.point_to_voxel[i] == sample.point_to_voxel[j] {
                assert_eq!(logits.row(i), logits.row(j));
                shared += 1;
            }
        }
    }
    assert!(shared > 0);
}

fn scenes(seeds: std::ops::Range<u64>, cfg: &ModelConfig) -> Vec<Sample<f64>> {
    let recipe = SceneRecipe { points: 400, ..SceneRecipe::default() };
    seeds.map(|s| Sample::prepare(&gen_scene(&recipe.with_seed(s)).unwrap(), cfg).unwrap()).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = ModelConfig::toy(4, Variant::ConDaFormer);
    let batch = scenes(0..2, &cfg);
    let (net, mut store) = Network::build::<f64>(&cfg, 3).unwrap();
    let before = store.clone();
    train_step(&net, &mut store, &AdamW::new(0.0, 0.0), &batch).unwrap();
    for (a, b) in before.blocks().iter().zip(store.blocks()) {
        if a.kind.trainable() {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
    assert!(before.blocks().iter().zip(store.blocks()).any(|(a, b)| !a.kind.trainable() && a.value != b.value));
}

#[test]
fn training_is_deterministic() {
    let cfg = ModelConfig::toy(4, Variant::ConDaFormer);
    let data = scenes(0..3, &cfg);
    let tc = TrainConfig { steps: 4, ..TrainConfig::default() };
    let run = || {
        let (net, mut store) = Network::build::<f64>(&cfg, 9).unwrap();
        let losses = fit(&net, &mut store, &data, &tc, 9, |_, _| {}).unwrap();
        (losses, checkpoint::encode(&store), predict(&net, &store, &data[0]).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|l| l.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|l| l.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert!(a.0[3] < a.0[0]);
}

#[test]
fn unlabeled_batch_has_no_loss() {
    let cfg = gradcheck_config(Variant::DaFormer);
    let cloud = random_cloud(60, 6.0, cfg.num_classes, 1);
    let unlabeled = PointCloud64::new(cloud.positions().to_vec(), cloud.features().clone(), Some(vec![-1; 60])).unwrap();
    let s = Sample::prepare(&unlabeled, &cfg).unwrap();
    let (net, store) = Network::build::<f64>(&cfg, 0).unwrap();
    assert!(matches!(batch_loss_and_grads(&net, &store, &[s]), Err(Error::EmptyLoss)));
}

#[test]
fn too_small_cloud_is_a_scale_error() {
    let cfg = gradcheck_config(Variant::ConDaFormer);
    let cloud = PointCloud64::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], Matrix::filled(2, 3, 0.5), Some(vec![0, 1])).unwrap();
    let s = Sample::prepare(&cloud, &cfg).unwrap();
    let (net, store) = Network::build::<f64>(&cfg, 0).unwrap();
    let err = net.forward(&mut Ctx::new(&store, Mode::Train), &s).unwrap_err();
    assert!(matches!(err, Error::Scale { stage: 2, voxels: 1 }), "{err}");
    assert!(net.segment(&mut Ctx::new(&store, Mode::Eval), &s).is_ok());
}

#[test]
fn single_precision_tracks_double() {
    let cfg = gradcheck_config(Variant::ConDaFormer);
    let (cloud, s64) = toy_sample(&cfg, 7);
    let (net, store64) = Network::build::<f64>(&cfg, 1).unwrap();
    let mut store32 = ParamStore::<f32>::new(1);
    Network::new(&mut store32, &cfg).unwrap();
    checkpoint::decode_into(&checkpoint::encode(&store64), &mut store32).unwrap();
    let cloud32 = condaformer::PointCloud32::new(
        cloud.positions().iter().map(|p| p.map(|v| v as f32)).collect(),
        cloud.features().cast(),
        cloud.labels().map(<[i64]>::to_vec),
    )
    .unwrap();
    let s32 = Sample::prepare(&cloud32, &cfg).unwrap();
    let a = net.segment(&mut Ctx::new(&store64, Mode::Eval), &s64).unwrap();
    let b = net.segment(&mut Ctx::new(&store32, Mode::Eval), &s32).unwrap().cast::<f64>();
    let scale = a.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_abs_diff(&a, &b) <= 1e-4 * scale.max(1.0));
}

#[test]
fn checkpoint_reload_reproduces_predictions() {
    let cfg = ModelConfig::toy(4, Variant::Cubic);
    let data = scenes(10..11, &cfg);
    let (net, store) = Network::build::<f64>(&cfg, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&store, &path).unwrap();
    let mut fresh = ParamStore::<f64>::new(0);
    let net2 = Network::new(&mut fresh, &cfg).unwrap();
    checkpoint::load(&path, &mut fresh).unwrap();
    let a = net.segment(&mut Ctx::new(&store, Mode::Eval), &data[0]).unwrap();
    let b = net2.segment(&mut Ctx::new(&fresh, Mode::Eval), &data[0]).unwrap();
    assert_eq!(a, b);
}
