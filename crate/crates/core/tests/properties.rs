mod common;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rsqair::air::geometric_logp;
use rsqair::glimpse::where_to_affine;
use rsqair::nn::ParamStore;
use rsqair::relational::RelationalModule;
use rsqair::scene::{latent_concat, split_latent, ObjectLatent};
use rsqair::training::{curriculum_length, log_mean_exp, EarlyStopping};
use rsqair::RelationalKind;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 48, ..ProptestConfig::default() }
}

/// A permutation of `0..k` drawn from a shuffle of indices.
fn permutation(k: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..k).collect::<Vec<_>>()).prop_shuffle()
}

fn scene(k: usize, l: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<usize>)> {
    (
        prop::collection::vec(-3.0f64..3.0, k * l),
        prop::collection::vec(prop::bool::ANY.prop_map(f64::from), k),
        permutation(k),
    )
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let idx = Tensor::new(perm.iter().map(|&i| i as u32).collect::<Vec<_>>().as_slice(), &Device::Cpu).unwrap();
    t.index_select(&idx, 1).unwrap()
}

fn check_equivariance(kind: RelationalKind, k: usize, z: Vec<f64>, pres: Vec<f64>, perm: Vec<usize>) {
    let cfg = common::tiny_config(kind);
    let l = cfg.latent_dim();
    let mut ps = ParamStore::new(DType::F64, 3);
    let module = RelationalModule::build(&mut ps, &cfg).unwrap();
    let z = Tensor::from_vec(z, (1, k, l), &Device::Cpu).unwrap();
    let pres = Tensor::from_vec(pres, (1, k), &Device::Cpu).unwrap();
    let memory = module.memory_dim().map(|m| {
        let v: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.37).sin()).collect();
        Tensor::from_vec(v, (1, k, m), &Device::Cpu).unwrap()
    });
    let out = module.forward(&z, &pres, memory.as_ref()).unwrap();
    let permuted_memory = memory.as_ref().map(|m| permute_rows(m, &perm));
    let out_p = module
        .forward(&permute_rows(&z, &perm), &permute_rows(&pres.unsqueeze(2).unwrap(), &perm).squeeze(2).unwrap(), permuted_memory.as_ref())
        .unwrap();
    let diff = (permute_rows(&out.gamma, &perm) - out_p.gamma).unwrap().abs().unwrap().max_all().unwrap();
    assert!(diff.to_scalar::<f64>().unwrap() < 1e-10);
    if let (Some(a), Some(b)) = (out.memory, out_p.memory) {
        let diff = (permute_rows(&a, &perm) - b).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-10);
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn interaction_net_is_permutation_equivariant((k, (z, pres, perm)) in (2usize..6).prop_flat_map(|k| (Just(k), scene(k, 3 + 5)))) {
        check_equivariance(RelationalKind::In, k, z, pres, perm);
    }

    #[test]
    fn memory_core_is_permutation_equivariant((k, (z, pres, perm)) in (2usize..6).prop_flat_map(|k| (Just(k), scene(k, 3 + 5)))) {
        check_equivariance(RelationalKind::Rmc, k, z, pres, perm);
    }

    #[test]
    fn log_mean_exp_ignores_particle_order(w in prop::collection::vec(-1e4f64..1e4, 1..12), seed in any::<u64>()) {
        let mut shuffled = w.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
        }
        let a = log_mean_exp(&Tensor::new(w.as_slice(), &Device::Cpu).unwrap()).unwrap().to_scalar::<f64>().unwrap();
        let b = log_mean_exp(&Tensor::new(shuffled.as_slice(), &Device::Cpu).unwrap()).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn log_mean_exp_is_stable_for_large_weights(w in prop::collection::vec(-1e4f64..1e4, 1..12)) {
        let v = log_mean_exp(&Tensor::new(w.as_slice(), &Device::Cpu).unwrap()).unwrap().to_scalar::<f64>().unwrap();
        let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v.is_finite());
        prop_assert!(v <= max + 1e-9);
        prop_assert!(v >= max - (w.len() as f64).ln() - 1e-9);
    }

    #[test]
    fn latent_vector_round_trips(
        what in prop::collection::vec(-5.0f64..5.0, 1..10),
        wh in (0.01f64..2.0, 0.01f64..2.0, -1.5f64..1.5, -1.5f64..1.5),
        pres in any::<bool>(),
        slot in 0usize..8,
    ) {
        let obj = ObjectLatent { what, r#where: [wh.0, wh.1, wh.2, wh.3], pres, slot_id: slot };
        let v = latent_concat(&obj);
        prop_assert_eq!(v.len(), obj.what.len() + 5);
        prop_assert_eq!(split_latent(&v, slot).unwrap(), obj);
    }

    #[test]
    fn window_inverse_undoes_the_map(
        wh in (0.05f64..2.0, 0.05f64..2.0, -1.0f64..1.0, -1.0f64..1.0),
        p in (-2.0f64..2.0, -2.0f64..2.0),
    ) {
        let a = where_to_affine(&[wh.0, wh.1, wh.2, wh.3]).unwrap();
        let back = a.inverse().unwrap().apply(a.apply([p.0, p.1]));
        prop_assert!((back[0] - p.0).abs() < 1e-9 && (back[1] - p.1).abs() < 1e-9);
        let id = a.compose(&a.inverse().unwrap());
        prop_assert!((id.matrix[0][0] - 1.0).abs() < 1e-12 && id.matrix[0][2].abs() < 1e-12);
    }

    #[test]
    fn geometric_prior_sums_to_one(theta in 0.05f64..0.95) {
        let total: f64 = (0..=2000).map(|n| geometric_logp(n, theta).unwrap().exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn curriculum_never_shrinks(a in 0u64..500_000, b in 0u64..500_000) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(curriculum_length(lo) <= curriculum_length(hi));
        prop_assert!((3..=10).contains(&curriculum_length(hi)));
    }

    #[test]
    fn early_stopping_fires_after_patience_flat_scores(patience in 1usize..20, best in -1e3f64..1e3) {
        let mut es = EarlyStopping::new(patience);
        prop_assert!(!es.update(best));
        for i in 1..patience {
            prop_assert!(!es.update(best - i as f64));
        }
        prop_assert!(es.update(best));
    }
}

#[test]
fn negative_count_is_rejected() {
    assert!(geometric_logp(-1, 0.5).is_err());
}
