use proptest::prelude::*;
use rand::Rng;

use vicmae::corpus::{synthesize, Split, SynthSpec};
use vicmae::evalsuite::{
    features, layer_lr_scales, linear_probe, stratified_subset, FeatureSource, ProbeSpec,
};
use vicmae::graph::{Graph, PoolMethod};
use vicmae::losses::{info_nce, simsiam_loss};
use vicmae::network::{Model, ModelConfig};
use vicmae::patches::patchify_image;
use vicmae::pixels::Image;
use vicmae::rng::stream;
use vicmae::Tensor;

fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, &[]);
    let mut t = Tensor::from_fn(&[n, d], |_| rng.random::<f64>() * 2.0 - 1.0);
    for r in 0..n {
        let row = t.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let d = t.cols();
    Tensor::from_fn(t.shape(), |i| t.row(perm[i / d])[i % d])
}

proptest! {
    #[test]
    fn info_nce_ignores_pair_order_and_view_swap(seed in any::<u64>(), n in 2usize..7, d in 2usize..9, tau in 0.05f64..2.0) {
        let p = unit_rows(n, d, seed);
        let z = unit_rows(n, d, seed ^ 0x5a5a);
        let base = info_nce(&p, &z, tau).unwrap();
        prop_assert!(base >= 0.0);
        let swapped = info_nce(&z, &p, tau).unwrap();
        prop_assert!((base - swapped).abs() < 1e-12);
        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted = info_nce(&permute_rows(&p, &perm), &permute_rows(&z, &perm), tau).unwrap();
        prop_assert!((base - permuted).abs() < 1e-12);
        // a batch can never do better than perfect alignment with orthogonal negatives
        prop_assert!(base > -1e-12);
    }

    #[test]
    fn simsiam_stays_in_range(seed in any::<u64>(), n in 1usize..6, d in 2usize..8) {
        let l = simsiam_loss(&unit_rows(n, d, seed), &unit_rows(n, d, seed + 1)).unwrap();
        prop_assert!((0.0..=4.0 + 1e-12).contains(&l));
    }

    #[test]
    fn mean_pool_ignores_token_order(seed in any::<u64>(), seq in 1usize..9, d in 1usize..6) {
        let mut rng = stream(seed, &[]);
        let x = Tensor::from_fn(&[seq, d], |_| rng.random::<f64>() - 0.5);
        let perm: Vec<usize> = (0..seq).map(|i| (i * 5 + 3) % seq).collect();
        let mut sorted = perm.clone();
        sorted.sort();
        prop_assume!(sorted == (0..seq).collect::<Vec<_>>());
        let mut g = Graph::<f64>::new();
        let a = g.constant(x.clone());
        let b = g.constant(permute_rows(&x, &perm));
        let pa = g.pool(a, seq, PoolMethod::Mean, 3.0).unwrap();
        let pb = g.pool(b, seq, PoolMethod::Mean, 3.0).unwrap();
        for (u, v) in g.value(pa).data().iter().zip(g.value(pb).data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }
}

fn corpus(seed: u64, split: Split) -> vicmae::corpus::Corpus {
    synthesize(&SynthSpec {
        num_videos: 24,
        num_images: 4,
        seed,
        split,
        ..SynthSpec::default()
    })
    .unwrap()
}

#[test]
fn single_and_double_precision_agree() {
    let m32 = Model::<f32>::init(ModelConfig::tiny(), 3).unwrap();
    let m64 = m32.cast::<f64>();
    let side = m32.cfg.image_side;
    let mut rng = stream(9, &[]);
    let px: Vec<f64> = (0..side * side * 3).map(|_| rng.random::<f64>()).collect();
    let pc = m32.cfg.patch_config();
    let t64 = patchify_image(&Image::new(side, side, px.clone()).unwrap(), &pc).unwrap();
    let t32 = patchify_image(&Image::new(side, side, px.iter().map(|&v| v as f32).collect()).unwrap(), &pc).unwrap();
    let f64s = features(&m64, &[t64], FeatureSource::Pooled).unwrap();
    let f32s = features(&m32, &[t32], FeatureSource::Pooled).unwrap();
    for (a, b) in f64s.data().iter().zip(f32s.data()) {
        assert!((a - *b as f64).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn probe_leaves_encoder_untouched_and_reproduces() {
    let train = corpus(1, Split::Train);
    let val = corpus(2, Split::Val);
    let model = Model::<f32>::init(ModelConfig::tiny(), 0).unwrap();
    let before = model.params.checksum();
    let spec = ProbeSpec {
        epochs: 12,
        warmup_epochs: 1.0,
        batch_size: 16,
        ..ProbeSpec::default()
    };
    let a = linear_probe(&model, &train, &val, &spec).unwrap();
    let b = linear_probe(&model, &train, &val, &spec).unwrap();
    assert_eq!(model.params.checksum(), before);
    assert_eq!(a, b);
    assert_eq!(a.checkpoint_hash, before);
    assert_eq!(a.n, 24);
}

#[test]
fn layer_rates_shrink_from_head_to_stem() {
    let model = Model::<f32>::init(ModelConfig::tiny(), 0).unwrap();
    let scales = layer_lr_scales(&model, 0.65);
    let stage_of = |name: &str| model.encoder_stage(name);
    let mut by_stage: Vec<(usize, f64)> = model
        .params
        .iter()
        .zip(&scales)
        .filter_map(|(p, &s)| stage_of(&p.name).map(|k| (k, s)))
        .collect();
    by_stage.sort_by_key(|x| x.0);
    assert!(by_stage.windows(2).all(|w| w[0].1 <= w[1].1));
    let top = scales.iter().cloned().fold(0.0, f64::max);
    assert_eq!(top, 1.0);
}

#[test]
fn paper_fractions_give_nested_stratified_subsets() {
    let data = synthesize(&SynthSpec {
        num_videos: 400,
        num_images: 0,
        ..SynthSpec::default()
    })
    .unwrap();
    let fractions = [0.05, 0.1, 0.25, 0.5, 0.75, 1.0];
    let sizes: Vec<usize> = fractions
        .iter()
        .map(|&f| stratified_subset(&data, f, 0).unwrap().len())
        .collect();
    assert_eq!(sizes.len(), 6);
    assert!(sizes.windows(2).all(|w| w[0] <= w[1]), "{sizes:?}");
    assert_eq!(*sizes.last().unwrap(), 400);
    assert!(stratified_subset(&data, 0.01, 0).is_err());
}
