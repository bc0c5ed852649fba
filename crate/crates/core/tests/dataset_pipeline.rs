use gadolab::dataset::{self, apply_transform, augment, AugmentConfig, Dataset, SplitConfig, Transform, HALF_STACK};
use gadolab::phantom::{self, PhantomRecipe, PhantomVolume};
use gadolab::{rng, Modality};

fn small_recipe(modality: Modality) -> PhantomRecipe {
    PhantomRecipe { height: 32, width: 32, modality, ..Default::default() }
}

#[test]
fn augmentation_moves_every_field_together() {
    let vol = phantom::generate(&small_recipe(Modality::T1w)).unwrap();
    let base = dataset::normalize(&dataset::extract_pairs(&vol, 0).unwrap()[4]).unwrap();
    let n = 32 * 32;
    let cfg = AugmentConfig { crop: Some(24), ..Default::default() };
    let mut r = rng::seeded(5);
    for trial in 0..50 {
        // Plant a bright marker at the same spot in every channel and target.
        let mut p = base.clone();
        let (mi, mj) = (10 + trial % 7, 12 + trial % 5);
        for c in 0..7 {
            p.y.data_mut()[c * n + mi * 32 + mj] = 50.0;
        }
        p.x.data_mut()[mi * 32 + mj] = 50.0;
        p.diff.data_mut()[mi * 32 + mj] = 50.0;
        let t = Transform { angle_deg: 0.0, ..Transform::sample(&cfg, 32, 32, &mut r).unwrap() };
        let a = apply_transform(&p, &t).unwrap();
        let m = 24 * 24;
        let argmax = |d: &[f32]| d.iter().enumerate().fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
        let at = argmax(a.x.data());
        assert_eq!(argmax(a.diff.data()), at);
        for c in 0..7 {
            assert_eq!(argmax(&a.y.data()[c * m..(c + 1) * m]), at);
        }
        // Random small-angle rotations keep the reconstruction identity.
        let b = augment(&base, &cfg, &mut r).unwrap();
        for ((d, pre), x) in b.diff.data().iter().zip(b.pre()).zip(b.x.data()) {
            assert!((d + pre - x).abs() < 1e-5, "{d} + {pre} != {x}");
        }
    }
}

#[test]
fn quarter_turns_preserve_roi_mass() {
    for seed in 0..5 {
        let vol = phantom::generate(&PhantomRecipe { seed, ..small_recipe(Modality::T1) }).unwrap();
        for p in dataset::extract_pairs(&vol, 0).unwrap() {
            for k in 0..4 {
                let t = Transform { quarter_turns: k, ..Transform::IDENTITY };
                assert_eq!(apply_transform(&p, &t).unwrap().roi.count(), p.roi.count());
            }
        }
    }
}

#[test]
fn generated_dataset_round_trips_and_respects_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SplitConfig { train: 3, val: 1, test: 2, test_stride: 2 };
    let m = dataset::generate_dataset(dir.path(), &small_recipe(Modality::T1), &cfg, 11).unwrap();
    assert!(m.split.is_disjoint());
    assert!(!m.split.test_slices.is_empty());

    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.manifest, m);
    for &(id, k) in &m.split.test_slices {
        assert!(m.split.test.contains(&id));
        assert!((HALF_STACK..16 - HALF_STACK).contains(&k));
        let v: PhantomVolume = ds.volume(id).unwrap();
        assert!(PhantomVolume::mask_slice(&v.roi, k).iter().any(|&b| b));
    }
    let tp = ds.test_pairs().unwrap();
    assert_eq!(tp.len(), m.split.test_slices.len());
    assert!(tp.iter().all(|p| p.roi.any()));
    assert_eq!(ds.pairs(&m.split.train).unwrap().len(), 3 * 10);

    let again = tempfile::tempdir().unwrap();
    let m2 = dataset::generate_dataset(again.path(), &small_recipe(Modality::T1), &cfg, 11).unwrap();
    assert_eq!(m, m2);
    for stem in &m.volumes {
        let a = std::fs::read(dir.path().join(format!("{stem}_post.vct"))).unwrap();
        let b = std::fs::read(again.path().join(format!("{stem}_post.vct"))).unwrap();
        assert_eq!(a, b);
    }
}
