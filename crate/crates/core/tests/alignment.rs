use psla_core::attention::oracle::{brute_force_align, PositionSet};
use psla_core::attention::{align, psla_align, Correspondence, EmbeddingPair, Variant};
use psla_core::neighborhood::NeighborhoodSpec;
use psla_core::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn case(seed: u64) -> (usize, FeatureMap, FeatureMap, EmbeddingPair) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 1 + (seed as usize % 5);
    let c = rng.gen_range(1..=8);
    let h = rng.gen_range(1..=12);
    let w = rng.gen_range(1..=12);
    let t = FeatureMap::random_uniform(c, h, w, -1.0, 1.0, &mut rng);
    let s = FeatureMap::random_uniform(c, h, w, -1.0, 1.0, &mut rng);
    let emb = if seed % 3 == 0 { EmbeddingPair::identity() } else { EmbeddingPair::init(c, rng.gen_range(1..=6), true, &mut rng) };
    (d, t, s, emb)
}

#[test]
fn psla_matches_oracle_on_seeded_cases() {
    let mut worst = 0.0f32;
    for seed in 0..60 {
        let (d, t, s, emb) = case(seed);
        let spec = NeighborhoodSpec::progressive(d).unwrap();
        let (out, _) = psla_align(&t, &s, &emb, &spec).unwrap();
        let oracle = brute_force_align(&t, &s, &emb, &PositionSet::Offsets(spec.offsets.clone()));
        let err = out.max_abs_diff(&oracle);
        assert!(err < 1e-5, "seed {seed}: d={d} dims={:?} err={err}", t.dims());
        worst = worst.max(err);
    }
    assert!(worst.is_finite());
}

#[test]
fn dense_and_nonlocal_match_oracle() {
    for seed in 0..20 {
        let (d, t, s, emb) = case(seed);
        let dense = align(Variant::Dense, d, &t, &s, &emb).unwrap();
        let spec = NeighborhoodSpec::dense(d).unwrap();
        let o = brute_force_align(&t, &s, &emb, &PositionSet::Offsets(spec.offsets.clone()));
        assert!(dense.output.max_abs_diff(&o) < 1e-5, "seed {seed}");

        let nl = align(Variant::Nonlocal, d, &t, &s, &emb).unwrap();
        let o = brute_force_align(&t, &s, &emb, &PositionSet::All);
        assert!(nl.output.max_abs_diff(&o) < 1e-5, "seed {seed}");
    }
}

#[test]
fn progressive_equals_dense_at_d1_bit_for_bit() {
    for seed in 0..10 {
        let (_, t, s, emb) = case(seed);
        let p = align(Variant::Psla, 1, &t, &s, &emb).unwrap();
        let d = align(Variant::Dense, 1, &t, &s, &emb).unwrap();
        assert_eq!(p.output, d.output, "seed {seed}");
        assert_eq!(p.spec.unwrap().offsets, d.spec.unwrap().offsets);
    }
}

#[test]
fn covering_window_equals_nonlocal() {
    // a dense window reaching every cell sees the same positions as global attention
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = FeatureMap::random_uniform(4, 5, 6, -1.0, 1.0, &mut rng);
    let s = FeatureMap::random_uniform(4, 5, 6, -1.0, 1.0, &mut rng);
    let emb = EmbeddingPair::init(4, 3, true, &mut rng);
    let dense = align(Variant::Dense, 5, &t, &s, &emb).unwrap();
    let nl = align(Variant::Nonlocal, 5, &t, &s, &emb).unwrap();
    assert!(dense.output.max_abs_diff(&nl.output) < 1e-5);
}

#[test]
fn single_cell_maps_return_source() {
    let t = FeatureMap::from_vec(2, 1, 1, vec![0.3, -0.4]).unwrap();
    let s = FeatureMap::from_vec(2, 1, 1, vec![5.0, 7.0]).unwrap();
    for v in Variant::ALL {
        assert_eq!(align(v, 4, &t, &s, &EmbeddingPair::identity()).unwrap().output, s, "{v}");
    }
}

#[test]
fn weight_rows_are_distributions() {
    for seed in 0..10 {
        let (d, t, s, emb) = case(seed);
        for v in Variant::ALL {
            let a = align(v, d, &t, &s, &emb).unwrap();
            let (h, w) = (t.height(), t.width());
            for p in 0..h * w {
                let row: Vec<f32> = match &a.weights {
                    Correspondence::Local(lw) => lw.normalized_at(p / w, p % w).to_vec(),
                    Correspondence::Global(g) => g.row(p).to_vec(),
                };
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-5, "{v} seed {seed}: sum {sum}");
                assert!(row.iter().all(|&x| (0.0..=1.0 + 1e-6).contains(&x)));
            }
        }
    }
}
