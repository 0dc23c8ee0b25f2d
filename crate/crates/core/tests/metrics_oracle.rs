use haze_oracles::*;
use haze_core::metrics::{psnr, ssim, PSNR_CAP_DB};
use haze_core::Error;
use proptest::prelude::*;

fn pair(seed: u64, dims: [usize; 4]) -> (Nd, Nd) {
    (random_nd(seed, dims, 0.0, 1.0), random_nd(seed + 1000, dims, 0.0, 1.0))
}

#[test]
fn twenty_random_pairs_match_loop_oracles() {
    for seed in 0..20 {
        let (a, b) = correlated_pair(seed, 19);
        let p = psnr(&a.to_tensor(), &b.to_tensor(), 1.0).unwrap();
        let s = ssim(&a.to_tensor(), &b.to_tensor(), 1.0).unwrap();
        let p_ref = if a == b { PSNR_CAP_DB } else { psnr_loop(&a.data, &b.data, 1.0) };
        assert!((p - p_ref).abs() < 1e-9, "seed {seed}: psnr {p} vs {p_ref}");
        let s_ref = ssim_oracle(&a, &b);
        assert!((s - s_ref).abs() < 1e-6, "seed {seed}: ssim {s} vs {s_ref}");
    }
}

#[test]
fn identical_images_hit_cap_and_one() {
    let (a, _) = pair(77, [1, 3, 32, 32]);
    assert_eq!(psnr(&a.to_tensor(), &a.to_tensor(), 1.0).unwrap(), 100.0);
    assert_eq!(ssim(&a.to_tensor(), &a.to_tensor(), 1.0).unwrap(), 1.0);
}

#[test]
fn inverted_checkerboard_has_negative_ssim() {
    let mut a = Nd::zeros([1, 3, 32, 32]);
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                let i = a.idx(0, c, y, x);
                a.data[i] = ((x + y) % 2) as f64;
            }
        }
    }
    let b = a.map(|v| 1.0 - v);
    let s = ssim(&a.to_tensor(), &b.to_tensor(), 1.0).unwrap();
    let oracle = ssim_oracle(&a, &b);
    assert!((s - oracle).abs() < 1e-9);
    assert!(s < 0.0, "{s}");
}

#[test]
fn psnr_falls_as_noise_grows() {
    let (a, noise) = pair(5, [1, 3, 24, 24]);
    let mut last = f64::INFINITY;
    for amp in [0.01, 0.05, 0.1, 0.2, 0.4] {
        let b = Nd {
            dims: a.dims,
            data: a.data.iter().zip(&noise.data).map(|(x, n)| x + amp * (n - 0.5)).collect(),
        };
        let p = psnr(&b.to_tensor(), &a.to_tensor(), 1.0).unwrap();
        assert!(p < last);
        last = p;
    }
}

#[test]
fn shape_mismatch_and_small_images_are_input_errors() {
    let (a, _) = pair(1, [1, 3, 16, 16]);
    let (b, _) = pair(2, [1, 3, 16, 12]);
    assert!(matches!(psnr(&a.to_tensor(), &b.to_tensor(), 1.0), Err(Error::Input(_))));
    assert!(matches!(ssim(&a.to_tensor(), &b.to_tensor(), 1.0), Err(Error::Input(_))));
    let (c, _) = pair(3, [1, 3, 10, 10]);
    assert!(matches!(ssim(&c.to_tensor(), &c.to_tensor(), 1.0), Err(Error::Input(_))));
}

fn flip_h(x: &Nd) -> Nd {
    let mut out = x.clone();
    let [n, c, h, w] = x.dims;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let i = out.idx(b, ch, y, xx);
                    out.data[i] = x.at(b, ch, y, w - 1 - xx);
                }
            }
        }
    }
    out
}

fn flip_v(x: &Nd) -> Nd {
    let mut out = x.clone();
    let [n, c, h, w] = x.dims;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let i = out.idx(b, ch, y, xx);
                    out.data[i] = x.at(b, ch, h - 1 - y, xx);
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..10_000, h in 11usize..20, w in 11usize..20) {
        let (a, b) = pair(seed, [1, 3, h, w]);
        let ab = ssim(&a.to_tensor(), &b.to_tensor(), 1.0).unwrap();
        let ba = ssim(&b.to_tensor(), &a.to_tensor(), 1.0).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn ssim_is_flip_invariant(seed in 0u64..10_000) {
        let (a, b) = pair(seed, [1, 3, 16, 18]);
        let base = ssim(&a.to_tensor(), &b.to_tensor(), 1.0).unwrap();
        let fh = ssim(&flip_h(&a).to_tensor(), &flip_h(&b).to_tensor(), 1.0).unwrap();
        let fv = ssim(&flip_v(&a).to_tensor(), &flip_v(&b).to_tensor(), 1.0).unwrap();
        prop_assert!((base - fh).abs() < 1e-9);
        prop_assert!((base - fv).abs() < 1e-9);
    }

    #[test]
    fn psnr_is_permutation_invariant(seed in 0u64..10_000, shift in 1usize..100) {
        let (a, b) = pair(seed, [1, 3, 8, 8]);
        let n = a.data.len();
        let perm = |x: &Nd| Nd { dims: x.dims, data: (0..n).map(|i| x.data[(i * 7 + shift) % n]).collect() };
        let p = psnr(&a.to_tensor(), &b.to_tensor(), 1.0).unwrap();
        let q = psnr(&perm(&a).to_tensor(), &perm(&b).to_tensor(), 1.0).unwrap();
        prop_assert!((p - q).abs() < 1e-9);
    }

    #[test]
    fn self_comparison_is_perfect(seed in 0u64..10_000) {
        let (a, _) = pair(seed, [2, 3, 12, 13]);
        prop_assert_eq!(ssim(&a.to_tensor(), &a.to_tensor(), 1.0).unwrap(), 1.0);
        prop_assert_eq!(psnr(&a.to_tensor(), &a.to_tensor(), 1.0).unwrap(), PSNR_CAP_DB);
    }
}
