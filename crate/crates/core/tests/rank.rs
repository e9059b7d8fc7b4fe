use promptlab::linalg::{numerical_rank, DEFAULT_RANK_TOL};
use promptlab::probe::{count_sign_diagonal, probe_record};
use promptlab::prompt::{trainable_param_count, InitOptions, PromptDims, PromptKind, PromptParams};
use promptlab::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let (x, y) = (t.param(a), t.param(b));
    let p = t.matmul(x, y).unwrap();
    t.to_tensor(p)
}

#[test]
fn product_rank_bounded_by_factor_ranks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let e = rng.gen_range(8..=64);
        let c = rng.gen_range(4..=32);
        let b = rng.gen_range(1..=e.min(c));
        let a = Tensor::gaussian(&[e, b], 1.0, &mut rng);
        let bm = Tensor::gaussian(&[b, c], 1.0, &mut rng);
        let ra = numerical_rank(&a, DEFAULT_RANK_TOL).unwrap();
        let rb = numerical_rank(&bm, DEFAULT_RANK_TOL).unwrap();
        let rab = numerical_rank(&matmul(&a, &bm), DEFAULT_RANK_TOL).unwrap();
        assert!(rab <= ra.min(rb), "e={e} c={c} b={b}: {rab} > min({ra}, {rb})");
        assert_eq!(rab, b, "e={e} c={c} b={b}");
    }
}

#[test]
fn probe_rank_never_exceeds_positive_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..30 {
        let (e, c) = (rng.gen_range(4..16), rng.gen_range(2..4));
        let c = c.min(e);
        let mut params =
            PromptParams::init(PromptKind::RankProbe, PromptDims::new(e, c), None, InitOptions::default(), seed).unwrap();
        if let PromptParams::RankProbe(p) = &mut params {
            for s in p.sigma.values_mut() {
                *s = rng.gen_range(-1.0..1.0);
            }
        }
        let r = probe_record(0, &params).unwrap();
        assert_eq!(r.pos_count + r.neg_count + r.zero_count, c);
        assert!(r.numerical_rank <= r.pos_count);
    }
}

#[test]
fn all_negative_diagonal_gives_zero_prompt() {
    let mut params =
        PromptParams::init(PromptKind::RankProbe, PromptDims::new(6, 4), None, InitOptions::default(), 0).unwrap();
    if let PromptParams::RankProbe(p) = &mut params {
        p.sigma.values_mut().fill(-0.5);
        assert_eq!(count_sign_diagonal(&p.sigma), (0, 4, 0));
    }
    assert!(params.materialize().values().iter().all(|&x| x == 0.0));
    assert_eq!(probe_record(0, &params).unwrap().numerical_rank, 0);
}

/// Solves `m x = rhs` for square `m` by Gauss-Jordan elimination with
/// partial pivoting; `rhs` has several columns.
fn solve(m: &[Vec<f64>], rhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.iter().zip(rhs).map(|(r, b)| r.iter().chain(b).copied().collect()).collect();
    for col in 0..n {
        let p = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, p);
        let d = a[col][col];
        for v in a[col].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                let pivot = a[col].clone();
                for (v, pv) in a[r].iter_mut().zip(&pivot) {
                    *v -= f * pv;
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

#[test]
fn full_bottleneck_fits_any_prompt() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (e, c) = (rng.gen_range(2..12), rng.gen_range(2..12));
        let b = e.min(c);
        let target = Tensor::gaussian(&[e, c], 1.0, &mut rng);
        let mut a = Tensor::gaussian(&[e, b], 1.0, &mut rng);
        let mut bm = Tensor::gaussian(&[b, c], 1.0, &mut rng);
        if b == c {
            // A = P Bᵀ (B Bᵀ)⁻¹, solved as (B Bᵀ) Aᵀ = B Pᵀ.
            let bbt: Vec<Vec<f64>> = (0..b)
                .map(|i| (0..b).map(|j| (0..c).map(|k| bm.at(i, k) * bm.at(j, k)).sum()).collect())
                .collect();
            let bpt: Vec<Vec<f64>> = (0..b)
                .map(|i| (0..e).map(|j| (0..c).map(|k| bm.at(i, k) * target.at(j, k)).sum()).collect())
                .collect();
            let at = solve(&bbt, &bpt);
            a = Tensor::new(vec![e, b], (0..e).flat_map(|i| at.iter().map(move |r| r[i])).collect()).unwrap();
        } else {
            // B = (Aᵀ A)⁻¹ Aᵀ P.
            let ata: Vec<Vec<f64>> = (0..b)
                .map(|i| (0..b).map(|j| (0..e).map(|k| a.at(k, i) * a.at(k, j)).sum()).collect())
                .collect();
            let atp: Vec<Vec<f64>> = (0..b)
                .map(|i| (0..c).map(|j| (0..e).map(|k| a.at(k, i) * target.at(k, j)).sum()).collect())
                .collect();
            let sol = solve(&ata, &atp);
            bm = Tensor::new(vec![b, c], sol.concat()).unwrap();
        }
        let fit = matmul(&a, &bm);
        let residual: f64 = fit.values().iter().zip(target.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(residual < 1e-8, "e={e} c={c}: residual {residual}");
    }
}

#[test]
fn parameter_ratio_shrinks_with_prompt_length() {
    for e in [32, 512, 768, 1024] {
        let ratios: Vec<f64> = [20, 100, 200]
            .iter()
            .map(|&c| {
                let dims = PromptDims::new(e, c).with_bottleneck(10);
                trainable_param_count(PromptKind::Decomposed, dims) as f64
                    / trainable_param_count(PromptKind::Vanilla, dims) as f64
            })
            .collect();
        assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
    }
}

#[test]
fn materialize_is_pure() {
    for kind in PromptKind::ALL {
        let dims = PromptDims::new(8, 5).with_bottleneck(3).with_hidden(4);
        let p = PromptParams::init(kind, dims, None, InitOptions::default(), 1).unwrap();
        assert_eq!(p.materialize().values(), p.materialize().values());
    }
}
