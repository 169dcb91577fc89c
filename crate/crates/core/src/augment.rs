//! Conditional-distribution augmentation: the distribution-level Universum,
//! Universum mixing, reparameterized resampling, and distribution mixup.
//!
//! Every operation exists twice: on plain [`ConditionalGaussian`] values and
//! on tape rows (`*_var`). The two paths evaluate the same expressions in the
//! same order and agree bit for bit.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::stats::{ConditionalGaussian, StatsBank};

/// Floor applied to standard deviations before sampling.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Semantic-free average of all observed cell Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Universum {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugSource {
    UniversumMix,
    Mixup,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDistribution {
    pub gaussian: ConditionalGaussian,
    /// Hard label: the semantic parent for Universum mixes, the dominant
    /// parent for mixup.
    pub label: usize,
    pub source: AugSource,
    pub soft_label: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    /// `gamma ~ Beta(alpha, alpha)`.
    pub alpha: f64,
    /// Weight on the semantic cell when mixing with the Universum.
    pub lambda_mix: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig { alpha: 0.2, lambda_mix: 0.5 }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Validation(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.lambda_mix > 0.0 && self.lambda_mix < 1.0) {
            return Err(Error::Validation(format!("lambda_mix must lie in (0, 1), got {}", self.lambda_mix)));
        }
        Ok(())
    }
}

pub fn build_universum(bank: &StatsBank) -> Result<Universum> {
    let n = bank.n_initialized();
    if n == 0 {
        return Err(Error::Empty("universum over an empty bank"));
    }
    let s = bank.stats_dim();
    let (mut mu, mut sigma) = (vec![0.0; s], vec![0.0; s]);
    for c in bank.initialized() {
        for j in 0..s {
            mu[j] += c.mu[j];
            sigma[j] += c.sigma[j];
        }
    }
    for j in 0..s {
        mu[j] /= n as f64;
        sigma[j] /= n as f64;
    }
    Ok(Universum { mu, sigma })
}

fn check_unit(name: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::domain(name, format!("coefficient {v} outside [0, 1]")))
    }
}

/// `(1 - lambda) * u + lambda * cell`, labelled with the cell's class.
pub fn universum_mix(u: &Universum, cell: &ConditionalGaussian, lambda: f64) -> Result<AugmentedDistribution> {
    check_unit("universum_mix", lambda)?;
    if u.mu.len() != cell.dim() {
        return Err(Error::dim("universum_mix", format!("{} vs {}", u.mu.len(), cell.dim())));
    }
    let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect();
    Ok(AugmentedDistribution {
        gaussian: ConditionalGaussian {
            mu: mix(&u.mu, &cell.mu),
            sigma: mix(&u.sigma, &cell.sigma),
            domain: cell.domain,
            class: cell.class,
        },
        label: cell.class,
        source: AugSource::UniversumMix,
        soft_label: None,
    })
}

/// `gamma * a + (1 - gamma) * b` with the matching soft label.
pub fn distribution_mixup(
    a: &ConditionalGaussian,
    b: &ConditionalGaussian,
    gamma: f64,
    n_classes: usize,
) -> Result<AugmentedDistribution> {
    check_unit("distribution_mixup", gamma)?;
    if a.dim() != b.dim() {
        return Err(Error::dim("distribution_mixup", format!("{} vs {}", a.dim(), b.dim())));
    }
    if a.class >= n_classes || b.class >= n_classes {
        return Err(Error::Validation(format!("class out of range for {n_classes} classes")));
    }
    let mix = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| gamma * p + (1.0 - gamma) * q).collect();
    let soft = soft_label(a.class, b.class, gamma, n_classes);
    Ok(AugmentedDistribution {
        gaussian: ConditionalGaussian {
            mu: mix(&a.mu, &b.mu),
            sigma: mix(&a.sigma, &b.sigma),
            domain: a.domain,
            class: a.class,
        },
        label: if gamma >= 0.5 { a.class } else { b.class },
        source: AugSource::Mixup,
        soft_label: Some(soft),
    })
}

/// `gamma * onehot(a) + (1 - gamma) * onehot(b)`.
pub fn soft_label(a: usize, b: usize, gamma: f64, n_classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; n_classes];
    y[a] += gamma;
    y[b] += 1.0 - gamma;
    y
}

/// Standard normal noise, row-major `rows x dim`.
pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, dim: usize) -> Vec<f64> {
    (0..rows * dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws `m` pseudo-instances `mu + sigma * eps` from `aug`, all labelled with
/// its hard label.
pub fn resample<R: Rng + ?Sized>(aug: &AugmentedDistribution, m: usize, rng: &mut R) -> Vec<(Vec<f64>, usize)> {
    let g = &aug.gaussian;
    let eps = draw_noise(rng, m, g.dim());
    eps.chunks(g.dim().max(1))
        .take(m)
        .map(|e| {
            let x = g.mu.iter().zip(&g.sigma).zip(e).map(|((mu, s), e)| mu + s.max(SIGMA_FLOOR) * e).collect();
            (x, aug.label)
        })
        .collect()
}

/// Pseudo-instances generated per augmented distribution so that all of them
/// together roughly fill one batch.
pub fn resample_count(batch_size: usize, n_cells: usize) -> usize {
    batch_size.div_ceil(n_cells.max(1)).max(1)
}

pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Validation(format!("beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng))
}

/// `count` uniformly drawn ordered pairs of distinct indices below `n`.
pub fn sample_pairs<R: Rng + ?Sized>(rng: &mut R, n: usize, count: usize) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::Validation(format!("mixup needs two cells, have {n}")));
    }
    Ok((0..count)
        .map(|_| {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        })
        .collect())
}

/// Tape version of [`universum_mix`] applied to every row.
pub fn universum_mix_var(tape: &mut Tape, u: &Universum, mu: Var, sigma: Var, lambda: f64) -> Result<(Var, Var)> {
    check_unit("universum_mix", lambda)?;
    let rows = tape.value(mu).rows();
    let dim = tape.value(mu).cols();
    if u.mu.len() != dim {
        return Err(Error::dim("universum_mix", format!("{} vs {}", u.mu.len(), dim)));
    }
    let mut out = [mu, sigma];
    for (slot, base) in out.iter_mut().zip([&u.mu, &u.sigma]) {
        let row: Vec<f64> = base.iter().map(|x| (1.0 - lambda) * x).collect();
        let fixed = tape.constant(Tensor::matrix(rows, dim, row.repeat(rows))?);
        let scaled = tape.scale(*slot, lambda);
        *slot = tape.add(fixed, scaled)?;
    }
    Ok((out[0], out[1]))
}

/// Tape version of [`distribution_mixup`]: output row `r` mixes source rows
/// `pairs[r].0` and `pairs[r].1` with weight `gammas[r]`.
pub fn mixup_var(tape: &mut Tape, mu: Var, sigma: Var, pairs: &[(usize, usize)], gammas: &[f64]) -> Result<(Var, Var)> {
    if pairs.len() != gammas.len() {
        return Err(Error::dim("mixup", format!("{} pairs vs {} gammas", pairs.len(), gammas.len())));
    }
    let n = tape.value(mu).rows();
    let mut coef = vec![0.0; pairs.len() * n];
    for (r, (&(a, b), &g)) in pairs.iter().zip(gammas).enumerate() {
        check_unit("distribution_mixup", g)?;
        if a >= n || b >= n || a == b {
            return Err(Error::Validation(format!("bad mixup pair ({a}, {b}) over {n} rows")));
        }
        coef[r * n + a] = g;
        coef[r * n + b] = 1.0 - g;
    }
    let c = tape.constant(Tensor::matrix(pairs.len(), n, coef)?);
    Ok((tape.matmul(c, mu)?, tape.matmul(c, sigma)?))
}

/// Tape version of [`resample`]: row `g * m + r` is
/// `mu[g] + sigma[g] * noise[g * m + r]`. Gradients reach `mu` and `sigma`.
pub fn resample_var(tape: &mut Tape, mu: Var, sigma: Var, m: usize, noise: &[f64]) -> Result<Var> {
    let (rows, dim) = (tape.value(mu).rows(), tape.value(mu).cols());
    if noise.len() != rows * m * dim {
        return Err(Error::dim("resample", format!("noise {} vs {}", noise.len(), rows * m * dim)));
    }
    let repeat: Vec<Vec<usize>> = (0..rows).flat_map(|g| std::iter::repeat_n(vec![g], m)).collect();
    let mu_rep = tape.group_mean(mu, &repeat)?;
    let sigma_rep = tape.group_mean(sigma, &repeat)?;
    let eps = tape.constant(Tensor::matrix(rows * m, dim, noise.to_vec())?);
    let spread = tape.mul(sigma_rep, eps)?;
    tape.add(mu_rep, spread)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{embed, KernelConfig};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(mu: &[f64], sigma: &[f64], d: usize, k: usize) -> ConditionalGaussian {
        ConditionalGaussian::new(mu.to_vec(), sigma.to_vec(), d, k).unwrap()
    }

    fn bank_of(cells: &[ConditionalGaussian], n_domains: usize, n_classes: usize) -> StatsBank {
        let mut bank = StatsBank::new(n_domains, n_classes, cells[0].dim(), 0.95).unwrap();
        for c in cells {
            bank.insert(c.clone()).unwrap();
        }
        bank
    }

    #[test]
    fn universum_examples() {
        let c = g(&[1.0, 2.0], &[0.5, 0.25], 0, 1);
        let u = build_universum(&bank_of(std::slice::from_ref(&c), 1, 2)).unwrap();
        assert_eq!((u.mu, u.sigma), (c.mu.clone(), c.sigma.clone()));

        let u = build_universum(&bank_of(&[g(&[0.0], &[1.0], 0, 0), g(&[2.0], &[3.0], 0, 1)], 1, 2)).unwrap();
        assert_eq!(u.mu, vec![1.0]);
        assert_eq!(u.sigma, vec![2.0]);

        assert!(build_universum(&StatsBank::new(1, 1, 1, 0.9).unwrap()).is_err());
    }

    #[test]
    fn universum_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cells: Vec<_> = (0..9)
            .filter(|i| i % 4 != 1)
            .map(|i| {
                g(
                    &(0..3).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<_>>(),
                    &(0..3).map(|_| rng.random_range(0.1..2.0)).collect::<Vec<_>>(),
                    i / 3,
                    i % 3,
                )
            })
            .collect();
        let u = build_universum(&bank_of(&cells, 3, 3)).unwrap();
        for j in 0..3 {
            let mut m = 0.0;
            let mut s = 0.0;
            // bank iterates slots in domain-major order, as does `cells`
            for c in &cells {
                m += c.mu[j];
                s += c.sigma[j];
            }
            assert_eq!(u.mu[j], m / cells.len() as f64);
            assert_eq!(u.sigma[j], s / cells.len() as f64);
        }
    }

    #[test]
    fn universum_mix_endpoints_and_midpoint() {
        let u = Universum { mu: vec![0.0], sigma: vec![2.0] };
        let c = g(&[4.0], &[1.0], 1, 2);
        let full = universum_mix(&u, &c, 1.0).unwrap();
        assert_eq!(full.gaussian, c);
        assert_eq!(full.label, 2);
        let mid = universum_mix(&u, &c, 0.5).unwrap();
        assert_eq!(mid.gaussian.mu, vec![2.0]);
        assert_eq!(mid.gaussian.sigma, vec![1.5]);
        let none = universum_mix(&u, &c, 0.0).unwrap();
        assert_eq!((none.gaussian.mu.clone(), none.gaussian.sigma.clone()), (u.mu.clone(), u.sigma.clone()));
        assert_eq!(none.label, 2);
        assert_eq!(none.source, AugSource::UniversumMix);
        assert!(universum_mix(&u, &g(&[0.0, 1.0], &[1.0, 1.0], 0, 0), 0.5).is_err());
        assert!(universum_mix(&u, &c, 1.5).is_err());
    }

    #[test]
    fn mixup_examples() {
        let a = g(&[1.0], &[1.0], 0, 0);
        let b = g(&[3.0], &[2.0], 1, 2);
        let one = distribution_mixup(&a, &b, 1.0, 3).unwrap();
        assert_eq!(one.gaussian.mu, a.mu);
        assert_eq!(one.soft_label.unwrap(), vec![1.0, 0.0, 0.0]);
        let half = distribution_mixup(&a, &b, 0.5, 3).unwrap();
        assert_eq!(half.soft_label.unwrap(), vec![0.5, 0.0, 0.5]);
        assert_eq!(half.gaussian.mu, vec![2.0]);
        assert!(distribution_mixup(&a, &g(&[0.0, 0.0], &[1.0, 1.0], 0, 0), 0.5, 3).is_err());
    }

    #[test]
    fn resample_degenerate_and_deterministic() {
        let aug = AugmentedDistribution {
            gaussian: ConditionalGaussian { mu: vec![1.0, -2.0], sigma: vec![0.0, 0.0], domain: 0, class: 1 },
            label: 1,
            source: AugSource::UniversumMix,
            soft_label: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (x, k) in resample(&aug, 20, &mut rng) {
            assert_eq!(k, 1);
            assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] + 2.0).abs() < 1e-6);
        }
        let wide = AugmentedDistribution { gaussian: g(&[0.0], &[1.0], 0, 0), ..aug };
        let a = resample(&wide, 1, &mut ChaCha8Rng::seed_from_u64(42));
        let b = resample(&wide, 1, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a[0].0[0].to_bits(), b[0].0[0].to_bits());
    }

    #[test]
    fn resample_moments() {
        let aug = AugmentedDistribution {
            gaussian: g(&[0.0], &[2.0], 0, 0),
            label: 0,
            source: AugSource::UniversumMix,
            soft_label: None,
        };
        let xs: Vec<f64> =
            resample(&aug, 10_000, &mut ChaCha8Rng::seed_from_u64(7)).into_iter().map(|(x, _)| x[0]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() <= 0.08, "mean {mean}");
        assert!((1.95..=2.05).contains(&std), "std {std}");
    }

    #[test]
    fn resample_count_fills_a_batch() {
        assert_eq!(resample_count(32, 9), 4);
        assert_eq!(resample_count(32, 8), 4);
        assert_eq!(resample_count(4, 9), 1);
    }

    #[test]
    fn pairs_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (a, b) in sample_pairs(&mut rng, 3, 500).unwrap() {
            assert!(a != b && a < 3 && b < 3);
        }
        assert!(sample_pairs(&mut rng, 1, 1).is_err());
    }

    #[test]
    fn gamma_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let gm = sample_gamma(&mut rng, 0.2).unwrap();
            assert!((0.0..=1.0).contains(&gm));
        }
        assert!(sample_gamma(&mut rng, 0.0).is_err());
    }

    #[test]
    fn tape_paths_agree_with_value_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cells: Vec<_> = (0..4)
            .map(|i| {
                g(
                    &(0..3).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>(),
                    &(0..3).map(|_| rng.random_range(0.1..2.0)).collect::<Vec<_>>(),
                    i / 2,
                    i % 2,
                )
            })
            .collect();
        let u = build_universum(&bank_of(&cells, 2, 2)).unwrap();
        let mut tape = Tape::new();
        let (mu, sigma) = crate::kernel::gaussian_rows(&mut tape, &cells).unwrap();

        let (um, us) = universum_mix_var(&mut tape, &u, mu, sigma, 0.3).unwrap();
        for (i, c) in cells.iter().enumerate() {
            let want = universum_mix(&u, c, 0.3).unwrap().gaussian;
            assert_eq!(tape.value(um).row(i), want.mu.as_slice());
            assert_eq!(tape.value(us).row(i), want.sigma.as_slice());
        }

        let pairs = [(0, 3), (2, 1), (1, 0)];
        let gammas = [0.2, 0.9, 0.0];
        let (mm, ms) = mixup_var(&mut tape, mu, sigma, &pairs, &gammas).unwrap();
        for (r, (&(a, b), &gm)) in pairs.iter().zip(&gammas).enumerate() {
            let want = distribution_mixup(&cells[a], &cells[b], gm, 2).unwrap().gaussian;
            assert_eq!(tape.value(mm).row(r), want.mu.as_slice());
            assert_eq!(tape.value(ms).row(r), want.sigma.as_slice());
        }

        let m = 3;
        let noise = draw_noise(&mut ChaCha8Rng::seed_from_u64(99), cells.len() * m, 3);
        let pseudo = resample_var(&mut tape, mu, sigma, m, &noise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (gi, c) in cells.iter().enumerate() {
            let aug = AugmentedDistribution {
                gaussian: c.clone(),
                label: c.class,
                source: AugSource::UniversumMix,
                soft_label: None,
            };
            for (r, (x, _)) in resample(&aug, m, &mut rng).into_iter().enumerate() {
                assert_eq!(tape.value(pseudo).row(gi * m + r), x.as_slice());
            }
        }
    }

    #[test]
    fn resampled_instances_carry_gradient_to_stats() {
        let mu = Tensor::matrix(2, 2, vec![0.1, -0.3, 0.7, 0.2]).unwrap();
        let sigma = Tensor::matrix(2, 2, vec![0.5, 1.5, 0.9, 0.4]).unwrap();
        let noise = draw_noise(&mut ChaCha8Rng::seed_from_u64(3), 6, 2);
        let gc = crate::autodiff::gradcheck::check(&[mu, sigma], 1e-6, |t, v| {
            let x = resample_var(t, v[0], v[1], 3, &noise)?;
            let s = t.square(x);
            Ok(t.sum(s))
        })
        .unwrap();
        assert!(gc.max_rel_err < 1e-6);
        assert!(gc.analytic[1].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn symmetric_bank_universum_is_class_neutral() {
        // Two domains, two classes, cells placed symmetrically about the origin
        // so every class sits at the same W2 distance from the Universum.
        let cells = [
            g(&[1.0, 0.0], &[1.0, 1.0], 0, 0),
            g(&[0.0, 1.0], &[1.0, 1.0], 0, 1),
            g(&[-1.0, 0.0], &[1.0, 1.0], 1, 0),
            g(&[0.0, -1.0], &[1.0, 1.0], 1, 1),
        ];
        let bank = bank_of(&cells, 2, 2);
        let u = build_universum(&bank).unwrap();
        let p = ConditionalGaussian { mu: u.mu, sigma: u.sigma, domain: 0, class: 0 };
        let e = embed(&p, &bank, &KernelConfig::ladder(1.0).unwrap()).unwrap().values;
        let per_class = [e[0] + e[2], e[1] + e[3]];
        let total: f64 = per_class.iter().sum();
        let entropy: f64 = per_class.iter().map(|v| -(v / total) * (v / total).ln()).sum();
        assert!((entropy - 2f64.ln()).abs() < 1e-12);
    }

    fn arb_gaussian(class: usize) -> impl Strategy<Value = ConditionalGaussian> {
        (prop::collection::vec(-5.0f64..5.0, 3), prop::collection::vec(0.01f64..5.0, 3))
            .prop_map(move |(mu, sigma)| ConditionalGaussian::new(mu, sigma, 0, class).unwrap())
    }

    fn within(x: f64, a: f64, b: f64) -> bool {
        x >= a.min(b) && x <= a.max(b)
    }

    proptest! {
        #[test]
        fn universum_mix_convex_and_label_preserving(
            cell in arb_gaussian(2), other in arb_gaussian(1), lambda in 0.001f64..0.999,
        ) {
            let u = Universum { mu: other.mu.clone(), sigma: other.sigma.clone() };
            let aug = universum_mix(&u, &cell, lambda).unwrap();
            prop_assert_eq!(aug.label, 2);
            for j in 0..3 {
                prop_assert!(within(aug.gaussian.mu[j], u.mu[j], cell.mu[j]));
                prop_assert!(within(aug.gaussian.sigma[j], u.sigma[j], cell.sigma[j]));
                prop_assert!(aug.gaussian.sigma[j] > 0.0);
            }
        }

        #[test]
        fn mixup_convex_and_soft_label_normalized(
            a in arb_gaussian(0), b in arb_gaussian(3), gamma in 0.0f64..=1.0,
        ) {
            let aug = distribution_mixup(&a, &b, gamma, 4).unwrap();
            let soft = aug.soft_label.unwrap();
            prop_assert!((soft.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..3 {
                prop_assert!(within(aug.gaussian.mu[j], a.mu[j], b.mu[j]));
                prop_assert!(within(aug.gaussian.sigma[j], a.sigma[j], b.sigma[j]));
                prop_assert!(aug.gaussian.sigma[j] > 0.0);
            }
        }
    }
}
