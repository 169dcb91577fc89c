//! Distribution-level classifier: closed-form 2-Wasserstein distance between
//! diagonal Gaussians, a multi-bandwidth RBF embedding against the momentum
//! bank, and an affine projection head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{rbf_sum, sq_dist, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundLinear, Linear};
use crate::stats::{ConditionalGaussian, StatsBank};

/// Multipliers applied to the median-heuristic base bandwidth.
pub const BANDWIDTH_LADDER: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Floor on the median heuristic.
pub const MIN_BANDWIDTH: f64 = 1e-6;

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// `|mu_p - mu_q|^2 + |sigma_p - sigma_q|^2`.
pub fn wasserstein2_sq(p: &ConditionalGaussian, q: &ConditionalGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::dim("wasserstein2_sq", format!("{} vs {}", p.dim(), q.dim())));
    }
    Ok(sq_dist(&p.mu, &q.mu) + sq_dist(&p.sigma, &q.sigma))
}

/// Differentiable pairwise squared 2-Wasserstein distances between the rows
/// of `(mu_a, sigma_a)` and the rows of `(mu_b, sigma_b)`.
pub fn wasserstein2_sq_var(tape: &mut Tape, mu_a: Var, sigma_a: Var, mu_b: Var, sigma_b: Var) -> Result<Var> {
    let dm = tape.pairwise_sq_dist(mu_a, mu_b)?;
    let ds = tape.pairwise_sq_dist(sigma_a, sigma_b)?;
    tape.add(dm, ds)
}

/// RBF bandwidths `h_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    bandwidths: Vec<f64>,
}

impl KernelConfig {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::Empty("bandwidths"));
        }
        if bandwidths.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(Error::Validation(format!("bandwidths must be positive: {bandwidths:?}")));
        }
        if bandwidths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!("bandwidths must be strictly increasing: {bandwidths:?}")));
        }
        Ok(KernelConfig { bandwidths })
    }

    /// [`BANDWIDTH_LADDER`] scaled by `base`.
    pub fn ladder(base: f64) -> Result<Self> {
        Self::new(BANDWIDTH_LADDER.iter().map(|m| m * base).collect())
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }
}

/// Median of pairwise squared distances between initialized bank cells,
/// floored at [`MIN_BANDWIDTH`].
pub fn median_heuristic(bank: &StatsBank) -> Result<f64> {
    let cells: Vec<&ConditionalGaussian> = bank.initialized().collect();
    if cells.len() < 2 {
        return Err(Error::Estimation(format!("median heuristic needs two cells, bank has {}", cells.len())));
    }
    let mut d = Vec::with_capacity(cells.len() * (cells.len() - 1) / 2);
    for i in 0..cells.len() {
        for j in i + 1..cells.len() {
            d.push(wasserstein2_sq(cells[i], cells[j])?);
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    Ok(med.max(MIN_BANDWIDTH))
}

/// Kernel responses of one distribution against every bank slot, domain-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelEmbedding {
    pub values: Vec<f64>,
}

/// Bank slots as constant matrices plus the initialization mask.
struct BankRefs {
    mu: Var,
    sigma: Var,
    mask: Vec<bool>,
}

fn bank_refs(tape: &mut Tape, bank: &StatsBank) -> BankRefs {
    let (m, s) = (bank.n_cells(), bank.stats_dim());
    let mut mu = vec![0.0; m * s];
    let mut sigma = vec![0.0; m * s];
    for (i, slot) in bank.slots().iter().enumerate() {
        if let Some(g) = slot {
            mu[i * s..(i + 1) * s].copy_from_slice(&g.mu);
            sigma[i * s..(i + 1) * s].copy_from_slice(&g.sigma);
        }
    }
    BankRefs {
        mu: tape.constant(Tensor::matrix(m, s, mu).expect("sized")),
        sigma: tape.constant(Tensor::matrix(m, s, sigma).expect("sized")),
        mask: bank.mask(),
    }
}

/// Differentiable embedding of each row distribution `(mu[i], sigma[i])`:
/// output `[i, slot] = sum_h exp(-W2^2 / h)`, zero for uninitialized slots.
pub fn embed_var(tape: &mut Tape, mu: Var, sigma: Var, bank: &StatsBank, cfg: &KernelConfig) -> Result<Var> {
    if tape.value(mu).cols() != bank.stats_dim() {
        return Err(Error::dim("embed", format!("stats dim {} vs bank {}", tape.value(mu).cols(), bank.stats_dim())));
    }
    let refs = bank_refs(tape, bank);
    let d2 = wasserstein2_sq_var(tape, mu, sigma, refs.mu, refs.sigma)?;
    tape.multi_rbf(d2, cfg.bandwidths(), Some(&refs.mask))
}

pub fn embed(p: &ConditionalGaussian, bank: &StatsBank, cfg: &KernelConfig) -> Result<KernelEmbedding> {
    let mut tape = Tape::new();
    let (mu, sigma) = gaussian_rows(&mut tape, std::slice::from_ref(p))?;
    let e = embed_var(&mut tape, mu, sigma, bank, cfg)?;
    Ok(KernelEmbedding { values: tape.value(e).data().to_vec() })
}

/// Stacks Gaussians into constant `(mu, sigma)` matrices.
pub fn gaussian_rows(tape: &mut Tape, gs: &[ConditionalGaussian]) -> Result<(Var, Var)> {
    let mu: Vec<Vec<f64>> = gs.iter().map(|g| g.mu.clone()).collect();
    let sigma: Vec<Vec<f64>> = gs.iter().map(|g| g.sigma.clone()).collect();
    Ok((tape.constant(Tensor::from_rows(&mu)?), tape.constant(Tensor::from_rows(&sigma)?)))
}

/// Affine map from the `N * |Y|` embedding to `|Y|` class logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub linear: Linear,
}

impl ProjectionHead {
    pub fn init<R: Rng + ?Sized>(n_cells: usize, n_classes: usize, rng: &mut R) -> Self {
        ProjectionHead { linear: Linear::init(n_cells, n_classes, rng) }
    }

    pub fn n_cells(&self) -> usize {
        self.linear.in_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        self.linear.bind(tape)
    }
}

/// Logits for each row distribution: `head(embed(p))`.
pub fn classify_var(
    tape: &mut Tape,
    mu: Var,
    sigma: Var,
    bank: &StatsBank,
    cfg: &KernelConfig,
    head: &BoundLinear,
) -> Result<Var> {
    let width = tape.value(head.weight).shape()[0];
    if width != bank.n_cells() {
        return Err(Error::dim(
            "classify_distribution",
            format!("head width {width} vs {} bank cells", bank.n_cells()),
        ));
    }
    let e = embed_var(tape, mu, sigma, bank, cfg)?;
    head.forward(tape, e)
}

pub fn classify_distribution(
    p: &ConditionalGaussian,
    bank: &StatsBank,
    cfg: &KernelConfig,
    head: &ProjectionHead,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (mu, sigma) = gaussian_rows(&mut tape, std::slice::from_ref(p))?;
    let h = head.bind(&mut tape);
    let logits = classify_var(&mut tape, mu, sigma, bank, cfg, &h)?;
    Ok(Tensor::vector(tape.value(logits).data().to_vec()))
}

/// Direct loop evaluation of one embedding entry, for callers that do not
/// need gradients.
pub fn kernel_value(p: &ConditionalGaussian, q: &ConditionalGaussian, cfg: &KernelConfig) -> Result<f64> {
    Ok(rbf_sum(wasserstein2_sq(p, q)?, cfg.bandwidths()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::autodiff::AdamState;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(mu: &[f64], sigma: &[f64], d: usize, k: usize) -> ConditionalGaussian {
        ConditionalGaussian::new(mu.to_vec(), sigma.to_vec(), d, k).unwrap()
    }

    fn random_gaussian(rng: &mut ChaCha8Rng, dim: usize, d: usize, k: usize) -> ConditionalGaussian {
        g(
            &(0..dim).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>(),
            &(0..dim).map(|_| rng.random_range(0.05..3.0)).collect::<Vec<_>>(),
            d,
            k,
        )
    }

    #[test]
    fn wasserstein_examples() {
        let p = g(&[1.0, 0.0], &[1.0, 1.0], 0, 0);
        let q = g(&[0.0, 0.0], &[1.0, 1.0], 0, 0);
        assert_eq!(wasserstein2_sq(&p, &p).unwrap(), 0.0);
        assert_eq!(wasserstein2_sq(&p, &q).unwrap(), 1.0);
        assert_eq!(wasserstein2_sq(&g(&[0.0], &[1.0], 0, 0), &g(&[0.0], &[3.0], 0, 0)).unwrap(), 4.0);
        assert!(wasserstein2_sq(&p, &g(&[0.0], &[1.0], 0, 0)).is_err());
    }

    #[test]
    fn kernel_config_validation() {
        assert!(KernelConfig::new(vec![]).is_err());
        assert!(KernelConfig::new(vec![1.0, 0.0]).is_err());
        assert!(KernelConfig::new(vec![2.0, 1.0]).is_err());
        assert_eq!(KernelConfig::ladder(2.0).unwrap().bandwidths(), &[0.5, 1.0, 2.0, 4.0, 8.0]);
    }

    fn bank_of(cells: &[ConditionalGaussian], n_domains: usize, n_classes: usize) -> StatsBank {
        let mut bank = StatsBank::new(n_domains, n_classes, cells[0].dim(), 0.9).unwrap();
        for c in cells {
            bank.insert(c.clone()).unwrap();
        }
        bank
    }

    #[test]
    fn embed_examples() {
        let cell = g(&[0.5, -0.5], &[1.0, 2.0], 0, 0);
        let other = g(&[1.5, -0.5], &[1.0, 2.0], 0, 1);
        let bank = bank_of(&[cell.clone(), other], 1, 2);
        let e = embed(&cell, &bank, &KernelConfig::new(vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(e.values[0], 2.0);
        let e = embed(&cell, &bank, &KernelConfig::new(vec![1.0]).unwrap()).unwrap();
        assert!((e.values[1] - (-1f64).exp()).abs() < 1e-15);
        assert!((e.values[1] - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn uninitialized_slots_embed_to_zero() {
        let cell = g(&[0.0], &[1.0], 1, 0);
        let bank = bank_of(std::slice::from_ref(&cell), 2, 2);
        let e = embed(&cell, &bank, &KernelConfig::new(vec![1.0]).unwrap()).unwrap();
        assert_eq!(e.values, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn embed_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let cells: Vec<_> = (0..6).map(|i| random_gaussian(&mut rng, 4, i / 3, i % 3)).collect();
            let bank = bank_of(&cells, 2, 3);
            let p = random_gaussian(&mut rng, 4, 0, 0);
            let cfg = KernelConfig::new(vec![0.3, 1.1, 5.0]).unwrap();
            let e = embed(&p, &bank, &cfg).unwrap();
            for (slot, c) in cells.iter().enumerate() {
                let mut dm = 0.0;
                for j in 0..4 {
                    dm += (p.mu[j] - c.mu[j]).powi(2);
                }
                let mut ds = 0.0;
                for j in 0..4 {
                    ds += (p.sigma[j] - c.sigma[j]).powi(2);
                }
                let d2 = dm + ds;
                let mut want = 0.0;
                for &h in cfg.bandwidths() {
                    want += (-d2 / h).exp();
                }
                assert_eq!(e.values[slot], want);
            }
        }
    }

    #[test]
    fn classify_with_zero_head_returns_bias() {
        let cell = g(&[0.0], &[1.0], 0, 0);
        let bank = bank_of(&[cell.clone(), g(&[1.0], &[1.0], 0, 1)], 1, 2);
        let head = ProjectionHead {
            linear: Linear::from_parts(Tensor::zeros(&[2, 2]), Tensor::vector(vec![0.25, -0.5])).unwrap(),
        };
        let cfg = KernelConfig::new(vec![1.0]).unwrap();
        let logits = classify_distribution(&cell, &bank, &cfg, &head).unwrap();
        assert_eq!(logits.data(), &[0.25, -0.5]);
    }

    #[test]
    fn classify_with_selector_head_reads_embedding() {
        let cell = g(&[0.0], &[1.0], 0, 0);
        let bank =
            bank_of(&[cell.clone(), g(&[1.0], &[1.0], 0, 1), g(&[2.0], &[0.5], 1, 0), g(&[0.0], &[2.0], 1, 1)], 2, 2);
        // logit 0 <- slot 3, logit 1 <- slot 1
        let mut w = vec![0.0; 8];
        w[3 * 2] = 1.0;
        w[2 + 1] = 1.0;
        let head = ProjectionHead {
            linear: Linear::from_parts(Tensor::matrix(4, 2, w).unwrap(), Tensor::zeros(&[2])).unwrap(),
        };
        let cfg = KernelConfig::new(vec![0.5, 2.0]).unwrap();
        let e = embed(&cell, &bank, &cfg).unwrap();
        let logits = classify_distribution(&cell, &bank, &cfg, &head).unwrap();
        assert_eq!(logits.data(), &[e.values[3], e.values[1]]);
        let wide = ProjectionHead::init(3, 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(classify_distribution(&cell, &bank, &cfg, &wide).is_err());
    }

    #[test]
    fn median_heuristic_examples() {
        let a = g(&[0.0], &[1.0], 0, 0);
        let b = g(&[2.0], &[1.0], 0, 1);
        assert_eq!(median_heuristic(&bank_of(&[a.clone(), b], 1, 2)).unwrap(), 4.0);

        // pairwise squared distances {1, 4, 9}
        let c0 = g(&[0.0], &[1.0], 0, 0);
        let c1 = g(&[1.0], &[1.0], 0, 1);
        let c2 = g(&[3.0], &[1.0], 0, 2);
        assert_eq!(median_heuristic(&bank_of(&[c0, c1, c2], 1, 3)).unwrap(), 4.0);

        let same = g(&[0.5], &[1.0], 0, 1);
        let degenerate = bank_of(&[g(&[0.5], &[1.0], 0, 0), same], 1, 2);
        assert_eq!(median_heuristic(&degenerate).unwrap(), 1e-6);

        assert!(matches!(median_heuristic(&bank_of(&[a], 1, 2)), Err(Error::Estimation(_))));
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cells: Vec<_> = (0..4).map(|i| random_gaussian(&mut rng, 3, i / 2, i % 2)).collect();
        let bank = bank_of(&cells, 2, 2);
        let cfg = KernelConfig::ladder(4.0).unwrap();
        let p = random_gaussian(&mut rng, 3, 0, 0);
        let inputs = [Tensor::matrix(1, 3, p.mu.clone()).unwrap(), Tensor::matrix(1, 3, p.sigma.clone()).unwrap()];
        let gc = gradcheck::check(&inputs, 1e-6, |t, v| {
            let e = embed_var(t, v[0], v[1], &bank, &cfg)?;
            let w = t.constant(Tensor::matrix(4, 1, vec![1.0, -2.0, 0.5, 3.0]).unwrap());
            let s = t.matmul(e, w)?;
            Ok(t.sum(s))
        })
        .unwrap();
        assert!(gc.max_rel_err < 1e-4, "{}", gc.max_rel_err);
    }

    #[test]
    fn trained_head_separates_well_separated_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let centers =
            [g(&[0.0, 0.0], &[1.0, 1.0], 0, 0), g(&[4.0, 0.0], &[1.0, 1.0], 0, 1), g(&[0.0, 4.0], &[0.5, 2.0], 0, 2)];
        let bank = bank_of(&centers, 1, 3);
        let cfg = KernelConfig::ladder(median_heuristic(&bank).unwrap()).unwrap();
        let mut head = ProjectionHead::init(3, 3, &mut rng);
        let jitter = |rng: &mut ChaCha8Rng, c: &ConditionalGaussian| {
            g(
                &c.mu.iter().map(|m| m + rng.random_range(-0.5..0.5)).collect::<Vec<_>>(),
                &c.sigma.iter().map(|s| s * rng.random_range(0.8..1.2)).collect::<Vec<_>>(),
                0,
                c.class,
            )
        };
        let mut adam = AdamState::new(0.05);
        for _ in 0..300 {
            let batch: Vec<_> = centers.iter().map(|c| jitter(&mut rng, c)).collect();
            let mut tape = Tape::new();
            let (mu, sigma) = gaussian_rows(&mut tape, &batch).unwrap();
            let h = head.bind(&mut tape);
            let logits = classify_var(&mut tape, mu, sigma, &bank, &cfg, &h).unwrap();
            let mut targets = Tensor::zeros(&[3, 3]);
            for (i, c) in batch.iter().enumerate() {
                targets.data_mut()[i * 3 + c.class] = 1.0;
            }
            let loss = tape.softmax_cross_entropy(logits, &targets).unwrap();
            tape.backward(loss).unwrap();
            head.linear.collect_grads(&tape, &h).unwrap();
            let mut ps = head.linear.params_mut();
            adam.step_tensors(&mut ps).unwrap();
            head.linear.weight.zero_grad();
            head.linear.bias.zero_grad();
        }
        let mut correct = 0;
        let n = 300;
        for i in 0..n {
            let c = &centers[i % 3];
            let q = jitter(&mut rng, c);
            let logits = classify_distribution(&q, &bank, &cfg, &head).unwrap();
            let arg = logits.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            correct += usize::from(arg == c.class);
        }
        assert!(correct as f64 / n as f64 >= 0.95, "accuracy {}", correct as f64 / n as f64);
    }

    fn arb_gaussian(dim: usize) -> impl Strategy<Value = ConditionalGaussian> {
        (prop::collection::vec(-5.0f64..5.0, dim), prop::collection::vec(0.01f64..5.0, dim))
            .prop_map(|(mu, sigma)| ConditionalGaussian::new(mu, sigma, 0, 0).unwrap())
    }

    proptest! {
        #[test]
        fn root_w2_is_a_metric(p in arb_gaussian(3), q in arb_gaussian(3), r in arb_gaussian(3)) {
            let d = |a: &ConditionalGaussian, b: &ConditionalGaussian| wasserstein2_sq(a, b).unwrap().sqrt();
            prop_assert!(d(&p, &q) >= 0.0);
            prop_assert_eq!(d(&p, &p), 0.0);
            prop_assert!((d(&p, &q) - d(&q, &p)).abs() <= 1e-9);
            prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-9);
        }

        #[test]
        fn embed_entries_bounded(p in arb_gaussian(2), c in arb_gaussian(2)) {
            let cfg = KernelConfig::ladder(1.0).unwrap();
            let bank = bank_of(std::slice::from_ref(&c), 1, 1);
            let e = embed(&p, &bank, &cfg).unwrap().values[0];
            prop_assert!(e >= 0.0 && e <= cfg.bandwidths().len() as f64);
            let self_e = embed(&c, &bank, &cfg).unwrap().values[0];
            prop_assert_eq!(self_e, cfg.bandwidths().len() as f64);
        }

        #[test]
        fn embed_decreases_with_distance(shift_a in 0.0f64..3.0, extra in 0.01f64..3.0) {
            let c = ConditionalGaussian::new(vec![0.0, 0.0], vec![1.0, 1.0], 0, 0).unwrap();
            let bank = bank_of(&[c], 1, 1);
            let cfg = KernelConfig::ladder(2.0).unwrap();
            let near = ConditionalGaussian::new(vec![shift_a, 0.0], vec![1.0, 1.0], 0, 0).unwrap();
            let far = ConditionalGaussian::new(vec![shift_a + extra, 0.0], vec![1.0, 1.0], 0, 0).unwrap();
            prop_assert!(embed(&near, &bank, &cfg).unwrap().values[0] > embed(&far, &bank, &cfg).unwrap().values[0]);
        }
    }
}
