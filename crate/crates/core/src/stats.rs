//! Per-instance Gaussian statistics, their aggregation into
//! domain-related class-conditional Gaussians, and the momentum bank.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundLinear, Linear};

/// Diagonal Gaussian `(mu, sigma)` for one (domain, class) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGaussian {
    pub mu: Vec<f64>,
    /// Standard deviations, strictly positive.
    pub sigma: Vec<f64>,
    pub domain: usize,
    pub class: usize,
}

impl ConditionalGaussian {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, domain: usize, class: usize) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::dim("conditional_gaussian", format!("mu {} vs sigma {}", mu.len(), sigma.len())));
        }
        if let Some(s) = sigma.iter().find(|&&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::domain("conditional_gaussian", format!("sigma entry {s}")));
        }
        Ok(ConditionalGaussian { mu, sigma, domain, class })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// The two affine heads producing `mu` and `log(sigma^2)` from a latent code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsHeads {
    pub fc_mu: Linear,
    pub fc_logvar: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHeads {
    pub fc_mu: BoundLinear,
    pub fc_logvar: BoundLinear,
}

impl StatsHeads {
    pub fn init<R: Rng + ?Sized>(latent_dim: usize, stats_dim: usize, rng: &mut R) -> Self {
        StatsHeads {
            fc_mu: Linear::init(latent_dim, stats_dim, rng),
            fc_logvar: Linear::init(latent_dim, stats_dim, rng),
        }
    }

    pub fn from_parts(fc_mu: Linear, fc_logvar: Linear) -> Result<Self> {
        if fc_mu.out_dim() != fc_logvar.out_dim() || fc_mu.in_dim() != fc_logvar.in_dim() {
            return Err(Error::dim("stats_heads", "mu and logvar heads disagree"));
        }
        Ok(StatsHeads { fc_mu, fc_logvar })
    }

    pub fn stats_dim(&self) -> usize {
        self.fc_mu.out_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundHeads {
        BoundHeads { fc_mu: self.fc_mu.bind(tape), fc_logvar: self.fc_logvar.bind(tape) }
    }

    pub fn collect_grads(&mut self, tape: &Tape, bound: &BoundHeads) -> Result<()> {
        self.fc_mu.collect_grads(tape, &bound.fc_mu)?;
        self.fc_logvar.collect_grads(tape, &bound.fc_logvar)
    }
}

/// `mu = fc_mu(z)`, `sigma = exp(0.5 * fc_logvar(z))`, row per instance.
pub fn per_instance_stats(tape: &mut Tape, z: Var, heads: &BoundHeads) -> Result<(Var, Var)> {
    let latent = tape.value(z).cols();
    let expected = tape.value(heads.fc_mu.weight).shape()[0];
    if latent != expected {
        return Err(Error::dim("per_instance_stats", format!("latent {latent} vs heads {expected}")));
    }
    let mu = heads.fc_mu.forward(tape, z)?;
    let logvar = heads.fc_logvar.forward(tape, z)?;
    let half = tape.scale(logvar, 0.5);
    let sigma = tape.exp(half);
    Ok((mu, sigma))
}

/// Cell statistics for one batch, still attached to the tape.
///
/// Row `i` of `mu`/`sigma` belongs to `cells[i] = (domain, class)`; cells are
/// sorted domain-major.
#[derive(Clone, Debug)]
pub struct CellStats {
    pub cells: Vec<(usize, usize)>,
    pub mu: Var,
    pub sigma: Var,
}

impl CellStats {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Detached snapshot of the cell Gaussians.
    pub fn to_gaussians(&self, tape: &Tape) -> Vec<ConditionalGaussian> {
        let (mu, sigma) = (tape.value(self.mu), tape.value(self.sigma));
        self.cells
            .iter()
            .enumerate()
            .map(|(i, &(d, k))| ConditionalGaussian {
                mu: mu.row(i).to_vec(),
                sigma: sigma.row(i).to_vec(),
                domain: d,
                class: k,
            })
            .collect()
    }
}

/// Groups instance rows by (domain, class), in domain-major order.
pub fn cell_groups(labels: &[usize], domains: &[usize]) -> BTreeMap<(usize, usize), Vec<usize>> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, (&k, &d)) in labels.iter().zip(domains).enumerate() {
        groups.entry((d, k)).or_default().push(i);
    }
    groups
}

/// Averages per-instance statistics within each (domain, class) cell present
/// in the batch.
pub fn aggregate_by_cell(
    tape: &mut Tape,
    mu: Var,
    sigma: Var,
    labels: &[usize],
    domains: &[usize],
) -> Result<CellStats> {
    let rows = tape.value(mu).rows();
    if labels.len() != rows || domains.len() != rows || tape.value(sigma).rows() != rows {
        return Err(Error::dim(
            "aggregate_by_cell",
            format!("{rows} rows, {} labels, {} domains", labels.len(), domains.len()),
        ));
    }
    if rows == 0 {
        return Err(Error::Empty("aggregate_by_cell"));
    }
    let groups = cell_groups(labels, domains);
    let cells: Vec<(usize, usize)> = groups.keys().copied().collect();
    let members: Vec<Vec<usize>> = groups.into_values().collect();
    let mu = tape.group_mean(mu, &members)?;
    let sigma = tape.group_mean(sigma, &members)?;
    Ok(CellStats { cells, mu, sigma })
}

/// Momentum-smoothed reference statistics, one slot per (domain, class).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsBank {
    n_domains: usize,
    n_classes: usize,
    stats_dim: usize,
    rho: f64,
    cells: Vec<Option<ConditionalGaussian>>,
}

impl StatsBank {
    pub fn new(n_domains: usize, n_classes: usize, stats_dim: usize, rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Validation(format!("momentum weight {rho} outside [0, 1)")));
        }
        if n_domains == 0 || n_classes == 0 || stats_dim == 0 {
            return Err(Error::Validation("bank dimensions must be positive".into()));
        }
        Ok(StatsBank { n_domains, n_classes, stats_dim, rho, cells: vec![None; n_domains * n_classes] })
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn stats_dim(&self) -> usize {
        self.stats_dim
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Number of reference slots, `N * |Y|`.
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Slot index of `(domain, class)`: domain-major.
    pub fn slot(&self, domain: usize, class: usize) -> usize {
        domain * self.n_classes + class
    }

    pub fn get(&self, domain: usize, class: usize) -> Option<&ConditionalGaussian> {
        if domain >= self.n_domains || class >= self.n_classes {
            return None;
        }
        self.cells[self.slot(domain, class)].as_ref()
    }

    /// All slots in layout order.
    pub fn slots(&self) -> &[Option<ConditionalGaussian>] {
        &self.cells
    }

    pub fn initialized(&self) -> impl Iterator<Item = &ConditionalGaussian> {
        self.cells.iter().flatten()
    }

    pub fn n_initialized(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn is_full(&self) -> bool {
        self.cells.iter().all(Option::is_some)
    }

    /// Mask over slots, true where initialized.
    pub fn mask(&self) -> Vec<bool> {
        self.cells.iter().map(Option::is_some).collect()
    }

    /// Overwrites a slot; used by loaders and tests.
    pub fn insert(&mut self, g: ConditionalGaussian) -> Result<()> {
        self.check(&g)?;
        let s = self.slot(g.domain, g.class);
        self.cells[s] = Some(g);
        Ok(())
    }

    fn check(&self, g: &ConditionalGaussian) -> Result<()> {
        if g.domain >= self.n_domains || g.class >= self.n_classes {
            return Err(Error::Validation(format!("cell ({}, {}) outside bank", g.domain, g.class)));
        }
        if g.mu.len() != self.stats_dim || g.sigma.len() != self.stats_dim {
            return Err(Error::dim("stats_bank", format!("cell dim {} vs {}", g.mu.len(), self.stats_dim)));
        }
        Ok(())
    }

    /// `old <- rho * old + (1 - rho) * fresh` on both `mu` and `sigma`; the
    /// first observation of a slot is stored as is.
    pub fn momentum_update(&mut self, fresh: &[ConditionalGaussian]) -> Result<()> {
        for g in fresh {
            self.check(g)?;
        }
        let rho = self.rho;
        for g in fresh {
            let s = self.slot(g.domain, g.class);
            match &mut self.cells[s] {
                None => self.cells[s] = Some(g.clone()),
                Some(old) => {
                    for (o, f) in old.mu.iter_mut().zip(&g.mu) {
                        *o = rho * *o + (1.0 - rho) * f;
                    }
                    for (o, f) in old.sigma.iter_mut().zip(&g.sigma) {
                        *o = rho * *o + (1.0 - rho) * f;
                    }
                }
            }
        }
        Ok(())
    }
}
