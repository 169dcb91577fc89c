//! Synthetic multi-domain datasets and leave-one-domain-out splits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Standard deviation of the class-center prior in [`gen_shifted_blobs`].
pub const BLOB_CENTER_SPREAD: f64 = 3.0;
/// Rotation applied per unit of `shift_scale` in [`gen_shifted_blobs`], radians.
pub const BLOB_ROTATION_PER_UNIT: f64 = std::f64::consts::PI / 36.0;
/// Number of weakly informative features in [`gen_correlation_flip`].
pub const FLIP_SIGNAL_DIMS: usize = 2;
/// Class-mean offset of each informative feature in [`gen_correlation_flip`].
pub const FLIP_SIGNAL_SHIFT: f64 = 0.5;
/// Fraction of every source domain held out for model selection.
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub id: usize,
    pub name: String,
    /// Row-major `len x input_dim`.
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize, input_dim: usize) -> &[f64] {
        &self.x[i * input_dim..(i + 1) * input_dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub generator: String,
    pub seed: u64,
    pub input_dim: usize,
    pub n_classes: usize,
    pub domains: Vec<Domain>,
    /// Generator parameters, for provenance.
    pub params: BTreeMap<String, String>,
}

impl DomainDataset {
    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domain(&self, id: usize) -> Result<&Domain> {
        self.domains.iter().find(|d| d.id == id).ok_or(Error::UnknownDomain(id))
    }

    /// Checks the shared-label-space contract.
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() || self.n_classes == 0 || self.input_dim == 0 {
            return Err(Error::Dataset("empty dataset".into()));
        }
        for d in &self.domains {
            if d.x.len() != d.labels.len() * self.input_dim {
                return Err(Error::Dataset(format!("domain {} has ragged features", d.id)));
            }
            let mut seen = vec![false; self.n_classes];
            for &k in &d.labels {
                if k >= self.n_classes {
                    return Err(Error::Dataset(format!("label {k} out of range in domain {}", d.id)));
                }
                seen[k] = true;
            }
            if !seen.iter().all(|&s| s) {
                return Err(Error::Dataset(format!("domain {} lacks some class", d.id)));
            }
        }
        Ok(())
    }
}

fn domain_rng(seed: u64, domain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + domain as u64);
    rng
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Removes the components of `v` along each (orthonormal) vector in `basis`;
/// returns `None` when nothing substantial is left.
fn orthogonalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for b in basis {
        let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-6).then(|| v.into_iter().map(|x| x / n).collect())
}

/// Rotation by `angle` in the plane spanned by orthonormal `u`, `w`.
fn rotate_in_plane(x: &[f64], u: &[f64], w: &[f64], angle: f64) -> Vec<f64> {
    let a: f64 = x.iter().zip(u).map(|(p, q)| p * q).sum();
    let b: f64 = x.iter().zip(w).map(|(p, q)| p * q).sum();
    let (s, c) = angle.sin_cos();
    let (a2, b2) = (c * a - s * b, s * a + c * b);
    x.iter().enumerate().map(|(i, &xi)| xi + (a2 - a) * u[i] + (b2 - b) * w[i]).collect()
}

/// Class centers shared by all domains; every domain rotates and translates
/// them, giving each class one cluster per domain.
///
/// Domain translations have norm `shift_scale` and are mutually orthogonal
/// when `n_domains <= input_dim`; each domain also rotates the centers by
/// `shift_scale * BLOB_ROTATION_PER_UNIT` in a random plane.
pub fn gen_shifted_blobs(
    n_domains: usize,
    n_classes: usize,
    n_per_cell: usize,
    input_dim: usize,
    shift_scale: f64,
    seed: u64,
) -> Result<DomainDataset> {
    if n_domains < 2 || n_classes < 2 || input_dim < 2 || n_per_cell < 1 {
        return Err(Error::Dataset(format!(
            "shifted blobs needs >=2 domains, classes and dims and >=1 instance per cell \
             (got {n_domains}, {n_classes}, {input_dim}, {n_per_cell})"
        )));
    }
    if !(shift_scale >= 0.0) || !shift_scale.is_finite() {
        return Err(Error::Dataset(format!("shift_scale must be non-negative, got {shift_scale}")));
    }
    let mut rng = stream(seed, Purpose::Data);
    let centers: Vec<Vec<f64>> =
        (0..n_classes).map(|_| (0..input_dim).map(|_| BLOB_CENTER_SPREAD * normal(&mut rng)).collect()).collect();
    let mut directions: Vec<Vec<f64>> = Vec::new();
    let mut domains = Vec::with_capacity(n_domains);
    for d in 0..n_domains {
        let raw = unit_vector(&mut rng, input_dim);
        let dir = orthogonalize(raw.clone(), &directions).unwrap_or(raw);
        directions.push(dir.clone());
        let u = unit_vector(&mut rng, input_dim);
        let w = orthogonalize(unit_vector(&mut rng, input_dim), std::slice::from_ref(&u))
            .expect("two random directions are almost surely independent");
        let angle = shift_scale * BLOB_ROTATION_PER_UNIT;
        let shifted: Vec<Vec<f64>> = centers
            .iter()
            .map(|c| rotate_in_plane(c, &u, &w, angle).iter().zip(&dir).map(|(x, t)| x + shift_scale * t).collect())
            .collect();

        let mut drng = domain_rng(seed, d);
        let mut x = Vec::with_capacity(n_classes * n_per_cell * input_dim);
        let mut labels = Vec::with_capacity(n_classes * n_per_cell);
        for (k, c) in shifted.iter().enumerate() {
            for _ in 0..n_per_cell {
                x.extend(c.iter().map(|m| m + normal(&mut drng)));
                labels.push(k);
            }
        }
        domains.push(Domain { id: d, name: format!("domain{d}"), x, labels });
    }
    let params = BTreeMap::from([
        ("n_domains".to_string(), n_domains.to_string()),
        ("n_classes".to_string(), n_classes.to_string()),
        ("n_per_cell".to_string(), n_per_cell.to_string()),
        ("shift_scale".to_string(), shift_scale.to_string()),
    ]);
    Ok(DomainDataset { generator: "shifted_blobs".into(), seed, input_dim, n_classes, domains, params })
}

/// Center of the canonical two-moons layout; rotations pivot here.
pub const MOONS_CENTER: [f64; 2] = [0.5, 0.25];

/// One canonical two-moons sample: class 0 is the upper arc, class 1 the
/// lower arc. Returns `(x, labels)` with `x` row-major `n x 2`.
pub fn two_moons<R: Rng + ?Sized>(n: usize, noise_std: f64, rng: &mut R) -> (Vec<f64>, Vec<usize>) {
    let n0 = n / 2;
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = usize::from(i >= n0);
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let (px, py) = if k == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        x.push(px + noise_std * normal(rng));
        x.push(py + noise_std * normal(rng));
        labels.push(k);
    }
    (x, labels)
}

/// Rotates 2-d points about [`MOONS_CENTER`] by `degrees`.
pub fn rotate_about_center(x: &mut [f64], degrees: f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    for p in x.chunks_mut(2) {
        let (dx, dy) = (p[0] - MOONS_CENTER[0], p[1] - MOONS_CENTER[1]);
        p[0] = MOONS_CENTER[0] + c * dx - s * dy;
        p[1] = MOONS_CENTER[1] + s * dx + c * dy;
    }
}

/// One two-moons domain per angle, each rotated about the moons' center.
pub fn gen_rotated_moons(angles: &[f64], n_per_domain: usize, noise_std: f64, seed: u64) -> Result<DomainDataset> {
    if angles.len() < 2 {
        return Err(Error::Dataset("rotated moons needs at least two angles".into()));
    }
    for (i, a) in angles.iter().enumerate() {
        if !a.is_finite() {
            return Err(Error::Dataset(format!("angle {a} is not finite")));
        }
        if angles[..i].contains(a) {
            return Err(Error::Dataset(format!("duplicate angle {a}")));
        }
    }
    if n_per_domain < 2 || !(noise_std >= 0.0) {
        return Err(Error::Dataset(format!(
            "need n_per_domain >= 2 and noise_std >= 0 (got {n_per_domain}, {noise_std})"
        )));
    }
    let domains = angles
        .iter()
        .enumerate()
        .map(|(d, &angle)| {
            let (mut x, labels) = two_moons(n_per_domain, noise_std, &mut domain_rng(seed, d));
            if angle != 0.0 {
                rotate_about_center(&mut x, angle);
            }
            Domain { id: d, name: format!("{angle}deg"), x, labels }
        })
        .collect();
    let params = BTreeMap::from([
        ("angles".to_string(), format!("{angles:?}")),
        ("n_per_domain".to_string(), n_per_domain.to_string()),
        ("noise_std".to_string(), noise_std.to_string()),
    ]);
    Ok(DomainDataset { generator: "rotated_moons".into(), seed, input_dim: 2, n_classes: 2, domains, params })
}

/// Binary task with [`FLIP_SIGNAL_DIMS`] weakly informative Gaussian features
/// and one spurious `{0, 1}` feature that equals the label with probability
/// `(1 + rate) / 2` in each domain.
pub fn gen_correlation_flip(rates: &[f64], n_per_domain: usize, seed: u64) -> Result<DomainDataset> {
    if rates.len() < 2 {
        return Err(Error::Dataset("correlation flip needs at least two domains".into()));
    }
    if let Some(r) = rates.iter().find(|r| !(-1.0..=1.0).contains(*r)) {
        return Err(Error::Dataset(format!("correlation rate {r} outside [-1, 1]")));
    }
    if n_per_domain < 2 {
        return Err(Error::Dataset("need at least two instances per domain".into()));
    }
    let input_dim = FLIP_SIGNAL_DIMS + 1;
    let domains = rates
        .iter()
        .enumerate()
        .map(|(d, &rate)| {
            let mut rng = domain_rng(seed, d);
            let agree = (1.0 + rate) / 2.0;
            let mut x = Vec::with_capacity(n_per_domain * input_dim);
            let mut labels = Vec::with_capacity(n_per_domain);
            for i in 0..n_per_domain {
                // alternate labels so priors are exactly balanced
                let y = i % 2;
                let sign = if y == 1 { 1.0 } else { -1.0 };
                for _ in 0..FLIP_SIGNAL_DIMS {
                    x.push(sign * FLIP_SIGNAL_SHIFT + normal(&mut rng));
                }
                let matches = rng.random::<f64>() < agree;
                let s = if matches { y } else { 1 - y };
                x.push(s as f64);
                labels.push(y);
            }
            Domain { id: d, name: format!("{rate:+}"), x, labels }
        })
        .collect();
    let params = BTreeMap::from([
        ("rates".to_string(), format!("{rates:?}")),
        ("n_per_domain".to_string(), n_per_domain.to_string()),
    ]);
    Ok(DomainDataset { generator: "correlation_flip".into(), seed, input_dim, n_classes: 2, domains, params })
}

/// Target accuracy of the best rule that reads only the spurious feature of a
/// [`gen_correlation_flip`] dataset, fitted on every other domain.
///
/// The rule predicts `s` or `1 - s`, whichever agrees more often with the
/// source labels.
pub fn spurious_probe_accuracy(ds: &DomainDataset, target: usize) -> Result<f64> {
    if ds.generator != "correlation_flip" {
        return Err(Error::Dataset(format!("spurious probe needs a correlation_flip dataset, got {}", ds.generator)));
    }
    let spurious = ds.input_dim - 1;
    let agreement = |d: &Domain| -> (usize, usize) {
        let hits = (0..d.len()).filter(|&i| (d.row(i, ds.input_dim)[spurious] > 0.5) == (d.labels[i] == 1)).count();
        (hits, d.len())
    };
    let (mut hits, mut n) = (0, 0);
    for d in ds.domains.iter().filter(|d| d.id != target) {
        let (h, m) = agreement(d);
        hits += h;
        n += m;
    }
    let direct = 2 * hits >= n;
    let t = ds.domain(target)?;
    if t.is_empty() {
        return Err(Error::Empty("probe target"));
    }
    let (h, m) = agreement(t);
    let correct = if direct { h } else { m - h };
    Ok(correct as f64 / m as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSplit {
    pub domain: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Leave-one-domain-out plan with a stratified 80/20 train/val split of every
/// source domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target_domain: usize,
    pub sources: Vec<SourceSplit>,
    pub seed: u64,
}

/// Per-class validation counts summing to `round(VAL_FRACTION * n)`, assigned
/// by largest remainder.
fn val_quota(class_sizes: &[usize]) -> Vec<usize> {
    let n: usize = class_sizes.iter().sum();
    let total = (VAL_FRACTION * n as f64).round() as usize;
    let exact: Vec<f64> = class_sizes.iter().map(|&c| VAL_FRACTION * c as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = total.saturating_sub(quota.iter().sum());
    for &k in order.iter().cycle().take(class_sizes.len() * 2) {
        if left == 0 {
            break;
        }
        if quota[k] < class_sizes[k] {
            quota[k] += 1;
            left -= 1;
        }
    }
    quota
}

pub fn split_lodo(dataset: &DomainDataset, target_domain: usize, seed: u64) -> Result<SplitPlan> {
    dataset.domain(target_domain)?;
    let mut rng = stream(seed, Purpose::Split);
    let mut sources = Vec::new();
    for d in dataset.domains.iter().filter(|d| d.id != target_domain) {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes];
        for (i, &k) in d.labels.iter().enumerate() {
            by_class[k].push(i);
        }
        let quota = val_quota(&by_class.iter().map(Vec::len).collect::<Vec<_>>());
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (members, q) in by_class.iter_mut().zip(quota) {
            members.shuffle(&mut rng);
            val.extend_from_slice(&members[..q]);
            train.extend_from_slice(&members[q..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        sources.push(SourceSplit { domain: d.id, train, val });
    }
    if sources.len() < 2 {
        return Err(Error::Dataset(format!("need at least two source domains, have {}", sources.len())));
    }
    Ok(SplitPlan { target_domain, sources, seed })
}

const FORMAT_TAG: &str = "# con2em-dataset v1";

/// Writes the columnar text format:
///
/// ```text
/// # con2em-dataset v1
/// # generator=<name> seed=<u64> input_dim=<n> n_classes=<k> n_domains=<d>
/// # domain_names=<json list>
/// # params=<json object>
/// domain,label,x0,x1,...
/// <domain>,<label>,<f64>,...
/// ```
///
/// Floats use the shortest representation that parses back to the same bits.
pub fn to_text(ds: &DomainDataset) -> String {
    let mut s = String::new();
    let names: Vec<&str> = ds.domains.iter().map(|d| d.name.as_str()).collect();
    let _ = writeln!(s, "{FORMAT_TAG}");
    let _ = writeln!(
        s,
        "# generator={} seed={} input_dim={} n_classes={} n_domains={}",
        ds.generator,
        ds.seed,
        ds.input_dim,
        ds.n_classes,
        ds.domains.len()
    );
    let _ = writeln!(s, "# domain_names={}", serde_json::to_string(&names).expect("strings serialize"));
    let _ = writeln!(s, "# params={}", serde_json::to_string(&ds.params).expect("map serializes"));
    let header: Vec<String> = ["domain".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..ds.input_dim).map(|j| format!("x{j}")))
        .collect();
    let _ = writeln!(s, "{}", header.join(","));
    for d in &ds.domains {
        for i in 0..d.len() {
            let _ = write!(s, "{},{}", d.id, d.labels[i]);
            for v in d.row(i, ds.input_dim) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn from_text(text: &str) -> Result<DomainDataset> {
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| lines.next().ok_or_else(|| Error::Parse { line: 0, msg: format!("missing {what}") });
    let (_, tag) = next("format tag")?;
    if tag.trim() != FORMAT_TAG {
        return Err(Error::Parse { line: 1, msg: format!("expected '{FORMAT_TAG}'") });
    }
    let (ln, meta) = next("metadata line")?;
    let fields: BTreeMap<&str, &str> =
        meta.trim_start_matches('#').split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
    let field = |k: &str| {
        fields.get(k).copied().ok_or_else(|| Error::Parse { line: ln + 1, msg: format!("missing field {k}") })
    };
    let num = |k: &str| -> Result<u64> {
        field(k)?.parse().map_err(|e| Error::Parse { line: ln + 1, msg: format!("field {k}: {e}") })
    };
    let generator = field("generator")?.to_string();
    let seed = num("seed")?;
    let input_dim = num("input_dim")? as usize;
    let n_classes = num("n_classes")? as usize;
    let n_domains = num("n_domains")? as usize;

    let (ln, names_line) = next("domain names")?;
    let names: Vec<String> = names_line
        .strip_prefix("# domain_names=")
        .ok_or_else(|| Error::Parse { line: ln + 1, msg: "expected domain_names".into() })
        .and_then(|j| serde_json::from_str(j).map_err(|e| Error::Parse { line: ln + 1, msg: e.to_string() }))?;
    let (ln, params_line) = next("params")?;
    let params: BTreeMap<String, String> = params_line
        .strip_prefix("# params=")
        .ok_or_else(|| Error::Parse { line: ln + 1, msg: "expected params".into() })
        .and_then(|j| serde_json::from_str(j).map_err(|e| Error::Parse { line: ln + 1, msg: e.to_string() }))?;
    if names.len() != n_domains {
        return Err(Error::Parse { line: ln, msg: format!("{} domain names for {n_domains} domains", names.len()) });
    }
    let _header = next("column header")?;

    let mut domains: Vec<Domain> = names
        .into_iter()
        .enumerate()
        .map(|(id, name)| Domain { id, name, x: Vec::new(), labels: Vec::new() })
        .collect();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: ln + 1, msg };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != input_dim + 2 {
            return Err(err(format!("expected {} columns, found {}", input_dim + 2, cols.len())));
        }
        let d: usize = cols[0].parse().map_err(|e| err(format!("domain: {e}")))?;
        let k: usize = cols[1].parse().map_err(|e| err(format!("label: {e}")))?;
        let dom = domains.get_mut(d).ok_or_else(|| err(format!("domain {d} out of range")))?;
        for c in &cols[2..] {
            dom.x.push(c.parse().map_err(|e| err(format!("feature: {e}")))?);
        }
        dom.labels.push(k);
    }
    let ds = DomainDataset { generator, seed, input_dim, n_classes, domains, params };
    ds.validate()?;
    Ok(ds)
}

pub fn save(ds: &DomainDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(ds))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DomainDataset> {
    from_text(&std::fs::read_to_string(path)?)
}
