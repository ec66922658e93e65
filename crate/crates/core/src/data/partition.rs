//! Dirichlet label-skew partitioning and the protocol's deterministic splits.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{invalid, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    /// Dirichlet concentration; smaller is more heterogeneous.
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.num_clients == 0 {
            return Err(invalid("num_clients must be >= 1"));
        }
        Ok(())
    }
}

/// Sample `Dir(alpha, ..., alpha)` over `k` categories.
///
/// Gamma variates are formed in log space (`Gamma(a+1) * U^(1/a)` for
/// `a < 1`) so that tiny concentrations do not underflow to an all-zero draw.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let (shape, boost) = if alpha < 1.0 { (alpha + 1.0, true) } else { (alpha, false) };
    let gamma = Gamma::new(shape, 1.0).expect("positive gamma shape");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let mut lg = g.max(f64::MIN_POSITIVE).ln();
            if boost {
                let u: f64 = 1.0 - rng.random::<f64>();
                lg += u.ln() / alpha;
            }
            lg
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Integer allocation of `total` items proportional to `weights` by
/// largest remainder; ties go to the lower index. Sums to `total` exactly.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let s: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    let quotas: Vec<f64> = if s > 0.0 {
        weights.iter().map(|w| w / s * total as f64).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Row indices assigned to each client.
pub fn partition_indices(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    if ds.is_empty() {
        return Err(invalid("cannot partition an empty dataset"));
    }
    let m = spec.num_clients;
    let mut clients = vec![Vec::new(); m];
    for (c, mut idx) in ds.class_indices().into_iter().enumerate() {
        let mut r = rng::stream(spec.seed, "partition", c as u64);
        let p = sample_dirichlet(spec.alpha, m, &mut r);
        idx.shuffle(&mut r);
        let counts = largest_remainder(&p, idx.len());
        let mut off = 0;
        for (client, &k) in counts.iter().enumerate() {
            clients[client].extend_from_slice(&idx[off..off + k]);
            off += k;
        }
    }
    for v in &mut clients {
        v.sort_unstable();
    }
    // every client needs at least one sample to train
    if ds.len() >= m {
        while let Some(empty) = clients.iter().position(Vec::is_empty) {
            let donor = (0..m)
                .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
                .expect("m >= 1");
            let moved = clients[donor].pop().expect("donor non-empty");
            clients[empty].push(moved);
        }
    }
    Ok(clients)
}

/// Split `ds` across `spec.num_clients` clients with per-class Dirichlet
/// proportions over clients.
pub fn dirichlet_partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    Ok(partition_indices(ds, spec)?
        .iter()
        .map(|idx| ds.subset(idx))
        .collect())
}

/// Random split into a `frac` part and the remainder, stratified by class
/// unless some class has a single sample. `|first| = round(frac * n)`,
/// clamped so both parts are non-empty.
pub fn split_local(ds: &Dataset, frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(invalid(format!("split fraction must be in (0,1), got {frac}")));
    }
    let n = ds.len();
    if n < 2 {
        return Err(invalid(format!("cannot split {n} sample(s)")));
    }
    let n1 = ((frac * n as f64).round() as usize).clamp(1, n - 1);
    let mut r = rng::stream(seed, "split_local", 0);
    let by_class = ds.class_indices();
    let stratify = by_class.iter().all(|v| v.len() != 1);

    let (mut first, mut second) = (Vec::with_capacity(n1), Vec::with_capacity(n - n1));
    if stratify {
        let sizes: Vec<f64> = by_class.iter().map(|v| v.len() as f64).collect();
        let quotas = largest_remainder(&sizes, n1);
        for (mut idx, q) in by_class.into_iter().zip(quotas) {
            idx.shuffle(&mut r);
            first.extend_from_slice(&idx[..q]);
            second.extend_from_slice(&idx[q..]);
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut r);
        first.extend_from_slice(&idx[..n1]);
        second.extend_from_slice(&idx[n1..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((ds.subset(&first), ds.subset(&second)))
}

/// Deterministic 50/50 split of a held-out set into (validation, test).
pub fn split_eval(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = ds.len();
    if n < 2 {
        return Err(invalid(format!("cannot split {n} sample(s)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split_eval", 0));
    let (a, b) = idx.split_at(n / 2);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok((ds.subset(&a), ds.subset(&b)))
}
