use rand_distr::{Distribution, Gamma};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::RngState;
use crate::scalar::Scalar;

/// Disjoint assignment of example indices to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Ascending example indices per client.
    pub client_indices: Vec<Vec<usize>>,
    pub alpha: f64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }
}

/// Draws from `Dirichlet(alpha, ..., alpha)` over `k` categories.
///
/// Works in log space (`Gamma(a) = Gamma(a + 1) * U^(1/a)`) so very small
/// concentrations do not underflow to an all-zero vector.
pub fn sample_dirichlet(alpha: f64, k: usize, rng: &mut RngState) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::validation(format!(
            "Dirichlet concentration must be positive, got {alpha}"
        )));
    }
    let gamma = Gamma::new(alpha + 1.0, 1.0).map_err(|e| Error::validation(e.to_string()))?;
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u = 1.0 - rng.uniform();
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Class-wise Dirichlet split: for each class, client shares are drawn from
/// `Dirichlet(alpha)` and that class's (shuffled) examples are cut accordingly.
/// Clients left empty receive one example from the currently largest client.
pub fn dirichlet_partition<T: Scalar>(
    dataset: &Dataset<T>,
    num_clients: usize,
    alpha: f64,
    rng: &mut RngState,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::validation("need at least one client"));
    }
    if num_clients > dataset.len() {
        return Err(Error::validation(format!(
            "{num_clients} clients but only {} examples",
            dataset.len()
        )));
    }
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for mut members in dataset.class_indices() {
        if members.is_empty() {
            continue;
        }
        rng.shuffle(&mut members);
        let shares = sample_dirichlet(alpha, num_clients, rng)?;
        let n = members.len();
        let mut cumulative = 0.0;
        let mut start = 0;
        for (k, share) in shares.iter().enumerate() {
            cumulative += share;
            let end = if k + 1 == num_clients {
                n
            } else {
                ((cumulative * n as f64).round() as usize).clamp(start, n)
            };
            clients[k].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let largest = (0..num_clients)
            .max_by_key(|&k| (clients[k].len(), std::cmp::Reverse(k)))
            .expect("at least one client");
        let moved = clients[largest].pop().expect("largest client is nonempty");
        clients[empty].push(moved);
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(Partition {
        client_indices: clients,
        alpha,
    })
}
