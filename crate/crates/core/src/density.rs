//! Density summaries of feature distributions.
//!
//! A domain's features are summarized as PCA-reduced coordinates plus a
//! diagonal-covariance Gaussian mixture fitted by EM. The summary is small
//! enough to transmit (its wire payload is what the cost ledger counts as
//! the mixture parameter size) and yields bounded per-example confidence
//! weights via per-batch min-max normalization of log-densities.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, sub, Tensor};

pub const VAR_FLOOR: f64 = 1e-6;
pub const DEFAULT_MIN_ENERGY: f64 = 0.8;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Affine projection onto the leading principal components.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    /// `[d]` column means of the fitted data.
    pub mean: Tensor,
    /// `[d, r]`, orthonormal columns, eigenvalues descending.
    pub components: Tensor,
    /// Fraction of total variance captured by the `r` components.
    pub explained_energy: f64,
}

impl PcaBasis {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.components.cols()
    }

    /// `(z − mean) · components` for a `[n, d]` batch.
    pub fn project(&self, z: &Tensor) -> Tensor {
        assert_eq!(z.cols(), self.input_dim(), "projection dimension mismatch");
        let n = z.rows();
        let mean_rows = Tensor::new(
            vec![n, self.input_dim()],
            (0..n).flat_map(|_| self.mean.data().iter().copied()).collect(),
        );
        matmul(&sub(z, &mean_rows), &self.components)
    }
}

/// Transmissible density summary: PCA basis + diagonal Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub pca: PcaBasis,
    /// `[K]`, simplex.
    pub weights: Tensor,
    /// `[K, r]` in projected coordinates.
    pub means: Tensor,
    /// `[K, r]` diagonal variances, each ≥ [`VAR_FLOOR`].
    pub variances: Tensor,
}

impl GmmParams {
    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    /// Scalars in the wire payload: d + d·r + K + 2·K·r.
    pub fn param_count(&self) -> u64 {
        let d = self.pca.input_dim() as u64;
        let r = self.pca.rank() as u64;
        let k = self.num_components() as u64;
        d + d * r + k + 2 * k * r
    }

    /// Log mixture density of one `[d]` point, via log-sum-exp.
    pub fn log_density(&self, z: &Tensor) -> f64 {
        assert_eq!(z.shape(), &[self.pca.input_dim()], "log_density dimension mismatch");
        let y = self.pca.project(&Tensor::new(vec![1, z.len()], z.data().to_vec()));
        self.log_density_projected(y.row(0))
    }

    fn log_density_projected(&self, y: &[f64]) -> f64 {
        let k = self.num_components();
        let mut terms = Vec::with_capacity(k);
        for kk in 0..k {
            let w = self.weights.data()[kk];
            if w <= 0.0 {
                continue;
            }
            let mut lp = w.ln();
            for j in 0..y.len() {
                let var = self.variances.at(kk, j);
                let d = y[j] - self.means.at(kk, j);
                lp -= 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var);
            }
            terms.push(lp);
        }
        log_sum_exp(&terms)
    }

    /// Log densities of a `[n, d]` batch.
    pub fn log_densities(&self, z: &Tensor) -> Vec<f64> {
        let y = self.pca.project(z);
        (0..y.rows()).map(|i| self.log_density_projected(y.row(i))).collect()
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

// ── PCA ──────────────────────────────────────────────────────────────────

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix (flat row-major).
/// Returns eigenvalues and the rotation matrix whose columns are the
/// corresponding eigenvectors, unsorted.
fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += 2.0 * a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() <= 1e-14 * norm {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let tau = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| a[i * d + i]).collect();
    (eig, v)
}

/// Fits the smallest-rank PCA basis whose cumulative eigenvalue fraction
/// reaches `min_energy`. Deterministic; eigenvalues descending; each
/// component's largest-magnitude entry is made positive.
pub fn fit_pca(z: &Tensor, min_energy: f64) -> Result<PcaBasis> {
    let (n, d) = (z.rows(), z.cols());
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "PCA needs at least 2 examples, got {}",
            n
        )));
    }
    assert!((0.0..=1.0).contains(&min_energy), "min_energy must be in [0, 1]");

    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += z.at(i, j);
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        for a in 0..d {
            let ca = z.at(i, a) - mean[a];
            for b in a..d {
                cov[a * d + b] += ca * (z.at(i, b) - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let val = cov[a * d + b] / n as f64;
            cov[a * d + b] = val;
            cov[b * d + a] = val;
        }
    }

    let (eig, vecs) = jacobi_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig[j].partial_cmp(&eig[i]).unwrap().then(i.cmp(&j)));
    let eig_sorted: Vec<f64> = order.iter().map(|&i| eig[i].max(0.0)).collect();

    let total: f64 = eig_sorted.iter().sum();
    let (r, explained_energy) = if total <= 0.0 {
        (1, 1.0)
    } else {
        let mut cum = 0.0;
        let mut r = d;
        for (i, &e) in eig_sorted.iter().enumerate() {
            cum += e;
            if cum / total >= min_energy {
                r = i + 1;
                break;
            }
        }
        let captured: f64 = eig_sorted[..r].iter().sum();
        (r, captured / total)
    };

    let mut comp = vec![0.0; d * r];
    for (cidx, &eidx) in order[..r].iter().enumerate() {
        let col: Vec<f64> = (0..d).map(|k| vecs[k * d + eidx]).collect();
        let mut lead = 0;
        for (k, &val) in col.iter().enumerate() {
            if val.abs() > col[lead].abs() {
                lead = k;
            }
        }
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..d {
            comp[k * r + cidx] = sign * col[k];
        }
    }

    Ok(PcaBasis {
        mean: Tensor::new(vec![d], mean),
        components: Tensor::new(vec![d, r], comp),
        explained_energy,
    })
}

// ── GMM / EM ─────────────────────────────────────────────────────────────

/// Seeded k-means++ center choice on projected rows.
fn kmeanspp_init(y: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = y.rows();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(y.row(rng.random_range(0..n)).to_vec());
    let mut d2 = vec![0.0; n];
    while centers.len() < k {
        let last = centers.last().unwrap();
        for i in 0..n {
            let dist: f64 = y
                .row(i)
                .iter()
                .zip(last)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if centers.len() == 1 || dist < d2[i] {
                d2[i] = dist;
            }
        }
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let u = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centers.push(y.row(idx).to_vec());
    }
    centers
}

/// Fits a 2·C-component diagonal mixture on PCA-reduced features and
/// returns the per-iteration mean log-likelihood trace alongside.
pub fn fit_gmm_detailed(
    z: &Tensor,
    num_classes: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<(GmmParams, Vec<f64>)> {
    let k = 2 * num_classes;
    let n = z.rows();
    if n < k {
        return Err(Error::InsufficientData(format!(
            "mixture with {} components needs at least {} examples, got {}",
            k, k, n
        )));
    }
    let pca = fit_pca(z, DEFAULT_MIN_ENERGY)?;
    let y = pca.project(z);
    let r = y.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let centers = kmeanspp_init(&y, k, &mut rng);
    let mut means: Vec<f64> = centers.into_iter().flatten().collect();

    // Shared initial variance: per-dimension global variance of the data.
    let mut global_var = vec![0.0; r];
    for i in 0..n {
        for j in 0..r {
            // Projection is centered, so the projected mean is zero.
            global_var[j] += y.at(i, j) * y.at(i, j);
        }
    }
    let mut variances: Vec<f64> = (0..k * r)
        .map(|idx| (global_var[idx % r] / n as f64).max(VAR_FLOOR))
        .collect();
    let mut weights = vec![1.0 / k as f64; k];

    let mut gmm = GmmParams {
        pca,
        weights: Tensor::new(vec![k], weights.clone()),
        means: Tensor::new(vec![k, r], means.clone()),
        variances: Tensor::new(vec![k, r], variances.clone()),
    };

    let mut trace = Vec::new();
    let mut resp = vec![0.0; n * k];
    for iter in 0..max_iters {
        // E-step: responsibilities and the current mean log-likelihood.
        let mut ll = 0.0;
        for i in 0..n {
            let yi = y.row(i);
            let mut terms = vec![f64::NEG_INFINITY; k];
            for kk in 0..k {
                if weights[kk] <= 0.0 {
                    continue;
                }
                let mut lp = weights[kk].ln();
                for j in 0..r {
                    let var = variances[kk * r + j];
                    let d = yi[j] - means[kk * r + j];
                    lp -= 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var);
                }
                terms[kk] = lp;
            }
            let lse = log_sum_exp(&terms);
            ll += lse;
            for kk in 0..k {
                resp[i * k + kk] = if terms[kk].is_finite() { (terms[kk] - lse).exp() } else { 0.0 };
            }
        }
        ll /= n as f64;
        trace.push(ll);
        if iter > 0 && ll - trace[iter - 1] < tol {
            break;
        }

        // M-step.
        for kk in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + kk]).sum();
            weights[kk] = nk / n as f64;
            if nk < 1e-12 {
                continue; // dead component keeps its previous shape
            }
            for j in 0..r {
                let mu: f64 = (0..n).map(|i| resp[i * k + kk] * y.at(i, j)).sum::<f64>() / nk;
                means[kk * r + j] = mu;
            }
            for j in 0..r {
                let var: f64 = (0..n)
                    .map(|i| {
                        let d = y.at(i, j) - means[kk * r + j];
                        resp[i * k + kk] * d * d
                    })
                    .sum::<f64>()
                    / nk;
                variances[kk * r + j] = var.max(VAR_FLOOR);
            }
        }
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }

        gmm.weights = Tensor::new(vec![k], weights.clone());
        gmm.means = Tensor::new(vec![k, r], means.clone());
        gmm.variances = Tensor::new(vec![k, r], variances.clone());
    }

    Ok((gmm, trace))
}

pub fn fit_gmm(z: &Tensor, num_classes: usize, seed: u64) -> Result<GmmParams> {
    fit_gmm_detailed(z, num_classes, seed, DEFAULT_MAX_ITERS, DEFAULT_TOL).map(|(g, _)| g)
}

/// Per-batch min-max normalization of log-densities into [0, 1]; constant
/// log-densities (including single-example batches) map to all-ones.
pub fn confidence_weights(gmm: &GmmParams, z: &Tensor) -> Tensor {
    let n = z.rows();
    assert!(n >= 1, "confidence_weights needs a non-empty batch");
    let ld = gmm.log_densities(z);
    let lo = ld.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ld.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi - lo <= 0.0 {
        vec![1.0; n]
    } else {
        ld.iter().map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    };
    Tensor::new(vec![n], data)
}

// ── Wire form ────────────────────────────────────────────────────────────
//
// The payload is exactly {mean, components, weights, means, variances}:
// its numeric leaves are the transmitted parameter count.

impl Serialize for GmmParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows = |t: &Tensor| -> Vec<Vec<f64>> {
            (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
        };
        let mut st = s.serialize_struct("GmmParams", 5)?;
        st.serialize_field("mean", self.pca.mean.data())?;
        st.serialize_field("components", &rows(&self.pca.components))?;
        st.serialize_field("weights", self.weights.data())?;
        st.serialize_field("means", &rows(&self.means))?;
        st.serialize_field("variances", &rows(&self.variances))?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for GmmParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Wire {
            mean: Vec<f64>,
            components: Vec<Vec<f64>>,
            weights: Vec<f64>,
            means: Vec<Vec<f64>>,
            variances: Vec<Vec<f64>>,
        }
        let w = Wire::deserialize(d)?;
        let d_in = w.mean.len();
        let r = w.components.first().map_or(0, Vec::len);
        let k = w.weights.len();
        let matrix = |rows: Vec<Vec<f64>>, nr: usize, nc: usize, name: &str| {
            if rows.len() != nr || rows.iter().any(|row| row.len() != nc) {
                Err(serde::de::Error::custom(format!("bad {} shape", name)))
            } else {
                Ok(Tensor::new(vec![nr, nc], rows.into_iter().flatten().collect()))
            }
        };
        Ok(GmmParams {
            pca: PcaBasis {
                mean: Tensor::new(vec![d_in], w.mean),
                components: matrix(w.components, d_in, r, "components")?,
                // Not part of the wire payload; transmitted bases were fitted
                // under the ≥ 0.8 energy contract.
                explained_energy: 1.0,
            },
            weights: Tensor::new(vec![k], w.weights),
            means: matrix(w.means, k, r, "means")?,
            variances: matrix(w.variances, k, r, "variances")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-scale..scale)).collect())
    }

    #[test]
    fn pca_single_varying_axis() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0], vec![-1.0, 0.0]]);
        let pca = fit_pca(&z, 0.8).unwrap();
        assert_eq!(pca.rank(), 1);
        assert!((pca.components.at(0, 0) - 1.0).abs() < 1e-10);
        assert!(pca.components.at(1, 0).abs() < 1e-10);
        assert!((pca.explained_energy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pca_isotropic_needs_both_axes() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
        let pca = fit_pca(&z, 0.8).unwrap();
        assert_eq!(pca.rank(), 2);
    }

    #[test]
    fn pca_identical_points_degenerate() {
        let z = Tensor::from_rows(&[vec![3.0, -1.0], vec![3.0, -1.0], vec![3.0, -1.0]]);
        let pca = fit_pca(&z, 0.8).unwrap();
        assert_eq!(pca.rank(), 1);
        assert_eq!(pca.explained_energy, 1.0);
    }

    #[test]
    fn pca_rejects_single_example() {
        let z = Tensor::from_rows(&[vec![1.0, 2.0]]);
        assert!(matches!(fit_pca(&z, 0.8), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn pca_components_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_matrix(&mut rng, 40, 6, 2.0);
        let pca = fit_pca(&z, 0.99).unwrap();
        let c = &pca.components;
        for a in 0..c.cols() {
            for b in 0..c.cols() {
                let dot: f64 = (0..c.rows()).map(|k| c.at(k, a) * c.at(k, b)).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-8, "col {} · col {} = {}", a, b, dot);
            }
        }
    }

    #[test]
    fn pca_matches_external_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..5 {
            let (n, d) = (50, 5);
            let z = random_matrix(&mut rng, n, d, 3.0);
            let pca = fit_pca(&z, 0.8).unwrap();

            // Independent covariance eigen-decomposition via nalgebra.
            let mut mean = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    mean[j] += z.at(i, j) / n as f64;
                }
            }
            let cov = nalgebra::DMatrix::from_fn(d, d, |a, b| {
                (0..n).map(|i| (z.at(i, a) - mean[a]) * (z.at(i, b) - mean[b])).sum::<f64>()
                    / n as f64
            });
            let eig = nalgebra::SymmetricEigen::new(cov);
            let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());

            let total: f64 = vals.iter().sum();
            let captured: f64 = vals[..pca.rank()].iter().sum();
            assert!(
                (pca.explained_energy - captured / total).abs() < 1e-8,
                "trial {}: energy {} vs oracle {}",
                trial,
                pca.explained_energy,
                captured / total
            );
            assert!(pca.explained_energy >= 0.8);
            // Rank minimality: one fewer component would fall short.
            if pca.rank() > 1 {
                let fewer: f64 = vals[..pca.rank() - 1].iter().sum();
                assert!(fewer / total < 0.8);
            }
        }
    }

    #[test]
    fn gmm_identical_points() {
        let z = Tensor::from_rows(&vec![vec![2.0, 5.0]; 8]);
        let gmm = fit_gmm(&z, 1, 0).unwrap();
        assert_eq!(gmm.num_components(), 2);
        // Projection is centered, so both means sit at the projected point: 0.
        for v in gmm.means.data() {
            assert!(v.abs() < 1e-9);
        }
        for v in gmm.variances.data() {
            assert_eq!(*v, VAR_FLOOR);
        }
    }

    #[test]
    fn gmm_recovers_two_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = Vec::new();
        for sign in [-1.0, 1.0] {
            for _ in 0..50 {
                rows.push(vec![
                    sign * 3.0 + rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                ]);
            }
        }
        let z = Tensor::from_rows(&rows);
        let gmm = fit_gmm(&z, 1, 11).unwrap();

        let centroid = |r: std::ops::Range<usize>| -> Vec<f64> {
            let mut c = vec![0.0, 0.0];
            for i in r.clone() {
                c[0] += rows[i][0];
                c[1] += rows[i][1];
            }
            c.iter().map(|v| v / r.len() as f64).collect()
        };
        let proj = |p: Vec<f64>| gmm.pca.project(&Tensor::from_rows(&[p])).at(0, 0);
        let mut expected = [proj(centroid(0..50)), proj(centroid(50..100))];
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut got: Vec<f64> = (0..2).map(|k| gmm.means.at(k, 0)).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());

        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 0.1, "recovered {} vs centroid {}", g, e);
        }
        for k in 0..2 {
            assert!((gmm.weights.data()[k] - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn em_log_likelihood_non_decreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..5 {
            let z = random_matrix(&mut rng, 60, 4, 2.0);
            let (_, trace) = fit_gmm_detailed(&z, 2, trial, 100, 1e-6).unwrap();
            for w in trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "trial {}: {} -> {}", trial, w[0], w[1]);
            }
        }
    }

    #[test]
    fn gmm_rejects_too_few_examples() {
        let z = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]]);
        assert!(matches!(fit_gmm(&z, 2, 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn gmm_fit_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random_matrix(&mut rng, 30, 3, 1.5);
        let a = fit_gmm(&z, 1, 9).unwrap();
        let b = fit_gmm(&z, 1, 9).unwrap();
        assert_eq!(a, b);
    }

    fn unit_gmm_1d() -> GmmParams {
        GmmParams {
            pca: PcaBasis {
                mean: Tensor::zeros(vec![1]),
                components: Tensor::ones(vec![1, 1]),
                explained_energy: 1.0,
            },
            weights: Tensor::new(vec![2], vec![1.0, 0.0]),
            means: Tensor::from_rows(&[vec![0.0], vec![9.0]]),
            variances: Tensor::from_rows(&[vec![1.0], vec![1.0]]),
        }
    }

    #[test]
    fn log_density_standard_gaussian_at_mean() {
        let gmm = unit_gmm_1d();
        let ld = gmm.log_density(&Tensor::new(vec![1], vec![0.0]));
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((ld - expect).abs() < 1e-12, "got {}", ld);
    }

    #[test]
    fn log_density_decreases_away_from_mean() {
        let gmm = unit_gmm_1d();
        let at_mean = gmm.log_density(&Tensor::new(vec![1], vec![0.0]));
        let far = gmm.log_density(&Tensor::new(vec![1], vec![5.0]));
        assert!(at_mean > far);
    }

    #[test]
    fn log_density_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = random_matrix(&mut rng, 40, 3, 2.0);
        let gmm = fit_gmm(&z, 1, 13).unwrap();
        for i in 0..5 {
            let point = Tensor::new(vec![3], z.row(i).to_vec());
            let got = gmm.log_density(&point);

            // Brute-force mixture density without log-sum-exp.
            let y = gmm.pca.project(&Tensor::new(vec![1, 3], z.row(i).to_vec()));
            let r = gmm.pca.rank();
            let mut density = 0.0;
            for k in 0..gmm.num_components() {
                let mut pdf = gmm.weights.data()[k];
                for j in 0..r {
                    let var = gmm.variances.at(k, j);
                    let d = y.at(0, j) - gmm.means.at(k, j);
                    pdf *= (-0.5 * d * d / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
                }
                density += pdf;
            }
            assert!((got - density.ln()).abs() < 1e-9, "row {}: {} vs {}", i, got, density.ln());
        }
    }

    #[test]
    fn weights_constant_batch_maps_to_ones() {
        let gmm = unit_gmm_1d();
        let z = Tensor::from_rows(&[vec![2.0], vec![2.0], vec![2.0]]);
        assert_eq!(confidence_weights(&gmm, &z).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn weights_single_example_is_one() {
        let gmm = unit_gmm_1d();
        let z = Tensor::from_rows(&[vec![42.0]]);
        assert_eq!(confidence_weights(&gmm, &z).data(), &[1.0]);
    }

    #[test]
    fn weights_hit_min_max_endpoints() {
        let gmm = unit_gmm_1d();
        let z = Tensor::from_rows(&[vec![0.0], vec![50.0]]);
        assert_eq!(confidence_weights(&gmm, &z).data(), &[1.0, 0.0]);
    }

    #[test]
    fn weights_preserve_log_density_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let train = random_matrix(&mut rng, 30, 2, 2.0);
        let gmm = fit_gmm(&train, 1, 17).unwrap();
        let batch = random_matrix(&mut rng, 5, 2, 4.0);
        let ld = gmm.log_densities(&batch);
        let w = confidence_weights(&gmm, &batch);
        for i in 0..5 {
            for j in 0..5 {
                if ld[i] < ld[j] {
                    assert!(w.data()[i] <= w.data()[j]);
                }
            }
        }
    }

    #[test]
    fn wire_leaf_count_matches_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = random_matrix(&mut rng, 25, 4, 2.0);
        let gmm = fit_gmm(&z, 1, 19).unwrap();
        let value = serde_json::to_value(&gmm).unwrap();

        fn count_numbers(v: &serde_json::Value) -> u64 {
            match v {
                serde_json::Value::Number(_) => 1,
                serde_json::Value::Array(items) => items.iter().map(count_numbers).sum(),
                serde_json::Value::Object(map) => map.values().map(count_numbers).sum(),
                _ => 0,
            }
        }
        assert_eq!(count_numbers(&value), gmm.param_count());

        let back: GmmParams = serde_json::from_value(value).unwrap();
        assert_eq!(back.weights, gmm.weights);
        assert_eq!(back.means, gmm.means);
        assert_eq!(back.variances, gmm.variances);
        assert_eq!(back.pca.mean, gmm.pca.mean);
        assert_eq!(back.pca.components, gmm.pca.components);
    }
}
