use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Two-component projection of a set of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    /// `(pc1, pc2, label)` per input row, in input order.
    pub points: Vec<(f64, f64, usize)>,
    /// Unit loadings of the two leading components.
    pub components: [Vec<f64>; 2],
    /// Leading covariance eigenvalues, descending.
    pub eigenvalues: [f64; 2],
    pub mean: Vec<f64>,
}

const JACOBI_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues sorted descending and the matching eigenvectors as
/// columns.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("eigen: matrix {:?} is not square", a.dim())));
    }
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]));
    let values = order.iter().map(|&i| m[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    Ok((values, vectors))
}

fn canonical_sign(mut v: Vec<f64>) -> Vec<f64> {
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    v
}

/// Projects mean-centered embeddings onto the two leading eigenvectors of
/// their sample covariance.
pub fn pca2(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<Pca2> {
    if embeddings.len() < 2 {
        return Err(Error::Input(format!(
            "PCA needs at least 2 embeddings, got {}",
            embeddings.len()
        )));
    }
    if labels.len() != embeddings.len() {
        return Err(Error::Shape("PCA: one label per embedding required".into()));
    }
    let d = embeddings[0].len();
    if d < 2 || embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Shape("PCA: embeddings must share a dimension of at least 2".into()));
    }
    let rows = embeddings.len();
    let x = Array2::from_shape_fn((rows, d), |(r, c)| embeddings[r][c]);
    let mean: Array1<f64> = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / (rows - 1) as f64;
    let (values, vectors) = symmetric_eigen(&cov)?;
    let pc1 = canonical_sign(vectors.column(0).to_vec());
    let pc2 = canonical_sign(vectors.column(1).to_vec());
    let project = |row: ndarray::ArrayView1<f64>, pc: &[f64]| -> f64 {
        row.iter().zip(pc).map(|(a, b)| a * b).sum()
    };
    let points = centered
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &label)| (project(row, &pc1), project(row, &pc2), label))
        .collect();
    Ok(Pca2 {
        points,
        components: [pc1, pc2],
        eigenvalues: [values[0].max(0.0), values[1].max(0.0)],
        mean: mean.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Leading eigenpairs by power iteration with deflation.
    fn power_oracle(cov: &Array2<f64>, k: usize) -> Vec<(f64, Vec<f64>)> {
        let n = cov.nrows();
        let mut a = cov.clone();
        let mut out = Vec::new();
        for _ in 0..k {
            let mut v = Array1::from_shape_fn(n, |i| 1.0 + i as f64 * 0.37);
            let mut lambda = 0.0;
            for _ in 0..20000 {
                let w = a.dot(&v);
                let norm = w.dot(&w).sqrt();
                v = w / norm;
                lambda = v.dot(&a.dot(&v));
            }
            let outer = Array2::from_shape_fn((n, n), |(i, j)| v[i] * v[j]);
            a = a - outer * lambda;
            out.push((lambda, v.to_vec()));
        }
        out
    }

    #[test]
    fn rank_one_data_has_flat_second_component() {
        let e: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let p = pca2(&e, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert!(p.points.iter().all(|pt| pt.1.abs() < 1e-8));
        let sum1: f64 = p.points.iter().map(|pt| pt.0).sum();
        assert!(sum1.abs() < 1e-10);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(pca2(&[vec![1.0, 2.0]], &[0]), Err(Error::Input(_))));
    }

    #[test]
    fn matches_power_iteration_oracle() {
        let mut rng = crate::rng::seeded(17);
        let scales = [3.0, 2.0, 1.0, 0.5, 0.1];
        let e: Vec<Vec<f64>> = (0..40)
            .map(|_| scales.iter().map(|s| s * rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..40).collect();
        let p = pca2(&e, &labels).unwrap();

        let x = Array2::from_shape_fn((40, 5), |(r, c)| e[r][c]);
        let centered = &x - &x.mean_axis(Axis(0)).unwrap();
        let cov = centered.t().dot(&centered) / 39.0;
        let oracle = power_oracle(&cov, 2);
        for k in 0..2 {
            assert!((p.eigenvalues[k] - oracle[k].0).abs() < 1e-8);
            assert!((dot(&p.components[k], &oracle[k].1).abs() - 1.0).abs() < 1e-8);
        }
        assert!(p.eigenvalues[0] >= p.eigenvalues[1]);
        assert!((dot(&p.components[0], &p.components[0]) - 1.0).abs() < 1e-8);
        assert!(dot(&p.components[0], &p.components[1]).abs() < 1e-8);
        let var = |i: usize| p.points.iter().map(|pt| if i == 0 { pt.0 * pt.0 } else { pt.1 * pt.1 }).sum::<f64>();
        assert!(var(0) >= var(1));
        for c in &p.components {
            let first = c.iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let a = ndarray::array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 1.0]];
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        let diag = Array2::from_diag(&Array1::from(vals.clone()));
        let back = vecs.dot(&diag).dot(&vecs.t());
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
    }
}
