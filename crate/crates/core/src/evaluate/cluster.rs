use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centre (lowest index on ties) and its squared distance.
fn nearest(p: &[f64], centres: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centres.iter().enumerate() {
        let d = dist2(p, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut centres = vec![points[rng.index(points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.index(points.len())
        };
        centres.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, centres.last().expect("just pushed")));
        }
    }
    centres
}

fn lloyd(points: &[Vec<f64>], mut centres: Vec<Vec<f64>>) -> Clustering {
    let k = centres.len();
    let dim = points[0].len();
    let mut assignment = vec![0; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            (assignment[i], dists[i]) = nearest(p, &centres);
        }
        // an empty cluster takes the point farthest from its centre
        for c in 0..k {
            if !assignment.contains(&c) {
                let far = (0..points.len())
                    .filter(|&i| assignment.iter().filter(|&&a| a == assignment[i]).count() > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    assignment[i] = c;
                    dists[i] = 0.0;
                }
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift += dist2(&mean, &centres[c]);
            centres[c] = mean;
        }
        if shift <= KMEANS_TOL {
            break;
        }
    }
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest(p, &centres);
        assignment[i] = c;
        inertia += d;
    }
    Clustering { assignment, inertia }
}

/// K-Means with k-means++ seeding, Lloyd iterations (at most
/// `KMEANS_MAX_ITER`, stopping once the summed squared centre shift is at
/// most `KMEANS_TOL`) and `KMEANS_RESTARTS` restarts; the restart with the
/// lowest inertia wins, the earliest on ties. Restart `r` seeds from
/// `rng.child_idx("restart", r)`.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &RngStream) -> Result<Clustering> {
    if k < 1 || k > points.len() {
        return Err(Error::invalid(format!(
            "k-means needs 1 <= K <= {} points, got K = {k}",
            points.len()
        )));
    }
    if points.iter().any(|p| p.len() != points[0].len()) {
        return Err(Error::invalid("k-means points must share one dimension"));
    }
    let mut best: Option<Clustering> = None;
    for r in 0..KMEANS_RESTARTS {
        let centres = seed_plus_plus(points, k, &mut rng.child_idx("restart", r as u64));
        let c = lloyd(points, centres);
        if best.as_ref().is_none_or(|b| c.inertia < b.inertia) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// V-measure between ground-truth labels and cluster ids: the harmonic mean
/// of homogeneity and completeness, with natural-log entropies.
pub fn v_measure(truth: &[usize], clusters: &[usize]) -> Result<f64> {
    if truth.len() != clusters.len() {
        return Err(Error::invalid(format!(
            "v-measure: {} labels vs {} cluster ids",
            truth.len(),
            clusters.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("v-measure needs at least one point"));
    }
    let n = truth.len() as f64;
    let nt = truth.iter().max().expect("non-empty") + 1;
    let nc = clusters.iter().max().expect("non-empty") + 1;
    let mut table = vec![0usize; nt * nc];
    for (&t, &c) in truth.iter().zip(clusters) {
        table[t * nc + c] += 1;
    }
    let t_counts: Vec<usize> = (0..nt).map(|t| table[t * nc..(t + 1) * nc].iter().sum()).collect();
    let c_counts: Vec<usize> = (0..nc).map(|c| (0..nt).map(|t| table[t * nc + c]).sum()).collect();
    let h_t = entropy(t_counts.iter().copied(), n);
    let h_c = entropy(c_counts.iter().copied(), n);
    let mut h_t_given_c = 0.0;
    let mut h_c_given_t = 0.0;
    for t in 0..nt {
        for c in 0..nc {
            let v = table[t * nc + c];
            if v > 0 {
                let joint = v as f64 / n;
                h_t_given_c -= joint * (v as f64 / c_counts[c] as f64).ln();
                h_c_given_t -= joint * (v as f64 / t_counts[t] as f64).ln();
            }
        }
    }
    let h = if h_t == 0.0 { 1.0 } else { 1.0 - h_t_given_c / h_t };
    let c = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_t / h_c };
    Ok(if h + c == 0.0 { 0.0 } else { 2.0 * h * c / (h + c) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_single_cluster() {
        assert_eq!(v_measure(&[0, 0, 1, 1, 2], &[2, 2, 0, 0, 1]).unwrap(), 1.0);
        assert_eq!(v_measure(&[0, 1, 0, 1], &[0, 0, 0, 0]).unwrap(), 0.0);
        assert!(v_measure(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn hand_example() {
        // truth [0,0,1,1], clusters [0,1,1,1]:
        // H(T) = ln 2, H(T|C) = 3/4 · H(1/3, 2/3), H(C) = H(1/4, 3/4), H(C|T) = 1/2 ln 2
        let h3 = -(1.0 / 3.0f64) * (1.0 / 3.0f64).ln() - (2.0 / 3.0f64) * (2.0 / 3.0f64).ln();
        let hom = 1.0 - 0.75 * h3 / 2f64.ln();
        let hc = -(0.25f64) * 0.25f64.ln() - 0.75 * 0.75f64.ln();
        let com = 1.0 - 0.5 * 2f64.ln() / hc;
        let want = 2.0 * hom * com / (hom + com);
        let got = v_measure(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn each_point_own_cluster() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let c = kmeans(&pts, 5, &RngStream::new(1)).unwrap();
        assert_eq!(c.inertia, 0.0);
        let mut a = c.assignment.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn separated_blobs() {
        let mut rng = RngStream::new(2);
        let mut pts = Vec::new();
        for b in 0..2 {
            for _ in 0..10 {
                pts.push(vec![100.0 * b as f64 + rng.uniform(), rng.uniform()]);
            }
        }
        let c = kmeans(&pts, 2, &RngStream::new(3)).unwrap();
        assert!(c.assignment[..10].iter().all(|&a| a == c.assignment[0]));
        assert!(c.assignment[10..].iter().all(|&a| a == c.assignment[10]));
        assert_ne!(c.assignment[0], c.assignment[10]);
    }

    #[test]
    fn duplicates_share_cluster_and_bad_k() {
        let pts = vec![vec![0.0], vec![0.0], vec![5.0], vec![9.0]];
        let c = kmeans(&pts, 3, &RngStream::new(4)).unwrap();
        assert_eq!(c.assignment[0], c.assignment[1]);
        assert!(kmeans(&pts, 0, &RngStream::new(4)).is_err());
        assert!(kmeans(&pts, 5, &RngStream::new(4)).is_err());
    }
}
