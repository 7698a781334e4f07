use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelVolume, Scalar, Shape, Volume};

/// Squared-distance stand-in for "no feature on this line".
const FAR: f64 = 1e20;

/// Per-voxel loss weights aligned to a label volume.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub weights: Volume<f64>,
    pub w0: f64,
    pub sigma_b: f64,
}

impl WeightMap {
    /// Unit weights, i.e. an unweighted loss.
    pub fn uniform(extents: [usize; 3]) -> Result<Self> {
        Ok(WeightMap {
            weights: Volume::new(Shape::spatial(extents)?, 1.0)?,
            w0: 0.0,
            sigma_b: 1.0,
        })
    }

    pub fn volume<T: Scalar>(&self) -> Volume<T> {
        self.weights.cast()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightMapParams {
    pub w0: f64,
    pub sigma_b: f64,
}

impl Default for WeightMapParams {
    fn default() -> Self {
        WeightMapParams { w0: 10.0, sigma_b: 5.0 }
    }
}

/// `N_total / (C_present · N_c)` for every class with a nonzero count.
pub fn class_balance_weights(counts: &[u64]) -> Vec<Option<f64>> {
    let total: u64 = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count();
    counts
        .iter()
        .map(|&c| (c > 0).then(|| total as f64 / (present as f64 * c as f64)))
        .collect()
}

/// Face-connected components of equal nonzero labels. Returns the component
/// id per voxel (0 for background, 1.. for components) and the count.
pub fn connected_components(labels: &LabelVolume) -> (Vec<u32>, usize) {
    let [d, h, w] = labels.extents();
    let data = labels.data();
    let mut comp = vec![0u32; data.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if data[start] == 0 || comp[start] != 0 {
            continue;
        }
        next += 1;
        comp[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let mut visit = |j: usize| {
                if comp[j] == 0 && data[j] == data[start] {
                    comp[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if z > 0 {
                visit(i - h * w);
            }
            if z + 1 < d {
                visit(i + h * w);
            }
        }
    }
    (comp, next as usize)
}

/// Exact 1D squared distance transform of a sampled function (lower
/// envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        *o = (qf - p) * (qf - p) + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest voxel
/// where `feature` is true (in voxel units).
pub fn squared_distance_transform(feature: &[bool], [d, h, w]: [usize; 3]) -> Vec<f64> {
    let mut g: Vec<f64> = feature.iter().map(|&f| if f { 0.0 } else { FAR }).collect();
    let n = d.max(h).max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut pass = |g: &mut [f64], len: usize, stride: usize, starts: &mut dyn Iterator<Item = usize>| {
        for s in starts {
            for i in 0..len {
                f[i] = g[s + i * stride];
            }
            edt_1d(&f[..len], &mut out[..len], &mut v, &mut z);
            for i in 0..len {
                g[s + i * stride] = out[i].min(FAR);
            }
        }
    };
    pass(&mut g, w, 1, &mut (0..d * h).map(|r| r * w));
    pass(&mut g, h, w, &mut (0..d).flat_map(|zz| (0..w).map(move |x| zz * h * w + x)));
    pass(&mut g, d, h * w, &mut (0..h * w));
    g
}

/// `w(x) = w_class(label(x)) + w0·exp(−(d1 + d2)² / (2σ_b²))` where `d1`,
/// `d2` are the distances to the nearest and second-nearest foreground
/// components. The border term vanishes with fewer than two components.
pub fn compute_weight_map(
    labels: &LabelVolume,
    class_counts: &[u64],
    w0: f64,
    sigma_b: f64,
) -> Result<WeightMap> {
    if !(w0 >= 0.0) || !w0.is_finite() || !(sigma_b > 0.0) || !sigma_b.is_finite() {
        return Err(Error::Parameter(format!(
            "weight map needs w0 >= 0 and sigma_b > 0, got {w0} and {sigma_b}"
        )));
    }
    labels.validate_classes(class_counts.len())?;
    let class_w = class_balance_weights(class_counts);
    let hist = labels.histogram(class_counts.len());
    for (c, &n) in hist.iter().enumerate() {
        if n > 0 && class_w[c].is_none() {
            return Err(Error::Count(format!(
                "class {c} occurs in the labels but has a zero total count"
            )));
        }
    }
    let mut weights: Vec<f64> = labels
        .data()
        .iter()
        .map(|&l| class_w[l as usize].expect("checked above"))
        .collect();

    let (comp, count) = connected_components(labels);
    if count >= 2 && w0 > 0.0 {
        let ext = labels.extents();
        let mut d1 = vec![f64::INFINITY; comp.len()];
        let mut d2 = vec![f64::INFINITY; comp.len()];
        for id in 1..=count as u32 {
            let feature: Vec<bool> = comp.iter().map(|&c| c == id).collect();
            for (i, sq) in squared_distance_transform(&feature, ext).into_iter().enumerate() {
                let dist = sq.sqrt();
                if dist < d1[i] {
                    d2[i] = d1[i];
                    d1[i] = dist;
                } else if dist < d2[i] {
                    d2[i] = dist;
                }
            }
        }
        let denom = 2.0 * sigma_b * sigma_b;
        for (i, wv) in weights.iter_mut().enumerate() {
            let s = d1[i] + d2[i];
            *wv += w0 * (-(s * s) / denom).exp();
        }
    }
    Ok(WeightMap {
        weights: Volume::from_vec(labels.shape(), weights)?,
        w0,
        sigma_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Minimum over all feature voxels of the squared distance.
    fn brute_edt(feature: &[bool], [d, h, w]: [usize; 3]) -> Vec<f64> {
        let pts: Vec<(f64, f64, f64)> = (0..feature.len())
            .filter(|&i| feature[i])
            .map(|i| ((i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64))
            .collect();
        (0..d * h * w)
            .map(|i| {
                let (z, y, x) = ((i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64);
                pts.iter()
                    .map(|p| (z - p.0).powi(2) + (y - p.1).powi(2) + (x - p.2).powi(2))
                    .fold(FAR, f64::min)
            })
            .collect()
    }

    #[test]
    fn table_one_epidural_weight() {
        let counts = [451u64, 690, 206, 109, 682, 352, 422];
        assert_eq!(counts.iter().sum::<u64>(), 2912);
        let w = class_balance_weights(&counts);
        assert!((w[2].unwrap() - 2912.0 / (7.0 * 206.0)).abs() < 1e-12);
        assert!((w[2].unwrap() - 2.0194).abs() < 1e-4);
        assert_eq!(class_balance_weights(&[0, 5])[0], None);
    }

    #[test]
    fn midpoint_border_bonus() {
        let mut l = LabelVolume::zeros([1, 1, 21]).unwrap();
        l.set(0, 0, 0, 1);
        l.set(0, 0, 10, 1);
        let wm = compute_weight_map(&l, &[1, 1], 10.0, 5.0).unwrap();
        let bonus = wm.weights.get(0, 0, 0, 5) - 1.0;
        assert!((bonus - 10.0 * (-2.0f64).exp()).abs() < 1e-12);
        assert!((bonus - 1.3534).abs() < 1e-4);
    }

    #[test]
    fn single_component_has_no_border_term() {
        let mut l = LabelVolume::zeros([4, 4, 4]).unwrap();
        l.set(1, 1, 1, 2);
        l.set(1, 1, 2, 2);
        let counts = [62, 0, 2];
        let wm = compute_weight_map(&l, &counts, 10.0, 5.0).unwrap();
        let cw = class_balance_weights(&counts);
        for (i, &v) in l.data().iter().enumerate() {
            assert_eq!(wm.weights.data()[i], cw[v as usize].unwrap());
        }
    }

    #[test]
    fn uniform_counts_one_component_is_constant() {
        let l = LabelVolume::zeros([3, 3, 3]).unwrap();
        let wm = compute_weight_map(&l, &[27, 27], 10.0, 5.0).unwrap();
        assert!(wm.weights.data().iter().all(|&v| v == wm.weights.data()[0]));
    }

    #[test]
    fn zero_count_for_present_class() {
        let mut l = LabelVolume::zeros([2, 2, 2]).unwrap();
        l.set(0, 0, 0, 1);
        assert!(matches!(compute_weight_map(&l, &[7, 0], 10.0, 5.0), Err(Error::Count(_))));
        assert!(matches!(compute_weight_map(&l, &[7], 10.0, 5.0), Err(Error::Label(_))));
    }

    #[test]
    fn components_split_by_class() {
        let l = LabelVolume::from_vec([1, 1, 5], vec![1, 1, 2, 0, 1]).unwrap();
        let (comp, n) = connected_components(&l);
        assert_eq!(n, 3);
        assert_eq!(comp, vec![1, 1, 2, 0, 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn distance_transform_matches_brute_force(
            d in 1usize..6, h in 1usize..7, w in 1usize..8, seed in 0u64..10_000
        ) {
            let n = d * h * w;
            let feature: Vec<bool> = (0..n).map(|i| crate::rng::uniform(seed, i as u64) < 0.1).collect();
            let fast = squared_distance_transform(&feature, [d, h, w]);
            let slow = brute_edt(&feature, [d, h, w]);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() < 1e-9 || (*a >= FAR && *b >= FAR));
            }
        }

        #[test]
        fn weights_strictly_positive(seed in 0u64..10_000) {
            let data: Vec<u8> = (0..125).map(|i| (crate::rng::uniform(seed, i) * 3.0) as u8).collect();
            let l = LabelVolume::from_vec([5, 5, 5], data).unwrap();
            let counts: Vec<u64> = l.histogram(3).iter().map(|&c| c.max(1)).collect();
            let wm = compute_weight_map(&l, &counts, 10.0, 5.0).unwrap();
            prop_assert!(wm.weights.data().iter().all(|&v| v > 0.0 && v.is_finite()));
        }
    }
}
