//! Small numeric helpers used throughout the crate.

use std::sync::OnceLock;

/// Largest supported cluster size. Binomial tables are sized for it.
pub const MAX_CLUSTER_SIZE: usize = 30;

/// Numerically stable logistic function.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`expit`]; clamps its argument away from {0, 1}.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

fn log_binom_table() -> &'static Vec<Vec<f64>> {
    static TABLE: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let m = MAX_CLUSTER_SIZE + 1;
        let mut t = vec![Vec::new(); m + 1];
        for (n, row) in t.iter_mut().enumerate() {
            *row = (0..=n)
                .map(|k| {
                    // ln C(n,k) = sum_{i=1}^{k} ln((n-k+i)/i)
                    let k = k.min(n - k);
                    (1..=k).map(|i| (((n - k + i) as f64) / i as f64).ln()).sum()
                })
                .collect();
        }
        t
    })
}

/// ln C(n, k), tabulated up to n = MAX_CLUSTER_SIZE + 1.
pub fn ln_choose(n: usize, k: usize) -> f64 {
    assert!(k <= n && n <= MAX_CLUSTER_SIZE + 1, "ln_choose({n},{k}) out of range");
    log_binom_table()[n][k]
}

/// C(n, k) computed in log space then exponentiated.
pub fn choose(n: usize, k: usize) -> f64 {
    ln_choose(n, k).exp()
}

/// Binomial pmf weight C(n, k) p^k (1-p)^{n-k} with the 0^0 = 1 convention.
pub fn binom_pmf(n: usize, k: usize, p: f64) -> f64 {
    choose(n, k) * pow0(p, k as i32) * pow0(1.0 - p, (n - k) as i32)
}

/// p^k with 0^0 = 1.
pub fn pow0(p: f64, k: i32) -> f64 {
    if k == 0 {
        1.0
    } else {
        p.powi(k)
    }
}

/// Kahan–Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Median of a slice (average of the two middle order statistics for even lengths).
/// Returns NaN on empty input.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("median over non-finite values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// SplitMix64 finalizer; the basis for all derived seeding.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed, a stage label, and an index.
/// Stable across platforms and releases: plain integer mixing, no hasher.
pub fn derive_seed(master: u64, stage: &str, index: u64) -> u64 {
    let mut h = mix64(master);
    for &b in stage.as_bytes() {
        h = mix64(h ^ u64::from(b));
    }
    mix64(h ^ index)
}

/// Per-feature z-score standardization with statistics frozen at fit time.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Fits means and standard deviations over rows. Constant features get scale 1.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "standardizer requires at least one row");
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(r) {
                let c = x - m;
                *v += c * c;
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

/// Squared Euclidean distance.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
