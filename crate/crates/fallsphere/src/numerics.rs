//! Quadrature rules, truncated Taylor jets and associated Legendre tables.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

/// Gauss–Legendre nodes and weights on [-1, 1], nodes ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        // Tricomi initial guess, then Newton on P_n.
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_and_derivative(n, z);
        if d != 0.0 {
            dp = d;
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Truncated Taylor series `c0 + c1 δ + c2 δ² + c3 δ³`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet(pub [f64; 4]);

impl Jet {
    pub fn cst(c: f64) -> Self {
        Jet([c, 0.0, 0.0, 0.0])
    }

    pub fn var(x: f64) -> Self {
        Jet([x, 1.0, 0.0, 0.0])
    }

    /// k-th derivative at the expansion point.
    pub fn d(&self, k: usize) -> f64 {
        const F: [f64; 4] = [1.0, 1.0, 2.0, 6.0];
        self.0[k] * F[k]
    }

    /// `[f, f', f'', f''']`
    pub fn derivs(&self) -> [f64; 4] {
        [self.d(0), self.d(1), self.d(2), self.d(3)]
    }

    pub fn scale(self, s: f64) -> Self {
        Jet(self.0.map(|c| c * s))
    }

    pub fn recip(self) -> Self {
        let a = self.0;
        let mut b = [0.0; 4];
        b[0] = 1.0 / a[0];
        for k in 1..4 {
            let mut s = 0.0;
            for i in 1..=k {
                s += a[i] * b[k - i];
            }
            b[k] = -s * b[0];
        }
        Jet(b)
    }

    pub fn exp(self) -> Self {
        let a = self.0;
        let mut f = [0.0; 4];
        f[0] = a[0].exp();
        for k in 1..4 {
            let mut s = 0.0;
            for j in 1..=k {
                s += j as f64 * a[j] * f[k - j];
            }
            f[k] = s / k as f64;
        }
        Jet(f)
    }

    pub fn ln(self) -> Self {
        let a = self.0;
        let mut g = [0.0; 4];
        g[0] = a[0].ln();
        for k in 1..4 {
            let mut s = k as f64 * a[k];
            for j in 1..k {
                s -= j as f64 * g[j] * a[k - j];
            }
            g[k] = s / (k as f64 * a[0]);
        }
        Jet(g)
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2], self.0[3] + o.0[3]])
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        Jet([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2], self.0[3] - o.0[3]])
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let (a, b) = (self.0, o.0);
        let mut c = [0.0; 4];
        for i in 0..4 {
            for j in 0..4 - i {
                c[i + j] += a[i] * b[j];
            }
        }
        Jet(c)
    }
}

/// Orthonormal associated Legendre functions Θ_lm(θ) (no Condon–Shortley
/// phase) with `∫ Θ_lm² sinθ dθ dφ = 1` over the sphere, and dΘ_lm/dθ.
///
/// Returned as `p[l][m]`, `dp[l][m]` for `m ≤ min(l, m_max)`; x = cos θ,
/// s = sin θ > 0.
pub fn legendre_table(l_max: usize, m_max: usize, x: f64, s: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut p = vec![vec![0.0; m_max + 1]; l_max + 1];
    let mut dp = vec![vec![0.0; m_max + 1]; l_max + 1];
    let mut pmm = (1.0 / (4.0 * PI)).sqrt();
    for m in 0..=m_max.min(l_max) {
        if m > 0 {
            pmm *= ((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * s;
        }
        p[m][m] = pmm;
        if m < l_max {
            p[m + 1][m] = ((2 * m + 3) as f64).sqrt() * x * pmm;
        }
        for l in m + 2..=l_max {
            let lf = l as f64;
            let mf = m as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
            p[l][m] = a * (x * p[l - 1][m] - b * p[l - 2][m]);
        }
        for l in m..=l_max {
            let lf = l as f64;
            let mf = m as f64;
            let prev = if l > m {
                ((2.0 * lf + 1.0) / (2.0 * lf - 1.0) * (lf * lf - mf * mf)).sqrt() * p[l - 1][m]
            } else {
                0.0
            };
            dp[l][m] = (lf * x * p[l][m] - prev) / s;
        }
    }
    (p, dp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_integrates_monomials() {
        for n in [3usize, 8, 17, 40] {
            let (x, w) = gauss_legendre(n);
            for k in 0..2 * n {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
                let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} k={k} q={q}");
            }
        }
    }

    #[test]
    fn jet_matches_closed_form() {
        // f(r) = exp(-1/r) at r = 0.7
        let r = Jet::var(0.7);
        let f = (-r.recip()).exp();
        let r0: f64 = 0.7;
        let g = (-1.0 / r0).exp();
        assert!((f.d(1) - g / (r0 * r0)).abs() < 1e-14);
        assert!((f.d(2) - g * (1.0 - 2.0 * r0) / r0.powi(4)).abs() < 1e-13);
        assert!((f.d(3) - g * (1.0 - 6.0 * r0 + 6.0 * r0 * r0) / r0.powi(6)).abs() < 1e-12);
        let l = Jet::var(2.0).ln();
        assert!((l.d(3) - 2.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn legendre_orthonormal() {
        let (x, w) = gauss_legendre(20);
        let (lm, mm) = (7, 3);
        let tabs: Vec<_> = x.iter().map(|&x| legendre_table(lm, mm, x, (1.0 - x * x).sqrt())).collect();
        for m in 0..=mm {
            for l1 in m..=lm {
                for l2 in m..=lm {
                    let s: f64 = (0..x.len()).map(|i| w[i] * tabs[i].0[l1][m] * tabs[i].0[l2][m]).sum::<f64>()
                        * 2.0
                        * PI;
                    let e = if l1 == l2 { 1.0 } else { 0.0 };
                    assert!((s - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn legendre_derivative_by_difference() {
        let th = 0.9f64;
        let h = 1e-6;
        let (_, dp) = legendre_table(6, 3, th.cos(), th.sin());
        let (pp, _) = legendre_table(6, 3, (th + h).cos(), (th + h).sin());
        let (pm, _) = legendre_table(6, 3, (th - h).cos(), (th - h).sin());
        for l in 0..=6 {
            for m in 0..=l.min(3) {
                let fd = (pp[l][m] - pm[l][m]) / (2.0 * h);
                assert!((fd - dp[l][m]).abs() < 1e-8);
            }
        }
    }
}
