//! Independent oracles and synthetic-data builders shared by the
//! integration and acceptance tests. Nothing here calls into the code paths
//! it is used to check.
#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook Cox–de Boor recursion for `B_{i,order}(t)` with the 0/0 = 0
/// convention; `at_end` closes the last nonempty span on the right.
pub fn cox_de_boor(knots: &[f64], i: usize, order: usize, t: f64) -> f64 {
    let last_span = {
        let mut s = knots.len() - 2;
        while knots[s + 1] <= knots[s] {
            s -= 1;
        }
        s
    };
    cdb(knots, i, order, t, last_span)
}

fn cdb(knots: &[f64], i: usize, order: usize, t: f64, last_span: usize) -> f64 {
    if order == 1 {
        let inside = knots[i] <= t && t < knots[i + 1];
        let closing = i == last_span && t == knots[i + 1];
        return if inside || closing { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = knots[i + order - 1] - knots[i];
    if d1 > 0.0 {
        v += (t - knots[i]) / d1 * cdb(knots, i, order - 1, t, last_span);
    }
    let d2 = knots[i + order] - knots[i + 1];
    if d2 > 0.0 {
        v += (knots[i + order] - t) / d2 * cdb(knots, i + 1, order - 1, t, last_span);
    }
    v
}

/// Derivative of order `ell` via the recursive derivative formula
/// `D B_{i,k} = (k−1)[B_{i,k−1}/(t_{i+k−1}−t_i) − B_{i+1,k−1}/(t_{i+k}−t_{i+1})]`.
pub fn cox_de_boor_deriv(knots: &[f64], i: usize, order: usize, t: f64, ell: usize) -> f64 {
    if ell == 0 {
        return cox_de_boor(knots, i, order, t);
    }
    let k = (order - 1) as f64;
    let mut v = 0.0;
    let d1 = knots[i + order - 1] - knots[i];
    if d1 > 0.0 {
        v += k * cox_de_boor_deriv(knots, i, order - 1, t, ell - 1) / d1;
    }
    let d2 = knots[i + order] - knots[i + 1];
    if d2 > 0.0 {
        v -= k * cox_de_boor_deriv(knots, i + 1, order - 1, t, ell - 1) / d2;
    }
    v
}

/// Adaptive Simpson quadrature.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64, whole: f64, m: f64, fm: f64, tol: f64, depth: u32) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1)
            + rec(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    rec(f, a, fa, b, fb, whole, m, fm, tol, 40)
}

pub fn pinball(r: f64, tau: f64) -> f64 {
    if r < 0.0 {
        (tau - 1.0) * r
    } else {
        tau * r
    }
}

/// `Σ ρ_τ(y − β₀ − xβ) + nλ|β|₁`, with `x` row-major `n × p`.
pub fn qr_objective(y: &[f64], x: &[f64], p: usize, tau: f64, lambda: f64, beta: &[f64]) -> f64 {
    let n = y.len();
    let mut total = 0.0;
    for i in 0..n {
        let fit = beta[0] + (0..p).map(|j| x[i * p + j] * beta[j + 1]).sum::<f64>();
        total += pinball(y[i] - fit, tau);
    }
    total + n as f64 * lambda * beta[1..].iter().map(|b| b.abs()).sum::<f64>()
}

/// Solves a small dense system by Gaussian elimination with partial
/// pivoting; `None` when (numerically) singular.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let d = b.len();
    for col in 0..d {
        let piv = (col..d).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..d {
            let f = a[r][col] / a[col][col];
            for c in col..d {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; d];
    for r in (0..d).rev() {
        let s: f64 = (r + 1..d).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

fn combinations(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in start..n {
        cur.push(i);
        combinations(n, k, i + 1, cur, out);
        cur.pop();
    }
}

/// Global minimum of the penalized pinball objective by enumerating every
/// vertex of the hyperplane arrangement {residual_i = 0} ∪ {β_j = 0}.
/// Returns `(objective, β)`.
pub fn qr_bruteforce(y: &[f64], x: &[f64], p: usize, tau: f64, lambda: f64) -> (f64, Vec<f64>) {
    let n = y.len();
    let d = p + 1;
    let mut planes: Vec<(Vec<f64>, f64)> = Vec::new();
    for i in 0..n {
        let mut row = vec![1.0];
        row.extend_from_slice(&x[i * p..(i + 1) * p]);
        planes.push((row, y[i]));
    }
    for j in 0..p {
        let mut row = vec![0.0; d];
        row[j + 1] = 1.0;
        planes.push((row, 0.0));
    }
    let mut subsets = Vec::new();
    combinations(planes.len(), d, 0, &mut Vec::new(), &mut subsets);
    let mut best = (f64::INFINITY, vec![0.0; d]);
    for s in subsets {
        let a: Vec<Vec<f64>> = s.iter().map(|&k| planes[k].0.clone()).collect();
        let b: Vec<f64> = s.iter().map(|&k| planes[k].1).collect();
        if let Some(beta) = gauss_solve(a, b) {
            let obj = qr_objective(y, x, p, tau, lambda, &beta);
            if obj < best.0 {
                best = (obj, beta);
            }
        }
    }
    best
}

/// Checks the subgradient conditions by searching for a valid ψ: the
/// weights of observations with nonzero residual are forced; the free ones
/// (zero residual) are solved for by brute force over vertices of their box.
/// Returns the smallest achievable worst violation.
pub fn certificate_violation(y: &[f64], x: &[f64], p: usize, tau: f64, lambda: f64, beta: &[f64], psi: &[f64]) -> f64 {
    let n = y.len();
    let nl = n as f64 * lambda;
    let scale = y.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    let mut worst = 0.0f64;
    let mut sums = vec![0.0; p];
    let mut total = 0.0;
    for i in 0..n {
        let r = y[i] - beta[0] - (0..p).map(|j| x[i * p + j] * beta[j + 1]).sum::<f64>();
        let w = psi[i];
        if w < tau - 1.0 - 1e-12 || w > tau + 1e-12 {
            worst = worst.max(1.0);
        }
        if r > 1e-9 * scale {
            worst = worst.max((w - tau).abs());
        } else if r < -1e-9 * scale {
            worst = worst.max((w - tau + 1.0).abs());
        }
        total += w;
        for j in 0..p {
            sums[j] += w * x[i * p + j];
        }
    }
    worst = worst.max(total.abs());
    for j in 0..p {
        let b = beta[j + 1];
        let v = if b == 0.0 {
            (sums[j].abs() - nl).max(0.0)
        } else {
            (sums[j] - nl * b.signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub const COVARIATES: [&str; 11] = [
    "area",
    "elevation",
    "pop_piped_water",
    "pop_solid_waste",
    "pop_elec_power",
    "pop_older65",
    "econ_act_pop",
    "vul_elderly_pop",
    "illiteracy_rate",
    "extr_pover_rate",
    "hdi",
];

/// Writes a synthetic panel of `cities` cities observed for `days` days and a
/// matching covariate table. Every city crosses 240 cases within its first
/// 50 days and reaches at least 5 deaths; the death curve is a logistic whose
/// height depends on two covariates plus right-skewed noise.
/// Returns `(panel_path, covariates_path)`.
pub fn write_synthetic_panel(
    dir: &std::path::Path,
    cities: usize,
    days: usize,
    seed: u64,
) -> (std::path::PathBuf, std::path::PathBuf) {
    use std::fmt::Write as _;
    let mut r = rng(seed);
    let start = chrono::NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
    let mut panel = String::from("city_id,date,cum_cases,cum_deaths,population\n");
    let mut cov = format!("city_id,{}\n", COVARIATES.join(","));
    for c in 0..cities {
        let id = format!("city{c:04}");
        let x: Vec<f64> = (0..11).map(|_| normal(&mut r)).collect();
        let pop = (uniform(&mut r, 11.0, 14.0)).exp().round() as u64;
        let onset = r.random_range(0..50usize);
        let height = (60.0 + 25.0 * x[5] - 15.0 * x[10] + 20.0 * (-uniform(&mut r, 1e-9, 1.0).ln())).max(15.0);
        let mid = onset as f64 + uniform(&mut r, 60.0, 160.0);
        let scale = uniform(&mut r, 12.0, 30.0);
        for d in 0..days {
            let t = d as f64;
            let cases = if d < onset { 50 + d as u64 } else { 240 + 40 * (d - onset) as u64 };
            let rate = height / (1.0 + (-(t - mid) / scale).exp());
            let deaths = ((rate * pop as f64 / 1e5).round() as u64).max(if d >= onset { 5 } else { 0 });
            let date = start + chrono::Duration::days(d as i64);
            writeln!(panel, "{id},{date},{cases},{deaths},{pop}").unwrap();
        }
        let raw = [
            1000.0 * (1.0 + 0.3 * x[0]).abs() + 1.0,
            500.0 + 200.0 * x[1],
            0.8 + 0.05 * x[2],
            0.7 + 0.05 * x[3],
            0.95 + 0.01 * x[4],
            0.08 + 0.02 * x[5],
            0.45 + 0.05 * x[6],
            0.1 + 0.02 * x[7],
            0.12 + 0.04 * x[8],
            0.05 + 0.02 * x[9],
            0.7 + 0.05 * x[10],
        ];
        let vals: Vec<String> = raw.iter().map(|v| v.to_string()).collect();
        writeln!(cov, "{id},{}", vals.join(",")).unwrap();
    }
    let p = dir.join("panel.csv");
    let q = dir.join("covariates_in.csv");
    std::fs::write(&p, panel).unwrap();
    std::fs::write(&q, cov).unwrap();
    (p, q)
}
