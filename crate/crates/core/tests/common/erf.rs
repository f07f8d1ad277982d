/// erf by its Maclaurin series; accurate to ~1e-15 for |x| ≤ 3.
pub fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        let add = term / (2 * n + 1) as f64;
        sum += add;
        if add.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

/// erfc by the Laplace continued fraction (modified Lentz), for x ≥ 2.
pub fn erfc_cf(x: f64) -> f64 {
    // erfc(x) = exp(-x²)/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = x + a / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / std::f64::consts::PI.sqrt() / f
}

pub fn phi_oracle(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    if z >= 2.0 {
        1.0 - 0.5 * erfc_cf(z)
    } else if z <= -2.0 {
        0.5 * erfc_cf(-z)
    } else {
        0.5 * (1.0 + erf_series(z))
    }
}

pub fn delta_oracle(eps: f64, mu: f64) -> f64 {
    phi_oracle(-eps / mu + mu / 2.0) - eps.exp() * phi_oracle(-eps / mu - mu / 2.0)
}
