//! Small special-function kernels needed by the constants computation.
//! Direct summation with analytic remainders, no external library.

/// Riemann zeta on (1, 2), by direct summation plus the Euler-Maclaurin
/// tail through the third derivative term. With K = 65536 the analytic
/// remainder is below 1e-20 for alpha in (1, 2); summation runs smallest
/// terms first so rounding stays at a few ulps.
pub fn zeta(alpha: f64) -> f64 {
    assert!(alpha > 1.0 && alpha < 2.0, "zeta: alpha out of (1,2)");
    const K: u64 = 1 << 16;
    let mut head = 0.0;
    for k in (1..=K).rev() {
        head += (k as f64).powf(-alpha);
    }
    let kf = K as f64;
    let tail = kf.powf(1.0 - alpha) / (alpha - 1.0) - 0.5 * kf.powf(-alpha)
        + alpha / 12.0 * kf.powf(-alpha - 1.0)
        - alpha * (alpha + 1.0) * (alpha + 2.0) / 720.0 * kf.powf(-alpha - 3.0);
    head + tail
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

fn gamma_lanczos(x: f64) -> f64 {
    // valid for x >= 0.5
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x - 1.0 + i as f64);
    }
    let t = x - 0.5 + LANCZOS_G;
    (2.0 * std::f64::consts::PI).sqrt() * t.powf(x - 0.5) * (-t).exp() * acc
}

/// Gamma function for positive arguments. Arguments below 0.5 are lifted
/// through the recurrence so the Lanczos kernel stays in its sweet spot.
pub fn gamma(x: f64) -> f64 {
    assert!(x > 0.0, "gamma: argument must be positive");
    if x < 0.5 {
        gamma_lanczos(x + 1.0) / x
    } else {
        gamma_lanczos(x)
    }
}

/// |Gamma(1 - alpha)| for alpha in (1, 2), evaluated through the
/// recurrence Gamma(1 - alpha) = Gamma(2 - alpha) / (1 - alpha). The
/// literal value is negative on this range; callers decide what to do
/// with the sign.
pub fn abs_gamma_one_minus(alpha: f64) -> f64 {
    assert!(alpha > 1.0 && alpha < 2.0);
    gamma(2.0 - alpha) / (alpha - 1.0)
}
