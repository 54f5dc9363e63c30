//! Shared oracles for the integration suites: an adaptive Dormand-Prince
//! 5(4) integrator, independent of every solver path it is used to check.

/// Integrate y' = f(t, y) for a 2-component state from t0 to t1 with local
/// tolerance `tol`.
pub fn dopri5(
    f: &dyn Fn(f64, [f64; 2]) -> [f64; 2],
    mut y: [f64; 2],
    t0: f64,
    t1: f64,
    tol: f64,
) -> [f64; 2] {
    if t1 <= t0 {
        return y;
    }
    let mut t = t0;
    let mut h = (t1 - t0).min(1e-3);
    let a = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
    ];
    let c = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0];
    let b5 = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ];
    let b4 = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    while t < t1 {
        if t + h > t1 {
            h = t1 - t;
        }
        let mut k = [[0.0f64; 2]; 7];
        k[0] = f(t, y);
        for stage in 1..6 {
            let mut ys = y;
            for prev in 0..stage {
                ys[0] += h * a[stage][prev] * k[prev][0];
                ys[1] += h * a[stage][prev] * k[prev][1];
            }
            k[stage] = f(t + c[stage] * h, ys);
        }
        let mut y5 = y;
        for stage in 0..6 {
            y5[0] += h * b5[stage] * k[stage][0];
            y5[1] += h * b5[stage] * k[stage][1];
        }
        k[6] = f(t + h, y5);
        let mut y4 = y;
        for stage in 0..7 {
            y4[0] += h * b4[stage] * k[stage][0];
            y4[1] += h * b4[stage] * k[stage][1];
        }
        let err = ((y5[0] - y4[0]).powi(2) + (y5[1] - y4[1]).powi(2)).sqrt();
        let scale = tol * (1.0 + y[0].abs().max(y[1].abs()));
        if err <= scale {
            t += h;
            y = y5;
        }
        let factor = (0.9 * (scale / err.max(1e-300)).powf(0.2)).clamp(0.2, 5.0);
        h = (h * factor).min(0.1);
    }
    y
}

/// Print the per-criterion verdict line and panic on failure.
pub fn verdict(name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("{name}: {tag} ({detail})");
    assert!(pass, "{name} failed: {detail}");
}
