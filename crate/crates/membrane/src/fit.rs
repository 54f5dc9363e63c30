//! Small least-squares helpers shared across modules.

/// Ordinary least squares of y on t: returns (slope, intercept, r²).
/// Caller guarantees at least two samples with distinct abscissae.
pub(crate) fn linear_fit(t: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let mut stt = 0.0;
    let mut sty = 0.0;
    let mut syy = 0.0;
    for (&ti, &yi) in t.iter().zip(y) {
        stt += (ti - tm) * (ti - tm);
        sty += (ti - tm) * (yi - ym);
        syy += (yi - ym) * (yi - ym);
    }
    // A constant series (up to rounding) is fitted exactly by slope 0.
    if syy <= 1e-24 * (ym * ym).max(1.0) * n {
        return (0.0, ym, 1.0);
    }
    let slope = if stt > 0.0 { sty / stt } else { 0.0 };
    let intercept = ym - slope * tm;
    let r2 = if syy > 0.0 {
        (sty * sty) / (stt * syy)
    } else {
        1.0
    };
    (slope, intercept, r2)
}
