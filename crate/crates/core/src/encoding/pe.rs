use std::f64::consts::PI;

/// Sinusoidal lifting of a low-dimensional signal: for every component `p`
/// and frequency `k = 0..frequencies`, emits `sin(2^k π p), cos(2^k π p)`.
/// Output is ordered component-major, then frequency, then (sin, cos).
pub fn positional_encode(n: &[f64], frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * frequencies * n.len());
    positional_encode_into(n, frequencies, &mut out);
    out
}

pub fn positional_encode_into(n: &[f64], frequencies: usize, out: &mut Vec<f64>) {
    for &p in n {
        let mut scale = PI;
        for _ in 0..frequencies {
            let (s, c) = (scale * p).sin_cos();
            out.push(s);
            out.push(c);
            scale *= 2.0;
        }
    }
}

/// Derivative of each output entry with respect to the input component it
/// depends on (the Jacobian is block diagonal).
pub fn positional_encode_derivative(n: &[f64], frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * frequencies * n.len());
    for &p in n {
        let mut scale = PI;
        for _ in 0..frequencies {
            let (s, c) = (scale * p).sin_cos();
            out.push(scale * c);
            out.push(-scale * s);
            scale *= 2.0;
        }
    }
    out
}
