//! Fixed-step classic Runge-Kutta for scalar ODEs.

/// One RK4 step of `dy/dt = f(y)` for an autonomous scalar system.
///
/// Returns the new value together with the four stage slopes so callers can
/// apply the same quadrature weights to auxiliary quantities (flow volumes).
pub fn rk4_autonomous<F>(y: f64, dt: f64, mut f: F) -> (f64, [f64; 4])
where
    F: FnMut(f64) -> f64,
{
    let k1 = f(y);
    let k2 = f(y + 0.5 * dt * k1);
    let k3 = f(y + 0.5 * dt * k2);
    let k4 = f(y + dt * k3);
    let next = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    (next, [k1, k2, k3, k4])
}

/// Weighted RK4 quadrature of stage samples over one step.
pub fn rk4_weighted(samples: [f64; 4], dt: f64) -> f64 {
    dt / 6.0 * (samples[0] + 2.0 * samples[1] + 2.0 * samples[2] + samples[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_matches_closed_form() {
        let mut y = 1.0;
        let dt = 0.1;
        for _ in 0..100 {
            y = rk4_autonomous(y, dt, |v| -v).0;
        }
        assert!((y - (-10.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn constant_slope_is_exact() {
        let (y, stages) = rk4_autonomous(2.0, 0.5, |_| 3.0);
        assert_eq!(y, 3.5);
        assert_eq!(rk4_weighted(stages, 0.5), 1.5);
    }
}
