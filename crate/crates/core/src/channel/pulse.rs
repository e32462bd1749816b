//! Transmit pulse shape.

/// Truncated Gaussian pulse with support [-T_p/2, T_p/2], normalized so that
/// its samples on the Δt grid carry unit energy: Σ_k |p(kΔt)|² = 1.
///
/// The Gaussian std is T_p/6, so the truncation at ±3σ clips ~0.3% of the
/// continuous-time energy. Normalizing on the grid (rather than in continuous
/// time) makes a tap of amplitude α placed on a grid point contribute exactly
/// |α|² of sampled energy.
#[derive(Clone, Copy, Debug)]
pub struct Pulse {
    sigma: f64,
    half_width: f64,
    amp: f64,
}

impl Pulse {
    pub fn new(pulse_duration: f64, sample_interval: f64) -> Self {
        let sigma = pulse_duration / 6.0;
        // Pad the support edge by a relative epsilon so that a grid point
        // landing exactly on ±T_p/2 is kept both here and in `eval`.
        let half_width = (pulse_duration / 2.0) * (1.0 + 1e-9);
        let k_max = (half_width / sample_interval).floor() as i64;
        let mut energy = 0.0;
        for k in -k_max..=k_max {
            let t = k as f64 * sample_interval;
            energy += (-t * t / (sigma * sigma)).exp();
        }
        Self { sigma, half_width, amp: 1.0 / energy.sqrt() }
    }

    /// Pulse value at time `t` relative to the pulse center.
    pub fn eval(&self, t: f64) -> f64 {
        if t.abs() > self.half_width {
            0.0
        } else {
            self.amp * (-t * t / (2.0 * self.sigma * self.sigma)).exp()
        }
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }
}
