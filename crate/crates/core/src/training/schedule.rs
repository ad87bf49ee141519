/// Cosine annealing with warm restarts over (fractional) epochs:
/// `eta_min + (eta_max - eta_min) * (1 + cos(pi * t_cur / t_i)) / 2`, with
/// cycle `i` lasting `t_0 * t_mult^i` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineWarmRestarts {
    pub eta_max: f64,
    pub eta_min: f64,
    pub t_0: f64,
    pub t_mult: f64,
}

impl Default for CosineWarmRestarts {
    fn default() -> Self {
        CosineWarmRestarts { eta_max: 1e-2, eta_min: 1e-5, t_0: 10.0, t_mult: 2.0 }
    }
}

impl CosineWarmRestarts {
    /// `(cycle start, cycle length)` containing epoch `t`.
    pub fn cycle(&self, t: f64) -> (f64, f64) {
        assert!(t >= 0.0 && self.t_0 > 0.0 && self.t_mult >= 1.0);
        let mut start = 0.0;
        let mut len = self.t_0;
        while t >= start + len {
            start += len;
            len *= self.t_mult;
        }
        (start, len)
    }

    pub fn lr(&self, t: f64) -> f64 {
        let (start, len) = self.cycle(t);
        let t_cur = t - start;
        if t_cur == 0.0 {
            return self.eta_max;
        }
        let cos = (std::f64::consts::PI * t_cur / len).cos();
        (self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + cos)).clamp(self.eta_min, self.eta_max)
    }

    /// Restart epochs strictly after 0 and not later than `until`.
    pub fn restarts(&self, until: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let mut at = self.t_0;
        let mut len = self.t_0;
        while at <= until {
            out.push(at);
            len *= self.t_mult;
            at += len;
        }
        out
    }
}
