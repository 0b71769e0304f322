//! Cosine-annealing learning-rate schedule with warm restarts: each restart
//! period is twice the previous one and begins at half the previous start
//! rate, decaying to zero within the period.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub restart_starts: Vec<usize>,
    pub periods: Vec<usize>,
    pub start_lrs: Vec<f64>,
    pub total_epochs: usize,
}

impl Schedule {
    /// Requires first_period * (2^K - 1) == epochs for some integer K >= 1.
    pub fn new(epochs: usize, lr0: f64, first_period: usize) -> Result<Schedule> {
        if epochs == 0 || first_period == 0 {
            return Err(Error::Config("epochs and first_period must be positive".into()));
        }
        let mut restart_starts = Vec::new();
        let mut periods = Vec::new();
        let mut start_lrs = Vec::new();
        let mut start = 0usize;
        let mut period = first_period;
        let mut lr = lr0;
        while start < epochs {
            restart_starts.push(start);
            periods.push(period);
            start_lrs.push(lr);
            start += period;
            period *= 2;
            lr /= 2.0;
        }
        if start != epochs {
            return Err(Error::Config(format!(
                "first_period {first_period} does not tile {epochs} epochs \
                 (doubling periods reached {start})"
            )));
        }
        Ok(Schedule {
            restart_starts,
            periods,
            start_lrs,
            total_epochs: epochs,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} out of range 0..{}",
                self.total_epochs
            )));
        }
        let k = self
            .restart_starts
            .iter()
            .rposition(|&s| s <= epoch)
            .expect("epoch 0 is always covered");
        let t = (epoch - self.restart_starts[k]) as f64 / self.periods[k] as f64;
        Ok(self.start_lrs[k] * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
    }
}

/// One-shot form of [`Schedule::lr_at`].
pub fn lr_at(epoch: usize, lr0: f64, first_period: usize, total_epochs: usize) -> Result<f64> {
    Schedule::new(total_epochs, lr0, first_period)?.lr_at(epoch)
}

/// Stage-2 schedule: plain cosine from lr0 to zero, no restarts.
pub fn cosine_no_restart(epoch: usize, lr0: f64, total_epochs: usize) -> f64 {
    assert!(epoch < total_epochs);
    let t = epoch as f64 / total_epochs as f64;
    lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_schedule_checkpoints() {
        let s = Schedule::new(600, 3e-4, 40).unwrap();
        assert_eq!(s.restart_starts, vec![0, 40, 120, 280]);
        assert_eq!(s.periods, vec![40, 80, 160, 320]);
        assert_eq!(s.start_lrs, vec![3e-4, 1.5e-4, 7.5e-5, 3.75e-5]);
        assert_eq!(s.periods.iter().sum::<usize>(), 600);

        assert!((s.lr_at(0).unwrap() - 3e-4).abs() < 1e-18);
        assert!((s.lr_at(40).unwrap() - 1.5e-4).abs() < 1e-18);
        // Cosine midpoint of the first period.
        assert!((s.lr_at(20).unwrap() - 1.5e-4).abs() < 1e-12);
        assert!(s.lr_at(600).is_err());
    }

    #[test]
    fn lr_is_continuous_and_non_increasing_within_periods() {
        let s = Schedule::new(600, 3e-4, 40).unwrap();
        for k in 0..s.restart_starts.len() {
            let lo = s.restart_starts[k];
            let hi = lo + s.periods[k];
            let mut prev = f64::INFINITY;
            for e in lo..hi {
                let lr = s.lr_at(e).unwrap();
                assert!(lr <= prev + 1e-18, "lr increased within period at {e}");
                prev = lr;
            }
        }
    }

    #[test]
    fn invalid_tilings_rejected() {
        assert!(Schedule::new(600, 3e-4, 50).is_err());
        assert!(Schedule::new(20, 3e-4, 10).is_err());
        assert!(Schedule::new(20, 3e-4, 20).is_ok());
        assert!(Schedule::new(30, 3e-4, 10).is_ok()); // 10 + 20
    }

    #[test]
    fn stage2_cosine_endpoints() {
        assert!((cosine_no_restart(0, 3e-4, 10) - 3e-4).abs() < 1e-18);
        assert!(cosine_no_restart(9, 3e-4, 10) < 1e-5);
    }
}
