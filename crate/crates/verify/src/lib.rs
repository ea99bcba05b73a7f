//! Shared pieces of the acceptance suite: criterion reporting and the
//! procedural test image.

use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

/// Result of one acceptance criterion.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Verdict {
    pub id: u32,
    pub title: &'static str,
    pub outcome: Outcome,
    pub elapsed: Duration,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {:>2} {} {} ({:.1}s): {}",
            self.id,
            if self.outcome.pass { "PASS" } else { "FAIL" },
            self.title,
            self.elapsed.as_secs_f64(),
            self.outcome.detail
        )
    }
}

/// Runs criteria in order, printing one line each as it finishes.
#[derive(Debug, Default)]
pub struct Report {
    pub verdicts: Vec<Verdict>,
    /// When set, criteria outside this list are skipped.
    pub only: Option<Vec<u32>>,
}

impl Report {
    /// Reads an optional comma-separated criterion list from `NTKS_CRITERIA`.
    pub fn from_env() -> Self {
        let only = std::env::var("NTKS_CRITERIA")
            .ok()
            .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
        Report {
            verdicts: Vec::new(),
            only,
        }
    }

    pub fn selected(&self, id: u32) -> bool {
        self.only.as_ref().is_none_or(|ids| ids.contains(&id))
    }

    pub fn run(&mut self, id: u32, title: &'static str, check: impl FnOnce() -> Outcome) {
        if !self.selected(id) {
            return;
        }
        let start = Instant::now();
        let outcome = match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(o) => o,
            Err(payload) => {
                let msg = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into());
                Outcome::new(false, format!("panicked: {msg}"))
            }
        };
        let verdict = Verdict {
            id,
            title,
            outcome,
            elapsed: start.elapsed(),
        };
        println!("{verdict}");
        self.verdicts.push(verdict);
    }

    pub fn note(&self, text: &str) {
        println!("             note: {text}");
    }

    pub fn failed(&self) -> Vec<u32> {
        self.verdicts.iter().filter(|v| !v.outcome.pass).map(|v| v.id).collect()
    }
}

/// `side × side` grayscale test scene with a smooth ramp, a low-frequency
/// pattern, a disc, a dark patch and fine diagonal stripes. Values lie in `[0,1]`.
pub fn test_scene(side: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let mut values = Vec::with_capacity(side * side);
    for iy in 0..side {
        for ix in 0..side {
            let x = ix as f64 / (side - 1) as f64;
            let y = iy as f64 / (side - 1) as f64;
            let mut v = 0.35 + 0.25 * x + 0.15 * (2.0 * PI * 3.0 * x).sin() * (2.0 * PI * 2.0 * y).cos();
            if (x - 0.6).powi(2) + (y - 0.4).powi(2) < 0.06 {
                v += 0.3;
            }
            v += 0.08 * (2.0 * PI * 12.0 * (x + 0.5 * y)).sin();
            if y > 0.75 && x < 0.3 {
                v -= 0.25;
            }
            values.push(v.clamp(0.0, 1.0));
        }
    }
    values
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_in_range() {
        let s = test_scene(16);
        assert_eq!(s.len(), 256);
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn panics_become_failures() {
        let mut r = Report::default();
        r.run(1, "boom", || panic!("bad"));
        r.run(2, "fine", || Outcome::new(true, "ok"));
        assert_eq!(r.failed(), vec![1]);
        assert!(r.verdicts[0].outcome.detail.contains("bad"));
    }
}
