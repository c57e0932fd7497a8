//! Pass/fail bookkeeping for the acceptance run.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub details: String,
    pub elapsed: Duration,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<34} {}  ({:.1}s) {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.elapsed.as_secs_f64(),
            self.details
        )
    }
}

/// Collects the individual checks that make up one criterion.
pub struct Checks {
    id: u32,
    name: &'static str,
    start: Instant,
    passed: bool,
    notes: String,
}

impl Checks {
    pub fn new(id: u32, name: &'static str) -> Self {
        Self {
            id,
            name,
            start: Instant::now(),
            passed: true,
            notes: String::new(),
        }
    }

    /// Records a check and a short description of what was measured.
    pub fn check(&mut self, ok: bool, note: impl AsRef<str>) {
        self.passed &= ok;
        if !self.notes.is_empty() {
            self.notes.push_str("; ");
        }
        if !ok {
            self.notes.push_str("FAILED ");
        }
        self.notes.push_str(note.as_ref());
    }

    /// Informational note that does not affect the verdict.
    pub fn note(&mut self, note: impl AsRef<str>) {
        let _ = write!(self.notes, "{}[info] {}", if self.notes.is_empty() { "" } else { "; " }, note.as_ref());
    }

    /// Fails the criterion when it ran longer than `limit`.
    pub fn within(&mut self, limit: Duration) {
        let elapsed = self.start.elapsed();
        self.check(
            elapsed <= limit,
            format!("runtime {:.1}s <= {}s", elapsed.as_secs_f64(), limit.as_secs()),
        );
    }

    pub fn finish(self) -> Verdict {
        Verdict {
            id: self.id,
            name: self.name,
            passed: self.passed,
            details: self.notes,
            elapsed: self.start.elapsed(),
        }
    }
}
