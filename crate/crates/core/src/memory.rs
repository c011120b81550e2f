//! Allocation-event ledger with running peak, and its CSV timeline.

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerEvent {
    pub tick: u64,
    pub delta: i64,
    pub tag: String,
}

/// Records every allocation and free of tensor payload bytes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryLedger {
    events: Vec<LedgerEvent>,
    current: u64,
    peak: u64,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, bytes: usize, tag: &str) {
        if bytes == 0 {
            return;
        }
        self.current += bytes as u64;
        self.peak = self.peak.max(self.current);
        self.push(bytes as i64, tag);
    }

    /// Panics when freeing more than is live; that is always an accounting
    /// bug in the caller.
    pub fn free(&mut self, bytes: usize, tag: &str) {
        if bytes == 0 {
            return;
        }
        self.current = self
            .current
            .checked_sub(bytes as u64)
            .unwrap_or_else(|| panic!("ledger underflow freeing {bytes} bytes for {tag}"));
        self.push(-(bytes as i64), tag);
    }

    fn push(&mut self, delta: i64, tag: &str) {
        let tick = self.events.len() as u64;
        self.events.push(LedgerEvent { tick, delta, tag: tag.to_string() });
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn current_bytes(&self) -> usize {
        self.current as usize
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak as usize
    }

    pub fn ticks(&self) -> usize {
        self.events.len()
    }

    /// Appends another ledger's events as if they happened after ours.
    pub fn absorb(&mut self, other: &MemoryLedger) {
        for e in &other.events {
            if e.delta >= 0 {
                self.alloc(e.delta as usize, &e.tag);
            } else {
                self.free(e.delta.unsigned_abs() as usize, &e.tag);
            }
        }
    }

    /// CSV with columns `tick,delta_bytes,cumulative_bytes,tag,peak`; the
    /// first row reaching the peak has `peak = 1`.
    pub fn export_timeline(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["tick", "delta_bytes", "cumulative_bytes", "tag", "peak"]).expect("in-memory write");
        let mut cumulative = 0i64;
        let mut flagged = false;
        for e in &self.events {
            cumulative += e.delta;
            let is_peak = !flagged && cumulative as u64 == self.peak;
            flagged |= is_peak;
            w.write_record([
                e.tick.to_string(),
                e.delta.to_string(),
                cumulative.to_string(),
                e.tag.clone(),
                u8::from(is_peak).to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }
}

/// Largest `cumulative_bytes` value in a timeline CSV.
pub fn timeline_peak(csv_text: &str) -> Result<u64, csv::Error> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let mut peak = 0u64;
    for row in r.records() {
        let row = row?;
        let v: u64 = row.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
        peak = peak.max(v);
    }
    Ok(peak)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_ledger_exports_header_only() {
        let l = MemoryLedger::new();
        assert_eq!(l.export_timeline(), "tick,delta_bytes,cumulative_bytes,tag,peak\n");
    }

    #[test]
    fn single_alloc_and_free() {
        let mut l = MemoryLedger::new();
        l.alloc(100, "x");
        l.free(100, "x");
        assert_eq!(l.peak_bytes(), 100);
        assert_eq!(l.current_bytes(), 0);
        let csv = l.export_timeline();
        assert_eq!(timeline_peak(&csv).unwrap(), 100);
        assert!(csv.contains("0,100,100,x,1"));
        assert!(csv.contains("1,-100,0,x,0"));
    }

    #[test]
    fn peak_is_running_maximum() {
        let mut l = MemoryLedger::new();
        l.alloc(10, "a");
        l.alloc(30, "b");
        l.free(10, "a");
        l.alloc(5, "c");
        assert_eq!(l.peak_bytes(), 40);
        assert_eq!(l.current_bytes(), 35);
    }

    #[test]
    #[should_panic(expected = "underflow")]
    fn over_free_panics() {
        let mut l = MemoryLedger::new();
        l.alloc(1, "a");
        l.free(2, "a");
    }
}
