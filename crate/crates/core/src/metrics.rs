//! Per-interval metrics, normal-operation margins and the three-phase
//! out-of-range evaluation.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Normal,
    Disruption,
    ControlActive,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Normal, Phase::Disruption, Phase::ControlActive];
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Normal => "Normal",
            Phase::Disruption => "Disruption",
            Phase::ControlActive => "ControlActive",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Normal" => Ok(Phase::Normal),
            "Disruption" => Ok(Phase::Disruption),
            "ControlActive" => Ok(Phase::ControlActive),
            _ => Err(Error::Parse(format!("unknown phase {s:?}"))),
        }
    }
}

/// Phase boundaries of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseBounds {
    pub num_intervals: u32,
    pub incident_interval: u32,
    pub control_interval: u32,
}

impl From<&ScenarioConfig> for PhaseBounds {
    fn from(c: &ScenarioConfig) -> Self {
        PhaseBounds {
            num_intervals: c.num_intervals,
            incident_interval: c.incident_interval,
            control_interval: c.control_interval,
        }
    }
}

pub fn classify_phase(interval: u32, bounds: impl Into<PhaseBounds>) -> Result<Phase> {
    let b = bounds.into();
    if interval >= b.num_intervals {
        return Err(Error::InvalidArgument(format!(
            "interval {interval} outside 0..{}",
            b.num_intervals
        )));
    }
    Ok(if interval < b.incident_interval {
        Phase::Normal
    } else if interval < b.control_interval {
        Phase::Disruption
    } else {
        Phase::ControlActive
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub interval: u32,
    pub convergence_ticks: u64,
    pub solution_quality: f64,
    pub message_count: u64,
    pub phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    Convergence,
    Quality,
    Messages,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Convergence, Metric::Quality, Metric::Messages];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Convergence => "convergence_ticks",
            Metric::Quality => "solution_quality",
            Metric::Messages => "message_count",
        }
    }

    pub fn value(self, r: &IntervalRecord) -> f64 {
        match self {
            Metric::Convergence => r.convergence_ticks as f64,
            Metric::Quality => r.solution_quality,
            Metric::Messages => r.message_count as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub lower: f64,
    pub upper: f64,
    pub target: f64,
}

impl Margin {
    pub fn verdict(&self, v: f64) -> Verdict {
        if v > self.upper {
            Verdict::Above
        } else if v < self.lower {
            Verdict::Below
        } else {
            Verdict::InRange
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginSet {
    pub convergence: Margin,
    pub quality: Margin,
    pub messages: Margin,
}

impl MarginSet {
    pub fn get(&self, m: Metric) -> &Margin {
        match m {
            Metric::Convergence => &self.convergence,
            Metric::Quality => &self.quality,
            Metric::Messages => &self.messages,
        }
    }
}

/// Per metric: min as lower, max as upper, mean as target.
pub fn compute_margins(baseline: &[IntervalRecord]) -> Result<MarginSet> {
    if baseline.is_empty() {
        return Err(Error::InsufficientData("empty normal-operation baseline".into()));
    }
    if let Some(r) = baseline.iter().find(|r| r.phase != Phase::Normal) {
        return Err(Error::InvalidArgument(format!(
            "baseline record for interval {} is in phase {}",
            r.interval, r.phase
        )));
    }
    let margin = |m: Metric| {
        let vals: Vec<f64> = baseline.iter().map(|r| m.value(r)).collect();
        let lower = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let upper = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        Margin {
            lower,
            upper,
            // Rounding can push the mean a hair outside the extremes.
            target: mean.clamp(lower, upper),
        }
    };
    Ok(MarginSet {
        convergence: margin(Metric::Convergence),
        quality: margin(Metric::Quality),
        messages: margin(Metric::Messages),
    })
}

/// Margins from the Normal-phase records of a run.
pub fn baseline_margins(records: &[IntervalRecord]) -> Result<MarginSet> {
    let normal: Vec<IntervalRecord> = records.iter().filter(|r| r.phase == Phase::Normal).cloned().collect();
    compute_margins(&normal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Below,
    InRange,
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordVerdict {
    pub interval: u32,
    pub phase: Phase,
    pub convergence: Verdict,
    pub quality: Verdict,
    pub messages: Verdict,
}

impl RecordVerdict {
    pub fn get(&self, m: Metric) -> Verdict {
        match m {
            Metric::Convergence => self.convergence,
            Metric::Quality => self.quality,
            Metric::Messages => self.messages,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricCounts {
    pub above: usize,
    pub below: usize,
}

impl MetricCounts {
    pub fn out_of_range(&self) -> usize {
        self.above + self.below
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub intervals: usize,
    pub convergence: MetricCounts,
    pub quality: MetricCounts,
    pub messages: MetricCounts,
}

impl PhaseSummary {
    pub fn get(&self, m: Metric) -> &MetricCounts {
        match m {
            Metric::Convergence => &self.convergence,
            Metric::Quality => &self.quality,
            Metric::Messages => &self.messages,
        }
    }

    fn get_mut(&mut self, m: Metric) -> &mut MetricCounts {
        match m {
            Metric::Convergence => &mut self.convergence,
            Metric::Quality => &mut self.quality,
            Metric::Messages => &mut self.messages,
        }
    }

    /// Share of this phase's intervals outside the margins; 0 for an empty phase.
    pub fn fraction_out(&self, m: Metric) -> f64 {
        if self.intervals == 0 {
            0.0
        } else {
            self.get(m).out_of_range() as f64 / self.intervals as f64
        }
    }

    pub fn fraction_above(&self, m: Metric) -> f64 {
        if self.intervals == 0 {
            0.0
        } else {
            self.get(m).above as f64 / self.intervals as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub margins: MarginSet,
    pub records: Vec<RecordVerdict>,
    pub phases: Vec<PhaseSummary>,
}

impl Evaluation {
    pub fn phase(&self, p: Phase) -> &PhaseSummary {
        self.phases.iter().find(|s| s.phase == p).expect("every phase is summarized")
    }
}

/// Flags values strictly outside `[lower, upper]` and counts them per phase.
pub fn evaluate_run(records: &[IntervalRecord], margins: &MarginSet) -> Evaluation {
    let mut phases: Vec<PhaseSummary> = Phase::ALL
        .iter()
        .map(|p| PhaseSummary {
            phase: *p,
            intervals: 0,
            convergence: MetricCounts::default(),
            quality: MetricCounts::default(),
            messages: MetricCounts::default(),
        })
        .collect();
    let verdicts = records
        .iter()
        .map(|r| {
            let v = RecordVerdict {
                interval: r.interval,
                phase: r.phase,
                convergence: margins.convergence.verdict(Metric::Convergence.value(r)),
                quality: margins.quality.verdict(r.solution_quality),
                messages: margins.messages.verdict(Metric::Messages.value(r)),
            };
            let s = phases.iter_mut().find(|s| s.phase == r.phase).expect("all phases present");
            s.intervals += 1;
            for m in Metric::ALL {
                let c = s.get_mut(m);
                match v.get(m) {
                    Verdict::Above => c.above += 1,
                    Verdict::Below => c.below += 1,
                    Verdict::InRange => {}
                }
            }
            v
        })
        .collect();
    Evaluation {
        margins: *margins,
        records: verdicts,
        phases,
    }
}

pub const RECORD_CSV_COLUMNS: [&str; 8] = [
    "interval",
    "phase",
    "convergence_ticks",
    "solution_quality",
    "message_count",
    "convergence_in_range",
    "quality_in_range",
    "messages_in_range",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

/// Writes records with their in-range flags. Records without a verdict get
/// empty flag cells.
pub fn write_records_csv(records: &[IntervalRecord], evaluation: Option<&Evaluation>, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    out.write_record(RECORD_CSV_COLUMNS).map_err(csv_err)?;
    for r in records {
        let v = evaluation.and_then(|e| e.records.iter().find(|v| v.interval == r.interval));
        let flag = |m: Metric| v.map_or(String::new(), |v| (v.get(m) == Verdict::InRange).to_string());
        out.write_record([
            r.interval.to_string(),
            r.phase.to_string(),
            r.convergence_ticks.to_string(),
            r.solution_quality.to_string(),
            r.message_count.to_string(),
            flag(Metric::Convergence),
            flag(Metric::Quality),
            flag(Metric::Messages),
        ])
        .map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::Parse(e.to_string()))
}

pub fn read_records_csv(text: &str) -> Result<Vec<IntervalRecord>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let parse = |e: &dyn fmt::Display| Error::Parse(e.to_string());
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| parse(&e))?;
        let cell = |i: usize| row.get(i).ok_or_else(|| Error::Parse(format!("missing column {}", RECORD_CSV_COLUMNS[i])));
        out.push(IntervalRecord {
            interval: cell(0)?.parse().map_err(|e| parse(&e))?,
            phase: cell(1)?.parse()?,
            convergence_ticks: cell(2)?.parse().map_err(|e| parse(&e))?,
            solution_quality: cell(3)?.parse().map_err(|e| parse(&e))?,
            message_count: cell(4)?.parse().map_err(|e| parse(&e))?,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct JsonExport<'a> {
    records: &'a [IntervalRecord],
    evaluation: Option<&'a Evaluation>,
}

pub fn write_records_json(records: &[IntervalRecord], evaluation: Option<&Evaluation>, w: impl Write) -> Result<()> {
    let mut w = w;
    serde_json::to_writer_pretty(&mut w, &JsonExport { records, evaluation }).map_err(|e| Error::Parse(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::Parse(e.to_string()))
}

/// Writes records and their evaluation to `path` in the chosen format.
pub fn export(records: &[IntervalRecord], evaluation: Option<&Evaluation>, format: ExportFormat, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    match format {
        ExportFormat::Csv => write_records_csv(records, evaluation, &mut buf)?,
        ExportFormat::Json => write_records_json(records, evaluation, &mut buf)?,
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bounds() -> PhaseBounds {
        PhaseBounds {
            num_intervals: 60,
            incident_interval: 20,
            control_interval: 36,
        }
    }

    fn rec(i: u32, q: f64, phase: Phase) -> IntervalRecord {
        IntervalRecord {
            interval: i,
            convergence_ticks: 10,
            solution_quality: q,
            message_count: 100,
            phase,
        }
    }

    #[test]
    fn phase_examples() {
        assert_eq!(classify_phase(10, bounds()).unwrap(), Phase::Normal);
        assert_eq!(classify_phase(25, bounds()).unwrap(), Phase::Disruption);
        assert_eq!(classify_phase(40, bounds()).unwrap(), Phase::ControlActive);
        assert!(classify_phase(60, bounds()).is_err());
    }

    proptest! {
        #[test]
        fn phases_partition_the_run(inc in 1u32..30, gap in 1u32..30, tail in 1u32..30) {
            let b = PhaseBounds { num_intervals: inc + gap + tail, incident_interval: inc, control_interval: inc + gap };
            let mut counts = [0u32; 3];
            for i in 0..b.num_intervals {
                counts[classify_phase(i, b).unwrap() as usize] += 1;
            }
            prop_assert_eq!(counts, [inc, gap, tail]);
        }

        #[test]
        fn margins_are_ordered(q in proptest::collection::vec(0.0f64..100.0, 1..40)) {
            let recs: Vec<_> = q.iter().enumerate().map(|(i, v)| rec(i as u32, *v, Phase::Normal)).collect();
            let m = compute_margins(&recs).unwrap();
            for metric in Metric::ALL {
                let g = m.get(metric);
                prop_assert!(g.lower <= g.target && g.target <= g.upper);
            }
        }
    }

    #[test]
    fn margin_examples() {
        let recs: Vec<_> = [2.0, 4.0, 6.0].iter().enumerate().map(|(i, v)| rec(i as u32, *v, Phase::Normal)).collect();
        let m = compute_margins(&recs).unwrap();
        assert_eq!((m.quality.lower, m.quality.upper, m.quality.target), (2.0, 6.0, 4.0));
        let one = compute_margins(&recs[..1]).unwrap();
        assert_eq!((one.quality.lower, one.quality.upper, one.quality.target), (2.0, 2.0, 2.0));
        assert!(matches!(compute_margins(&[]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn evaluation_flags_strictly_outside() {
        let base: Vec<_> = (0..3).map(|i| rec(i, 2.0 + i as f64, Phase::Normal)).collect();
        let m = compute_margins(&base).unwrap();
        let mut all = base.clone();
        all.push(rec(25, 4.0, Phase::Disruption));
        all.push(rec(26, 9.0, Phase::Disruption));
        all.push(rec(40, 4.0, Phase::ControlActive));
        let e = evaluate_run(&all, &m);
        assert_eq!(e.phase(Phase::Normal).quality.out_of_range(), 0);
        assert_eq!(e.phase(Phase::Disruption).quality.above, 1);
        assert_eq!(e.phase(Phase::Disruption).fraction_above(Metric::Quality), 0.5);
        assert_eq!(e.phase(Phase::ControlActive).quality.out_of_range(), 0);
    }

    #[test]
    fn empty_csv_is_header_only() {
        let mut buf = Vec::new();
        write_records_csv(&[], None, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{}\n", RECORD_CSV_COLUMNS.join(",")));
    }

    #[test]
    fn csv_round_trips() {
        let recs = vec![rec(0, 0.1 + 0.2, Phase::Normal), rec(25, 17.25, Phase::Disruption)];
        let e = evaluate_run(&recs, &compute_margins(&recs[..1]).unwrap());
        let mut buf = Vec::new();
        write_records_csv(&recs, Some(&e), &mut buf).unwrap();
        assert_eq!(read_records_csv(std::str::from_utf8(&buf).unwrap()).unwrap(), recs);
    }
}
