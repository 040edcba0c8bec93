//! Per-inference rows and aggregate statistics of a simulated session.

use std::fmt::Write as _;

use crate::cost::{PowerStates, Timeline};
use crate::error::Result;
use crate::netsim::{mean_std, BandwidthTrace};
use crate::runtime::sim::{InferenceRecord, SessionResult, SimOutcome};

/// First line of every CSV; bump when the column set changes.
pub const CSV_SCHEMA: &str = "# hybridpar-report v1";

pub const CSV_COLUMNS: [&str; 18] = [
    "inference",
    "start_s",
    "trace_bps",
    "predicted_bps",
    "bucket",
    "bucket_bps",
    "wall_s",
    "compute_s",
    "transmit_s",
    "transmit_share_pct",
    "energy_j",
    "messages",
    "bytes",
    "local_wall_s",
    "local_energy_j",
    "pp_wall_s",
    "pp_energy_j",
    "output_ok",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub inference: u32,
    pub start: f64,
    pub trace_bps: f64,
    pub predicted_bps: f64,
    pub bucket: usize,
    pub bucket_bps: f64,
    pub wall: f64,
    pub compute: f64,
    pub transmit: f64,
    pub share_pct: f64,
    pub energy: f64,
    pub messages: usize,
    pub bytes: u64,
    pub local_wall: f64,
    pub local_energy: f64,
    pub pp_wall: f64,
    pub pp_energy: f64,
    pub output_ok: Option<bool>,
}

/// Length of the union of intervals clipped to `[0, wall]`.
fn covered(iv: impl Iterator<Item = (f64, f64)>, wall: f64) -> f64 {
    // abs() turns the -0.0 of an empty union into 0.0 for the CSV.
    Timeline::from_intervals(wall, &iv.collect::<Vec<_>>(), &[])
        .compute
        .abs()
}

/// Wall time, busy compute time and busy link time of one replay.
pub fn durations(o: &SimOutcome) -> (f64, f64, f64) {
    let wall = o.wall();
    let e = &o.eval;
    let compute = covered(
        e.robot_compute.iter().chain(&e.server_compute).copied(),
        wall,
    );
    let transmit = covered(e.messages.iter().map(|m| (m.start, m.delivered)), wall);
    (wall, compute, transmit)
}

impl RunRow {
    pub fn from_record(
        r: &InferenceRecord,
        trace: &BandwidthTrace,
        power: &PowerStates,
    ) -> Result<RunRow> {
        let (wall, compute, transmit) = durations(&r.hybrid);
        let share_pct = if wall > 0.0 {
            100.0 * transmit / wall
        } else {
            0.0
        };
        Ok(RunRow {
            inference: r.id,
            start: r.start,
            trace_bps: trace.bandwidth_at(r.start),
            predicted_bps: r.predicted_bps,
            bucket: r.bucket,
            bucket_bps: r.bucket_bps,
            wall,
            compute,
            transmit,
            share_pct,
            energy: r.hybrid.eval.energy(power)?,
            messages: r.hybrid.eval.messages.len(),
            bytes: r.hybrid.eval.messages.iter().map(|m| m.payload).sum(),
            local_wall: r.local.wall(),
            local_energy: r.local.eval.energy(power)?,
            pp_wall: r.pp.wall(),
            pp_energy: r.pp.eval.energy(power)?,
            output_ok: r.output_ok,
        })
    }

    fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.0},{:.0},{},{:.0},{:.6},{:.6},{:.6},{:.3},{:.6},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.inference,
            self.start,
            self.trace_bps,
            self.predicted_bps,
            self.bucket,
            self.bucket_bps,
            self.wall,
            self.compute,
            self.transmit,
            self.share_pct,
            self.energy,
            self.messages,
            self.bytes,
            self.local_wall,
            self.local_energy,
            self.pp_wall,
            self.pp_energy,
            match self.output_ok {
                Some(true) => "yes",
                Some(false) => "no",
                None => "-",
            }
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(v: &[f64]) -> Stat {
        let (mean, std) = mean_std(v);
        Stat { mean, std }
    }

    /// Relative standard deviation.
    pub fn rsd(&self) -> f64 {
        if self.mean == 0.0 {
            0.0
        } else {
            self.std / self.mean
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub trace: String,
    pub rows: Vec<RunRow>,
    pub trace_bps: Stat,
}

impl Report {
    pub fn from_session(
        s: &SessionResult,
        trace: &BandwidthTrace,
        power: &PowerStates,
    ) -> Result<Report> {
        let rows = s
            .records
            .iter()
            .map(|r| RunRow::from_record(r, trace, power))
            .collect::<Result<Vec<_>>>()?;
        Ok(Report {
            trace: trace.name.clone(),
            rows,
            trace_bps: Stat {
                mean: s.trace_stats.0,
                std: s.trace_stats.1,
            },
        })
    }

    pub fn stat(&self, f: impl Fn(&RunRow) -> f64) -> Stat {
        Stat::of(&self.rows.iter().map(f).collect::<Vec<_>>())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n{}\n", CSV_SCHEMA, CSV_COLUMNS.join(","));
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    /// Aligned summary: mean and standard deviation per column.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "trace {}  inferences {}", self.trace, self.rows.len());
        let _ = writeln!(s, "{:<22} {:>14} {:>14}", "metric", "mean", "std");
        let lines: [(&str, Box<dyn Fn(&RunRow) -> f64>); 9] = [
            ("wall time (s)", Box::new(|r| r.wall)),
            ("transmit time (s)", Box::new(|r| r.transmit)),
            ("transmit share (%)", Box::new(|r| r.share_pct)),
            ("energy (J)", Box::new(|r| r.energy)),
            ("messages", Box::new(|r| r.messages as f64)),
            ("bytes", Box::new(|r| r.bytes as f64)),
            ("local wall time (s)", Box::new(|r| r.local_wall)),
            ("best PP wall time (s)", Box::new(|r| r.pp_wall)),
            ("local energy (J)", Box::new(|r| r.local_energy)),
        ];
        for (name, f) in lines.iter() {
            let st = self.stat(f);
            let _ = writeln!(s, "{:<22} {:>14.6} {:>14.6}", name, st.mean, st.std);
        }
        let _ = writeln!(
            s,
            "{:<22} {:>14.0} {:>14.0}",
            "trace bandwidth (bps)", self.trace_bps.mean, self.trace_bps.std
        );
        let mut buckets: Vec<usize> = self.rows.iter().map(|r| r.bucket).collect();
        buckets.sort_unstable();
        buckets.dedup();
        let use_line: Vec<String> = buckets
            .iter()
            .map(|b| {
                format!(
                    "{}:{}",
                    b,
                    self.rows.iter().filter(|r| r.bucket == *b).count()
                )
            })
            .collect();
        let _ = writeln!(s, "buckets used (bucket:count) {}", use_line.join(" "));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> RunRow {
        RunRow {
            inference: 3,
            start: 0.25,
            trace_bps: 8e7,
            predicted_bps: 7.5e7,
            bucket: 2,
            bucket_bps: 5e7,
            wall: 0.125,
            compute: 0.1,
            transmit: 0.05,
            share_pct: 40.0,
            energy: 1.5,
            messages: 4,
            bytes: 1024,
            local_wall: 0.5,
            local_energy: 6.675,
            pp_wall: 0.2,
            pp_energy: 2.0,
            output_ok: Some(true),
        }
    }

    #[test]
    fn golden_csv() {
        let r = Report {
            trace: "t".into(),
            rows: vec![row()],
            trace_bps: Stat::default(),
        };
        let want = "# hybridpar-report v1\n\
inference,start_s,trace_bps,predicted_bps,bucket,bucket_bps,wall_s,compute_s,transmit_s,transmit_share_pct,energy_j,messages,bytes,local_wall_s,local_energy_j,pp_wall_s,pp_energy_j,output_ok\n\
3,0.250000,80000000,75000000,2,50000000,0.125000,0.100000,0.050000,40.000,1.500000,4,1024,0.500000,6.675000,0.200000,2.000000,yes\n";
        assert_eq!(r.to_csv(), want);
    }

    #[test]
    fn rsd() {
        assert_eq!(Stat::of(&[2.0, 2.0]).rsd(), 0.0);
        assert!((Stat::of(&[1.0, 3.0]).rsd() - 0.5).abs() < 1e-12);
    }
}
