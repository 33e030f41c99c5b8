//! Score tables. Scores are stored in millionths so that the Diff. column is
//! an exact difference of the printed Dig. and Phy. columns.

use std::fmt::Write as _;

use crate::attack::{Mode, Scale};
use crate::embedder::Variant;

/// A score rounded to the nearest millionth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Micros(pub i64);

impl Micros {
    pub fn from_f64(x: f64) -> Self {
        Micros((x * 1e6).round() as i64)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

impl std::ops::Sub for Micros {
    type Output = Micros;

    fn sub(self, rhs: Micros) -> Micros {
        Micros(self.0 - rhs.0)
    }
}

impl std::fmt::Display for Micros {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let a = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:06}", a / 1_000_000, a % 1_000_000)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub substitute: Variant,
    pub eval: Variant,
    pub mode: Mode,
    pub scale: Scale,
    /// Mean over seeds of the top digital similarity.
    pub dig: Micros,
    /// Mean over seeds of the top simulated-physical similarity.
    pub phy: Micros,
    /// Fraction of seeds whose physical score exceeds the eval threshold.
    pub asr: f64,
}

impl ScoreRow {
    pub fn diff(&self) -> Micros {
        self.dig - self.phy
    }
}

pub const REPORT_HEADER: &str = "substitute,eval,mode,scale,dig,phy,diff,asr";

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
    /// Verification threshold per eval model, in zoo order.
    pub thresholds: Vec<(Variant, f64)>,
    /// TOML of the configuration that produced the report.
    pub config_echo: String,
}

fn comment_lines(out: &mut String, text: &str) {
    for line in text.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
}

impl ScoreReport {
    pub fn empty() -> Self {
        Self {
            rows: Vec::new(),
            thresholds: Vec::new(),
            config_echo: String::new(),
        }
    }

    pub fn find(&self, substitute: Variant, eval: Variant, mode: Mode, scale: Scale) -> Option<&ScoreRow> {
        self.rows
            .iter()
            .find(|r| r.substitute == substitute && r.eval == eval && r.mode == mode && r.scale == scale)
    }

    /// CSV with the configuration echo and thresholds as leading `# ` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        comment_lines(&mut out, &self.config_echo);
        for (v, t) in &self.thresholds {
            let _ = writeln!(out, "# threshold {v} = {t:.6}");
        }
        out.push_str(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.6}",
                r.substitute,
                r.eval,
                r.mode,
                r.scale,
                r.dig,
                r.phy,
                r.diff(),
                r.asr
            );
        }
        out
    }

    /// One grid per scale and mode: substitutes down, eval models across,
    /// each cell split into Dig., Phy. and Diff.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let mut keys: Vec<(Scale, Mode)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.scale, r.mode)) {
                keys.push((r.scale, r.mode));
            }
        }
        for (scale, mode) in keys {
            let rows: Vec<&ScoreRow> = self.rows.iter().filter(|r| r.scale == scale && r.mode == mode).collect();
            let mut evals: Vec<Variant> = rows.iter().map(|r| r.eval).collect();
            evals.sort();
            evals.dedup();
            let mut subs: Vec<Variant> = rows.iter().map(|r| r.substitute).collect();
            subs.sort();
            subs.dedup();

            let _ = writeln!(out, "### {scale} scale, {mode} mode\n");
            out.push_str("| Substitute |");
            for e in &evals {
                let _ = write!(out, " {e} Dig. | {e} Phy. | {e} Diff. |");
            }
            out.push_str("\n|---|");
            out.push_str(&"---|---|---|".repeat(evals.len()));
            out.push('\n');
            for s in &subs {
                let _ = write!(out, "| {s} |");
                for e in &evals {
                    match rows.iter().find(|r| r.substitute == *s && r.eval == *e) {
                        Some(r) => {
                            let _ = write!(out, " {} | {} | {} |", fmt2(r.dig), fmt2(r.phy), fmt2(r.diff()));
                        }
                        None => out.push_str(" | | |"),
                    }
                }
                out.push('\n');
            }
            out.push_str("\n| Substitute |");
            for e in &evals {
                let _ = write!(out, " {e} ASR |");
            }
            out.push_str("\n|---|");
            out.push_str(&"---|".repeat(evals.len()));
            out.push('\n');
            for s in &subs {
                let _ = write!(out, "| {s} |");
                for e in &evals {
                    match rows.iter().find(|r| r.substitute == *s && r.eval == *e) {
                        Some(r) => {
                            let _ = write!(out, " {:.0}% |", 100.0 * r.asr);
                        }
                        None => out.push_str(" |"),
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

fn fmt2(m: Micros) -> String {
    format!("{:.2}", m.to_f64())
}

/// Scores of one mode on one seed in the ablation study.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRow {
    pub seed: u64,
    pub mode: Mode,
    pub dig: Micros,
    pub phy: Micros,
    /// Top digital score after the pooling stage alone.
    pub pooled: Micros,
}

impl SeedRow {
    pub fn diff(&self) -> Micros {
        self.dig - self.phy
    }

    /// Score lost to block averaging alone.
    pub fn pool_drop(&self) -> Micros {
        self.dig - self.pooled
    }
}

/// Paired comparison of one mode against the baseline over shared seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedEffect {
    pub mode: Mode,
    /// Mean of baseline Diff. minus mode Diff.
    pub diff_reduction: f64,
    /// 95% percentile bootstrap interval of `diff_reduction`.
    pub diff_reduction_ci: [f64; 2],
    /// Mean of baseline pool drop minus mode pool drop.
    pub pool_drop_reduction: f64,
    pub pool_drop_reduction_ci: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    /// Mode means, in the same schema as table reports.
    pub summary: ScoreReport,
    pub seeds: Vec<SeedRow>,
    pub effects: Vec<PairedEffect>,
}

pub const SEED_HEADER: &str = "seed,mode,dig,phy,diff,pooled,pool_drop";

impl AblationReport {
    pub fn seed_rows(&self, mode: Mode) -> Vec<&SeedRow> {
        self.seeds.iter().filter(|r| r.mode == mode).collect()
    }

    pub fn seeds_csv(&self) -> String {
        let mut out = String::new();
        comment_lines(&mut out, &self.summary.config_echo);
        out.push_str(SEED_HEADER);
        out.push('\n');
        for r in &self.seeds {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.seed,
                r.mode,
                r.dig,
                r.phy,
                r.diff(),
                r.pooled,
                r.pool_drop()
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.summary.rows.first() else {
            return out;
        };
        let n = self.seed_rows(first.mode).len();
        let _ = writeln!(
            out,
            "### Ablation, {} scale, substitute {}, {n} seeds\n",
            first.scale, first.substitute
        );
        out.push_str("| Mode | Dig. | Phy. | Diff. | Pool drop | ASR |\n|---|---|---|---|---|---|\n");
        for r in &self.summary.rows {
            let drops: Vec<f64> = self.seed_rows(r.mode).iter().map(|s| s.pool_drop().to_f64()).collect();
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {:.3} | {:.0}% |",
                r.mode,
                fmt2(r.dig),
                fmt2(r.phy),
                fmt2(r.diff()),
                super::stats::mean(&drops),
                100.0 * r.asr
            );
        }
        if !self.effects.is_empty() {
            out.push_str("\nPaired against baseline (positive means smaller loss than baseline), 95% bootstrap intervals:\n\n");
            out.push_str("| Mode | Diff. reduction | CI | Pool drop reduction | CI |\n|---|---|---|---|---|\n");
            for e in &self.effects {
                let _ = writeln!(
                    out,
                    "| {} | {:.4} | [{:.4}, {:.4}] | {:.4} | [{:.4}, {:.4}] |",
                    e.mode,
                    e.diff_reduction,
                    e.diff_reduction_ci[0],
                    e.diff_reduction_ci[1],
                    e.pool_drop_reduction,
                    e.pool_drop_reduction_ci[0],
                    e.pool_drop_reduction_ci[1]
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(dig: f64, phy: f64) -> ScoreRow {
        ScoreRow {
            substitute: Variant::A,
            eval: Variant::B,
            mode: Mode::Full,
            scale: Scale::Gray,
            dig: Micros::from_f64(dig),
            phy: Micros::from_f64(phy),
            asr: 0.5,
        }
    }

    #[test]
    fn micros_format() {
        assert_eq!(Micros(1_234_567).to_string(), "1.234567");
        assert_eq!(Micros(-5).to_string(), "-0.000005");
        assert_eq!(Micros(0).to_string(), "0.000000");
        assert_eq!(Micros::from_f64(0.8).to_string(), "0.800000");
    }

    #[test]
    fn csv_layout() {
        let report = ScoreReport {
            rows: vec![row(0.8, 0.63)],
            thresholds: vec![(Variant::B, 0.21)],
            config_echo: "[attack]\nn = 50".into(),
            ..ScoreReport::empty()
        };
        assert_eq!(
            report.to_csv(),
            "# [attack]\n# n = 50\n# threshold B = 0.210000\nsubstitute,eval,mode,scale,dig,phy,diff,asr\n\
             A,B,full,gray,0.800000,0.630000,0.170000,0.500000\n"
        );
        let md = report.to_markdown();
        assert!(md.contains("| A | 0.80 | 0.63 | 0.17 |"), "{md}");
        assert!(md.contains("| A | 50% |"), "{md}");
    }

    proptest! {
        #[test]
        fn printed_diff_is_exact(dig in -1.0f64..1.0, phy in -1.0f64..1.0) {
            let r = row(dig, phy);
            let line = ScoreReport { rows: vec![r], ..ScoreReport::empty() }.to_csv();
            let fields: Vec<&str> = line.lines().last().unwrap().split(',').collect();
            let parse = |s: &str| -> i64 { s.replace('.', "").parse().unwrap() };
            prop_assert_eq!(parse(fields[4]) - parse(fields[5]), parse(fields[6]));
        }
    }
}
