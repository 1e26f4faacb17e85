//! Report rendering. Output depends only on the report, so re-exporting the
//! same report gives the same bytes.

use std::path::Path;

use serde::Serialize;

use crate::host::{AttackOutcome, Evidence, LogEntry};
use crate::scenarios::{MatrixReport, ScenarioReport, TrialReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Md,
    Csv,
}

#[derive(Serialize)]
struct OutcomeView<'a> {
    cell: String,
    applicable: bool,
    succeeded: bool,
    evidence: &'a [Evidence],
}

#[derive(Serialize)]
struct ScenarioView<'a> {
    name: &'a str,
    protocol: &'a str,
    variant: String,
    attack: String,
    seed: u64,
    outcome: OutcomeView<'a>,
    log: &'a [LogEntry],
}

fn outcome_view(o: &AttackOutcome) -> OutcomeView<'_> {
    OutcomeView { cell: super::cell_of(o).to_string(), applicable: o.applicable, succeeded: o.succeeded, evidence: &o.evidence }
}

fn csv<const N: usize>(header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

fn json(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports always serialize");
    s.push('\n');
    s
}

pub fn render_scenario(r: &ScenarioReport, format: Format) -> String {
    let c = &r.config;
    match format {
        Format::Json => json(&ScenarioView {
            name: &c.name,
            protocol: c.protocol.id(),
            variant: c.variant.to_string(),
            attack: c.attack.to_string(),
            seed: c.seed,
            outcome: outcome_view(&r.outcome),
            log: r.log.entries(),
        }),
        Format::Md => {
            let mut s = format!("# {}\n\n", c.name);
            s += "| protocol | variant | attack | seed | outcome |\n|---|---|---|---|---|\n";
            s += &format!("| {} | {} | {} | {} | {} |\n\n", c.protocol, c.variant, c.attack, c.seed, r.cell());
            s += "## Evidence\n\n";
            if r.outcome.evidence.is_empty() {
                s += "none\n";
            }
            for e in &r.outcome.evidence {
                s += &format!("- `{}`\n", serde_json::to_string(e).expect("evidence serializes"));
            }
            s += &format!("\n{} log events\n", r.log.entries().len());
            s
        }
        Format::Csv => csv(
            ["name", "protocol", "variant", "attack", "seed", "outcome", "evidence"],
            [[
                c.name.clone(),
                c.protocol.id().to_string(),
                c.variant.to_string(),
                c.attack.to_string(),
                c.seed.to_string(),
                r.cell().to_string(),
                r.outcome.summary(),
            ]],
        ),
    }
}

pub fn render_matrix(m: &MatrixReport, format: Format) -> String {
    match format {
        Format::Json => json(m),
        Format::Md => {
            let mut s = String::from("| Protocol | Variant | Rollback | Cloning | Rollback evidence | Cloning evidence |\n");
            s += "|---|---|---|---|---|---|\n";
            for r in &m.rows {
                s += &format!(
                    "| {} | {} | {} | {} | {} | {} |\n",
                    r.protocol, r.variant, r.rollback.outcome, r.cloning.outcome, r.rollback.evidence, r.cloning.evidence
                );
            }
            s
        }
        Format::Csv => csv(
            ["protocol", "variant", "rollback", "cloning", "rollback_evidence", "cloning_evidence", "rollback_scenario", "cloning_scenario"],
            m.rows.iter().map(|r| {
                [
                    r.protocol.clone(),
                    r.variant.to_string(),
                    r.rollback.outcome.to_string(),
                    r.cloning.outcome.to_string(),
                    r.rollback.evidence.clone(),
                    r.cloning.evidence.clone(),
                    r.rollback.scenario.clone(),
                    r.cloning.scenario.clone(),
                ]
            }),
        ),
    }
}

pub fn render_trials(t: &TrialReport, format: Format) -> String {
    let p = &t.rounds;
    match format {
        Format::Json => json(t),
        Format::Md => {
            let mut s = format!("# {}\n\n", t.name);
            s += "| protocol | variant | attack | seed | trials | attack succeeded | rounds | adversary wins | frequency | 95% CI |\n";
            s += "|---|---|---|---|---|---|---|---|---|---|\n";
            s += &format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} | {:.4} | [{:.4}, {:.4}] |\n",
                t.protocol, t.variant, t.attack, t.seed, t.trials, t.attack_succeeded, p.trials, p.successes, p.frequency, p.ci_low, p.ci_high
            );
            s
        }
        Format::Csv => csv(
            ["name", "protocol", "variant", "attack", "seed", "trials", "attack_succeeded", "rounds", "wins", "frequency", "ci_low", "ci_high"],
            [[
                t.name.clone(),
                t.protocol.id().to_string(),
                t.variant.to_string(),
                t.attack.to_string(),
                t.seed.to_string(),
                t.trials.to_string(),
                t.attack_succeeded.to_string(),
                p.trials.to_string(),
                p.successes.to_string(),
                format!("{:.6}", p.frequency),
                format!("{:.6}", p.ci_low),
                format!("{:.6}", p.ci_high),
            ]],
        ),
    }
}

/// Writes `content` to `path`, or to stdout when `path` is `None`.
pub fn export_report(path: Option<&Path>, content: &str) -> std::io::Result<()> {
    match path {
        Some(p) => std::fs::write(p, content),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(content.as_bytes())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::host::AttackKind;
    use crate::protocols::{ProtocolId, Variant};
    use crate::scenarios::{run_scenario, ScenarioConfig};

    #[test]
    fn renders_are_stable() {
        let cfg = ScenarioConfig::new(ProtocolId::PhalaWorker, Variant::Vulnerable, AttackKind::Cloning, 1);
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        for f in [Format::Json, Format::Md, Format::Csv] {
            assert_eq!(render_scenario(&a, f), render_scenario(&b, f));
        }
        let csv = render_scenario(&a, Format::Csv);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.contains(",Succeeds,"), "{csv}");
    }
}
