//! Plots and the markdown report.

use super::config::ExperimentConfig;
use super::pipeline::{ensure_dir, write_text, Layout};
use super::svg::{auto_scale, Plot, Scale, Series};
use super::validation::{json_number, ValidationSummary};
use crate::dubins::ReferenceTrajectory;
use crate::error::Result;
use crate::rollout::TrajectoryLog;

pub fn stem(log: &TrajectoryLog) -> String {
    format!("{}_seed{:04}", log.controller.label(), log.seed)
}

/// Position error and state bound against the step index.
pub fn error_plot(log: &TrajectoryLog) -> String {
    let err: Vec<(f64, f64)> = log.records.iter().map(|r| (r.k as f64, r.pos_err)).collect();
    let bound: Vec<(f64, f64)> = log
        .records
        .iter()
        .map(|r| (r.k as f64, r.state_bound.unwrap_or(f64::NAN)))
        .collect();
    let mut values: Vec<f64> = err.iter().chain(&bound).map(|p| p.1).collect();
    values.retain(|v| v.is_finite());
    let title = format!("{} seed {}: position error vs bound", log.controller.label().to_uppercase(), log.seed);
    let mut series = vec![Series {
        label: "position error",
        color: "#1f77b4",
        points: err,
        dashed: false,
    }];
    if bound.iter().any(|p| !p.1.is_nan()) {
        series.push(Series {
            label: "state bound",
            color: "#d62728",
            points: bound,
            dashed: true,
        });
    }
    Plot {
        title: &title,
        x_label: "step k",
        y_label: "distance",
        series,
        y_scale: auto_scale(&values),
        equal_aspect: false,
    }
    .render()
}

pub fn xy_plot(log: &TrajectoryLog, reference: &ReferenceTrajectory) -> String {
    let title = format!("{} seed {}: path", log.controller.label().to_uppercase(), log.seed);
    Plot {
        title: &title,
        x_label: "x",
        y_label: "y",
        series: vec![
            Series {
                label: "reference",
                color: "#7f7f7f",
                points: reference.x_d.iter().map(|o| (o[0], o[1])).collect(),
                dashed: true,
            },
            Series {
                label: "actual",
                color: "#1f77b4",
                points: log.records.iter().map(|r| (r.state[0], r.state[1])).collect(),
                dashed: false,
            },
        ],
        y_scale: Scale::Linear,
        equal_aspect: true,
    }
    .render()
}

pub fn markdown(cfg: &ExperimentConfig, summary: &ValidationSummary, plots: &[(String, String, String)]) -> String {
    let mut s = String::new();
    s.push_str("# Tracking-bound validation report\n\n");
    s.push_str(&format!(
        "Preset `{}`, root seed {}, α = {}, β = {}, horizon {} steps.\n\n",
        cfg.preset, cfg.data.seed, cfg.conformal.alpha, cfg.conformal.beta, cfg.rollout.horizon
    ));
    s.push_str(&format!(
        "{} runs ({} aborted). Overall verdict: **{}**.\n\n",
        summary.runs,
        summary.failed_runs,
        if summary.pass { "pass" } else { "fail" }
    ));
    s.push_str("## Bounds\n\n");
    s.push_str("| controller | bound | runs | pairs | violations | fraction_within_bound | fraction_runs_within | target | pass |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for b in &summary.bounds {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            b.controller.label(),
            b.bound.label(),
            b.runs,
            b.pairs,
            b.violations,
            json_number(b.fraction_within_bound),
            json_number(b.fraction_runs_within),
            json_number(b.target),
            b.pass
        ));
    }
    if !summary.coverage.is_empty() {
        s.push_str("\n## Held-out coverage\n\n");
        s.push_str("| score | delta | q | held-out | empirical_coverage | target | pass |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for c in &summary.coverage {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} |\n",
                c.kind.label(),
                json_number(c.delta),
                crate::conformal::fmt_float(c.q.0),
                c.heldout,
                json_number(c.empirical_coverage),
                json_number(c.target),
                c.pass
            ));
        }
    }
    if let Some(c) = &summary.comparison {
        s.push_str("\n## NFC against CRDR\n\n");
        s.push_str(&format!(
            "On {} paired seeds NFC ended farther from the reference in {} runs ({}) and hit the turn-rate limit in {} runs ({}). CRDR hit the limit in {} runs.\n",
            c.pairs,
            c.nfc_worse,
            json_number(c.nfc_worse_fraction),
            c.nfc_saturated,
            json_number(c.nfc_saturated_fraction),
            c.crdr_saturated
        ));
    }
    if let Some(c) = &summary.contraction {
        s.push_str("\n## Contraction check\n\n");
        s.push_str(&format!(
            "{} sampled states ({} excluded): max violation {:e}, smallest σ(Ĝ) {:e}, tolerance {:e}: {}.\n",
            c.samples,
            c.excluded,
            c.max_violation,
            c.min_jacobian_sigma,
            c.tolerance,
            if c.pass { "pass" } else { "fail" }
        ));
    }
    if !plots.is_empty() {
        s.push_str("\n## Runs\n\n");
        for (name, err, xy) in plots {
            s.push_str(&format!("- {name}: [error]({err}), [path]({xy})\n"));
        }
    }
    s
}

pub fn write_report(
    cfg: &ExperimentConfig,
    layout: &Layout,
    summary: &ValidationSummary,
    logs: &[TrajectoryLog],
    reference: &ReferenceTrajectory,
) -> Result<()> {
    ensure_dir(&layout.report_dir())?;
    let mut plots = Vec::new();
    if cfg.report.plots {
        ensure_dir(&layout.plots_dir())?;
        for log in logs {
            let name = stem(log);
            let err = format!("plots/{name}_error.svg");
            let xy = format!("plots/{name}_xy.svg");
            write_text(&layout.report_dir().join(&err), &error_plot(log))?;
            write_text(&layout.report_dir().join(&xy), &xy_plot(log, reference))?;
            plots.push((name, err, xy));
        }
    }
    write_text(&layout.report_md(), &markdown(cfg, summary, &plots))
}
