//! Markdown rendering of saved reports.

use std::fmt::Write;

use crate::report::{Failure, Report, ScanOptions};

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "–".into())
}

fn options_line(o: &ScanOptions) -> String {
    format!(
        "replicates = {}, seed = {}, c_tw = {}, mean-instability check = {} ({} trials)",
        o.replicates, o.base_seed, o.c_tw, o.theorem2, o.theorem2_trials
    )
}

fn failures(out: &mut String, list: &[Failure]) {
    if list.is_empty() {
        return;
    }
    out.push_str("\n## Failures\n\n");
    for f in list {
        let layer = f.layer.as_deref().map(|l| format!(" `{l}`")).unwrap_or_default();
        let _ = writeln!(out, "- `{}`{layer} ({:?}): {}", f.checkpoint, f.kind, f.error);
    }
}

pub fn markdown(report: &Report) -> String {
    let mut out = String::new();
    match report {
        Report::Scan(r) => {
            let _ = writeln!(out, "# Trap scan\n\n{} {}, {}\n", r.tool.name, r.tool.version, options_line(&r.options));
            for c in &r.checkpoints {
                let _ = writeln!(out, "## `{}` ({}, step {})\n", c.path, c.model_name, c.step);
                out.push_str("| layer | shape | traps (mean ± std) | λ₊ | max λ | top-5% mass |\n");
                out.push_str("|---|---|---|---|---|---|\n");
                for l in &c.layers {
                    let _ = writeln!(
                        out,
                        "| `{}` | {}×{} | {:.2} ± {:.2} | {} | {} | {} |",
                        l.layer_id,
                        l.rows,
                        l.cols,
                        l.mean_count,
                        l.std_count,
                        opt(l.mean_lambda_plus(), 4),
                        opt(l.max_eigenvalue(), 4),
                        opt(l.max_headline_mass(), 3)
                    );
                }
                for s in &c.skipped {
                    let _ = writeln!(out, "\nSkipped `{}`: {}.", s.layer, s.reason);
                }
                let checks: Vec<_> = c.layers.iter().filter_map(|l| l.mean_instability.as_ref()).flatten().collect();
                if !checks.is_empty() {
                    out.push_str("\n| layer | replicate | η | λ | bound | Var(r) | holds |\n|---|---|---|---|---|---|---|\n");
                    for m in checks {
                        let _ = writeln!(
                            out,
                            "| `{}` | {} | {:.4} | {:.4} | {:.4e} | {:.4e} | {} |",
                            m.layer_id, m.replicate_index, m.eta, m.lambda_trap, m.bound, m.row_mean_variance, m.bound_holds
                        );
                    }
                }
                out.push('\n');
            }
            failures(&mut out, &r.failures);
        }
        Report::Series(r) => {
            let _ = writeln!(out, "# Trap series\n\n{} {}, {}\n", r.tool.name, r.tool.version, options_line(&r.options));
            out.push_str("| step | layer | traps (mean ± std) | train acc | test acc |\n|---|---|---|---|---|\n");
            for row in &r.rows {
                let _ = writeln!(
                    out,
                    "| {} | `{}` | {:.2} ± {:.2} | {} | {} |",
                    row.step,
                    row.layer,
                    row.mean_traps,
                    row.std_traps,
                    opt(row.train_acc, 4),
                    opt(row.test_acc, 4)
                );
            }
            failures(&mut out, &r.failures);
        }
        Report::Ablate(r) => {
            let o = &r.options;
            let _ = writeln!(
                out,
                "# Trap ablation\n\n{} {}: `{}` layer `{}`, replicate {}, {} trap(s) found.\n\nProbes: {} Gaussian (mean {}, std {}, seed {}), T = {}; τ_err = {}.\n",
                r.tool.name, r.tool.version, r.checkpoint, r.layer, o.replicate, r.traps_found,
                o.probes.num_probes, o.probes.mean, o.probes.std, o.probes.seed, o.probes.temperature, o.tau_err
            );
            out.push_str("| trap | λ | IPR | JSD | Δ test error | class | overlap |\n|---|---|---|---|---|---|---|\n");
            for a in &r.results {
                let _ = writeln!(
                    out,
                    "| `{}` | {:.4} | {:.4} | {:.6} | {} | {} | {:.3}{} |",
                    a.trap_ref.id(),
                    a.lambda_trap,
                    a.ipr,
                    a.jsd_score,
                    opt(a.delta_test_error, 4),
                    a.classification.as_str(),
                    a.overlap,
                    if a.ambiguous { " (ambiguous)" } else { "" }
                );
            }
        }
        Report::TrainDemo(r) => {
            let t = &r.config.train;
            let m = &r.final_metrics;
            let _ = writeln!(
                out,
                "# Training demo\n\n{} {}: `{}`, {} steps, lr {}, weight decay {}, batch {}, init scale {}, seed {}.\n",
                r.tool.name, r.tool.version, r.config.model_name, t.steps, t.learning_rate, t.weight_decay, t.batch_size, t.init_scale, t.seed
            );
            let _ = writeln!(
                out,
                "Final step {}: train acc {:.4}, train loss {:.4e}, test acc {}, test loss {}.\n",
                m.step,
                m.train_acc,
                m.train_loss,
                opt(m.eval_acc, 4),
                m.eval_loss.map(|l| format!("{l:.4e}")).unwrap_or_else(|| "–".into())
            );
            let _ = writeln!(out, "Log: `{}`\n\nCheckpoints:\n", r.log_csv);
            for c in &r.checkpoints {
                let _ = writeln!(out, "- `{c}`");
            }
        }
    }
    out
}
