use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, InitPolicy};
use crate::data::SplitCounts;
use crate::error::{Error, Result};
use crate::metrics::{PercentageReport, Phase, PhaseScores};
use crate::model::Variant;

/// Column order of the report CSV.
pub const CSV_COLUMNS: [&str; 9] = [
    "dataset",
    "model",
    "init_policy",
    "phase",
    "seed",
    "auc",
    "logloss",
    "auc_pct",
    "logloss_pct",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub model: Variant,
    pub init_policy: InitPolicy,
    pub phase: Phase,
    pub seed: u64,
    pub auc: f64,
    pub logloss: f64,
    pub auc_pct: f64,
    pub logloss_pct: f64,
    /// Diagnostic only; not part of the CSV.
    pub per_ad_auc: Option<f64>,
}

impl ReportRow {
    pub fn new(
        dataset: &str,
        model: Variant,
        policy: InitPolicy,
        seed: u64,
        scores: &PhaseScores,
        anchor: &PhaseScores,
    ) -> Result<Self> {
        let pct = PercentageReport::against(scores, anchor)?;
        Ok(ReportRow {
            dataset: dataset.to_string(),
            model,
            init_policy: policy,
            phase: scores.phase,
            seed,
            auc: scores.auc,
            logloss: scores.logloss,
            auc_pct: pct.auc_pct,
            logloss_pct: pct.logloss_pct,
            per_ad_auc: scores.per_ad_auc,
        })
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        if xs.is_empty() {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// A model name, or `average` for the mean over models.
    pub model: String,
    pub init_policy: InitPolicy,
    pub phase: Phase,
    pub runs: usize,
    pub auc: Stat,
    pub logloss: Stat,
    pub auc_pct: Stat,
    pub logloss_pct: Stat,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaTraceSummary {
    pub model: Option<Variant>,
    pub seed: u64,
    pub pretrain_epoch_losses: Vec<f64>,
    pub meta_epoch_means: Vec<f64>,
    pub meta_skipped_ids: usize,
    pub meta_samples_consumed: usize,
    pub checksum_before_meta: String,
    pub checksum_after_meta: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub config: ExperimentConfig,
    pub split: SplitCounts,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
    pub runs: Vec<MetaTraceSummary>,
}

impl ExperimentReport {
    pub fn new(
        config: ExperimentConfig,
        split: SplitCounts,
        rows: Vec<ReportRow>,
        runs: Vec<MetaTraceSummary>,
    ) -> Result<Self> {
        let report = ExperimentReport {
            dataset: config.dataset_name(),
            summary: summarize(&rows),
            config,
            split,
            rows,
            runs,
        };
        report.check_complete()?;
        Ok(report)
    }

    /// Every (model, policy, seed) arm has all four phases exactly once.
    pub fn check_complete(&self) -> Result<()> {
        let mut seen: BTreeMap<(Variant, InitPolicy, u64), Vec<Phase>> = BTreeMap::new();
        for r in &self.rows {
            seen.entry((r.model, r.init_policy, r.seed)).or_default().push(r.phase);
        }
        for m in &self.config.models {
            for p in &self.config.policies {
                for s in &self.config.seeds {
                    let mut phases = seen.get(&(*m, *p, *s)).cloned().unwrap_or_default();
                    phases.sort();
                    if phases != Phase::ALL {
                        return Err(Error::validation(
                            "report",
                            format!("arm {m}/{p}/seed {s} has phases {phases:?}"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn rows_for(&self, model: Variant, policy: InitPolicy, seed: u64) -> impl Iterator<Item = &ReportRow> {
        self.rows
            .iter()
            .filter(move |r| r.model == model && r.init_policy == policy && r.seed == seed)
    }

    pub fn row(&self, model: Variant, policy: InitPolicy, seed: u64, phase: Phase) -> Option<&ReportRow> {
        self.rows_for(model, policy, seed).find(|r| r.phase == phase)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.dataset.clone(),
                r.model.to_string(),
                r.init_policy.to_string(),
                r.phase.to_string(),
                r.seed.to_string(),
                r.auc.to_string(),
                r.logloss.to_string(),
                r.auc_pct.to_string(),
                r.logloss_pct.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let c = &self.split;
        let _ = writeln!(out, "dataset: {}", self.dataset);
        let _ = writeln!(
            out,
            "split: old {} ids / {} samples, new {} ids / {} samples, discarded {} ids / {} samples",
            c.old_ids, c.old_samples, c.new_ids, c.new_samples, c.discarded_ids, c.discarded_samples
        );
        let _ = writeln!(out);
        let header = [
            "model",
            "policy",
            "phase",
            "seed",
            "auc",
            "logloss",
            "auc_pct",
            "logloss_pct",
        ];
        let body: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model.to_string(),
                    r.init_policy.to_string(),
                    r.phase.to_string(),
                    r.seed.to_string(),
                    format!("{:.4}", r.auc),
                    format!("{:.4}", r.logloss),
                    format!("{:+.2}%", r.auc_pct),
                    format!("{:+.2}%", r.logloss_pct),
                ]
            })
            .collect();
        table(&mut out, &header, &body);
        let _ = writeln!(out);
        let _ = writeln!(out, "mean ± std over seeds");
        let header = [
            "model",
            "policy",
            "phase",
            "runs",
            "auc",
            "logloss",
            "auc_pct",
            "logloss_pct",
        ];
        let body: Vec<[String; 8]> = self
            .summary
            .iter()
            .map(|s| {
                [
                    s.model.clone(),
                    s.init_policy.to_string(),
                    s.phase.to_string(),
                    s.runs.to_string(),
                    format!("{:.4} ± {:.4}", s.auc.mean, s.auc.std),
                    format!("{:.4} ± {:.4}", s.logloss.mean, s.logloss.std),
                    format!("{:+.2}% ± {:.2}", s.auc_pct.mean, s.auc_pct.std),
                    format!("{:+.2}% ± {:.2}", s.logloss_pct.mean, s.logloss_pct.std),
                ]
            })
            .collect();
        table(&mut out, &header, &body);
        out
    }

    /// Line chart of mean log-loss and AUC percentages per phase, one panel
    /// per metric and one line per (model, policy).
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (420.0, 260.0, 40.0);
        let series: Vec<&SummaryRow> = self.summary.iter().filter(|s| s.model != "average").collect();
        let mut keys: Vec<(String, InitPolicy)> = series.iter().map(|s| (s.model.clone(), s.init_policy)).collect();
        keys.dedup();
        let palette = [
            "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
        ];
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
            2.0 * w,
            h + 20.0 * keys.len() as f64
        );
        for (panel, (title, get)) in [
            (
                "logloss %",
                (|s: &SummaryRow| s.logloss_pct.mean) as fn(&SummaryRow) -> f64,
            ),
            ("AUC %", |s: &SummaryRow| s.auc_pct.mean),
        ]
        .into_iter()
        .enumerate()
        {
            let x0 = panel as f64 * w;
            let vals: Vec<f64> = series.iter().map(|s| get(s)).filter(|v| v.is_finite()).collect();
            let lo = vals.iter().copied().fold(0.0, f64::min);
            let hi = vals.iter().copied().fold(0.0, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let px = |i: usize| x0 + pad + i as f64 * (w - 2.0 * pad) / 3.0;
            let py = |v: f64| h - pad - (v - lo) / span * (h - 2.0 * pad);
            let _ = writeln!(svg, "<text x=\"{}\" y=\"16\">{title}</text>", x0 + pad);
            let _ = writeln!(
                svg,
                "<line x1=\"{}\" y1=\"{:.1}\" x2=\"{}\" y2=\"{:.1}\" stroke=\"#999\" stroke-dasharray=\"3,3\"/>",
                px(0),
                py(0.0),
                px(3),
                py(0.0)
            );
            for (i, phase) in Phase::ALL.iter().enumerate() {
                let _ = writeln!(
                    svg,
                    "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{phase}</text>",
                    px(i),
                    h - pad / 2.0
                );
            }
            for (v, label) in [(lo, lo), (hi, hi)] {
                let _ = writeln!(
                    svg,
                    "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{label:.1}</text>",
                    x0 + pad - 4.0,
                    py(v)
                );
            }
            for (k, (model, policy)) in keys.iter().enumerate() {
                let pts: Vec<String> = Phase::ALL
                    .iter()
                    .enumerate()
                    .filter_map(|(i, ph)| {
                        series
                            .iter()
                            .find(|s| &s.model == model && s.init_policy == *policy && s.phase == *ph)
                            .map(|s| format!("{:.1},{:.1}", px(i), py(get(s))))
                    })
                    .collect();
                let dash = if *policy == InitPolicy::Random {
                    " stroke-dasharray=\"5,3\""
                } else {
                    ""
                };
                let _ = writeln!(
                    svg,
                    "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>",
                    palette[k % palette.len()],
                    pts.join(" ")
                );
            }
        }
        for (k, (model, policy)) in keys.iter().enumerate() {
            let y = h + 14.0 + 20.0 * k as f64;
            let _ = writeln!(
                svg,
                "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\">{model} / {policy}</text>",
                y - 4.0,
                pad + 20.0,
                y - 4.0,
                palette[k % palette.len()],
                pad + 26.0,
                y
            );
        }
        svg.push_str("</svg>\n");
        svg
    }

    /// Writes `report.csv`, `report.json`, `report.txt` and, when asked,
    /// `report.svg` into `dir`.
    pub fn write(&self, dir: &Path, svg: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv()?)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join("report.txt"), self.to_text())?;
        if svg {
            fs::write(dir.join("report.svg"), self.to_svg())?;
        }
        Ok(())
    }
}

fn table<const N: usize>(out: &mut String, header: &[&str; N], body: &[[String; N]]) {
    let mut widths = header.map(|h| h.chars().count());
    for row in body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                let pad = w - c.chars().count();
                if i < 4 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let _ = writeln!(out, "{}", line(header.to_vec()).trim_end());
    for row in body {
        let _ = writeln!(out, "{}", line(row.iter().map(String::as_str).collect()).trim_end());
    }
}

/// Per (model, policy, phase) statistics over seeds, then the same averaged
/// over models (per seed first, so each seed contributes one value).
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, InitPolicy, Phase), Vec<&ReportRow>> = BTreeMap::new();
    let mut models: Vec<Variant> = Vec::new();
    for r in rows {
        if !models.contains(&r.model) {
            models.push(r.model);
        }
        groups
            .entry((r.model.to_string(), r.init_policy, r.phase))
            .or_default()
            .push(r);
    }
    let stat = |rs: &[&ReportRow], f: fn(&ReportRow) -> f64| Stat::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
    let mut out: Vec<SummaryRow> = Vec::new();
    for m in &models {
        for ((model, policy, phase), rs) in groups.iter().filter(|((model, ..), _)| *model == m.to_string()) {
            out.push(SummaryRow {
                model: model.clone(),
                init_policy: *policy,
                phase: *phase,
                runs: rs.len(),
                auc: stat(rs, |r| r.auc),
                logloss: stat(rs, |r| r.logloss),
                auc_pct: stat(rs, |r| r.auc_pct),
                logloss_pct: stat(rs, |r| r.logloss_pct),
            });
        }
    }
    if models.len() > 1 {
        let mut per_seed: BTreeMap<(InitPolicy, Phase, u64), Vec<&ReportRow>> = BTreeMap::new();
        for r in rows {
            per_seed.entry((r.init_policy, r.phase, r.seed)).or_default().push(r);
        }
        let mut avg: BTreeMap<(InitPolicy, Phase), Vec<[f64; 4]>> = BTreeMap::new();
        for ((policy, phase, _), rs) in per_seed {
            let n = rs.len() as f64;
            let mean = |f: fn(&ReportRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            avg.entry((policy, phase)).or_default().push([
                mean(|r| r.auc),
                mean(|r| r.logloss),
                mean(|r| r.auc_pct),
                mean(|r| r.logloss_pct),
            ]);
        }
        for ((policy, phase), xs) in avg {
            let col = |i: usize| Stat::of(&xs.iter().map(|x| x[i]).collect::<Vec<_>>());
            out.push(SummaryRow {
                model: "average".into(),
                init_policy: policy,
                phase,
                runs: xs.len(),
                auc: col(0),
                logloss: col(1),
                auc_pct: col(2),
                logloss_pct: col(3),
            });
        }
    }
    out
}
