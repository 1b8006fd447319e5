use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use csunfold::ablation::{AblationTable, OrderingNote, Suite};
use csunfold::training::{EpochRecord, LossMode};
use plotters::prelude::*;

use crate::commands::{prepare_out, ABLATION_SUFFIX, CONFIG_FILE, HISTORY_FILE};
use crate::config::RunConfig;

pub const PLOT_FILE: &str = "psnr_vs_ratio.svg";

#[derive(Debug)]
pub struct TrainRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub history: Vec<EpochRecord>,
}

impl TrainRun {
    fn variant(&self) -> String {
        let t = &self.config.train;
        let mut label = format!("K={}, C={}", t.modules, t.channels);
        if !t.mss_enabled {
            label += ", no MSS";
        }
        if !t.hfc_enabled {
            label += ", no HFC";
        }
        if t.loss_mode == LossMode::MseOnly {
            label += ", MSE loss";
        }
        label
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub fn collect(inputs: &[PathBuf]) -> Result<(Vec<TrainRun>, Vec<AblationTable>)> {
    let mut files = Vec::new();
    for input in inputs {
        if !input.is_dir() {
            bail!("run directory {} does not exist", input.display());
        }
        walk(input, &mut files)?;
    }
    let mut runs = Vec::new();
    let mut tables = Vec::new();
    for f in files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name == HISTORY_FILE {
            let dir = f.parent().unwrap().to_path_buf();
            let config = RunConfig::load(Some(&dir.join(CONFIG_FILE)))?;
            let text = std::fs::read_to_string(&f)?;
            let history = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).with_context(|| format!("malformed record in {}", f.display())))
                .collect::<Result<Vec<EpochRecord>>>()?;
            runs.push(TrainRun { dir, config, history });
        } else if name.ends_with(ABLATION_SUFFIX) {
            let text = std::fs::read_to_string(&f)?;
            tables.push(serde_json::from_str(&text).with_context(|| format!("malformed ablation table {}", f.display()))?);
        }
    }
    Ok((runs, tables))
}

fn ratio_label(r: f64) -> String {
    format!("{}%", (r * 1000.0).round() / 10.0)
}

/// Mean final (PSNR, SSIM) per variant and ratio, keyed by ratio in
/// thousandths so that equal ratios collapse.
fn by_variant(runs: &[TrainRun]) -> BTreeMap<String, BTreeMap<u64, (f64, f64)>> {
    let mut acc: BTreeMap<String, BTreeMap<u64, (f64, f64, usize)>> = BTreeMap::new();
    for run in runs {
        let Some(last) = run.history.last() else {
            continue;
        };
        let key = (run.config.train.ratio * 1000.0).round() as u64;
        let e = acc.entry(run.variant()).or_default().entry(key).or_insert((0.0, 0.0, 0));
        e.0 += last.val_psnr;
        e.1 += last.val_ssim;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(v, m)| (v, m.into_iter().map(|(k, (p, s, c))| (k, (p / c as f64, s / c as f64))).collect()))
        .collect()
}

pub fn render_markdown(title: &str, runs: &[TrainRun], tables: &[AblationTable]) -> String {
    let mut out = format!("# {title}\n\n");
    if !runs.is_empty() {
        out += "## Training runs\n\n| run | ratio | K | epochs | steps | train loss | val PSNR | val SSIM |\n|---|---:|---:|---:|---:|---:|---:|---:|\n";
        for run in runs {
            let t = &run.config.train;
            match run.history.last() {
                Some(r) => {
                    let _ = writeln!(
                        out,
                        "| {} | {} | {} | {} | {} | {:.5} | {:.2} | {:.4} |",
                        run.dir.display(),
                        ratio_label(t.ratio),
                        t.modules,
                        r.epoch,
                        r.step,
                        r.train_loss,
                        r.val_psnr,
                        r.val_ssim
                    );
                }
                None => {
                    let _ = writeln!(out, "| {} | {} | {} | 0 | 0 | - | - | - |", run.dir.display(), ratio_label(t.ratio), t.modules);
                }
            }
        }
        let grouped = by_variant(runs);
        let mut ratios: Vec<u64> = grouped.values().flat_map(|m| m.keys().copied()).collect();
        ratios.sort_unstable();
        ratios.dedup();
        ratios.reverse();
        out += "\n## Validation PSNR/SSIM by ratio\n\n| model |";
        for r in &ratios {
            let _ = write!(out, " {} |", ratio_label(*r as f64 / 1000.0));
        }
        out += "\n|---|";
        out += &"---:|".repeat(ratios.len());
        out.push('\n');
        for (variant, cells) in &grouped {
            let _ = write!(out, "| {variant} |");
            for r in &ratios {
                match cells.get(r) {
                    Some((p, s)) => {
                        let _ = write!(out, " {p:.2}/{s:.4} |");
                    }
                    None => out += " - |",
                }
            }
            out.push('\n');
        }
        let _ = writeln!(out, "\n![PSNR against measurement ratio]({PLOT_FILE})");
    }
    if !tables.is_empty() {
        out += "\n## Ablations\n\n";
        for suite in Suite::ALL {
            let of_suite: Vec<&AblationTable> = tables.iter().filter(|t| t.suite == suite).collect();
            for t in &of_suite {
                out += &t.to_markdown();
                out.push('\n');
            }
            if suite == Suite::Independence && !of_suite.is_empty() {
                let owned: Vec<AblationTable> = of_suite.iter().map(|t| (*t).clone()).collect();
                let _ = writeln!(out, "Soft ordering check: {}\n", OrderingNote::from_tables(&owned).summary());
            }
        }
    }
    out
}

pub fn plot(path: &Path, runs: &[TrainRun], size: (u32, u32)) -> Result<()> {
    let grouped = by_variant(runs);
    let points: Vec<(f64, f64)> = grouped
        .values()
        .flat_map(|m| m.iter().map(|(k, (p, _))| (*k as f64 / 10.0, *p)))
        .collect();
    if points.is_empty() {
        bail!("no finished training runs to plot");
    }
    let (xmin, xmax) = points.iter().fold((f64::MAX, f64::MIN), |(a, b), (x, _)| (a.min(*x), b.max(*x)));
    let (ymin, ymax) = points.iter().fold((f64::MAX, f64::MIN), |(a, b), (_, y)| (a.min(*y), b.max(*y)));
    let xpad = ((xmax - xmin) * 0.05).max(1.0);
    let ypad = ((ymax - ymin) * 0.1).max(0.5);
    let root = SVGBackend::new(path, size).into_drawing_area();
    let draw = |e: &dyn std::fmt::Display| anyhow::anyhow!("cannot draw {}: {e}", path.display());
    root.fill(&WHITE).map_err(|e| draw(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((xmin - xpad)..(xmax + xpad), (ymin - ypad)..(ymax + ypad))
        .map_err(|e| draw(&e))?;
    chart
        .configure_mesh()
        .x_desc("measurement ratio (%)")
        .y_desc("validation PSNR (dB)")
        .draw()
        .map_err(|e| draw(&e))?;
    for (i, (variant, cells)) in grouped.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let series: Vec<(f64, f64)> = cells.iter().map(|(k, (p, _))| (*k as f64 / 10.0, *p)).collect();
        chart
            .draw_series(LineSeries::new(series.clone(), color.stroke_width(2)))
            .map_err(|e| draw(&e))?
            .label(variant.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(series.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| draw(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw(&e))?;
    root.present().map_err(|e| draw(&e))?;
    Ok(())
}

pub fn report(cfg: &RunConfig, inputs: &[PathBuf], out: &Path, overwrite: bool) -> Result<()> {
    let (runs, tables) = collect(inputs)?;
    if runs.is_empty() && tables.is_empty() {
        bail!("no training histories or ablation tables found under the given directories");
    }
    prepare_out(out, overwrite, cfg)?;
    let md = render_markdown(&cfg.report.title, &runs, &tables);
    std::fs::write(out.join("report.md"), &md)?;
    if runs.iter().any(|r| !r.history.is_empty()) {
        plot(&out.join(PLOT_FILE), &runs, (cfg.report.plot_width, cfg.report.plot_height))?;
    }
    print!("{md}");
    Ok(())
}
