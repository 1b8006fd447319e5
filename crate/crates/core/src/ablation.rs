//! Ablation switchboard: parameter independence, MSS/HFC and loss function
//! suites, trained with a shared seed and data order.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::training::{train, LossMode, TrainConfig};
use crate::unfolding::{LambdaMode, RhoMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Independence,
    MssHfc,
    Loss,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Independence, Suite::MssHfc, Suite::Loss];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Independence => "independence",
            Suite::MssHfc => "mss_hfc",
            Suite::Loss => "loss",
        }
    }

    fn columns(self) -> &'static [&'static str] {
        match self {
            Suite::Independence => &["Independent rho", "Independent lambda"],
            Suite::MssHfc => &["MSS", "HFC"],
            Suite::Loss => &["Loss function"],
        }
    }

    fn title(self) -> &'static str {
        match self {
            Suite::Independence => "Mean PSNR under shared or independent updates of rho and lambda",
            Suite::MssHfc => "Mean PSNR with and without MSS and HFC",
            Suite::Loss => "Mean PSNR for each loss function",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation suite {s:?} (expected independence, mss_hfc or loss)")))
    }
}

fn mark(on: bool) -> String {
    if on { "✓" } else { "✗" }.to_string()
}

/// Row labels and configurations of `suite`, in table order.
pub fn suite_configs(base: &TrainConfig, suite: Suite) -> Vec<(Vec<String>, TrainConfig)> {
    let flags = [(false, false), (false, true), (true, false), (true, true)];
    match suite {
        Suite::Independence => flags
            .iter()
            .map(|&(rho, lambda)| {
                let cfg = TrainConfig {
                    rho_mode: if rho { RhoMode::PerModule } else { RhoMode::Shared },
                    lambda_mode: if lambda { LambdaMode::BufferMean } else { LambdaMode::Shared },
                    ..base.clone()
                };
                (vec![mark(rho), mark(lambda)], cfg)
            })
            .collect(),
        Suite::MssHfc => flags
            .iter()
            .map(|&(mss, hfc)| {
                let cfg = TrainConfig {
                    mss_enabled: mss,
                    hfc_enabled: hfc,
                    ..base.clone()
                };
                (vec![mark(mss), mark(hfc)], cfg)
            })
            .collect(),
        Suite::Loss => [(LossMode::MseOnly, "L_MSE"), (LossMode::Total, "L_total")]
            .into_iter()
            .map(|(mode, label)| {
                let cfg = TrainConfig {
                    loss_mode: mode,
                    ..base.clone()
                };
                (vec![label.to_string()], cfg)
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub labels: Vec<String>,
    /// Final-epoch mean validation PSNR, one entry per ratio.
    pub psnr: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: Suite,
    pub seed: u64,
    pub ratios: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

fn ratio_label(r: f64) -> String {
    format!("{}%", (r * 1000.0).round() / 10.0)
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut head: Vec<String> = self.suite.columns().iter().map(|s| s.to_string()).collect();
        if self.suite == Suite::Independence && self.ratios.len() == 1 {
            head.push("PSNR".into());
        } else {
            head.extend(self.ratios.iter().map(|&r| ratio_label(r)));
        }
        let mut out = format!("{} (seed {})\n\n", self.suite.title(), self.seed);
        let _ = writeln!(out, "| {} |", head.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(head.len()));
        for row in &self.rows {
            let cells: Vec<String> = row
                .labels
                .iter()
                .cloned()
                .chain(row.psnr.iter().map(|p| format!("{p:.2}")))
                .collect();
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        out
    }

    /// Whether the last row (everything enabled or independent) is at least
    /// as good as every other row at each ratio, ignoring the all-off row.
    pub fn last_row_beats_single_toggles(&self) -> bool {
        let Some(last) = self.rows.last() else {
            return false;
        };
        let singles = &self.rows[1.min(self.rows.len())..self.rows.len() - 1];
        singles
            .iter()
            .all(|row| row.psnr.iter().zip(&last.psnr).all(|(p, best)| best >= p))
    }
}

/// Trains every configuration of `suite` at each ratio and collects the final
/// validation PSNR. `on_run` is told about each run before it starts.
pub fn run_ablation(
    base: &TrainConfig,
    suite: Suite,
    ratios: &[f64],
    train_images: &[Image],
    val_images: &[Image],
    on_run: &mut dyn FnMut(&[String], f64),
) -> Result<AblationTable> {
    if ratios.is_empty() {
        return Err(Error::Config("at least one ratio is required".into()));
    }
    let mut rows = Vec::new();
    for (labels, cfg) in suite_configs(base, suite) {
        let mut psnr = Vec::with_capacity(ratios.len());
        for &ratio in ratios {
            on_run(&labels, ratio);
            let cfg = TrainConfig { ratio, ..cfg.clone() };
            let outcome = train(&cfg, train_images, val_images, &mut |_| {})?;
            let last = outcome
                .history
                .last()
                .ok_or_else(|| Error::Config("ablation runs need at least one epoch".into()))?;
            psnr.push(last.val_psnr);
        }
        rows.push(AblationRow { labels, psnr });
    }
    Ok(AblationTable {
        suite,
        seed: base.seed,
        ratios: ratios.to_vec(),
        rows,
    })
}

/// Outcome of the soft ordering check over several seeds of the
/// independence suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingNote {
    pub seeds: Vec<u64>,
    pub wins: Vec<bool>,
}

impl OrderingNote {
    pub fn from_tables(tables: &[AblationTable]) -> Self {
        OrderingNote {
            seeds: tables.iter().map(|t| t.seed).collect(),
            wins: tables.iter().map(AblationTable::last_row_beats_single_toggles).collect(),
        }
    }

    pub fn holds(&self) -> bool {
        let wins = self.wins.iter().filter(|&&w| w).count();
        2 * wins > self.wins.len() && wins >= 2.min(self.wins.len())
    }

    pub fn summary(&self) -> String {
        let wins = self.wins.iter().filter(|&&w| w).count();
        format!(
            "independent rho and lambda best in {wins} of {} seeds ({})",
            self.wins.len(),
            if self.holds() { "ordering holds" } else { "ordering not observed" }
        )
    }
}
