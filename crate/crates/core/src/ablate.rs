//! Ablation suites: fixed grids of configurations trained over shared seeds.

use std::time::Instant;

use serde::Serialize;

use crate::config::{
    keyword_enum, AttentionMode, DuoFormerConfig, Readout, RunConfig, ScaleTokenMode, TrainConfig,
};
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::model::{count_parameters, DuoFormer};
use crate::trainer::{train, TrainOptions};

pub const SEEDS: [u64; 3] = [0, 1, 2];
pub const LAYER_GRID: [usize; 3] = [2, 4, 6];
pub const HEAD_GRID: [usize; 3] = [2, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Attention,
    ScaleToken,
    Stages,
    HeadsLayers,
}

keyword_enum!(Suite {
    Attention => "attention",
    ScaleToken => "scale-token",
    Stages => "stages",
    HeadsLayers => "heads-layers",
});

/// Base run configuration for suites at toy scale.
pub fn toy_base() -> RunConfig {
    RunConfig {
        model: DuoFormerConfig::toy(),
        train: TrainConfig {
            batch_size: 16,
            max_epochs: 30,
            patience: 10,
            max_lr: 1e-3,
            ..TrainConfig::default()
        },
    }
}

/// One grid point: its id and the configuration, or why it was rejected.
pub type Variant = (String, std::result::Result<DuoFormerConfig, String>);

fn variant(id: impl Into<String>, cfg: DuoFormerConfig) -> Variant {
    let checked = cfg.validate().map(|_| cfg).map_err(|e| e.to_string());
    (id.into(), checked)
}

/// The configuration grid of a suite, derived from `base`.
pub fn suite_variants(suite: Suite, base: &DuoFormerConfig) -> Vec<Variant> {
    let with = |f: &dyn Fn(&mut DuoFormerConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match suite {
        Suite::Attention => vec![
            variant(
                "scale_only",
                with(&|c| {
                    c.attention_mode = AttentionMode::ScaleOnly;
                    c.readout = Readout::ScaleAttnOnlyFc;
                    if c.scale_token_mode == ScaleTokenMode::None {
                        c.scale_token_mode = ScaleTokenMode::Fused;
                    }
                }),
            ),
            variant(
                "patch_only",
                with(&|c| {
                    c.attention_mode = AttentionMode::PatchOnly;
                    c.readout = Readout::ScaleTokenPatchAttn;
                }),
            ),
            variant(
                "duo",
                with(&|c| {
                    c.attention_mode = AttentionMode::Duo;
                    c.readout = Readout::ScaleTokenPatchAttn;
                    if c.scale_token_mode == ScaleTokenMode::None {
                        c.scale_token_mode = ScaleTokenMode::Fused;
                    }
                }),
            ),
        ],
        Suite::ScaleToken => [
            ("first_token", ScaleTokenMode::None, Readout::FirstToken),
            ("avg_tokens", ScaleTokenMode::None, Readout::AvgTokens),
            (
                "learnable",
                ScaleTokenMode::Learnable,
                Readout::ScaleTokenPatchAttn,
            ),
            ("fused", ScaleTokenMode::Fused, Readout::ScaleTokenPatchAttn),
        ]
        .into_iter()
        .map(|(id, mode, readout)| {
            variant(
                id,
                with(&|c| {
                    c.attention_mode = AttentionMode::Duo;
                    c.scale_token_mode = mode;
                    c.readout = readout;
                }),
            )
        })
        .collect(),
        Suite::Stages => {
            let n = base.stages.len();
            let mut subsets: Vec<Vec<usize>> = (1..1u32 << n)
                .map(|mask| {
                    (0..n)
                        .filter(|i| mask & (1 << i) != 0)
                        .map(|i| base.stages[i])
                        .collect()
                })
                .collect();
            subsets.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
            subsets
                .into_iter()
                .map(|stages| {
                    let id = format!(
                        "stages={}",
                        stages
                            .iter()
                            .map(|s| s.to_string())
                            .collect::<Vec<_>>()
                            .join(",")
                    );
                    variant(id, with(&|c| c.stages = stages.clone()))
                })
                .collect()
        }
        Suite::HeadsLayers => {
            let mut out = Vec::new();
            for layers in LAYER_GRID {
                for heads in HEAD_GRID {
                    out.push(variant(
                        format!("layers={layers},heads={heads}"),
                        with(&|c| {
                            c.layers = layers;
                            c.heads = heads;
                        }),
                    ));
                }
            }
            out
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub val_balanced_acc: f64,
    pub test_balanced_acc: f64,
    pub epochs: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub id: String,
    pub params: usize,
    pub val_mean: f64,
    pub val_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    pub seconds: f64,
    pub runs: Vec<SeedRun>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Rejected {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub suite: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub rejected: Vec<Rejected>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationReport {
    pub fn row(&self, id: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "suite {} (seeds {:?}; balanced accuracy mean ± std)\n",
            self.suite, self.seeds
        );
        s.push_str(&format!(
            "{:<24} {:>17} {:>17} {:>9} {:>9}\n",
            "config", "val", "test", "params", "seconds"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<24} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>9} {:>9.1}\n",
                r.id, r.val_mean, r.val_std, r.test_mean, r.test_std, r.params, r.seconds
            ));
        }
        for r in &self.rejected {
            s.push_str(&format!("{:<24} rejected: {}\n", r.id, r.reason));
        }
        s
    }
}

fn run_variant(
    id: &str,
    cfg: &DuoFormerConfig,
    train_cfg: &TrainConfig,
    splits: &Splits<f32>,
    seeds: &[u64],
) -> Result<AblationRow> {
    let start = Instant::now();
    let mut runs = Vec::new();
    for &seed in seeds {
        let t = Instant::now();
        let mut model = DuoFormer::<f32>::new(DuoFormerConfig {
            seed,
            ..cfg.clone()
        })?;
        let tc = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let rec = train(&mut model, splits, &tc, &TrainOptions::default())?;
        runs.push(SeedRun {
            seed,
            val_balanced_acc: rec.best_val_balanced_acc,
            test_balanced_acc: rec.test.balanced_accuracy,
            epochs: rec.epochs.len(),
            seconds: t.elapsed().as_secs_f64(),
        });
    }
    let (val_mean, val_std) =
        mean_std(&runs.iter().map(|r| r.val_balanced_acc).collect::<Vec<_>>());
    let (test_mean, test_std) =
        mean_std(&runs.iter().map(|r| r.test_balanced_acc).collect::<Vec<_>>());
    Ok(AblationRow {
        id: id.to_string(),
        params: count_parameters(cfg, true)?.total(),
        val_mean,
        val_std,
        test_mean,
        test_std,
        seconds: start.elapsed().as_secs_f64(),
        runs,
    })
}

/// Trains every valid variant of `suite` once per seed. With `parallel`, each
/// variant runs on its own thread; results do not depend on the schedule.
pub fn run_suite(
    suite: Suite,
    base: &RunConfig,
    splits: &Splits<f32>,
    seeds: &[u64],
    parallel: bool,
    verbose: bool,
) -> Result<AblationReport> {
    let variants = suite_variants(suite, &base.model);
    let mut rejected = Vec::new();
    let mut todo = Vec::new();
    for (id, v) in variants {
        match v {
            Ok(cfg) => todo.push((id, cfg)),
            Err(reason) => rejected.push(Rejected { id, reason }),
        }
    }
    let run = |(id, cfg): &(String, DuoFormerConfig)| {
        let row = run_variant(id, cfg, &base.train, splits, seeds);
        if verbose {
            if let Ok(r) = &row {
                eprintln!(
                    "{id}: test {:.4} ± {:.4} ({:.1}s)",
                    r.test_mean, r.test_std, r.seconds
                );
            }
        }
        row
    };
    let rows: Vec<Result<AblationRow>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = todo.iter().map(|v| s.spawn(move || run(v))).collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Numeric("worker panicked".into())))
                })
                .collect()
        })
    } else {
        todo.iter().map(run).collect()
    };
    Ok(AblationReport {
        suite: suite.to_string(),
        seeds: seeds.to_vec(),
        rows: rows.into_iter().collect::<Result<_>>()?,
        rejected,
    })
}
