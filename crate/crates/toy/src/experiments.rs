//! Multi-variant training runs: weighting-mode ablation and parameter
//! sweeps, summarized as tables.

use atrl_core::credit::WeightingMode;
use atrl_core::numfmt::sig9;
use atrl_core::report::Table;

use crate::train::{train, TrainConfig, TrainError, TrainReport};

/// Hard-truncation fractions compared in the ablation.
pub const HARD_FRACTIONS: [f64; 7] = [0.05, 0.10, 0.15, 0.20, 0.30, 0.50, 0.75];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub mode: WeightingMode,
    pub hard_p: Option<f64>,
}

impl Variant {
    pub fn label(&self) -> String {
        match self.hard_p {
            Some(p) => format!("hard_top_{}", (p * 100.0).round() as u32),
            None => self.mode.as_str().to_string(),
        }
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut cfg = cfg.clone();
        cfg.pipeline.mode = self.mode;
        if let Some(p) = self.hard_p {
            cfg.pipeline.hard_p = p;
        }
        cfg
    }
}

/// Uniform, random, reverse, every hard fraction, then at-rl.
pub fn ablation_variants() -> Vec<Variant> {
    let plain = |mode| Variant { mode, hard_p: None };
    let mut v = vec![
        plain(WeightingMode::Uniform),
        plain(WeightingMode::Random),
        plain(WeightingMode::Reverse),
    ];
    v.extend(HARD_FRACTIONS.iter().map(|&p| Variant {
        mode: WeightingMode::HardTopP,
        hard_p: Some(p),
    }));
    v.push(plain(WeightingMode::AtRl));
    v
}

/// Aggregate of one variant over its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub final_reward: f64,
    pub final_std: f64,
    pub reached: usize,
    pub runs: usize,
    /// Mean steps to threshold over the runs that reached it.
    pub mean_steps: Option<f64>,
}

impl Summary {
    pub fn of(report: &TrainReport) -> Self {
        let finals: Vec<f64> = report.runs.iter().map(|r| r.curve.final_reward).collect();
        let n = finals.len().max(1) as f64;
        let mean = finals.iter().sum::<f64>() / n;
        let var = finals.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n;
        let steps: Vec<f64> = report
            .runs
            .iter()
            .filter_map(|r| r.curve.steps_to_threshold)
            .map(|s| s as f64)
            .collect();
        Self {
            final_reward: mean,
            final_std: var.sqrt(),
            reached: steps.len(),
            runs: finals.len(),
            mean_steps: (!steps.is_empty()).then(|| steps.iter().sum::<f64>() / steps.len() as f64),
        }
    }
}

fn seeds_text(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), sig9)
}

/// Trains every ablation variant on the same seeds.
pub fn ablate(cfg: &TrainConfig) -> Result<(Table, Vec<(Variant, TrainReport)>), TrainError> {
    let mut table = Table::new(
        "ablation",
        &["variant", "mode", "hard_p", "final_reward", "final_std", "reached", "mean_steps", "role"],
    );
    table.headers.push(("seeds".into(), seeds_text(&cfg.seeds)));
    table.headers.push(("steps".into(), cfg.steps.to_string()));
    table.headers.push(("threshold".into(), sig9(cfg.threshold)));
    let mut reports = Vec::new();
    for v in ablation_variants() {
        let report = train(&v.apply(cfg))?;
        let s = Summary::of(&report);
        let role = match v.mode {
            WeightingMode::AtRl => "soft_reference",
            WeightingMode::Uniform => "baseline",
            _ => "ablation",
        };
        table.rows.push(vec![
            v.label(),
            v.mode.as_str().to_string(),
            opt(v.hard_p),
            sig9(s.final_reward),
            sig9(s.final_std),
            format!("{}/{}", s.reached, s.runs),
            opt(s.mean_steps),
            role.to_string(),
        ]);
        reports.push((v, report));
    }
    Ok((table, reports))
}

/// `key=v1,v2,...` grid axis.
pub fn parse_axis(text: &str) -> Result<(String, Vec<String>), String> {
    let (k, vs) = text
        .split_once('=')
        .ok_or_else(|| format!("expected key=v1,v2,..., got {text:?}"))?;
    let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(format!("axis {k:?} has no values"));
    }
    Ok((k.trim().to_string(), values))
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn grid_points(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    if axes.is_empty() {
        return Vec::new();
    }
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, values) in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((k.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

/// Trains the default configuration and every grid point, reporting each
/// point's change against the default row.
pub fn sweep(cfg: &TrainConfig, axes: &[(String, Vec<String>)]) -> Result<Table, TrainError> {
    let points = grid_points(axes);
    let mut configs = Vec::with_capacity(points.len());
    for p in &points {
        let mut c = cfg.clone();
        for (k, v) in p {
            c.set(k, v).map_err(TrainError::Config)?;
        }
        c.validate()?;
        configs.push(c);
    }

    let mut table = Table::new(
        "sweep",
        &["setting", "final_reward", "delta_final", "reached", "mean_steps", "delta_steps"],
    );
    table.headers.push(("seeds".into(), seeds_text(&cfg.seeds)));
    table.headers.push(("steps".into(), cfg.steps.to_string()));
    table.headers.push(("mode".into(), cfg.pipeline.mode.as_str().to_string()));
    let base = Summary::of(&train(cfg)?);
    let row = |label: String, s: &Summary| {
        let delta_steps = match (s.mean_steps, base.mean_steps) {
            (Some(a), Some(b)) => sig9(a - b),
            _ => "-".to_string(),
        };
        vec![
            label,
            sig9(s.final_reward),
            sig9(s.final_reward - base.final_reward),
            format!("{}/{}", s.reached, s.runs),
            opt(s.mean_steps),
            delta_steps,
        ]
    };
    table.rows.push(row("default".into(), &base));
    for (p, c) in points.iter().zip(&configs) {
        let label = p.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",");
        table.rows.push(row(label, &Summary::of(&train(c)?)));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_set() {
        let labels: Vec<String> = ablation_variants().iter().map(Variant::label).collect();
        assert_eq!(
            labels,
            [
                "uniform",
                "random",
                "reverse",
                "hard_top_5",
                "hard_top_10",
                "hard_top_15",
                "hard_top_20",
                "hard_top_30",
                "hard_top_50",
                "hard_top_75",
                "at_rl"
            ]
        );
    }

    #[test]
    fn grids() {
        assert!(grid_points(&[]).is_empty());
        let a = parse_axis("tau_cen=0.70,0.75,0.80").unwrap();
        assert_eq!(grid_points(std::slice::from_ref(&a)).len(), 3);
        let b = parse_axis("alpha=0.5, 0.6 ,0.7").unwrap();
        let pts = grid_points(&[a, b]);
        assert_eq!(pts.len(), 9);
        assert_eq!(pts[1], vec![("tau_cen".into(), "0.70".into()), ("alpha".into(), "0.6".into())]);
        assert!(parse_axis("x=").is_err());
        assert!(parse_axis("x").is_err());
    }

    #[test]
    fn tiny_sweep_has_default_row() {
        let mut cfg = TrainConfig {
            steps: 1,
            batch_prompts: 1,
            ..TrainConfig::default()
        };
        cfg.seeds = vec![0];
        let t = sweep(&cfg, &[]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0][0], "default");
        assert_eq!(t.rows[0][2], "0");
        let t = sweep(&cfg, &[parse_axis("tau_cen=0.7,0.8").unwrap()]).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(Table::from_text(&t.to_text()).unwrap(), t);
    }
}
