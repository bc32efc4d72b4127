//! Component ablations: one trained model per combination of axis values,
//! median metrics over seeds.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::data::TransformKind;
use crate::error::{Error, Result};
use crate::model::ScoreScale;
use crate::trainer::{train_and_evaluate, LoadedSet};

use super::median;

#[derive(Clone, Debug, PartialEq)]
pub enum AblationAxis {
    Transformer(Vec<bool>),
    PositionalEncoding(Vec<bool>),
    RankingLoss(Vec<bool>),
    ConsistencyLoss(Vec<bool>),
    ConsistencyTransform(Vec<TransformKind>),
}

impl AblationAxis {
    pub const NAMES: [&'static str; 5] = [
        "transformer",
        "positional_encoding",
        "ranking_loss",
        "consistency_loss",
        "consistency_transform_kind",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Transformer(_) => Self::NAMES[0],
            Self::PositionalEncoding(_) => Self::NAMES[1],
            Self::RankingLoss(_) => Self::NAMES[2],
            Self::ConsistencyLoss(_) => Self::NAMES[3],
            Self::ConsistencyTransform(_) => Self::NAMES[4],
        }
    }

    pub fn cardinality(&self) -> usize {
        match self {
            Self::Transformer(v) | Self::PositionalEncoding(v) | Self::RankingLoss(v) | Self::ConsistencyLoss(v) => {
                v.len()
            }
            Self::ConsistencyTransform(v) => v.len(),
        }
    }

    fn apply(&self, index: usize, c: &mut RunConfig) {
        match self {
            Self::Transformer(v) => c.model.use_transformer = v[index],
            Self::PositionalEncoding(v) => c.model.encoder.positional_encoding = v[index],
            Self::RankingLoss(v) => {
                if !v[index] {
                    c.train.loss.lambda2 = 0.0;
                }
            }
            Self::ConsistencyLoss(v) => {
                if !v[index] {
                    c.train.loss.lambda3 = 0.0;
                }
            }
            Self::ConsistencyTransform(v) => c.train.consistency_transform = v[index],
        }
    }
}

fn parse_bools(name: &str, values: &str) -> Result<Vec<bool>> {
    values
        .split(',')
        .map(|v| match v.trim() {
            "on" | "true" | "1" => Ok(true),
            "off" | "false" | "0" => Ok(false),
            other => Err(Error::Config(format!("{name}: expected on/off, got {other:?}"))),
        })
        .collect()
}

/// `name=v1,v2,...`, e.g. `transformer=on,off` or `consistency_transform_kind=hflip,rot90`.
impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, values) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("ablation axis {s:?} is not name=values")))?;
        let name = name.trim();
        let axis = match name {
            "transformer" => Self::Transformer(parse_bools(name, values)?),
            "positional_encoding" => Self::PositionalEncoding(parse_bools(name, values)?),
            "ranking_loss" => Self::RankingLoss(parse_bools(name, values)?),
            "consistency_loss" => Self::ConsistencyLoss(parse_bools(name, values)?),
            "consistency_transform_kind" => Self::ConsistencyTransform(
                values
                    .split(',')
                    .map(|v| v.trim().parse())
                    .collect::<Result<_>>()?,
            ),
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation axis {name:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        if axis.cardinality() == 0 {
            return Err(Error::Config(format!("ablation axis {name} has no values")));
        }
        Ok(axis)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub transformer: bool,
    pub positional_encoding: bool,
    pub ranking_loss: bool,
    pub consistency_loss: bool,
    pub consistency_transform: TransformKind,
    pub srocc: Vec<f64>,
    pub plcc: Vec<f64>,
}

impl AblationRow {
    pub fn srocc_median(&self) -> f64 {
        median(&self.srocc)
    }

    pub fn plcc_median(&self) -> f64 {
        median(&self.plcc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str =
        "label,transformer,positional_encoding,ranking_loss,consistency_loss,consistency_transform,seeds,srocc_median,plcc_median";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.label,
                r.transformer,
                r.positional_encoding,
                r.ranking_loss,
                r.consistency_loss,
                r.consistency_transform,
                r.srocc.len(),
                r.srocc_median(),
                r.plcc_median()
            );
        }
        s
    }
}

/// Components enabled in `c`, joined with `+`; `backbone` alone when
/// everything is off.
pub fn row_label(c: &RunConfig) -> String {
    let mut parts = vec!["backbone".to_string()];
    if c.model.use_transformer {
        parts.push("transformer".into());
        if c.model.encoder.positional_encoding {
            parts.push("pe".into());
        }
    }
    if c.train.loss.lambda2 > 0.0 {
        parts.push("ranking".into());
    }
    if c.train.loss.lambda3 > 0.0 {
        parts.push(format!("consistency({})", c.train.consistency_transform));
    }
    parts.join("+")
}

/// Every combination of axis values (first axis varies slowest).
pub fn expand(base: &RunConfig, axes: &[AblationAxis]) -> Vec<RunConfig> {
    let mut configs = vec![base.clone()];
    for axis in axes {
        configs = configs
            .into_iter()
            .flat_map(|c| {
                (0..axis.cardinality()).map(move |i| {
                    let mut c = c.clone();
                    axis.apply(i, &mut c);
                    c
                })
            })
            .collect();
    }
    configs
}

/// Trains one model per combination and seed (`base.train.seed + s` and
/// `base model seed + s` for `s < seeds`) and scores it on `test`.
pub fn ablate(
    base: &RunConfig,
    axes: &[AblationAxis],
    seeds: usize,
    train: &LoadedSet,
    test: &LoadedSet,
    score_scale: ScoreScale,
) -> Result<AblationTable> {
    if seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for c in expand(base, axes) {
        let mut srocc = Vec::with_capacity(seeds);
        let mut plcc = Vec::with_capacity(seeds);
        for s in 0..seeds as u64 {
            let mut run = c.clone();
            run.train.seed = base.train.seed + s;
            run.model.backbone.seed = base.model.backbone.seed + s;
            let (_, report) = train_and_evaluate(&run.model, &run.train, train, test, score_scale)?;
            log::info!("ablation {} seed {s}: srocc {:.4}", row_label(&c), report.srocc);
            srocc.push(report.srocc);
            plcc.push(report.plcc);
        }
        rows.push(AblationRow {
            label: row_label(&c),
            transformer: c.model.use_transformer,
            positional_encoding: c.model.encoder.positional_encoding,
            ranking_loss: c.train.loss.lambda2 > 0.0,
            consistency_loss: c.train.loss.lambda3 > 0.0,
            consistency_transform: c.train.consistency_transform,
            srocc,
            plcc,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_count_is_product() {
        let axes: Vec<AblationAxis> = ["transformer=on,off", "ranking_loss=on,off", "consistency_transform_kind=hflip,vflip,rot90"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(expand(&RunConfig::toy(), &axes).len(), 12);
    }

    #[test]
    fn all_off_is_backbone() {
        let axes: Vec<AblationAxis> = ["transformer=off", "ranking_loss=off", "consistency_loss=off"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let c = expand(&RunConfig::toy(), &axes);
        assert_eq!(c.len(), 1);
        assert_eq!(row_label(&c[0]), "backbone");
    }

    #[test]
    fn parse_errors() {
        assert!("dropout=on".parse::<AblationAxis>().is_err());
        assert!("transformer".parse::<AblationAxis>().is_err());
        assert!("transformer=maybe".parse::<AblationAxis>().is_err());
    }
}
