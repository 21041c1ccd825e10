//! Ablation grids: `axis = v1, v2, ...` lines expanded into a Cartesian
//! product of training runs.

use std::time::Instant;

use crate::config::{LayerSpec, TrainConfig};
use crate::data::LabeledDataset;
use crate::error::{HffError, Result};
use crate::train::train;

pub const AXES: [&str; 8] =
    ["activation", "loss_placement", "loss_kind", "scale_input", "scale_sims", "P", "tau", "aux_channels"];

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub axes: Vec<(String, Vec<String>)>,
}

impl Grid {
    pub fn parse(text: &str) -> Result<Self> {
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HffError::config(format!("grid line {}: expected `axis = v1, v2`", n + 1)))?;
            let k = k.trim();
            if !AXES.contains(&k) {
                return Err(HffError::config(format!(
                    "unknown ablation axis `{k}`; accepted axes: {}",
                    AXES.join(", ")
                )));
            }
            if axes.iter().any(|(a, _)| a == k) {
                return Err(HffError::config(format!("ablation axis `{k}` listed twice")));
            }
            let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            if values.is_empty() {
                return Err(HffError::config(format!("ablation axis `{k}` has no values")));
            }
            axes.push((k.to_string(), values));
        }
        if axes.is_empty() {
            return Err(HffError::config("ablation grid lists no axes"));
        }
        Ok(Grid { axes })
    }

    /// Every combination, the last axis varying fastest.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells = vec![Vec::new()];
        for (axis, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|cell: Vec<(String, String)>| {
                    values.iter().map(move |v| {
                        let mut c = cell.clone();
                        c.push((axis.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }

    pub fn csv_header(&self) -> String {
        let mut cols: Vec<&str> = self.axes.iter().map(|(a, _)| a.as_str()).collect();
        cols.extend(["accuracy", "seconds"]);
        cols.join(",")
    }
}

/// `base` with one grid cell applied.
pub fn apply_cell(base: &TrainConfig, cell: &[(String, String)]) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    for (axis, value) in cell {
        match axis.as_str() {
            "P" => cfg.set("protos_per_class", value)?,
            "aux_channels" => set_aux(&mut cfg, value)?,
            other => cfg.set(other, value)?,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `none`, one width for every conv layer, or `a1-a2-...` per conv layer.
fn set_aux(cfg: &mut TrainConfig, value: &str) -> Result<()> {
    let convs = cfg.arch.iter().filter(|l| matches!(l, LayerSpec::Conv { .. })).count();
    let widths: Vec<Option<usize>> = if value == "none" {
        vec![None; convs]
    } else {
        let parsed = value
            .split('-')
            .map(|t| match t.trim() {
                "none" | "0" => Ok(None),
                t => t.parse::<usize>().map(Some),
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| HffError::config(format!("aux_channels: `{value}`; expected none, N or N1-N2-...")))?;
        if parsed.len() == 1 {
            vec![parsed[0]; convs]
        } else {
            parsed
        }
    };
    if widths.len() != convs {
        return Err(HffError::config(format!(
            "aux_channels: `{value}` gives {} widths for {convs} conv layers",
            widths.len()
        )));
    }
    let mut it = widths.into_iter();
    for spec in &mut cfg.arch {
        if let LayerSpec::Conv { aux, .. } = spec {
            *aux = it.next().expect("one width per conv layer");
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: Vec<(String, String)>,
    pub accuracy: f64,
    pub seconds: f64,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = self.cell.iter().map(|(_, v)| v.clone()).collect();
        cols.push(format!("{:.6}", self.accuracy));
        cols.push(format!("{:.3}", self.seconds));
        cols.join(",")
    }
}

/// Trains every cell with the shared seed and reports headline accuracy on
/// `test`. `on_row` sees each row as soon as it finishes.
pub fn run_grid(
    base: &TrainConfig,
    grid: &Grid,
    train_set: &LabeledDataset,
    val: &LabeledDataset,
    test: &LabeledDataset,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let cells = grid.cells();
    let configs = cells.iter().map(|c| apply_cell(base, c)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, cfg) in cells.into_iter().zip(configs) {
        let start = Instant::now();
        let out = train(&cfg, train_set, val)?;
        let seconds = start.elapsed().as_secs_f64();
        let accuracy = out.model.evaluate(test)?.accuracy;
        let row = AblationRow { cell, accuracy, seconds: if cfg.record_seconds { seconds } else { 0.0 } };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cartesian_order() {
        let g = Grid::parse("P = 1, 2\ntau = 1,10 # temps\n").unwrap();
        let cells: Vec<String> =
            g.cells().iter().map(|c| c.iter().map(|(_, v)| v.as_str()).collect::<Vec<_>>().join("/")).collect();
        assert_eq!(cells, ["1/1", "1/10", "2/1", "2/10"]);
        assert_eq!(g.csv_header(), "P,tau,accuracy,seconds");
    }

    #[test]
    fn unknown_axis_is_config_error() {
        let err = Grid::parse("width = 10").unwrap_err();
        assert!(matches!(err, HffError::Config(ref m) if m.contains("width") && m.contains("aux_channels")));
    }

    #[test]
    fn aux_per_conv_layer() {
        let base = TrainConfig::preset("mnist-cnn").unwrap();
        let cell = [("aux_channels".to_string(), "16-none".to_string())];
        let cfg = apply_cell(&base, &cell).unwrap();
        let aux: Vec<Option<usize>> = cfg
            .arch
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { aux, .. } => *aux,
                LayerSpec::Dense { .. } => None,
            })
            .collect();
        assert_eq!(aux, [Some(16), None]);
        assert!(apply_cell(&base, &[("aux_channels".into(), "1-2-3".into())]).is_err());
    }

    #[test]
    fn p_axis_maps_to_prototypes() {
        let cfg = apply_cell(&TrainConfig::default(), &[("P".into(), "4".into())]).unwrap();
        assert_eq!(cfg.protos_per_class, 4);
    }
}
