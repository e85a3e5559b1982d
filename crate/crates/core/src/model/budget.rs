use super::params::{is_trainable, param_shapes};
use super::{ModelConfig, ModelError};

/// One row of the model summary table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSummary {
    pub name: String,
    /// `channels × features` entering the layer.
    pub input: (usize, usize),
    pub output: (usize, usize),
    pub params: usize,
    pub macs_per_frame: u64,
}

fn layer_params(cfg: &ModelConfig, prefix: &str) -> Result<usize, ModelError> {
    let dotted = format!("{prefix}.");
    Ok(param_shapes(cfg)?
        .iter()
        .filter(|(n, _)| n.starts_with(&dotted))
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

/// Per-layer shapes, parameter counts and multiply-accumulates per frame.
pub fn summary(cfg: &ModelConfig) -> Result<Vec<LayerSummary>, ModelError> {
    let s = cfg.shapes()?;
    let (kf, kt, r) = (cfg.kernel_feature, cfg.kernel_time, cfg.feature_stride);
    let mut rows = Vec::new();
    for e in std::iter::once(&s.echo_encoder).chain(&s.encoder) {
        let dw = e.in_channels * e.out_features * kf * kt;
        let pw = e.in_channels * e.out_channels * e.out_features;
        rows.push(LayerSummary {
            name: e.name.clone(),
            input: (e.in_channels, e.in_features),
            output: (e.out_channels, e.out_features),
            params: layer_params(cfg, &e.name)?,
            macs_per_frame: (dw + pw) as u64,
        });
    }
    let h = cfg.gru_units;
    rows.push(LayerSummary {
        name: "gru".into(),
        input: (s.bottleneck_width, 1),
        output: (h, 1),
        params: layer_params(cfg, "gru")?,
        macs_per_frame: (3 * h * (s.bottleneck_width + h)) as u64,
    });
    rows.push(LayerSummary {
        name: "fc".into(),
        input: (h, 1),
        output: (cfg.fc_units, 1),
        params: layer_params(cfg, "fc")?,
        macs_per_frame: (h * cfg.fc_units) as u64,
    });
    for d in &s.decoder {
        let skip = d.skip_channels * d.skip_channels * d.in_features;
        let sub = (d.in_channels + d.skip_channels) * d.out_channels * r * d.in_features;
        let res = if d.residual { 2 * d.out_channels * d.out_channels * d.out_features } else { 0 };
        rows.push(LayerSummary {
            name: d.name.clone(),
            input: (d.in_channels + d.skip_channels, d.in_features),
            output: (d.out_channels, d.out_features),
            params: layer_params(cfg, &d.name)?,
            macs_per_frame: (skip + sub + res) as u64,
        });
    }
    rows.push(LayerSummary {
        name: "out".into(),
        input: (1, cfg.in_features),
        output: (cfg.out_bands, 1),
        params: layer_params(cfg, "out")?,
        macs_per_frame: (cfg.in_features * cfg.out_bands) as u64,
    });
    Ok(rows)
}

/// Total scalars in the parameter set, batch-norm running statistics included.
pub fn count_params(cfg: &ModelConfig) -> Result<usize, ModelError> {
    Ok(param_shapes(cfg)?.iter().map(|(_, s)| s.iter().product::<usize>()).sum())
}

pub fn count_trainable_params(cfg: &ModelConfig) -> Result<usize, ModelError> {
    Ok(param_shapes(cfg)?
        .iter()
        .filter(|(n, _)| is_trainable(n))
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

pub fn count_macs_per_frame(cfg: &ModelConfig) -> Result<u64, ModelError> {
    Ok(summary(cfg)?.iter().map(|l| l.macs_per_frame).sum())
}

/// MACs per second at `frame_rate` frames/s (62.5 for a 256-sample hop at 16 kHz).
pub fn count_macs_per_second(cfg: &ModelConfig, frame_rate: f64) -> Result<u64, ModelError> {
    Ok((count_macs_per_frame(cfg)? as f64 * frame_rate).round() as u64)
}
