use super::ModelError;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output channels of the microphone encoder layers.
    pub enc_channels: Vec<usize>,
    /// Output channels of the single echo-branch layer.
    pub echo_enc_channels: usize,
    pub dec_channels: Vec<usize>,
    pub kernel_feature: usize,
    pub kernel_time: usize,
    pub feature_stride: usize,
    pub time_stride: usize,
    pub gru_units: usize,
    pub fc_units: usize,
    pub in_features: usize,
    pub out_bands: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_channels: vec![8, 16, 24, 32],
            echo_enc_channels: 8,
            dec_channels: vec![24, 16, 8, 1],
            kernel_feature: 4,
            kernel_time: 3,
            feature_stride: 4,
            time_stride: 1,
            gru_units: 192,
            fc_units: 192,
            in_features: 112,
            out_bands: 100,
        }
    }
}

impl ModelConfig {
    /// A config with `enc_channels` and decoder channels mirrored from them.
    pub fn mirrored(enc_channels: Vec<usize>, echo: usize, gru: usize, fc: usize, in_features: usize, out_bands: usize) -> Self {
        let mut dec: Vec<usize> = enc_channels[..enc_channels.len().saturating_sub(1)].iter().rev().copied().collect();
        dec.push(1);
        Self {
            enc_channels,
            echo_enc_channels: echo,
            dec_channels: dec,
            gru_units: gru,
            fc_units: fc,
            in_features,
            out_bands,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.enc_channels.len() < 2 {
            return bad("need at least two encoder layers".into());
        }
        if self.enc_channels.iter().chain([&self.echo_enc_channels]).any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        let mut expect: Vec<usize> = self.enc_channels[..self.enc_channels.len() - 1].iter().rev().copied().collect();
        expect.push(1);
        if self.dec_channels != expect {
            return bad(format!("dec_channels {:?} must mirror encoder as {:?}", self.dec_channels, expect));
        }
        if self.time_stride != 1 {
            return bad("time stride must be 1 for frame-level streaming".into());
        }
        if self.kernel_feature == 0 || self.kernel_time == 0 || self.feature_stride == 0 {
            return bad("kernel and stride must be positive".into());
        }
        if self.gru_units == 0 || self.fc_units == 0 || self.in_features == 0 || self.out_bands == 0 {
            return bad("layer widths must be positive".into());
        }
        let ledger = ShapeLedger::derive_unchecked(self);
        let f_last = *ledger.feature_sizes.last().unwrap();
        if f_last == 0 || self.fc_units % f_last != 0 {
            return bad(format!("fc_units {} not divisible by bottleneck feature size {}", self.fc_units, f_last));
        }
        Ok(())
    }

    pub fn shapes(&self) -> Result<ShapeLedger, ModelError> {
        self.validate()?;
        Ok(ShapeLedger::derive_unchecked(self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderShape {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderShape {
    pub name: String,
    /// Channels arriving from the previous module (or the bottleneck).
    pub in_channels: usize,
    pub skip_channels: usize,
    /// Encoder layer whose output is the skip input.
    pub skip_from: usize,
    pub out_channels: usize,
    pub in_features: usize,
    pub out_features: usize,
    pub residual: bool,
}

/// Every layer's channel and feature extent for a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeLedger {
    /// Feature-axis size before encoder layer `l` (index 0) through after the last.
    pub feature_sizes: Vec<usize>,
    pub encoder: Vec<EncoderShape>,
    pub echo_encoder: EncoderShape,
    pub bottleneck_width: usize,
    pub decoder_input_channels: usize,
    pub decoder: Vec<DecoderShape>,
}

impl ShapeLedger {
    fn derive_unchecked(cfg: &ModelConfig) -> Self {
        let l = cfg.enc_channels.len();
        let mut fs = vec![cfg.in_features];
        for i in 0..l {
            fs.push(fs[i].div_ceil(cfg.feature_stride.max(1)));
        }
        let encoder = (0..l)
            .map(|i| EncoderShape {
                name: format!("enc{i}"),
                in_channels: match i {
                    0 => 1,
                    1 => cfg.enc_channels[0] + cfg.echo_enc_channels,
                    _ => cfg.enc_channels[i - 1],
                },
                out_channels: cfg.enc_channels[i],
                in_features: fs[i],
                out_features: fs[i + 1],
            })
            .collect();
        let echo_encoder = EncoderShape {
            name: "echo_enc".into(),
            in_channels: 1,
            out_channels: cfg.echo_enc_channels,
            in_features: fs[0],
            out_features: fs[1],
        };
        let f_last = fs[l].max(1);
        let dec_in = cfg.fc_units / f_last;
        let decoder = (0..l)
            .map(|i| DecoderShape {
                name: format!("dec{i}"),
                in_channels: if i == 0 { dec_in } else { cfg.dec_channels.get(i - 1).copied().unwrap_or(1) },
                skip_channels: cfg.enc_channels[l - 1 - i],
                skip_from: l - 1 - i,
                out_channels: cfg.dec_channels.get(i).copied().unwrap_or(1),
                in_features: fs[l - i],
                out_features: fs[l - 1 - i],
                residual: i == l - 1,
            })
            .collect();
        Self {
            bottleneck_width: cfg.enc_channels[l - 1] * fs[l],
            feature_sizes: fs,
            encoder,
            echo_encoder,
            decoder_input_channels: dec_in,
            decoder,
        }
    }
}
