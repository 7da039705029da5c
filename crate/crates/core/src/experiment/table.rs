//! Transmission overhead and codec size report, pure arithmetic.

use std::fmt::Write;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::ExperimentError;
use crate::metrics::{symbol_count, Mode};
use crate::nn::{parameter_count, LayerSpec};
use crate::seedcodec::{codec_architecture, seed_length};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymbolLine {
    pub mode: Mode,
    /// Only MEG depends on the rate.
    pub f_c: Option<f64>,
    pub symbols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamLine {
    pub part: &'static str,
    pub layer: String,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableReport {
    pub symbols: Vec<SymbolLine>,
    /// Architecture listed for this rate.
    pub architecture_rate: f64,
    pub params: Vec<ParamLine>,
    pub encoder_total: u64,
    pub decoder_total: u64,
    pub total: u64,
}

/// Symbols per image for every mode and rate, and the layer-by-layer
/// parameter count of the codec at rate 0.5 (or the first configured rate).
pub fn overhead_table(cfg: &ExperimentConfig) -> Result<TableReport, ExperimentError> {
    let gen = &cfg.model;
    gen.validate()?;
    let count = |mode, f_c| symbol_count(mode, gen.image, gen.latent_channels, gen.downsample, f_c);
    let mut symbols = vec![
        SymbolLine { mode: Mode::Centralized, f_c: None, symbols: count(Mode::Centralized, 0.5)? },
        SymbolLine { mode: Mode::RawFeature, f_c: None, symbols: count(Mode::RawFeature, 0.5)? },
    ];
    for &f in &cfg.codec.rates {
        symbols.push(SymbolLine { mode: Mode::Meg, f_c: Some(f), symbols: count(Mode::Meg, f)? });
    }
    let latent = gen.latent_dims().len();
    let rate = cfg.codec.rates.iter().copied().find(|f| (f - 0.5).abs() < 1e-9).unwrap_or(cfg.codec.rates[0]);
    let seed = seed_length(latent, rate)?;
    let (enc, dec) = codec_architecture(latent as u64, seed as u64, cfg.codec.train.bottleneck as u64);
    let lines = |part: &'static str, specs: &[LayerSpec]| -> Vec<ParamLine> {
        specs.iter().map(|s| ParamLine { part, layer: s.describe(), params: s.parameter_count() }).collect()
    };
    let mut params = lines("encoder", &enc);
    params.extend(lines("decoder", &dec));
    let (encoder_total, decoder_total) = (parameter_count(&enc), parameter_count(&dec));
    Ok(TableReport {
        symbols,
        architecture_rate: rate,
        params,
        encoder_total,
        decoder_total,
        total: encoder_total + decoder_total,
    })
}

impl TableReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Transmitted symbols per image");
        let _ = writeln!(s, "{:<14} {:>6} {:>12}", "mode", "f_c", "symbols");
        for l in &self.symbols {
            let f = l.f_c.map_or("-".to_string(), |f| format!("{f}"));
            let _ = writeln!(s, "{:<14} {:>6} {:>12}", l.mode.to_string(), f, group(l.symbols as u64));
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Codec parameters at f_c = {}", self.architecture_rate);
        for l in &self.params {
            let _ = writeln!(s, "{:<8} {:<48} {:>14}", l.part, l.layer, group(l.params));
        }
        let _ = writeln!(s, "{:<57} {:>14}", "encoder total", group(self.encoder_total));
        let _ = writeln!(s, "{:<57} {:>14}", "decoder total", group(self.decoder_total));
        let _ = writeln!(s, "{:<57} {:>14}", "total", group(self.total));
        s
    }
}

/// `1234567` as `1,234,567`.
fn group(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::Preset;

    #[test]
    fn grouping() {
        assert_eq!(group(0), "0");
        assert_eq!(group(1638), "1,638");
        assert_eq!(group(563_430_184), "563,430,184");
    }

    #[test]
    fn desk_table_is_consistent() {
        let t = overhead_table(&ExperimentConfig::preset(Preset::Desk)).unwrap();
        assert_eq!(t.symbols[0].symbols, 1024);
        assert_eq!(t.symbols[1].symbols, 128);
        assert_eq!(t.total, t.params.iter().map(|p| p.params).sum::<u64>());
        assert!(t.render().contains("total"));
    }
}
