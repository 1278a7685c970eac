//! Plain-text `key = value` configuration files and the model configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments of
//! the same key override earlier ones.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    /// Where the entries came from, for error messages. Not part of equality.
    source: String,
}

impl PartialEq for KeyValues {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Eq for KeyValues {}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                file: source.to_string(),
                line: i + 1,
                detail: format!("expected key = value, got {line:?}"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    file: source.to_string(),
                    line: i + 1,
                    detail: "empty key".into(),
                });
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KeyValues {
            entries,
            source: source.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!("{}: cannot parse {key} = {v:?}", self.source))
            }),
        }
    }

    pub fn get_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| Error::Config(format!("{}: cannot parse list {key} = {v:?}", self.source))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

pub(crate) fn join_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Which branches a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branches {
    Both,
    AppearanceOnly,
    AttributeOnly,
}

impl Branches {
    pub fn has_attribute(self) -> bool {
        self != Branches::AppearanceOnly
    }

    pub fn has_appearance(self) -> bool {
        self != Branches::AttributeOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Branches::Both => "both",
            Branches::AppearanceOnly => "appearance",
            Branches::AttributeOnly => "attribute",
        }
    }
}

impl FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Branches::Both),
            "appearance" => Ok(Branches::AppearanceOnly),
            "attribute" => Ok(Branches::AttributeOnly),
            _ => Err(Error::Config(format!("unknown branches {s:?} (both|appearance|attribute)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Widths of the stem stages before the final feature stage.
    pub stem_channels: Vec<usize>,
    pub feature_channels: usize,
    /// Total spatial downsampling of the stem (a power of two).
    pub downsample: usize,
    /// Widths of the first two attention-block convolutions.
    pub attention_channels: Vec<usize>,
    pub hidden_dim: usize,
    pub lstm_bias: bool,
    pub h_stripes: usize,
    pub v_stripes: usize,
    pub reduced_dim: usize,
    pub share_reduction: bool,
    pub branches: Branches,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 96x48 input, 128x24x12 features.
    pub fn desk() -> Self {
        ModelConfig {
            image_height: 96,
            image_width: 48,
            stem_channels: vec![32, 64, 128],
            feature_channels: 128,
            downsample: 4,
            attention_channels: vec![32, 16],
            hidden_dim: 64,
            lstm_bias: true,
            h_stripes: 6,
            v_stripes: 3,
            reduced_dim: 64,
            share_reduction: false,
            branches: Branches::Both,
        }
    }

    /// Full-width layout: 384x192 input, 2048x24x12 features, 256-d pieces.
    pub fn paper_faithful() -> Self {
        ModelConfig {
            image_height: 384,
            image_width: 192,
            stem_channels: vec![64, 128, 256, 512],
            feature_channels: 2048,
            downsample: 16,
            attention_channels: vec![512, 256],
            hidden_dim: 256,
            lstm_bias: true,
            h_stripes: 6,
            v_stripes: 3,
            reduced_dim: 256,
            share_reduction: false,
            branches: Branches::Both,
        }
    }

    /// 16x12 input, 4x3 feature grid, narrow widths. For gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_height: 16,
            image_width: 12,
            stem_channels: vec![4],
            feature_channels: 6,
            downsample: 4,
            attention_channels: vec![4, 3],
            hidden_dim: 5,
            lstm_bias: true,
            h_stripes: 2,
            v_stripes: 3,
            reduced_dim: 4,
            share_reduction: false,
            branches: Branches::Both,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-faithful" | "paper_faithful" => Ok(Self::paper_faithful()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (desk|paper-faithful|tiny)"))),
        }
    }

    pub fn feature_height(&self) -> usize {
        self.image_height / self.downsample
    }

    pub fn feature_width(&self) -> usize {
        self.image_width / self.downsample
    }

    /// Spatial area `k` of the feature grid.
    pub fn feature_area(&self) -> usize {
        self.feature_height() * self.feature_width()
    }

    pub fn appearance_len(&self) -> usize {
        if self.branches.has_appearance() {
            self.reduced_dim * (self.h_stripes + self.v_stripes + 1)
        } else {
            0
        }
    }

    pub fn attribute_len(&self, num_attributes: usize) -> usize {
        if self.branches.has_attribute() {
            self.hidden_dim * num_attributes
        } else {
            0
        }
    }

    pub fn descriptor_len(&self, num_attributes: usize) -> usize {
        self.appearance_len() + self.attribute_len(num_attributes)
    }

    pub fn stride2_stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.downsample.is_power_of_two() {
            return bad(format!("downsample {} is not a power of two", self.downsample));
        }
        if self.stride2_stages() > self.stem_channels.len() + 1 {
            return bad(format!(
                "downsample {} needs {} strided stages but the stem has {}",
                self.downsample,
                self.stride2_stages(),
                self.stem_channels.len() + 1
            ));
        }
        if self.image_height % self.downsample != 0 || self.image_width % self.downsample != 0 {
            return bad(format!(
                "image {}x{} not divisible by downsample {}",
                self.image_height, self.image_width, self.downsample
            ));
        }
        let (hf, wf) = (self.feature_height(), self.feature_width());
        if self.h_stripes == 0 || self.v_stripes == 0 || hf % self.h_stripes != 0 || wf % self.v_stripes != 0 {
            return bad(format!(
                "feature grid {hf}x{wf} cannot be split into {} horizontal and {} vertical stripes; \
                 feature height must be a multiple of h_stripes and feature width a multiple of v_stripes",
                self.h_stripes, self.v_stripes
            ));
        }
        if self.attention_channels.len() != 2 {
            return bad(format!("attention_channels needs 2 widths, got {}", self.attention_channels.len()));
        }
        if [self.feature_channels, self.hidden_dim, self.reduced_dim]
            .iter()
            .chain(&self.stem_channels)
            .chain(&self.attention_channels)
            .any(|&c| c == 0)
        {
            return bad("channel widths must be positive".into());
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(v) = kv.get("image_height")? {
            self.image_height = v;
        }
        if let Some(v) = kv.get("image_width")? {
            self.image_width = v;
        }
        if let Some(v) = kv.get_list("stem_channels")? {
            self.stem_channels = v;
        }
        if let Some(v) = kv.get("feature_channels")? {
            self.feature_channels = v;
        }
        if let Some(v) = kv.get("downsample")? {
            self.downsample = v;
        }
        if let Some(v) = kv.get_list("attention_channels")? {
            self.attention_channels = v;
        }
        if let Some(v) = kv.get("hidden_dim")? {
            self.hidden_dim = v;
        }
        if let Some(v) = kv.get("lstm_bias")? {
            self.lstm_bias = v;
        }
        if let Some(v) = kv.get("h_stripes")? {
            self.h_stripes = v;
        }
        if let Some(v) = kv.get("v_stripes")? {
            self.v_stripes = v;
        }
        if let Some(v) = kv.get("reduced_dim")? {
            self.reduced_dim = v;
        }
        if let Some(v) = kv.get("share_reduction")? {
            self.share_reduction = v;
        }
        if let Some(v) = kv.get_str("branches") {
            self.branches = v.parse()?;
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = match kv.get_str("preset") {
            Some(p) => Self::preset(p)?,
            None => Self::desk(),
        };
        cfg.apply(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("image_height", self.image_height.to_string());
        kv.set("image_width", self.image_width.to_string());
        kv.set("stem_channels", join_list(&self.stem_channels));
        kv.set("feature_channels", self.feature_channels.to_string());
        kv.set("downsample", self.downsample.to_string());
        kv.set("attention_channels", join_list(&self.attention_channels));
        kv.set("hidden_dim", self.hidden_dim.to_string());
        kv.set("lstm_bias", self.lstm_bias.to_string());
        kv.set("h_stripes", self.h_stripes.to_string());
        kv.set("v_stripes", self.v_stripes.to_string());
        kv.set("reduced_dim", self.reduced_dim.to_string());
        kv.set("share_reduction", self.share_reduction.to_string());
        kv.set("branches", self.branches.name());
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let kv = KeyValues::parse("# comment\n a = 1\n\nb=x, y\na = 2\n", "t").unwrap();
        assert_eq!(kv.get::<u32>("a").unwrap(), Some(2));
        assert_eq!(kv.get_str("b"), Some("x, y"));
        assert!(KeyValues::parse("novalue\n", "t").is_err());
    }

    #[test]
    fn parse_error_names_line() {
        let err = KeyValues::parse("a = 1\nbroken\n", "cfg.txt").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn desk_grid_is_24_by_12() {
        let c = ModelConfig::desk();
        c.validate().unwrap();
        assert_eq!((c.feature_height(), c.feature_width()), (24, 12));
        assert_eq!(c.descriptor_len(12), 640 + 768);
    }

    #[test]
    fn paper_faithful_lengths() {
        let c = ModelConfig::paper_faithful();
        c.validate().unwrap();
        assert_eq!((c.feature_height(), c.feature_width()), (24, 12));
        assert_eq!(c.appearance_len(), 2560);
        assert_eq!(c.descriptor_len(12), 5632);
    }

    #[test]
    fn round_trip_through_kv() {
        let mut c = ModelConfig::desk();
        c.share_reduction = true;
        c.branches = Branches::AttributeOnly;
        let back = ModelConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn divisibility_is_checked() {
        let mut c = ModelConfig::desk();
        c.h_stripes = 5;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("multiple of h_stripes"), "{err}");
    }
}
