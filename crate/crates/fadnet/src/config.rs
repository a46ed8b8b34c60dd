//! Flat `key=value` configuration files.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored.
//! Model keys: categories, height, width, enable_fa, enable_dh,
//! reversed_order, backbone_width, and optionally upsample
//! (`bilinear` | `transposed`) and category_names (comma separated).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, UpsampleMode};

/// Default KITTI category names, used when `category_names` is absent.
pub const DEFAULT_CATEGORY_NAMES: [&str; 6] = ["Car", "Pedestrian", "Cyclist", "Van", "Truck", "Tram"];

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse { line: lineno + 1, detail: format!("expected key=value, got `{line}`") });
        };
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Parse { line: lineno + 1, detail: format!("duplicate key `{key}`") });
        }
    }
    Ok(map)
}

pub struct KvReader {
    map: BTreeMap<String, String>,
}

impl KvReader {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        KvReader { map }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(KvReader::new(parse_kv(text)?))
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    pub fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad(key, &v)),
        }
    }

    pub fn u64_or(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad(key, &v)),
        }
    }

    pub fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad(key, &v)),
        }
    }

    pub fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key).as_deref() {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(bad(key, v)),
        }
    }

    /// Error if any keys remain unread (catches typos).
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            return Err(Error::Input(format!("unknown config key `{key}`")));
        }
        Ok(())
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Input(format!("invalid value `{value}` for key `{key}`"))
}

/// Parse a model config, returning it together with the category names.
pub fn model_from_kv(reader: &mut KvReader) -> Result<(ModelConfig, Vec<String>)> {
    let defaults = ModelConfig::default();
    let cfg = ModelConfig {
        categories: reader.usize_or("categories", defaults.categories)?,
        height: reader.usize_or("height", defaults.height)?,
        width: reader.usize_or("width", defaults.width)?,
        enable_fa: reader.bool_or("enable_fa", defaults.enable_fa)?,
        enable_dh: reader.bool_or("enable_dh", defaults.enable_dh)?,
        reversed_order: reader.bool_or("reversed_order", defaults.reversed_order)?,
        backbone_width: reader.usize_or("backbone_width", defaults.backbone_width)?,
        upsample: match reader.take("upsample").as_deref() {
            None | Some("bilinear") => UpsampleMode::Bilinear,
            Some("transposed") => UpsampleMode::Transposed,
            Some(v) => return Err(bad("upsample", v)),
        },
    };
    cfg.validate()?;
    let names = match reader.take("category_names") {
        Some(csv) => {
            let names: Vec<String> = csv.split(',').map(|s| s.trim().to_string()).collect();
            if names.len() != cfg.categories {
                return Err(Error::Input(format!(
                    "category_names lists {} names but categories = {}",
                    names.len(),
                    cfg.categories
                )));
            }
            names
        }
        None => default_category_names(cfg.categories),
    };
    Ok((cfg, names))
}

pub fn default_category_names(count: usize) -> Vec<String> {
    (0..count)
        .map(|i| {
            DEFAULT_CATEGORY_NAMES
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("Category{i}"))
        })
        .collect()
}

pub fn model_to_kv(cfg: &ModelConfig, category_names: &[String]) -> String {
    let upsample = match cfg.upsample {
        UpsampleMode::Bilinear => "bilinear",
        UpsampleMode::Transposed => "transposed",
    };
    format!(
        "categories = {}\nheight = {}\nwidth = {}\nenable_fa = {}\nenable_dh = {}\nreversed_order = {}\nbackbone_width = {}\nupsample = {}\ncategory_names = {}\n",
        cfg.categories,
        cfg.height,
        cfg.width,
        cfg.enable_fa,
        cfg.enable_dh,
        cfg.reversed_order,
        cfg.backbone_width,
        upsample,
        category_names.join(",")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_model_keys_with_defaults() {
        let text = "# comment\ncategories = 1\nheight=64\nwidth = 96\nenable_dh = false\nbackbone_width = 32\n";
        let mut reader = KvReader::from_text(text).unwrap();
        let (cfg, names) = model_from_kv(&mut reader).unwrap();
        reader.finish().unwrap();
        assert_eq!((cfg.categories, cfg.height, cfg.width), (1, 64, 96));
        assert!(cfg.enable_fa && !cfg.enable_dh);
        assert_eq!(names, vec!["Car"]);
    }

    #[test]
    fn roundtrips_through_serialization() {
        let cfg = ModelConfig { categories: 2, height: 96, width: 160, backbone_width: 64, ..Default::default() };
        let names = vec!["Car".to_string(), "Pedestrian".to_string()];
        let text = model_to_kv(&cfg, &names);
        let mut reader = KvReader::from_text(&text).unwrap();
        let (parsed, parsed_names) = model_from_kv(&mut reader).unwrap();
        reader.finish().unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed_names, names);
    }

    #[test]
    fn rejects_malformed_lines_unknown_keys_and_bad_values() {
        assert!(matches!(parse_kv("no equals sign"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_kv("a=1\na=2"), Err(Error::Parse { line: 2, .. })));

        let mut reader = KvReader::from_text("height = sixty\n").unwrap();
        assert!(model_from_kv(&mut reader).is_err());

        let mut reader = KvReader::from_text("categories = 1\nheight = 64\nwidth = 64\ntypo_key = 3\n").unwrap();
        model_from_kv(&mut reader).unwrap();
        assert!(reader.finish().is_err());
    }
}
