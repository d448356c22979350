//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Command-line overrides are
//! applied on top, and the merged result is written back out as a snapshot.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::embed::EmbedConfig;
use crate::error::{DgrError, Result};
use crate::reader::ReaderConfig;
use crate::trainer::HyperParams;

pub type KvMap = BTreeMap<String, String>;

pub fn parse_kv(text: &str) -> Result<KvMap> {
    let mut map = KvMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            DgrError::config(
                format!("line {}", i + 1),
                format!("expected key = value, found {line:?}"),
            )
        })?;
        let k = k.trim().to_string();
        if map.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(DgrError::config(k, format!("set twice (line {})", i + 1)));
        }
    }
    Ok(map)
}

pub fn format_kv(map: &KvMap) -> String {
    map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn read_kv(path: &Path) -> Result<KvMap> {
    parse_kv(&fs::read_to_string(path).map_err(|e| DgrError::io(path, e))?)
}

/// Consumes keys from a map, tracking which were used.
pub struct KvReader {
    map: KvMap,
}

impl KvReader {
    pub fn new(map: KvMap) -> Self {
        KvReader { map }
    }

    pub fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.map.remove(key) {
            Some(v) => v
                .parse()
                .map_err(|e| DgrError::config(key, format!("cannot parse {v:?}: {e}"))),
            None => Ok(default),
        }
    }

    pub fn take_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.map.remove(key).filter(|v| !v.is_empty() && v != "none") {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| DgrError::config(key, format!("cannot parse {v:?}: {e}"))),
            None => Ok(None),
        }
    }

    /// Fails on the first key nobody asked for.
    pub fn finish(self) -> Result<()> {
        match self.map.into_keys().next() {
            Some(k) => Err(DgrError::config(k, "unknown key")),
            None => Ok(()),
        }
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_else(|| "none".into())
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub reader: ReaderConfig,
    pub embed: EmbedConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            reader: ReaderConfig::default(),
            embed: EmbedConfig::default(),
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for finite-difference checks and quick tests.
    pub fn tiny(reader: ReaderConfig) -> Self {
        ModelConfig {
            reader: ReaderConfig { hidden: 8, ..reader },
            embed: EmbedConfig {
                word_dim: 5,
                char_dim: 3,
                char_hidden: 3,
                char_out: 6,
            },
            init_seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.reader.validate()?;
        self.embed.validate()
    }

    pub(crate) fn read(r: &mut KvReader) -> Result<Self> {
        let d = ModelConfig::default();
        let mut reader = match r.take_opt::<String>("preset")? {
            Some(p) => ReaderConfig::preset(&p)?,
            None => d.reader,
        };
        reader.hops = r.take("hops", reader.hops)?;
        reader.flag_a = r.take("flag_a", reader.flag_a)?;
        reader.flag_b = r.take("flag_b", reader.flag_b)?;
        reader.flag_c = r.take("flag_c", reader.flag_c)?;
        reader.qe_comm = r.take("qe_comm", reader.qe_comm)?;
        reader.hidden = r.take("hidden", reader.hidden)?;
        let embed = EmbedConfig {
            word_dim: r.take("word_dim", d.embed.word_dim)?,
            char_dim: r.take("char_dim", d.embed.char_dim)?,
            char_hidden: r.take("char_hidden", d.embed.char_hidden)?,
            char_out: r.take("char_out", d.embed.char_out)?,
        };
        let c = ModelConfig {
            reader,
            embed,
            init_seed: r.take("init_seed", d.init_seed)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub(crate) fn write(&self, map: &mut KvMap) {
        let r = &self.reader;
        let e = &self.embed;
        for (k, v) in [
            ("hops", r.hops.to_string()),
            ("flag_a", r.flag_a.to_string()),
            ("flag_b", r.flag_b.to_string()),
            ("flag_c", r.flag_c.to_string()),
            ("qe_comm", r.qe_comm.to_string()),
            ("hidden", r.hidden.to_string()),
            ("word_dim", e.word_dim.to_string()),
            ("char_dim", e.char_dim.to_string()),
            ("char_hidden", e.char_hidden.to_string()),
            ("char_out", e.char_out.to_string()),
            ("init_seed", self.init_seed.to_string()),
        ] {
            map.insert(k.into(), v);
        }
    }

    pub fn from_kv(map: KvMap) -> Result<Self> {
        let mut r = KvReader::new(map);
        let c = Self::read(&mut r)?;
        r.finish()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        self.write(&mut m);
        m
    }
}

/// Source file format of a split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Auto,
    Cbt,
    Jsonl,
}

impl FromStr for DataFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(DataFormat::Auto),
            "cbt" => Ok(DataFormat::Cbt),
            "jsonl" => Ok(DataFormat::Jsonl),
            _ => Err(format!("expected auto, cbt or jsonl, got {s:?}")),
        }
    }
}

impl Display for DataFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataFormat::Auto => "auto",
            DataFormat::Cbt => "cbt",
            DataFormat::Jsonl => "jsonl",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub format: DataFormat,
    pub vectors: Option<PathBuf>,
    pub min_count: usize,
    pub model: ModelConfig,
    pub hp: HyperParams,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: None,
            dev: None,
            test: None,
            format: DataFormat::Auto,
            vectors: None,
            min_count: 1,
            model: ModelConfig::default(),
            hp: HyperParams::default(),
            out_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn from_kv(map: KvMap) -> Result<Self> {
        let d = RunConfig::default();
        let mut r = KvReader::new(map);
        let cfg = RunConfig {
            train: r.take_opt("train")?,
            dev: r.take_opt("dev")?,
            test: r.take_opt("test")?,
            format: r.take("format", d.format)?,
            vectors: r.take_opt("vectors")?,
            min_count: r.take("min_count", d.min_count)?,
            model: ModelConfig::read(&mut r)?,
            hp: HyperParams::read(&mut r)?,
            out_dir: r.take("out_dir", d.out_dir)?,
        };
        r.finish()?;
        if cfg.min_count == 0 {
            return Err(DgrError::config("min_count", "must be at least 1"));
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("train".into(), opt(&self.train.as_ref().map(|p| p.display())));
        m.insert("dev".into(), opt(&self.dev.as_ref().map(|p| p.display())));
        m.insert("test".into(), opt(&self.test.as_ref().map(|p| p.display())));
        m.insert("format".into(), self.format.to_string());
        m.insert("vectors".into(), opt(&self.vectors.as_ref().map(|p| p.display())));
        m.insert("min_count".into(), self.min_count.to_string());
        self.model.write(&mut m);
        self.hp.write(&mut m);
        m.insert("out_dir".into(), self.out_dir.display().to_string());
        m
    }

    /// Loads an optional file and applies `overrides` on top.
    pub fn resolve(file: Option<&Path>, overrides: KvMap) -> Result<Self> {
        let mut map = match file {
            Some(p) => read_kv(p)?,
            None => KvMap::new(),
        };
        // a preset override should not be shadowed by explicit flags from the file
        if overrides.contains_key("preset") {
            for k in ["flag_a", "flag_b", "flag_c"] {
                map.remove(k);
            }
        }
        map.extend(overrides);
        Self::from_kv(map)
    }

    pub fn snapshot(&self) -> String {
        format_kv(&self.to_kv())
    }
}

pub(crate) fn write_opt<T: ToString>(map: &mut KvMap, key: &str, v: &Option<T>) {
    map.insert(key.into(), opt(v));
}
