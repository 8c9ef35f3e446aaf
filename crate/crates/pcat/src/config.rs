//! Flat `key=value` config text: zero-dependency parsing, diffable files.
//!
//! One format serves the config files taken by the CLI (flags override file
//! values) and the config block embedded in checkpoints.

use std::collections::BTreeMap;

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::network::{ModelConfig, StageConfig, Task};
use crate::tokenizer::ScaleConfig;

/// Parse `key=value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_kv(text: &str, path: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::TextParse {
                path: path.to_string(),
                line: lineno + 1,
                msg: format!("expected key=value, got `{line}`"),
            });
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub struct KvReader<'a> {
    map: &'a BTreeMap<String, String>,
    path: &'a str,
}

impl<'a> KvReader<'a> {
    pub fn new(map: &'a BTreeMap<String, String>, path: &'a str) -> Self {
        KvReader { map, path }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn parse_err(&self, key: &str, val: &str, what: &str) -> Error {
        Error::TextParse {
            path: self.path.to_string(),
            line: 0,
            msg: format!("key `{key}`: cannot parse `{val}` as {what}"),
        }
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.parse_err(key, v, "integer")),
        }
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.parse_err(key, v, "integer")),
        }
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.parse_err(key, v, "number")),
        }
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(self.parse_err(key, other, "bool")),
            },
        }
    }

    pub fn usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| self.parse_err(key, v, "integer list"))
                })
                .collect(),
        }
    }

    pub fn f64_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| self.parse_err(key, v, "number list"))
                })
                .collect(),
        }
    }
}

fn join<I: std::fmt::Display>(vals: impl IntoIterator<Item = I>) -> String {
    vals.into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Serialize a model config as key=value text.
pub fn model_to_kv<T: Float>(cfg: &ModelConfig<T>) -> String {
    let st0 = &cfg.stages[0];
    let mut out = String::new();
    let mut push = |k: &str, v: String| {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    };
    push("task", cfg.task.as_str().to_string());
    push("classes", cfg.num_classes.to_string());
    push("in_feat_dim", cfg.in_feat_dim.to_string());
    push("seed", cfg.seed.to_string());
    push("tokens", join(cfg.stages.iter().map(|s| s.tokens)));
    push("lau_repeats", st0.lau_repeats.to_string());
    push("heads", st0.attn.heads.to_string());
    push("d_model", st0.attn.d_model.to_string());
    push("d_ff", st0.attn.d_ff.to_string());
    push(
        "k_neighbors",
        join(cfg.stages.iter().map(|s| s.attn.k_neighbors)),
    );
    push("pre_norm", st0.attn.pre_norm.to_string());
    push("ks", join(st0.scale.ks.iter()));
    push(
        "radii",
        join(cfg.stages.iter().map(|s| s.scale.radius.as_f64())),
    );
    push("out_dim_per_scale", st0.scale.out_dim_per_scale.to_string());
    push("head_hidden", cfg.head_hidden.to_string());
    push("decoder_dim", cfg.decoder_dim.to_string());
    push("interp_k", cfg.interp_k.to_string());
    push("use_lau", cfg.use_lau.to_string());
    push("use_gau", cfg.use_gau.to_string());
    out
}

/// Build a model config from key=value text; missing keys fall back to the
/// defaults of [`ModelConfig::default_for`].
pub fn model_from_kv<T: Float>(text: &str, path: &str) -> Result<ModelConfig<T>> {
    let map = parse_kv(text, path)?;
    model_from_map(&map, path)
}

pub fn model_from_map<T: Float>(
    map: &BTreeMap<String, String>,
    path: &str,
) -> Result<ModelConfig<T>> {
    let r = KvReader::new(map, path);
    let task: Task = match r.raw("task") {
        None => Task::Classification,
        Some(s) => s.parse()?,
    };
    let num_classes = r.usize("classes", 3)?;
    let defaults = ModelConfig::<T>::default_for(task, num_classes);
    let d0 = &defaults.stages[0];

    let tokens = r.usize_list(
        "tokens",
        &defaults.stages.iter().map(|s| s.tokens).collect::<Vec<_>>(),
    )?;
    let lau_repeats = r.usize("lau_repeats", d0.lau_repeats)?;
    let heads = r.usize("heads", d0.attn.heads)?;
    let d_model = r.usize("d_model", d0.attn.d_model)?;
    let d_ff = r.usize("d_ff", d0.attn.d_ff)?;
    let pre_norm = r.bool("pre_norm", d0.attn.pre_norm)?;
    let ks = r.usize_list("ks", &d0.scale.ks)?;
    let out_dim = r.usize("out_dim_per_scale", if ks.is_empty() { 0 } else { d_model / ks.len().max(1) })?;

    // radii: one value doubles per stage; a list pins every stage
    let base_radius = defaults.stages[0].scale.radius.as_f64();
    let mut radii = r.f64_list("radii", &[base_radius])?;
    if radii.len() == 1 && tokens.len() > 1 {
        let r0 = radii[0];
        radii = (0..tokens.len()).map(|i| r0 * f64::powi(2.0, i as i32)).collect();
    }
    if radii.len() != tokens.len() {
        return Err(Error::TextParse {
            path: path.to_string(),
            line: 0,
            msg: format!(
                "radii has {} entries for {} stages",
                radii.len(),
                tokens.len()
            ),
        });
    }

    // per-stage neighbor counts: single value clamps to the stage's tokens
    let k_list = r.usize_list("k_neighbors", &[d0.attn.k_neighbors])?;
    let k_of = |stage: usize, m: usize| -> usize {
        let base = if k_list.len() == 1 {
            k_list[0]
        } else {
            k_list[stage.min(k_list.len() - 1)]
        };
        base.min(m)
    };

    let stages = tokens
        .iter()
        .enumerate()
        .map(|(s, &m)| StageConfig {
            tokens: m,
            lau_repeats,
            scale: ScaleConfig {
                ks: ks.clone(),
                radius: T::of(radii[s]),
                centroid_count: m,
                out_dim_per_scale: out_dim,
            },
            attn: AttentionConfig {
                heads,
                d_model,
                d_ff,
                k_neighbors: k_of(s, m),
                pre_norm,
            },
        })
        .collect();

    Ok(ModelConfig {
        stages,
        task,
        num_classes,
        in_feat_dim: r.usize("in_feat_dim", 0)?,
        head_hidden: r.usize("head_hidden", defaults.head_hidden)?,
        decoder_dim: r.usize("decoder_dim", defaults.decoder_dim)?,
        interp_k: r.usize("interp_k", defaults.interp_k)?,
        use_lau: r.bool("use_lau", true)?,
        use_gau: r.bool("use_gau", true)?,
        seed: r.u64("seed", 0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_kv_basics_and_errors() {
        let map = parse_kv("# comment\n\na=1\n b = two \n", "t.cfg").unwrap();
        assert_eq!(map.get("a").unwrap(), "1");
        assert_eq!(map.get("b").unwrap(), "two");
        let err = parse_kv("a=1\nbroken line\n", "t.cfg").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn model_config_roundtrips_through_kv() {
        let cfg = ModelConfig::<f64>::default_for(Task::Segmentation, 2);
        let text = model_to_kv(&cfg);
        let back: ModelConfig<f64> = model_from_kv(&text, "mem").unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn single_radius_doubles_per_stage() {
        let text = "tokens=64,16,4\nradii=0.1\n";
        let cfg: ModelConfig<f64> = model_from_kv(text, "mem").unwrap();
        let radii: Vec<f64> = cfg.stages.iter().map(|s| s.scale.radius).collect();
        assert_eq!(radii, vec![0.1, 0.2, 0.4]);
    }

    #[test]
    fn k_neighbors_clamps_to_stage_tokens() {
        let text = "tokens=32,4\n";
        let cfg: ModelConfig<f64> = model_from_kv(text, "mem").unwrap();
        assert_eq!(cfg.stages[0].attn.k_neighbors, 16);
        assert_eq!(cfg.stages[1].attn.k_neighbors, 4);
    }
}
