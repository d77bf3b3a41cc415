//! Flat `key=value` run configuration shared by every command.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::cells::CellsConfig;
use crate::eval::CropPolicy;
use crate::model::{parse_on_off, Branches, ModelConfig, SegEncoding};
use crate::synth::{Dataset, WorldSpec};
use crate::train::{AugmentConfig, LossWeights, OptimConfig, TrainConfig};
use crate::{Error, Result};

/// Every accepted key. All of them are required.
pub const KEYS: &[&str] = &[
    "seed",
    "world.seed",
    "world.n_locations",
    "world.n_clusters",
    "world.samples_per_location",
    "world.val_count",
    "world.test_count",
    "world.image_size",
    "world.n_seg_classes",
    "world.n_scene_classes",
    "world.cluster_radius_km",
    "world.jitter_brightness",
    "world.jitter_contrast",
    "world.shift_strength",
    "cells.min_images",
    "cells.max_coarse",
    "cells.max_middle",
    "cells.max_fine",
    "cells.max_depth",
    "model.patch_size",
    "model.embed_dim",
    "model.depth",
    "model.heads",
    "model.ffn_dim",
    "model.branches",
    "model.mff",
    "model.attentive_fusion",
    "model.seg_encoding",
    "model.seg_embed_dim",
    "model.scorer_hidden",
    "model.middle_hidden",
    "model.fine_hidden",
    "model.init_std",
    "train.alpha",
    "train.beta",
    "train.gamma",
    "train.base_lr",
    "train.momentum",
    "train.second_moment",
    "train.eps",
    "train.weight_decay",
    "train.epochs",
    "train.warmup_epochs",
    "train.batch_size",
    "augment.flip_prob",
    "augment.jitter_prob",
    "augment.brightness",
    "augment.contrast",
    "augment.saturation",
    "augment.hue",
    "eval.thresholds_km",
    "eval.crop",
];

/// Model settings that do not depend on the data or the cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub branches: Branches,
    pub mff: bool,
    pub attentive_fusion: bool,
    pub seg_encoding: SegEncoding,
    pub seg_embed_dim: usize,
    pub scorer_hidden: usize,
    pub middle_hidden: usize,
    pub fine_hidden: usize,
    pub init_std: f64,
}

impl ModelSettings {
    /// Completes the settings with image size and label spaces.
    pub fn resolve(&self, data: &Dataset, cell_counts: [usize; 3]) -> Result<ModelConfig> {
        if data.height != data.width {
            return Err(Error::Validation(format!(
                "images must be square, got {}×{}",
                data.height, data.width
            )));
        }
        let [c, m, f] = cell_counts;
        let cfg = ModelConfig {
            image_size: data.height,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            branches: self.branches,
            mff: self.mff,
            attentive_fusion: self.attentive_fusion,
            seg_encoding: self.seg_encoding,
            seg_embed_dim: self.seg_embed_dim,
            n_seg_classes: data.n_seg_classes,
            scorer_hidden: self.scorer_hidden,
            middle_hidden: self.middle_hidden,
            fine_hidden: self.fine_hidden,
            classes: [c, m, f, data.n_scene_classes],
            init_std: self.init_std,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub thresholds_km: Vec<f64>,
    pub crop: CropPolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldSpec,
    pub cells: CellsConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

struct Entries {
    map: BTreeMap<&'static str, (usize, String)>,
}

impl Entries {
    fn get<T: FromStr>(&self, key: &'static str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.with(key, |v| v.parse::<T>().map_err(|e| e.to_string()))
    }

    fn with<T>(
        &self,
        key: &'static str,
        parse: impl FnOnce(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        let (line, raw) = self
            .map
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))?;
        parse(raw).map_err(|e| Error::ConfigLine {
            line: *line,
            msg: format!("bad value for `{key}`: {e}"),
        })
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::ConfigLine {
                line,
                msg: format!("expected key=value, got {content:?}"),
            })?;
            let k = k.trim();
            let key = KEYS
                .iter()
                .find(|&&known| known == k)
                .ok_or_else(|| Error::ConfigLine {
                    line,
                    msg: format!("unknown key `{k}`"),
                })?;
            if let Some((first, _)) = map.insert(*key, (line, v.trim().to_string())) {
                return Err(Error::ConfigLine {
                    line,
                    msg: format!("duplicate key `{k}` (first set on line {first})"),
                });
            }
        }
        let e = Entries { map };
        let on_off = |v: &str| parse_on_off(v);

        let seed = e.get("seed")?;
        let world = WorldSpec {
            seed: e.get("world.seed")?,
            n_locations: e.get("world.n_locations")?,
            n_clusters: e.get("world.n_clusters")?,
            samples_per_location: e.get("world.samples_per_location")?,
            val_count: e.get("world.val_count")?,
            test_count: e.get("world.test_count")?,
            image_size: e.get("world.image_size")?,
            n_seg_classes: e.get("world.n_seg_classes")?,
            n_scene_classes: e.get("world.n_scene_classes")?,
            cluster_radius_km: e.get("world.cluster_radius_km")?,
            jitter_brightness: e.get("world.jitter_brightness")?,
            jitter_contrast: e.get("world.jitter_contrast")?,
            shift_strength: e.get("world.shift_strength")?,
        };
        let cells = CellsConfig {
            min_images: e.get("cells.min_images")?,
            max_coarse: e.get("cells.max_coarse")?,
            max_middle: e.get("cells.max_middle")?,
            max_fine: e.get("cells.max_fine")?,
            max_depth: e.get("cells.max_depth")?,
        };
        let model = ModelSettings {
            patch_size: e.get("model.patch_size")?,
            embed_dim: e.get("model.embed_dim")?,
            depth: e.get("model.depth")?,
            heads: e.get("model.heads")?,
            ffn_dim: e.get("model.ffn_dim")?,
            branches: e.get("model.branches")?,
            mff: e.with("model.mff", on_off)?,
            attentive_fusion: e.with("model.attentive_fusion", on_off)?,
            seg_encoding: e.get("model.seg_encoding")?,
            seg_embed_dim: e.get("model.seg_embed_dim")?,
            scorer_hidden: e.get("model.scorer_hidden")?,
            middle_hidden: e.get("model.middle_hidden")?,
            fine_hidden: e.get("model.fine_hidden")?,
            init_std: e.get("model.init_std")?,
        };
        let train = TrainConfig {
            seed,
            optim: OptimConfig {
                base_lr: e.get("train.base_lr")?,
                momentum: e.get("train.momentum")?,
                second_moment: e.get("train.second_moment")?,
                eps: e.get("train.eps")?,
                weight_decay: e.get("train.weight_decay")?,
                epochs: e.get("train.epochs")?,
                warmup_epochs: e.get("train.warmup_epochs")?,
                batch_size: e.get("train.batch_size")?,
            },
            loss: LossWeights {
                alpha: e.get("train.alpha")?,
                beta: e.get("train.beta")?,
                gamma: e.get("train.gamma")?,
            },
            augment: AugmentConfig {
                flip_prob: e.get("augment.flip_prob")?,
                jitter_prob: e.get("augment.jitter_prob")?,
                brightness: e.get("augment.brightness")?,
                contrast: e.get("augment.contrast")?,
                saturation: e.get("augment.saturation")?,
                hue: e.get("augment.hue")?,
            },
        };
        let eval = EvalSettings {
            thresholds_km: e.with("eval.thresholds_km", |v| {
                let t: Vec<f64> = v
                    .split(',')
                    .map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?;
                if t.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
                    return Err("thresholds must be positive".into());
                }
                if t.windows(2).any(|w| w[0] >= w[1]) {
                    return Err("thresholds must be strictly increasing".into());
                }
                Ok(t)
            })?,
            crop: e.get("eval.crop")?,
        };
        let cfg = RunConfig {
            seed,
            world,
            cells,
            model,
            train,
            eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Cross-module checks that need no data.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.cells.validate()?;
        self.train.validate()?;
        let m = &self.model;
        let cfg = ModelConfig {
            image_size: self.world.image_size,
            patch_size: m.patch_size,
            embed_dim: m.embed_dim,
            depth: m.depth,
            heads: m.heads,
            ffn_dim: m.ffn_dim,
            branches: m.branches,
            mff: m.mff,
            attentive_fusion: m.attentive_fusion,
            seg_encoding: m.seg_encoding,
            seg_embed_dim: m.seg_embed_dim,
            n_seg_classes: self.world.n_seg_classes,
            scorer_hidden: m.scorer_hidden,
            middle_hidden: m.middle_hidden,
            fine_hidden: m.fine_hidden,
            classes: [1; 4],
            init_std: m.init_std,
        };
        cfg.validate()
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let w = &self.world;
        let c = &self.cells;
        let m = &self.model;
        let o = &self.train.optim;
        let l = &self.train.loss;
        let a = &self.train.augment;
        let onoff = |b: bool| if b { "on" } else { "off" };
        let thresholds: Vec<String> = self
            .eval
            .thresholds_km
            .iter()
            .map(|t| t.to_string())
            .collect();
        let crop = match self.eval.crop {
            CropPolicy::Single => "single",
            CropPolicy::TenCrop => "tencrop",
        };
        let values: Vec<String> = vec![
            self.seed.to_string(),
            w.seed.to_string(),
            w.n_locations.to_string(),
            w.n_clusters.to_string(),
            w.samples_per_location.to_string(),
            w.val_count.to_string(),
            w.test_count.to_string(),
            w.image_size.to_string(),
            w.n_seg_classes.to_string(),
            w.n_scene_classes.to_string(),
            w.cluster_radius_km.to_string(),
            w.jitter_brightness.to_string(),
            w.jitter_contrast.to_string(),
            w.shift_strength.to_string(),
            c.min_images.to_string(),
            c.max_coarse.to_string(),
            c.max_middle.to_string(),
            c.max_fine.to_string(),
            c.max_depth.to_string(),
            m.patch_size.to_string(),
            m.embed_dim.to_string(),
            m.depth.to_string(),
            m.heads.to_string(),
            m.ffn_dim.to_string(),
            m.branches.to_string(),
            onoff(m.mff).into(),
            onoff(m.attentive_fusion).into(),
            m.seg_encoding.to_string(),
            m.seg_embed_dim.to_string(),
            m.scorer_hidden.to_string(),
            m.middle_hidden.to_string(),
            m.fine_hidden.to_string(),
            m.init_std.to_string(),
            l.alpha.to_string(),
            l.beta.to_string(),
            l.gamma.to_string(),
            o.base_lr.to_string(),
            o.momentum.to_string(),
            o.second_moment.to_string(),
            o.eps.to_string(),
            o.weight_decay.to_string(),
            o.epochs.to_string(),
            o.warmup_epochs.to_string(),
            o.batch_size.to_string(),
            a.flip_prob.to_string(),
            a.jitter_prob.to_string(),
            a.brightness.to_string(),
            a.contrast.to_string(),
            a.saturation.to_string(),
            a.hue.to_string(),
            thresholds.join(","),
            crop.into(),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> String {
        let toy = include_str!("../../../configs/toy.cfg");
        RunConfig::parse(toy).unwrap().to_text()
    }

    #[test]
    fn text_round_trip() {
        let text = sample();
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.to_text(), text);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = format!(
            "# header\n\n{}",
            sample()
                .replace("seed=", "seed = ")
                .replacen('\n', "  # trailing\n", 1)
        );
        assert!(RunConfig::parse(&text).is_ok());
    }

    #[test]
    fn unknown_key_names_the_line() {
        let text = format!("{}\n# fine\nmodel.dropout=0.1\n", sample());
        let n = text.lines().count();
        match RunConfig::parse(&text) {
            Err(Error::ConfigLine { line, msg }) => {
                assert_eq!(line, n);
                assert!(msg.contains("model.dropout"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_key_is_named() {
        let text: String = sample()
            .lines()
            .filter(|l| !l.starts_with("world.seed="))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("world.seed"), "{err}");
    }

    #[test]
    fn bad_value_and_duplicate_report_lines() {
        let text = sample().replace("train.epochs=", "train.epochs=x");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(matches!(err, Error::ConfigLine { .. }));
        assert!(err.to_string().contains("train.epochs"));
        let dup = format!("{}seed=3\n", sample());
        assert!(RunConfig::parse(&dup)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
    }

    #[test]
    fn cross_checks_run_before_any_work() {
        let text = sample().replace("model.branches=dual", "model.branches=rgb-only");
        assert!(RunConfig::parse(&text).is_err());
        let text = sample().replace("train.alpha=0.3", "train.alpha=0.9");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn full_profile_carries_the_published_settings() {
        let cfg = RunConfig::parse(include_str!("../../../configs/paper.cfg")).unwrap();
        let o = &cfg.train.optim;
        assert_eq!((o.base_lr, o.momentum, o.weight_decay), (0.1, 0.9, 1e-4));
        assert_eq!((o.epochs, o.warmup_epochs, o.batch_size), (40, 2, 256));
        let m = &cfg.model;
        assert_eq!((m.patch_size, m.embed_dim, m.depth), (16, 768, 12));
        assert_eq!(
            (m.scorer_hidden, m.middle_hidden, m.fine_hidden),
            (8, 3000, 6000)
        );
        assert_eq!(cfg.world.image_size, 224);
        assert_eq!(cfg.world.n_seg_classes, 150);
        assert_eq!(cfg.world.n_scene_classes, 365);
        let c = &cfg.cells;
        assert_eq!(
            (c.min_images, c.max_coarse, c.max_middle, c.max_fine),
            (50, 5000, 2000, 1000)
        );
        let a = &cfg.train.augment;
        assert_eq!((a.flip_prob, a.jitter_prob), (0.5, 0.8));
        assert_eq!(
            (a.brightness, a.contrast, a.saturation, a.hue),
            (0.4, 0.4, 0.4, 0.1)
        );
        assert_eq!(
            cfg.eval.thresholds_km,
            vec![1.0, 25.0, 200.0, 750.0, 2500.0]
        );
    }
}
