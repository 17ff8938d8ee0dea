//! Run configuration: training, synthetic world, and evaluation settings in
//! one `key = value` text file with `#` comments.

use std::path::Path;

use crate::error::{Error, Result};
use crate::synthworld::{RenderConfig, WorldConfig};
use crate::trainer::{LabelMode, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub world: WorldConfig,
    pub render: RenderConfig,
    pub ks: Vec<usize>,
    pub radius: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let world = WorldConfig::default();
        Self {
            train,
            world,
            render: RenderConfig::default(),
            ks: vec![1, 5, 10],
            radius: 25.0,
        }
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parameter(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Parameter(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let w = &self.world;
        let r = &self.render;
        vec![
            ("seed", t.seed.to_string()),
            ("cell_size", t.cell_size.to_string()),
            ("k", t.k.to_string()),
            ("group_count", t.group_count.to_string()),
            ("recluster_fraction", t.recluster_fraction.to_string()),
            ("epochs", t.epochs.to_string()),
            ("iterations_per_epoch", t.iterations_per_epoch.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr_encoder", t.lr_encoder.to_string()),
            ("lr_classifier", t.lr_classifier.to_string()),
            ("gamma", t.gamma.to_string()),
            ("margin", t.margin.to_string()),
            ("label_mode", t.label_mode.to_string()),
            ("kmeans_restarts", t.kmeans_restarts.to_string()),
            ("kmeans_max_iter", t.kmeans_max_iter.to_string()),
            ("d_in", t.encoder.d_in.to_string()),
            ("width", t.encoder.width.to_string()),
            ("desc_dim", t.encoder.desc_dim.to_string()),
            ("train_block", t.encoder.train_block.to_string()),
            ("num_cells", w.num_cells.to_string()),
            ("places_per_cell", w.places_per_cell.to_string()),
            ("anchors", w.groups.to_string()),
            ("tokens", w.tokens.to_string()),
            ("cell_stride", w.cell_stride.to_string()),
            ("start_angles", join(&r.start_angles)),
            ("crop_step", r.crop_step.to_string()),
            ("fov", r.fov.to_string()),
            ("noise_sigma", r.noise_sigma.to_string()),
            ("occlusion_prob", r.occlusion_prob.to_string()),
            ("occlusion_fraction", r.occlusion_fraction.to_string()),
            ("queries_per_place", r.queries_per_place.to_string()),
            ("query_occlusion_prob", r.query_occlusion_prob.to_string()),
            ("query_occlusion_fraction", r.query_occlusion_fraction.to_string()),
            ("ks", join(&self.ks)),
            ("radius", self.radius.to_string()),
        ]
    }

    /// Sets one key. `d_in`, `seed` and `cell_size` are shared between the
    /// world and training sections.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        let w = &mut self.world;
        let r = &mut self.render;
        match key {
            "seed" => {
                t.seed = parse(key, value)?;
                w.seed = t.seed;
            }
            "cell_size" => {
                t.cell_size = parse(key, value)?;
                w.cell_size = t.cell_size;
            }
            "k" => t.k = parse(key, value)?,
            "group_count" => t.group_count = parse(key, value)?,
            "recluster_fraction" => t.recluster_fraction = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "iterations_per_epoch" => t.iterations_per_epoch = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_encoder" => t.lr_encoder = parse(key, value)?,
            "lr_classifier" => t.lr_classifier = parse(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "margin" => t.margin = parse(key, value)?,
            "label_mode" => t.label_mode = value.parse::<LabelMode>()?,
            "kmeans_restarts" => t.kmeans_restarts = parse(key, value)?,
            "kmeans_max_iter" => t.kmeans_max_iter = parse(key, value)?,
            "d_in" => {
                t.encoder.d_in = parse(key, value)?;
                w.d_in = t.encoder.d_in;
            }
            "width" => t.encoder.width = parse(key, value)?,
            "desc_dim" => t.encoder.desc_dim = parse(key, value)?,
            "train_block" => t.encoder.train_block = parse_bool(key, value)?,
            "num_cells" => w.num_cells = parse(key, value)?,
            "places_per_cell" => w.places_per_cell = parse(key, value)?,
            "anchors" => w.groups = parse(key, value)?,
            "tokens" => w.tokens = parse(key, value)?,
            "cell_stride" => w.cell_stride = parse(key, value)?,
            "start_angles" => r.start_angles = parse_list(key, value)?,
            "crop_step" => r.crop_step = parse(key, value)?,
            "fov" => r.fov = parse(key, value)?,
            "noise_sigma" => r.noise_sigma = parse(key, value)?,
            "occlusion_prob" => r.occlusion_prob = parse(key, value)?,
            "occlusion_fraction" => r.occlusion_fraction = parse(key, value)?,
            "queries_per_place" => r.queries_per_place = parse(key, value)?,
            "query_occlusion_prob" => r.query_occlusion_prob = parse(key, value)?,
            "query_occlusion_fraction" => r.query_occlusion_fraction = parse(key, value)?,
            "ks" => self.ks = parse_list(key, value)?,
            "radius" => self.radius = parse(key, value)?,
            other => return Err(Error::Parameter(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read config {}", path.display()), e))?;
        self.apply_text(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("override {pair:?} is not key=value")))?;
        self.set(key.trim(), value)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter(format!("ks must be ascending and >= 1, got {:?}", self.ks)));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Parameter(format!("radius must be > 0, got {}", self.radius)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_byte_identical() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("lr_encoder=0.00123").unwrap();
        cfg.apply_override("start_angles=0,30,45.5").unwrap();
        cfg.apply_override("label_mode=heading").unwrap();
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = RunConfig::from_text("# comment\n\n k = 6 \nseed=9\n").unwrap();
        assert_eq!(cfg.train.k, 6);
        assert_eq!(cfg.world.seed, 9);
        match RunConfig::from_text("k = 3\nbogus = 1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_text("k 3\n").is_err());
        assert!(RunConfig::from_text("k = three\n").is_err());
    }

    #[test]
    fn defaults_match_grid_and_cluster_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.cell_size, 10.0);
        assert_eq!(cfg.train.k, 3);
        assert_eq!(cfg.train.group_count, 8);
        assert_eq!(cfg.train.recluster_fraction, 0.2);
        assert_eq!(cfg.render.crop_step, 60.0);
        assert_eq!(cfg.render.start_angles, vec![0.0, 30.0]);
        assert_eq!(cfg.radius, 25.0);
        assert!(cfg.validate().is_ok());
    }
}
