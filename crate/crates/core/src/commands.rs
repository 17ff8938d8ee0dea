//! Command implementations behind the `mvpr` binary. Each command reads and
//! writes files only and returns a short summary for the terminal.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::clusterer::{heading_order, reassignment_diff, ClusterState};
use crate::config::RunConfig;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::persist::{
    load_checkpoint, load_db, load_snapshot, metrics_text, save_checkpoint, save_db, snapshot_text, write_new,
};
use crate::retrieval::{interclass_distance_report, occlusion_eval, recall_at_k, DbRecord, DescriptorDB, Query};
use crate::synthworld::{
    apply_truth, generate_world, load_manifest, load_truth, render_database, render_queries, sidecar_path, write_manifest,
    write_truth, GeoImage, ImageId, Truth,
};
use crate::trainer::{embed, initialize, train_epoch, Dataset, TrainState};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const REASSIGN_FILE: &str = "reassign.tsv";
pub const TRAIN_MANIFEST: &str = "train.manifest";
pub const TRAIN_TRUTH: &str = "train.truth";
pub const QUERY_MANIFEST: &str = "queries.manifest";
pub const QUERY_TRUTH: &str = "queries.truth";

pub fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("checkpoint_epoch_{epoch}.ckpt"))
}

pub fn snapshot_path(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("clusters_epoch_{epoch}.txt"))
}

fn refuse_existing(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::Exists(p.clone())),
        None => Ok(()),
    }
}

fn write_text(path: &Path, text: &str, force: bool) -> Result<()> {
    write_new(path, text.as_bytes(), force)
}

/// Generates a synthetic world and writes database and query manifests,
/// token sidecars, ground-truth files and the effective config into `out`.
pub fn cmd_synth_gen(cfg: &RunConfig, out: &Path, force: bool) -> Result<String> {
    cfg.validate()?;
    let train_m = out.join(TRAIN_MANIFEST);
    let query_m = out.join(QUERY_MANIFEST);
    let outputs = [
        train_m.clone(),
        sidecar_path(&train_m),
        out.join(TRAIN_TRUTH),
        query_m.clone(),
        sidecar_path(&query_m),
        out.join(QUERY_TRUTH),
        out.join(CONFIG_FILE),
    ];
    refuse_existing(&outputs, force)?;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("create {}", out.display()), e))?;

    let world = generate_world(&cfg.world)?;
    let db = render_database(&world, &cfg.render)?;
    let queries = render_queries(&world, &cfg.render)?;
    write_manifest(&train_m, &db)?;
    write_truth(&out.join(TRAIN_TRUTH), &db)?;
    write_manifest(&query_m, &queries)?;
    write_truth(&out.join(QUERY_TRUTH), &queries)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text(), true)?;
    info!("generated {} places", world.places.len());
    Ok(format!(
        "wrote {} database images and {} queries over {} places to {}\n",
        db.len(),
        queries.len(),
        world.places.len(),
        out.display()
    ))
}

/// Loads a manifest and, when given, its ground-truth file.
pub fn load_images(manifest: &Path, truth: Option<&Path>) -> Result<Vec<GeoImage>> {
    let mut images = load_manifest(manifest)?;
    if let Some(t) = truth {
        apply_truth(t, &mut images)?;
    }
    Ok(images)
}

/// Where `cmd_train` starts from.
pub enum TrainStart<'a> {
    Fresh,
    Resume(&'a Path),
}

/// Which epochs `cmd_train` runs.
pub struct TrainPlan<'a> {
    pub start: TrainStart<'a>,
    /// Stop after this epoch instead of `epochs`; the learning-rate schedule
    /// still spans `epochs`, so a later resume continues the same run.
    pub until: Option<usize>,
}

/// Trains on `manifest` for `cfg.train.epochs` epochs, writing after every
/// epoch a checkpoint, a cluster snapshot, the metrics file and the moved
/// images. A resumed run keeps the checkpoint's state and continues from its
/// epoch; `cfg` is taken as given.
pub fn cmd_train(
    cfg: &RunConfig,
    manifest: &Path,
    truth: Option<&Path>,
    out: &Path,
    plan: TrainPlan,
    force: bool,
) -> Result<String> {
    cfg.validate()?;
    let last_epoch = plan.until.unwrap_or(cfg.train.epochs).min(cfg.train.epochs);
    let data = Dataset::new(load_images(manifest, truth)?, cfg.train.cell_size)?;
    let (mut state, resumed) = match plan.start {
        TrainStart::Fresh => (initialize(&data, &cfg.train)?, false),
        TrainStart::Resume(path) => (load_checkpoint(path)?.1, true),
    };
    if state.epoch > last_epoch {
        return Err(Error::Parameter(format!(
            "checkpoint is at epoch {} but training stops at {last_epoch}",
            state.epoch
        )));
    }

    let mut planned: Vec<PathBuf> = (state.epoch + 1..=last_epoch)
        .flat_map(|e| [checkpoint_path(out, e), snapshot_path(out, e)])
        .collect();
    if !resumed {
        planned.extend([
            out.join(METRICS_FILE),
            out.join(REASSIGN_FILE),
            out.join(CONFIG_FILE),
            snapshot_path(out, 0),
        ]);
    }
    refuse_existing(&planned, force)?;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("create {}", out.display()), e))?;

    let reassign_path = out.join(REASSIGN_FILE);
    if !resumed {
        write_text(&out.join(CONFIG_FILE), &cfg.to_text(), true)?;
        write_text(&snapshot_path(out, 0), &snapshot_text(&state.clusters), true)?;
        write_text(&reassign_path, "epoch\timage\tcell\tprev_h\tnext_h\n", true)?;
    }
    let mut reassign = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&reassign_path)
        .map_err(|e| Error::io(format!("open {}", reassign_path.display()), e))?;

    while state.epoch < last_epoch {
        let report = train_epoch(&mut state, &data, &cfg.train)?;
        for w in &report.warnings {
            warn!("{w}");
        }
        let m = &report.metrics;
        info!(
            "epoch {} loss {:.4} purity {} reassigned {:.4}",
            m.epoch,
            m.mean_loss,
            m.purity.map_or("n/a".into(), |p| format!("{p:.4}")),
            m.reassignment
        );
        if let Some(r) = &report.reassignment {
            let lines: String = r
                .moved
                .iter()
                .map(|(id, cell, a, b)| format!("{}\t{id}\t{cell}\t{a}\t{b}\n", m.epoch))
                .collect();
            reassign
                .write_all(lines.as_bytes())
                .map_err(|e| Error::io(format!("write {}", reassign_path.display()), e))?;
        }
        save_checkpoint(&checkpoint_path(out, state.epoch), cfg, &state, true)?;
        write_text(&snapshot_path(out, state.epoch), &snapshot_text(&state.clusters), true)?;
        write_text(&out.join(METRICS_FILE), &metrics_text(&state.history), true)?;
    }
    let last = state.history.last();
    Ok(format!(
        "trained to epoch {}; final mean loss {}; outputs in {}\n",
        state.epoch,
        last.map_or("n/a".into(), |m| m.mean_loss.to_string()),
        out.display()
    ))
}

/// Embeds every image into a descriptor database.
pub fn build_db(encoder: &EncoderParams, images: &[GeoImage]) -> Result<DescriptorDB> {
    let descriptors = embed(encoder, images)?;
    let records = images
        .iter()
        .zip(descriptors)
        .map(|(img, descriptor)| DbRecord { id: img.id, position: img.position, descriptor })
        .collect();
    DescriptorDB::new(encoder.config.desc_dim, records)
}

pub fn cmd_embed(checkpoint: &Path, manifest: &Path, out_db: &Path, force: bool) -> Result<String> {
    refuse_existing(&[out_db.to_path_buf()], force)?;
    let (_, state): (RunConfig, TrainState) = load_checkpoint(checkpoint)?;
    let images = load_manifest(manifest)?;
    let db = build_db(&state.encoder, &images)?;
    save_db(out_db, &db, true)?;
    Ok(format!("wrote {} descriptors of dimension {} to {}\n", db.len(), db.dim(), out_db.display()))
}

/// Queries are the records of `queries_db`; their occlusion flags come from
/// an optional truth file. The standard report is followed by the
/// occluded-only report when any query is occluded.
pub fn cmd_eval(
    db: &Path,
    queries_db: &Path,
    truth: Option<&Path>,
    ks: &[usize],
    radius: f64,
    out: Option<&Path>,
    force: bool,
) -> Result<String> {
    if let Some(o) = out {
        refuse_existing(&[o.to_path_buf()], force)?;
    }
    let db = load_db(db)?;
    let qdb = load_db(queries_db)?;
    let truth: HashMap<ImageId, Truth> = match truth {
        Some(t) => load_truth(t)?,
        None => HashMap::new(),
    };
    let queries: Vec<Query> = qdb
        .records()
        .iter()
        .map(|r| Query {
            id: r.id,
            descriptor: r.descriptor.clone(),
            position: r.position,
            occluded: truth.get(&r.id).is_some_and(|t| t.occluded),
        })
        .collect();
    let mut text = recall_at_k(&db, &queries, ks, radius)?.render();
    if queries.iter().any(|q| q.occluded) {
        text.push('\n');
        text.push_str(&occlusion_eval(&db, &queries, ks, radius)?.render());
    }
    if let Some(o) = out {
        write_text(o, &text, true)?;
    }
    Ok(text)
}

/// Inter-class descriptor distances per cell under the labels of a cluster
/// snapshot. With a manifest, classes are ordered by mean heading.
pub fn cmd_analyze_distances(db: &Path, snapshot: &Path, manifest: Option<&Path>) -> Result<String> {
    let db = load_db(db)?;
    let state = load_snapshot(snapshot)?;
    let labels = state.labels();
    let order = match manifest {
        Some(m) => {
            let headings: HashMap<ImageId, f64> = load_manifest(m)?.into_iter().map(|i| (i.id, i.heading)).collect();
            heading_order(&labels, &headings)
        }
        None => BTreeMap::new(),
    };
    Ok(interclass_distance_report(&db, &labels, &order)?.render())
}

/// Images that changed cluster between two snapshots, after matching
/// cluster ids by overlap.
pub fn cmd_analyze_reassign(before: &Path, after: &Path) -> Result<String> {
    let prev: ClusterState = load_snapshot(before)?;
    let next: ClusterState = load_snapshot(after)?;
    let report = reassignment_diff(&prev, &next)?;
    let mut out = String::from("image\tcell\tprev_h\tnext_h\n");
    for (id, cell, a, b) in &report.moved {
        out.push_str(&format!("{id}\t{cell}\t{a}\t{b}\n"));
    }
    out.push_str("# cell\tfraction\n");
    for (cell, f) in &report.per_cell {
        out.push_str(&format!("# {cell}\t{f}\n"));
    }
    out.push_str(&format!("# total\t{}\t{}\n", report.moved.len(), report.fraction()));
    Ok(out)
}
