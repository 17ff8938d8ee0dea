//! On-disk formats: checkpoints, descriptor databases, cluster snapshots and
//! metrics. Binary payloads are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::clusterer::{CellClusters, ClusterState, PlaceLabel};
use crate::config::RunConfig;
use crate::diffcore::{ParamStore, Tensor2};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::geogrid::{CellId, UtmPoint};
use crate::lmcl::ClassifierWeights;
use crate::retrieval::{DbRecord, DescriptorDB};
use crate::synthworld::ImageId;
use crate::trainer::{EpochMetrics, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MVPRCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;
pub const DB_MAGIC: &[u8; 8] = b"MVPRDB01";

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor2) {
        self.u32(t.rows());
        self.u32(t.cols());
        t.data().iter().for_each(|v| self.f64(*v));
    }
    fn cell(&mut self, c: CellId) {
        self.i64(c.e);
        self.i64(c.n);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'a Path) -> Self {
        Self { buf, pos: 0, what }
    }
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.what.to_path_buf(),
            message: message.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| self.err(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn str(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid UTF-8 string"))
    }
    fn tensor(&mut self) -> Result<Tensor2> {
        let (r, c) = (self.u32()?, self.u32()?);
        let n = r.checked_mul(c).ok_or_else(|| self.err("tensor too large"))?;
        if n * 8 > self.buf.len() - self.pos {
            return Err(self.err(format!("tensor {r}x{c} exceeds remaining bytes")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor2::from_vec(r, c, data)
    }
    fn cell(&mut self) -> Result<CellId> {
        Ok(CellId::new(self.i64()?, self.i64()?))
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))
}

/// Writes `bytes` to `path`, refusing to replace an existing file unless
/// `force` is set.
pub fn write_new(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Exists(path.to_path_buf()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("create {}", parent.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

// ------------------------------------------------------------- checkpoint

fn encode_encoder(w: &mut Writer, enc: &EncoderParams) {
    w.u32(enc.store.len());
    for p in enc.store.iter() {
        w.str(&p.name);
        w.u8(u8::from(p.trainable));
        w.tensor(&p.value);
        w.tensor(&p.m);
        w.tensor(&p.v);
    }
    w.u64(enc.store.step());
}

fn decode_encoder(r: &mut Reader, cfg: &RunConfig) -> Result<EncoderParams> {
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?;
        let trainable = r.u8()? != 0;
        let value = r.tensor()?;
        let m = r.tensor()?;
        let v = r.tensor()?;
        if !value.same_shape(&m) || !value.same_shape(&v) {
            return Err(r.err(format!("moments of {name} disagree with its shape")));
        }
        let slot = store.insert(&name, value, trainable)?;
        let p = store.param_mut(slot);
        p.m = m;
        p.v = v;
    }
    store.set_step(r.u64()?);
    EncoderParams::from_store(cfg.train.encoder.clone(), store)
}

fn encode_classifier(w: &mut Writer, c: &ClassifierWeights) {
    w.f64(c.gamma);
    w.f64(c.margin);
    w.u32(c.len());
    for l in c.labels() {
        w.cell(l.cell);
        w.u32(l.h);
    }
    let (m, v, steps) = c.optimizer_state();
    w.tensor(c.rows());
    w.tensor(m);
    w.tensor(v);
    steps.iter().for_each(|s| w.u64(*s));
}

fn decode_classifier(r: &mut Reader) -> Result<ClassifierWeights> {
    let gamma = r.f64()?;
    let margin = r.f64()?;
    let n = r.u32()?;
    let labels = (0..n)
        .map(|_| Ok(PlaceLabel { cell: r.cell()?, h: r.u32()? }))
        .collect::<Result<Vec<_>>>()?;
    let rows = r.tensor()?;
    let m = r.tensor()?;
    let v = r.tensor()?;
    let steps = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    ClassifierWeights::from_parts(labels, rows, m, v, steps, gamma, margin)
}

fn encode_clusters(w: &mut Writer, s: &ClusterState) {
    w.u64(s.epoch as u64);
    w.u32(s.cells.len());
    for (cell, cc) in &s.cells {
        w.cell(*cell);
        w.u32(cc.ids.len());
        cc.ids.iter().for_each(|id| w.u64(id.0));
        cc.assignments.iter().for_each(|a| w.u32(*a));
        w.u32(cc.centroids.len());
        w.u32(cc.centroids.first().map_or(0, Vec::len));
        cc.centroids.iter().flatten().for_each(|v| w.f64(*v));
        w.f64(cc.objective);
    }
}

fn decode_clusters(r: &mut Reader) -> Result<ClusterState> {
    let epoch = r.u64()? as usize;
    let n = r.u32()?;
    let mut cells = BTreeMap::new();
    for _ in 0..n {
        let cell = r.cell()?;
        let count = r.u32()?;
        let ids = (0..count).map(|_| r.u64().map(ImageId)).collect::<Result<Vec<_>>>()?;
        let assignments = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let (k, d) = (r.u32()?, r.u32()?);
        let centroids = (0..k)
            .map(|_| (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        if assignments.iter().any(|&a| a >= k) {
            return Err(r.err(format!("cell {cell} assigns past its {k} clusters")));
        }
        let objective = r.f64()?;
        cells.insert(cell, CellClusters { ids, assignments, centroids, objective });
    }
    Ok(ClusterState { epoch, cells })
}

fn encode_metrics(w: &mut Writer, history: &[EpochMetrics]) {
    w.u32(history.len());
    for m in history {
        w.u64(m.epoch as u64);
        w.f64(m.mean_loss);
        w.u8(u8::from(m.purity.is_some()));
        w.f64(m.purity.unwrap_or(f64::NAN));
        w.f64(m.reassignment);
        w.f64(m.lr);
    }
}

fn decode_metrics(r: &mut Reader) -> Result<Vec<EpochMetrics>> {
    let n = r.u32()?;
    (0..n)
        .map(|_| {
            let epoch = r.u64()? as usize;
            let mean_loss = r.f64()?;
            let has = r.u8()? != 0;
            let p = r.f64()?;
            Ok(EpochMetrics {
                epoch,
                mean_loss,
                purity: has.then_some(p),
                reassignment: r.f64()?,
                lr: r.f64()?,
            })
        })
        .collect()
}

fn section(out: &mut Writer, name: &str, body: Writer) {
    out.str(name);
    out.bytes(&body.buf);
}

/// Serializes the run configuration and the complete training state.
pub fn checkpoint_bytes(cfg: &RunConfig, state: &TrainState) -> Vec<u8> {
    let mut out = Writer::default();
    out.buf.extend_from_slice(CHECKPOINT_MAGIC);
    out.u8(CHECKPOINT_VERSION);

    let mut w = Writer::default();
    w.str(&cfg.to_text());
    section(&mut out, "config", w);

    let mut w = Writer::default();
    encode_encoder(&mut w, &state.encoder);
    section(&mut out, "encoder", w);

    let mut w = Writer::default();
    encode_classifier(&mut w, &state.classifier);
    section(&mut out, "classifier", w);

    let mut w = Writer::default();
    encode_clusters(&mut w, &state.clusters);
    section(&mut out, "clusters", w);

    let mut w = Writer::default();
    w.u32(state.groups.len());
    for g in &state.groups {
        w.u32(g.len());
        g.iter().for_each(|c| w.cell(*c));
    }
    section(&mut out, "groups", w);

    let mut w = Writer::default();
    w.u64(state.epoch as u64);
    w.u64(state.step);
    section(&mut out, "counters", w);

    let mut w = Writer::default();
    encode_metrics(&mut w, &state.history);
    section(&mut out, "metrics", w);
    out.buf
}

pub fn save_checkpoint(path: &Path, cfg: &RunConfig, state: &TrainState, force: bool) -> Result<()> {
    write_new(path, &checkpoint_bytes(cfg, state), force)
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, TrainState)> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, path);
    if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(r.err("missing MVPRCKPT magic"));
    }
    let version = r.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let mut sections: BTreeMap<String, &[u8]> = BTreeMap::new();
    while r.pos < bytes.len() {
        let name = r.str()?;
        let body = r.bytes()?;
        sections.insert(name, body);
    }
    let mut open = |name: &str| -> Result<&[u8]> {
        sections
            .remove(name)
            .ok_or_else(|| Error::Format { path: path.to_path_buf(), message: format!("missing section {name}") })
    };

    let body = open("config")?;
    let mut s = Reader::new(body, path);
    let cfg = RunConfig::from_text(&s.str()?)?;
    s.done()?;

    let body = open("encoder")?;
    let mut s = Reader::new(body, path);
    let encoder = decode_encoder(&mut s, &cfg)?;
    s.done()?;

    let body = open("classifier")?;
    let mut s = Reader::new(body, path);
    let classifier = decode_classifier(&mut s)?;
    s.done()?;

    let body = open("clusters")?;
    let mut s = Reader::new(body, path);
    let clusters = decode_clusters(&mut s)?;
    s.done()?;

    let body = open("groups")?;
    let mut s = Reader::new(body, path);
    let n = s.u32()?;
    let groups = (0..n)
        .map(|_| {
            let k = s.u32()?;
            (0..k).map(|_| s.cell()).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    s.done()?;

    let body = open("counters")?;
    let mut s = Reader::new(body, path);
    let epoch = s.u64()? as usize;
    let step = s.u64()?;
    s.done()?;

    let body = open("metrics")?;
    let mut s = Reader::new(body, path);
    let history = decode_metrics(&mut s)?;
    s.done()?;

    Ok((
        cfg,
        TrainState {
            encoder,
            classifier,
            clusters,
            groups,
            epoch,
            step,
            history,
        },
    ))
}

// ------------------------------------------------------------- descriptor db

pub fn db_bytes(db: &DescriptorDB) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(DB_MAGIC);
    w.u64(db.len() as u64);
    w.u32(db.dim());
    for r in db.records() {
        w.u64(r.id.0);
        w.f64(r.position.east);
        w.f64(r.position.north);
        r.descriptor.iter().for_each(|v| w.f64(*v));
    }
    w.buf
}

pub fn save_db(path: &Path, db: &DescriptorDB, force: bool) -> Result<()> {
    write_new(path, &db_bytes(db), force)
}

pub fn load_db(path: &Path) -> Result<DescriptorDB> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, path);
    if r.take(8).ok() != Some(DB_MAGIC.as_slice()) {
        return Err(r.err("missing MVPRDB01 magic"));
    }
    let count = r.u64()? as usize;
    let dim = r.u32()?;
    let record = 24 + 8 * dim;
    if count.checked_mul(record) != Some(bytes.len() - r.pos) {
        return Err(r.err(format!("{count} records of dimension {dim} do not match file size")));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let id = ImageId(r.u64()?);
        let position = UtmPoint::new(r.f64()?, r.f64()?);
        let descriptor = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        records.push(DbRecord { id, position, descriptor });
    }
    DescriptorDB::new(dim, records)
}

// ------------------------------------------------------------- snapshots

/// Text snapshot of a cluster state:
/// `epoch <e>` then per cell `cell <e> <n> <k_eff> <objective>`, one
/// `centroid <h> <values…>` line per cluster and one `<id> <h>` line per image.
pub fn snapshot_text(state: &ClusterState) -> String {
    let mut out = format!("epoch {}\n", state.epoch);
    for (cell, cc) in &state.cells {
        out.push_str(&format!("cell {} {} {} {}\n", cell.e, cell.n, cc.k_eff(), cc.objective));
        for (h, c) in cc.centroids.iter().enumerate() {
            let vals: Vec<String> = c.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("centroid {h} {}\n", vals.join(" ")));
        }
        for (id, h) in cc.ids.iter().zip(&cc.assignments) {
            out.push_str(&format!("{id} {h}\n"));
        }
    }
    out
}

pub fn parse_snapshot(text: &str) -> Result<ClusterState> {
    let mut state = ClusterState::default();
    let mut current: Option<(CellId, usize)> = None;
    for (i, line) in text.lines().enumerate() {
        let bad = |m: &str| Error::Parse { line: i + 1, message: m.to_string() };
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [] => {}
            ["epoch", e] => state.epoch = e.parse().map_err(|_| bad("bad epoch"))?,
            ["cell", e, n, k, obj] => {
                let cell = CellId::new(e.parse().map_err(|_| bad("bad cell"))?, n.parse().map_err(|_| bad("bad cell"))?);
                let k: usize = k.parse().map_err(|_| bad("bad cluster count"))?;
                state.cells.insert(
                    cell,
                    CellClusters {
                        ids: Vec::new(),
                        assignments: Vec::new(),
                        centroids: Vec::with_capacity(k),
                        objective: obj.parse().map_err(|_| bad("bad objective"))?,
                    },
                );
                current = Some((cell, k));
            }
            ["centroid", _h, vals @ ..] => {
                let (cell, _) = current.ok_or_else(|| bad("centroid before cell"))?;
                let c = vals.iter().map(|v| v.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>();
                state.cells.get_mut(&cell).expect("inserted").centroids.push(c.map_err(|_| bad("bad centroid"))?);
            }
            [id, h] => {
                let (cell, k) = current.ok_or_else(|| bad("image before cell"))?;
                let h: usize = h.parse().map_err(|_| bad("bad cluster index"))?;
                if h >= k {
                    return Err(bad("cluster index out of range"));
                }
                let cc = state.cells.get_mut(&cell).expect("inserted");
                cc.ids.push(ImageId(id.parse().map_err(|_| bad("bad image id"))?));
                cc.assignments.push(h);
            }
            _ => return Err(bad("unrecognized snapshot line")),
        }
    }
    for (cell, cc) in &state.cells {
        if cc.centroids.is_empty() && !cc.ids.is_empty() {
            return Err(Error::Contract(format!("snapshot cell {cell} has no centroids")));
        }
    }
    Ok(state)
}

pub fn load_snapshot(path: &Path) -> Result<ClusterState> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    parse_snapshot(&text)
}

// ------------------------------------------------------------- metrics

/// One tab-separated line per epoch: epoch, mean loss, purity (`nan` when
/// unknown), reassignment fraction, learning rate.
pub fn metrics_text(history: &[EpochMetrics]) -> String {
    history
        .iter()
        .map(|m| {
            let purity = m.purity.map_or("nan".to_string(), |p| p.to_string());
            format!("{}\t{}\t{}\t{}\t{}\n", m.epoch, m.mean_loss, purity, m.reassignment, m.lr)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trip() {
        let mut s = ClusterState { epoch: 3, ..Default::default() };
        s.cells.insert(
            CellId::new(-2, 7),
            CellClusters {
                ids: vec![ImageId(5), ImageId(9), ImageId(1)],
                assignments: vec![1, 0, 1],
                centroids: vec![vec![0.1, -0.25], vec![1.0 / 3.0, 0.5]],
                objective: 0.123456789,
            },
        );
        let back = parse_snapshot(&snapshot_text(&s)).unwrap();
        assert_eq!(back, s);
        assert!(parse_snapshot("5 0\n").is_err());
        assert!(parse_snapshot("cell 0 0 1 0\ncentroid 0 1\n5 3\n").is_err());
    }

    #[test]
    fn db_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let db = DescriptorDB::new(
            2,
            vec![
                DbRecord { id: ImageId(4), position: UtmPoint::new(1.5, -2.0), descriptor: vec![0.6, 0.8] },
                DbRecord { id: ImageId(2), position: UtmPoint::new(0.0, 3.0), descriptor: vec![1.0, 0.0] },
            ],
        )
        .unwrap();
        let path = dir.path().join("d.db");
        save_db(&path, &db, false).unwrap();
        assert_eq!(load_db(&path).unwrap(), db);
        assert!(matches!(save_db(&path, &db, false), Err(Error::Exists(_))));
        save_db(&path, &db, true).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_db(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn metrics_lines() {
        let h = vec![EpochMetrics { epoch: 1, mean_loss: 2.5, purity: None, reassignment: 0.0, lr: 1e-5 }];
        assert_eq!(metrics_text(&h), "1\t2.5\tnan\t0\t0.00001\n");
    }
}
