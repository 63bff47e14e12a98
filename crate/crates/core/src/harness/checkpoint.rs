//! Checkpoint directories: a `key = value` manifest plus one full-precision
//! state file per matrix, each guarded by its SHA-256.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bridge::BridgeState;
use crate::error::{Error, FormatError, Result};
use crate::harness::config::{parse_kv, RunConfig};
use crate::harness::format::{decode_state, encode_state, read_bytes, write_bytes, TaggedMatrix};
use crate::harness::protocol::Pipeline;
use crate::inference::AuxClassifier;
use crate::matrixkit::Matrix;
use crate::prototypes::{ClassEntry, PrototypeBank};
use crate::subspace::ScatterState;

pub const MANIFEST: &str = "manifest.txt";
const FORMAT_TAG: &str = "bofa-checkpoint-1";

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn manifest_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::format(path, FormatError::Manifest(msg.into()))
}

fn join<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Write `pipeline` into `dir`, creating it if needed.
pub fn save(pipeline: &Pipeline, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bank = &pipeline.bank;
    let classes = bank.classes();

    let mut files: Vec<(String, TaggedMatrix)> = vec![
        ("w0.bofa".into(), untagged(pipeline.bridge.w0().clone())),
        ("dw_old.bofa".into(), untagged(pipeline.bridge.dw_old().clone())),
        ("scatter.bofa".into(), untagged(pipeline.scatter.scatter().clone())),
    ];
    if !classes.is_empty() {
        let text: Vec<Vec<f64>> = bank.entries().values().map(|e| e.text.clone()).collect();
        let means: Vec<Vec<f64>> = bank.entries().values().map(|e| e.mean_feat.clone()).collect();
        files.push(("text_protos.bofa".into(), TaggedMatrix { tags: classes.clone(), matrix: Matrix::from_rows(&text)? }));
        files.push(("mean_feats.bofa".into(), TaggedMatrix { tags: classes.clone(), matrix: Matrix::from_rows(&means)? }));
    }
    for head in &pipeline.aux {
        let wt = head.weights.transpose();
        let rows: Vec<Vec<f64>> = (0..wt.rows())
            .map(|i| {
                let mut r = wt.row(i).to_vec();
                r.push(head.bias[i]);
                r
            })
            .collect();
        files.push((
            format!("aux_{:03}.bofa", head.task_id),
            TaggedMatrix { tags: head.class_ids.clone(), matrix: Matrix::from_rows(&rows)? },
        ));
    }

    let mut m = String::new();
    let _ = writeln!(m, "format = {FORMAT_TAG}");
    let _ = writeln!(m, "tasks_done = {}", pipeline.tasks_done);
    let _ = writeln!(m, "d_o = {}", pipeline.d_o());
    let _ = writeln!(m, "d = {}", pipeline.d());
    let _ = writeln!(m, "n_samples = {}", pipeline.scatter.n_samples());
    let _ = writeln!(m, "normalize_rows = {}", pipeline.scatter.normalize_rows);
    let _ = writeln!(m, "lambda = {}", bank.lambda());
    let _ = writeln!(m, "lambda_frozen = {}", bank.lambda_frozen());
    let _ = writeln!(m, "mean_counts = {}", join(bank.entries().values().map(|e| e.count)));
    let _ = writeln!(m, "aux_tasks = {}", join(pipeline.aux.iter().map(|h| h.task_id)));
    let _ = writeln!(m, "stage_accuracies = {}", join(&pipeline.stage_accuracies));
    let olds = pipeline
        .old_class_accuracies
        .iter()
        .map(|o| o.map_or("none".to_string(), |v| v.to_string()));
    let _ = writeln!(m, "old_class_accuracies = {}", join(olds));
    for (k, v) in parse_kv(&pipeline.config.to_kv_text())? {
        let _ = writeln!(m, "config.{k} = {v}");
    }
    for (name, tm) in &files {
        let bytes = encode_state(tm)?;
        let _ = writeln!(m, "hash.{name} = {}", sha_hex(&bytes));
        write_bytes(&dir.join(name), &bytes)?;
    }
    write_bytes(&dir.join(MANIFEST), m.as_bytes())
}

fn untagged(matrix: Matrix) -> TaggedMatrix {
    TaggedMatrix { tags: vec![0; matrix.rows()], matrix }
}

struct Manifest<'a> {
    path: &'a Path,
    map: BTreeMap<String, String>,
}

impl Manifest<'_> {
    fn get(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| manifest_err(self.path, format!("missing key {key}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| manifest_err(self.path, format!("bad value for {key}")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| manifest_err(self.path, format!("bad entry in {key}"))))
            .collect()
    }
}

/// Read a state file and check it against the manifest hash.
fn load_state(dir: &Path, manifest: &Manifest, name: &str) -> Result<TaggedMatrix> {
    let path = dir.join(name);
    let bytes = read_bytes(&path)?;
    let expected = manifest.get(&format!("hash.{name}"))?;
    if sha_hex(&bytes) != expected {
        return Err(Error::format(&path, FormatError::HashMismatch(name.to_string())));
    }
    decode_state(&bytes).map_err(|e| Error::format(&path, e))
}

/// Rebuild the pipeline saved in `dir`. Visual prototypes are recomputed
/// from the stored class means and bridge.
pub fn load(dir: impl AsRef<Path>) -> Result<Pipeline> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST);
    let text = String::from_utf8(read_bytes(&mpath)?)
        .map_err(|_| manifest_err(&mpath, "manifest is not UTF-8"))?;
    let map: BTreeMap<String, String> = parse_kv(&text)
        .map_err(|e| manifest_err(&mpath, e.to_string()))?
        .into_iter()
        .collect();
    let man = Manifest { path: &mpath, map };
    if man.get("format")? != FORMAT_TAG {
        return Err(manifest_err(&mpath, "unrecognized checkpoint format"));
    }

    let mut config = RunConfig::default();
    for (k, v) in &man.map {
        if let Some(key) = k.strip_prefix("config.") {
            config.set(key, v).map_err(|e| manifest_err(&mpath, e.to_string()))?;
        }
    }
    config.validate()?;

    let d_o: usize = man.parse("d_o")?;
    let d: usize = man.parse("d")?;
    let tasks_done: usize = man.parse("tasks_done")?;
    let check = |m: &Matrix, rows: usize, cols: usize, what: &str| -> Result<()> {
        if m.shape() != (rows, cols) {
            return Err(manifest_err(&mpath, format!("{what} has shape {:?}", m.shape())));
        }
        Ok(())
    };

    let w0 = load_state(dir, &man, "w0.bofa")?.matrix;
    let dw_old = load_state(dir, &man, "dw_old.bofa")?.matrix;
    let scatter = load_state(dir, &man, "scatter.bofa")?.matrix;
    check(&w0, d_o, d, "w0")?;
    check(&dw_old, d_o, d, "dw_old")?;
    check(&scatter, d_o, d_o, "scatter")?;
    let bridge = BridgeState::from_parts(w0, dw_old)?;
    let scatter = ScatterState::from_parts(scatter, man.parse("n_samples")?, man.parse("normalize_rows")?)?;

    let counts: Vec<u64> = man.list("mean_counts")?;
    let mut entries = BTreeMap::new();
    if !counts.is_empty() {
        let text = load_state(dir, &man, "text_protos.bofa")?;
        let means = load_state(dir, &man, "mean_feats.bofa")?;
        check(&text.matrix, counts.len(), d, "text_protos")?;
        check(&means.matrix, counts.len(), d_o, "mean_feats")?;
        if text.tags != means.tags {
            return Err(manifest_err(&mpath, "class ids differ between state files"));
        }
        for (i, &c) in text.tags.iter().enumerate() {
            entries.insert(
                c,
                ClassEntry {
                    text: text.matrix.row(i).to_vec(),
                    mean_feat: means.matrix.row(i).to_vec(),
                    count: counts[i],
                    visual: None,
                },
            );
        }
    }
    let mut bank = PrototypeBank::from_parts(
        d_o,
        d,
        config.ema_momentum,
        man.parse("lambda")?,
        man.parse("lambda_frozen")?,
        entries,
    )?;
    let refresh = bank.final_refresh(&bridge);
    if let Some(c) = refresh.skipped.first() {
        return Err(manifest_err(&mpath, format!("class {c} has no usable mean feature")));
    }

    let mut aux = Vec::new();
    for task_id in man.list::<usize>("aux_tasks")? {
        let tm = load_state(dir, &man, &format!("aux_{task_id:03}.bofa"))?;
        check(&tm.matrix, tm.tags.len(), d_o + 1, "aux head")?;
        let weights = tm.matrix.first_cols(d_o).transpose();
        let bias = (0..tm.matrix.rows()).map(|i| tm.matrix.row(i)[d_o]).collect();
        aux.push(AuxClassifier::new(task_id, weights, bias, tm.tags)?);
    }

    let stage_accuracies: Vec<f64> = man.list("stage_accuracies")?;
    let old_class_accuracies = man
        .get("old_class_accuracies")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "none" => Ok(None),
            v => v.parse().map(Some).map_err(|_| manifest_err(&mpath, "bad old-class accuracy")),
        })
        .collect::<Result<Vec<_>>>()?;
    if stage_accuracies.len() != tasks_done || old_class_accuracies.len() != tasks_done {
        return Err(manifest_err(&mpath, "accuracy history does not match tasks_done"));
    }

    Ok(Pipeline {
        config,
        bridge,
        scatter,
        bank,
        aux,
        tasks_done,
        stage_accuracies,
        old_class_accuracies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::TrainConfig;
    use crate::harness::protocol::run_from;
    use crate::harness::stream::{synth_stream, SynthConfig};

    fn setup() -> (crate::harness::stream::TaskStream, RunConfig) {
        let bench = synth_stream(&SynthConfig {
            tasks: 2,
            classes_per_task: 3,
            train_per_class: 8,
            test_per_class: 4,
            d_o: 10,
            d: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = RunConfig {
            inc_n: 3,
            train: TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() },
            ..RunConfig::default()
        };
        (bench.stream, cfg)
    }

    #[test]
    fn save_load_is_exact() {
        let (stream, cfg) = setup();
        let mut p = Pipeline::new(stream.w0.clone(), cfg).unwrap();
        run_from(&mut p, &stream, Some(1), |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&p, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), p);
    }

    #[test]
    fn fresh_state_round_trips() {
        let (stream, cfg) = setup();
        let p = Pipeline::new(stream.w0.clone(), cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&p, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), p);
    }

    #[test]
    fn tampering_is_detected() {
        let (stream, cfg) = setup();
        let mut p = Pipeline::new(stream.w0.clone(), cfg).unwrap();
        run_from(&mut p, &stream, Some(1), |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&p, dir.path()).unwrap();
        let f = dir.path().join("scatter.bofa");
        let mut bytes = fs::read(&f).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&f, bytes).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { source: FormatError::HashMismatch(_), .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(dir.path()).unwrap_err(), Error::Io { .. }));
    }
}
