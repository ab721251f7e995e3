//! Binary checkpoint: model parameters, optimizer state, run metadata and the
//! training log.
//!
//! ```text
//! "DGGX" | version u8 = 1
//! u32 count | count × record          (parameters, optimizer, metadata)
//! u32 count | count × record          (training log)
//! record = u32 name_len | name (UTF-8) | u32 rank | rank × u32 extent | f64 payload
//! ```
//! All integers and floats are little-endian. Metadata travels as payload-free
//! records named `meta:<key>=<value>` with a single zero extent.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{FusionModel, ModelSpec};
use crate::tensor::Tensor;

use super::{AdamHyper, AdamState, EpochRecord, TrainLog};

pub const MAGIC: &[u8; 4] = b"DGGX";
pub const VERSION: u8 = 1;

const META_PREFIX: &str = "meta:";
const SPEC_KEY: &str = "model_spec";
const FROZEN_KEY: &str = "frozen";

/// Everything a checkpoint file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: FusionModel,
    pub adam: AdamState,
    pub log: TrainLog,
    /// Free-form run metadata (seeds, data options, ...).
    pub meta: BTreeMap<String, String>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| fmt_err(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &e in t.shape() {
        put_u32(out, e)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn put_meta(out: &mut Vec<u8>, key: &str, value: &str) -> Result<()> {
    if key.contains('=') {
        return Err(fmt_err(format!("metadata key `{key}` contains `=`")));
    }
    put_record(out, &format!("{META_PREFIX}{key}={value}"), &Tensor::zeros(&[0]))
}

pub fn encode_checkpoint(
    model: &FusionModel,
    adam: &AdamState,
    log: &TrainLog,
    meta: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let params: Vec<_> = model.params().collect();
    if adam.m.len() != params.len() || adam.v.len() != params.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} tensors, model has {} parameters",
            adam.m.len(),
            params.len()
        )));
    }
    let mut body = Vec::new();
    let mut count = 0;
    for p in &params {
        put_record(&mut body, &p.name, &p.value)?;
        count += 1;
    }
    for (p, (m, v)) in params.iter().zip(adam.m.iter().zip(&adam.v)) {
        put_record(&mut body, &format!("adam.m.{}", p.name), m)?;
        put_record(&mut body, &format!("adam.v.{}", p.name), v)?;
        count += 2;
    }
    put_record(&mut body, "adam.step", &Tensor::scalar(adam.step as f64))?;
    let h = adam.hyper;
    put_record(
        &mut body,
        "adam.hyper",
        &Tensor::from_vec(vec![h.learning_rate, h.beta1, h.beta2, h.epsilon]),
    )?;
    count += 2;

    let spec = serde_json::to_string(model.spec()).map_err(|e| fmt_err(e.to_string()))?;
    let frozen: Vec<&str> = params.iter().filter(|p| !p.trainable).map(|p| p.name.as_str()).collect();
    put_meta(&mut body, SPEC_KEY, &spec)?;
    put_meta(&mut body, FROZEN_KEY, &frozen.join(","))?;
    count += 2;
    for (k, v) in meta {
        if k == SPEC_KEY || k == FROZEN_KEY {
            return Err(fmt_err(format!("metadata key `{k}` is reserved")));
        }
        put_meta(&mut body, k, v)?;
        count += 1;
    }

    let mut out = Vec::with_capacity(body.len() + 64);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_u32(&mut out, count)?;
    out.extend_from_slice(&body);

    let column = |f: fn(&EpochRecord) -> f64| Tensor::from_vec(log.epochs.iter().map(f).collect());
    put_u32(&mut out, 5)?;
    put_record(&mut out, "log.train_loss", &column(|e| e.train_loss))?;
    put_record(&mut out, "log.train_acc", &column(|e| e.train_acc))?;
    put_record(&mut out, "log.val_loss", &column(|e| e.val_loss))?;
    put_record(&mut out, "log.val_acc", &column(|e| e.val_acc))?;
    put_record(&mut out, "log.best_epoch", &Tensor::scalar(log.best_epoch.unwrap_or(0) as f64))?;
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(fmt_err(format!("checkpoint truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()?;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| fmt_err("record name is not UTF-8"))?
            .to_string();
        let rank = self.u32()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u32()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| fmt_err(format!("record `{name}` is implausibly large")))?;
        let raw = self.take(numel * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Tensor::new(shape, data)?))
    }

    fn section(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32()?;
        (0..count).map(|_| self.record()).collect()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(fmt_err("not a checkpoint file (bad magic)"));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(fmt_err(format!("unsupported checkpoint version {version}")));
    }
    let records = r.section()?;
    let log_records = r.section()?;
    if r.pos != bytes.len() {
        return Err(fmt_err(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut meta = BTreeMap::new();
    for (name, t) in records {
        if let Some(kv) = name.strip_prefix(META_PREFIX) {
            let (k, v) =
                kv.split_once('=').ok_or_else(|| fmt_err(format!("malformed metadata record `{name}`")))?;
            meta.insert(k.to_string(), v.to_string());
        } else if tensors.insert(name.clone(), t).is_some() {
            return Err(fmt_err(format!("duplicate record `{name}`")));
        }
    }
    let spec_json = meta.remove(SPEC_KEY).ok_or_else(|| fmt_err("checkpoint has no model specification"))?;
    let spec: ModelSpec =
        serde_json::from_str(&spec_json).map_err(|e| fmt_err(format!("model specification: {e}")))?;
    let frozen = meta.remove(FROZEN_KEY).unwrap_or_default();
    let frozen: Vec<&str> = frozen.split(',').filter(|s| !s.is_empty()).collect();

    let mut model = FusionModel::build(spec)?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = tensors.remove(name).ok_or_else(|| fmt_err(format!("checkpoint is missing `{name}`")))?;
        if t.shape() != shape {
            return Err(fmt_err(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for p in model.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = take(&p.name, &shape)?;
        p.trainable = !frozen.contains(&p.name.as_str());
        m.push(take(&format!("adam.m.{}", p.name), &shape)?);
        v.push(take(&format!("adam.v.{}", p.name), &shape)?);
    }
    let step = take("adam.step", &[1])?.data()[0];
    let hyper = take("adam.hyper", &[4])?;
    let h = hyper.data();
    let adam = AdamState {
        hyper: AdamHyper { learning_rate: h[0], beta1: h[1], beta2: h[2], epsilon: h[3] },
        step: step as u64,
        m,
        v,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(fmt_err(format!("unexpected record `{extra}`")));
    }

    let mut logs: BTreeMap<String, Tensor> = log_records.into_iter().collect();
    let mut column = |name: &str| {
        logs.remove(name)
            .map(Tensor::into_data)
            .ok_or_else(|| fmt_err(format!("checkpoint is missing `{name}`")))
    };
    let (tl, ta, vl, va) = (
        column("log.train_loss")?,
        column("log.train_acc")?,
        column("log.val_loss")?,
        column("log.val_acc")?,
    );
    let best = column("log.best_epoch")?;
    let n = tl.len();
    if [ta.len(), vl.len(), va.len()].iter().any(|&l| l != n) || best.len() != 1 {
        return Err(fmt_err("training log columns disagree in length"));
    }
    let epochs = (0..n)
        .map(|i| EpochRecord { train_loss: tl[i], train_acc: ta[i], val_loss: vl[i], val_acc: va[i] })
        .collect();
    let best_epoch = match best[0] as usize {
        0 => None,
        e if e <= n => Some(e),
        e => return Err(fmt_err(format!("best epoch {e} outside a {n}-epoch log"))),
    };
    Ok(Checkpoint { model, adam, log: TrainLog { epochs, best_epoch }, meta })
}

/// Writes model, optimizer state, log and metadata to `path`.
pub fn save_checkpoint(
    model: &FusionModel,
    adam: &AdamState,
    log: &TrainLog,
    meta: &BTreeMap<String, String>,
    path: &Path,
) -> Result<()> {
    let bytes = encode_checkpoint(model, adam, log, meta)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Path(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::build_dggxnet;

    fn fixture() -> (FusionModel, AdamState, TrainLog, BTreeMap<String, String>) {
        let mut model = build_dggxnet(
            &BackboneConfig::vgg(1, 8, vec![2], 11),
            &BackboneConfig::dense(1, 8, 2, 2, vec![1], 0.5, 12),
            4,
            &["p".to_string(), "q".to_string()],
            0.3,
            13,
        )
        .unwrap();
        model.set_trainable_mask(|n| n.starts_with("a."), false);
        let mut adam = AdamState::for_params(model.params(), AdamHyper::default());
        adam.step = 7;
        for (i, m) in adam.m.iter_mut().enumerate() {
            m.data_mut().iter_mut().for_each(|x| *x = (i as f64).sin() / 3.0);
        }
        let log = TrainLog {
            epochs: vec![
                EpochRecord { train_loss: 1.0, train_acc: 0.4, val_loss: 0.9, val_acc: 0.5 },
                EpochRecord { train_loss: 0.7, train_acc: 0.6, val_loss: 1.0 / 3.0, val_acc: 0.7 },
            ],
            best_epoch: Some(2),
        };
        let meta = BTreeMap::from([("train_seed".to_string(), "5".to_string())]);
        (model, adam, log, meta)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, adam, log, meta) = fixture();
        let bytes = encode_checkpoint(&model, &adam, &log, &meta).unwrap();
        assert_eq!(&bytes[..5], b"DGGX\x01");
        let ck = decode_checkpoint(&bytes).unwrap();
        for (a, b) in model.snapshot().iter().zip(ck.model.snapshot().iter()) {
            assert!(a.bit_eq(b));
        }
        assert_eq!(ck.model, model);
        assert_eq!(ck.adam, adam);
        assert_eq!(ck.log, log);
        assert_eq!(ck.meta, meta);
        assert_eq!(encode_checkpoint(&ck.model, &ck.adam, &ck.log, &ck.meta).unwrap(), bytes);
    }

    #[test]
    fn bad_magic_version_and_truncation_are_format_errors() {
        let (model, adam, log, meta) = fixture();
        let bytes = encode_checkpoint(&model, &adam, &log, &meta).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        for cut in [0, 3, 5, 9, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_path_error() {
        assert!(matches!(load_checkpoint(Path::new("/no/such/checkpoint.dggx")), Err(Error::Path(_))));
    }
}
