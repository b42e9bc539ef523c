//! Portable model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   5 bytes  "FBNFC"
//! version u32      currently 1
//! meta    u64 length + UTF-8 key=value lines
//! manifest u64 length + UTF-8 lines "name rows cols offset"
//! payload  arrays as 64-bit IEEE-754 little-endian, row-major,
//!          at offsets relative to the payload start
//! ```
//!
//! Every parameter and frozen statistic appears exactly once in the
//! manifest; loading a file with a wrong magic or version fails before
//! any payload is read. With the canonical `f64` scalar a save/load
//! round trip is bit-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::baselines::LinearFeedbackModel;
use crate::decoder::{DecoderHead, DecoderModel, Direction, MergeCase};
use crate::encoder::{EncoderMode, EncoderModel, NormProvenance, NormStats, PowerLayer};
use crate::eval::fmt_full;
use crate::nn::{GruCell, GRU_PARAM_NAMES};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"FBNFC";
pub const VERSION: u32 = 1;

/// Run provenance stored alongside the arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelMeta {
    pub seed: u64,
    pub epoch: usize,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
}

/// Either trained scheme, as read back from a file.
#[derive(Debug)]
pub enum LoadedModel<S> {
    Neural {
        enc: EncoderModel<S>,
        dec: DecoderModel<S>,
    },
    Linear(LinearFeedbackModel<S>),
}

fn err(msg: impl Into<String>) -> Error {
    Error::ModelIo(msg.into())
}

// ---------------------------------------------------------------- meta

fn direction_str(d: Direction) -> &'static str {
    match d {
        Direction::Bi => "bi",
        Direction::Uni => "uni",
    }
}

fn head_str(h: DecoderHead) -> &'static str {
    match h {
        DecoderHead::Softmax => "softmax",
        DecoderHead::Sigmoid => "sigmoid",
    }
}

fn mode_str(m: EncoderMode) -> &'static str {
    match m {
        EncoderMode::Feedback => "feedback",
        EncoderMode::OpenLoop => "open-loop",
    }
}

fn power_layer_str(p: PowerLayer) -> &'static str {
    match p {
        PowerLayer::NormPower => "norm-power",
        PowerLayer::NormOnly => "norm-only",
        PowerLayer::PowerOnly => "power-only",
        PowerLayer::None => "none",
    }
}

pub(crate) fn parse_direction(s: &str) -> Result<Direction> {
    match s {
        "bi" => Ok(Direction::Bi),
        "uni" => Ok(Direction::Uni),
        _ => Err(Error::InvalidParam(format!("unknown direction \"{s}\""))),
    }
}

pub(crate) fn parse_head(s: &str) -> Result<DecoderHead> {
    match s {
        "softmax" => Ok(DecoderHead::Softmax),
        "sigmoid" => Ok(DecoderHead::Sigmoid),
        _ => Err(Error::InvalidParam(format!("unknown head \"{s}\""))),
    }
}

pub(crate) fn parse_mode(s: &str) -> Result<EncoderMode> {
    match s {
        "feedback" => Ok(EncoderMode::Feedback),
        "open-loop" => Ok(EncoderMode::OpenLoop),
        _ => Err(Error::InvalidParam(format!("unknown encoder mode \"{s}\""))),
    }
}

pub(crate) fn parse_power_layer(s: &str) -> Result<PowerLayer> {
    match s {
        "norm-power" => Ok(PowerLayer::NormPower),
        "norm-only" => Ok(PowerLayer::NormOnly),
        "power-only" => Ok(PowerLayer::PowerOnly),
        "none" => Ok(PowerLayer::None),
        _ => Err(Error::InvalidParam(format!("unknown power layer \"{s}\""))),
    }
}

// ------------------------------------------------------------- writing

struct FileBuilder {
    meta: String,
    names: Vec<String>,
    arrays: Vec<Tensor<f64>>,
}

impl FileBuilder {
    fn new() -> Self {
        FileBuilder {
            meta: String::new(),
            names: Vec::new(),
            arrays: Vec::new(),
        }
    }

    fn meta_kv(&mut self, key: &str, value: impl std::fmt::Display) {
        self.meta.push_str(&format!("{key}={value}\n"));
    }

    fn array<S: Scalar>(&mut self, name: &str, t: &Tensor<S>) {
        self.names.push(name.to_string());
        self.arrays.push(t.to_f64());
    }

    fn write(self, path: &Path) -> Result<()> {
        let mut manifest = String::new();
        let mut offset = 0u64;
        for (name, t) in self.names.iter().zip(&self.arrays) {
            manifest.push_str(&format!("{name} {} {} {offset}\n", t.rows(), t.cols()));
            offset += (t.len() * 8) as u64;
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u64).to_le_bytes())?;
        w.write_all(self.meta.as_bytes())?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(manifest.as_bytes())?;
        for t in &self.arrays {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn push_norm_meta(b: &mut FileBuilder, stats: &Option<NormStats<impl Scalar>>) {
    match stats {
        Some(s) => {
            b.meta_kv("norm", "frozen");
            let floored = s
                .floored
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(",");
            b.meta_kv("norm_floored", floored);
        }
        None => b.meta_kv("norm", "none"),
    }
}

fn push_gru_arrays<S: Scalar>(b: &mut FileBuilder, prefix: &str, cells: &[GruCell<S>]) {
    for (l, cell) in cells.iter().enumerate() {
        for (name, t) in GRU_PARAM_NAMES.iter().zip(cell.params()) {
            b.array(&format!("{prefix}{l}.{name}"), t);
        }
    }
}

pub fn save_neural_model<S: Scalar>(
    path: &Path,
    enc: &EncoderModel<S>,
    dec: &DecoderModel<S>,
    meta: &ModelMeta,
) -> Result<()> {
    let mut b = FileBuilder::new();
    b.meta_kv("kind", "neural");
    b.meta_kv("k", enc.k_bits);
    b.meta_kv("n", enc.n_uses);
    b.meta_kv("enc_layers", enc.grus.len());
    b.meta_kv("enc_hidden", enc.hidden_size());
    b.meta_kv("dec_layers", dec.fwd.len());
    b.meta_kv("dec_hidden", dec.hidden_size());
    b.meta_kv("direction", direction_str(dec.direction));
    b.meta_kv("merge_case", dec.merge_case.id());
    b.meta_kv("head", head_str(dec.head));
    b.meta_kv("mode", mode_str(enc.mode));
    b.meta_kv("power_layer", power_layer_str(enc.power_layer));
    b.meta_kv("sigma1_sq", fmt_full(meta.sigma1_sq));
    b.meta_kv("sigma2_sq", fmt_full(meta.sigma2_sq));
    b.meta_kv("seed", meta.seed);
    b.meta_kv("epoch", meta.epoch);
    push_norm_meta(&mut b, &enc.norm_stats);

    push_gru_arrays(&mut b, "enc.gru", &enc.grus);
    b.array("enc.w_e", &enc.w_e);
    b.array("enc.b_e", &enc.b_e);
    b.array("enc.power_w", &enc.power_w);
    if let Some(s) = &enc.norm_stats {
        b.array("enc.norm_mean", &Tensor::row_vec(s.mean.clone()));
        b.array("enc.norm_var", &Tensor::row_vec(s.var.clone()));
    }
    push_gru_arrays(&mut b, "dec.f", &dec.fwd);
    push_gru_arrays(&mut b, "dec.b", &dec.bwd);
    b.array("dec.attn_f", &dec.attn_f);
    b.array("dec.attn_b", &dec.attn_b);
    b.array("dec.w_d", &dec.w_d);
    b.array("dec.v_d", &dec.v_d);
    b.write(path)
}

pub fn save_linear_model<S: Scalar>(
    path: &Path,
    model: &LinearFeedbackModel<S>,
    meta: &ModelMeta,
) -> Result<()> {
    let mut b = FileBuilder::new();
    b.meta_kv("kind", "linear");
    b.meta_kv("k", model.k_bits);
    b.meta_kv("n", model.n_uses);
    b.meta_kv("head", head_str(model.head));
    b.meta_kv("power_layer", power_layer_str(model.power_layer));
    b.meta_kv("sigma1_sq", fmt_full(meta.sigma1_sq));
    b.meta_kv("sigma2_sq", fmt_full(meta.sigma2_sq));
    b.meta_kv("seed", meta.seed);
    b.meta_kv("epoch", meta.epoch);
    push_norm_meta(&mut b, &model.norm_stats);
    b.array("lin.msg_w", &model.msg_w);
    b.array("lin.fb_w", &model.fb_w);
    b.array("lin.power_w", &model.power_w);
    b.array("lin.dec_w", &model.dec_w);
    b.write(path)
}

// ------------------------------------------------------------- reading

struct FileReader {
    meta: BTreeMap<String, String>,
    manifest: Vec<(String, usize, usize, u64)>,
    arrays: BTreeMap<String, Tensor<f64>>,
}

impl FileReader {
    fn open(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| err("file too short for magic"))?;
        if &magic != MAGIC {
            return Err(err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let mut v4 = [0u8; 4];
        r.read_exact(&mut v4).map_err(|_| err("missing version"))?;
        let version = u32::from_le_bytes(v4);
        if version != VERSION {
            return Err(err(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let meta_text = read_block(&mut r, "metadata")?;
        let manifest_text = read_block(&mut r, "manifest")?;

        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("malformed metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let mut manifest = Vec::new();
        for line in manifest_text.lines() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(err(format!("malformed manifest line {line:?}")));
            }
            let rows: usize = parts[1].parse().map_err(|_| err("bad manifest rows"))?;
            let cols: usize = parts[2].parse().map_err(|_| err("bad manifest cols"))?;
            let offset: u64 = parts[3].parse().map_err(|_| err("bad manifest offset"))?;
            manifest.push((parts[0].to_string(), rows, cols, offset));
        }

        // Payload: arrays are stored contiguously in manifest order.
        let mut arrays = BTreeMap::new();
        let mut expected_offset = 0u64;
        for (name, rows, cols, offset) in &manifest {
            if *offset != expected_offset {
                return Err(err(format!("array {name} at offset {offset}, expected {expected_offset}")));
            }
            let len = rows * cols;
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)
                .map_err(|_| err(format!("payload truncated at array {name}")))?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.insert(name.clone(), Tensor::from_vec(*rows, *cols, data));
            expected_offset += (len * 8) as u64;
        }
        Ok(FileReader {
            meta,
            manifest,
            arrays,
        })
    }

    fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| err(format!("missing metadata key {key}")))
    }

    fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| err(format!("unparsable metadata value for {key}")))
    }

    fn take<S: Scalar>(&mut self, name: &str, rows: usize, cols: usize) -> Result<Tensor<S>> {
        let t = self
            .arrays
            .remove(name)
            .ok_or_else(|| err(format!("missing array {name}")))?;
        if t.shape() != (rows, cols) {
            return Err(err(format!(
                "array {name} has shape {:?}, expected ({rows}, {cols})",
                t.shape()
            )));
        }
        Ok(Tensor::from_f64(&t))
    }

    fn take_gru<S: Scalar>(&mut self, prefix: &str, l: usize, input: usize, hidden: usize) -> Result<GruCell<S>> {
        let mut cell = GruCell::zeros(input, hidden);
        for (name, slot) in GRU_PARAM_NAMES.iter().zip(cell.params_mut()) {
            let (r, c) = match *name {
                "w_r" | "w_u" | "w_c" => (input, hidden),
                "u_r" | "u_u" | "u_c" => (hidden, hidden),
                _ => (1, hidden),
            };
            *slot = self.take(&format!("{prefix}{l}.{name}"), r, c)?;
        }
        Ok(cell)
    }

    fn norm_stats<S: Scalar>(&mut self, n: usize, prefix: &str) -> Result<Option<NormStats<S>>> {
        match self.meta_str("norm")? {
            "none" => Ok(None),
            "frozen" => {
                let mean: Tensor<S> = self.take(&format!("{prefix}.norm_mean"), 1, n)?;
                let var: Tensor<S> = self.take(&format!("{prefix}.norm_var"), 1, n)?;
                let floored = match self.meta.get("norm_floored") {
                    Some(s) if !s.is_empty() => s
                        .split(',')
                        .map(|v| v.parse().map_err(|_| err("bad norm_floored entry")))
                        .collect::<Result<Vec<usize>>>()?,
                    _ => Vec::new(),
                };
                Ok(Some(NormStats {
                    mean: mean.data().to_vec(),
                    var: var.data().to_vec(),
                    provenance: NormProvenance::Frozen,
                    floored,
                }))
            }
            other => Err(err(format!("unknown norm provenance {other:?}"))),
        }
    }
}

fn read_block(r: &mut impl Read, what: &str) -> Result<String> {
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)
        .map_err(|_| err(format!("missing {what} length")))?;
    let len = u64::from_le_bytes(len8);
    if len > 1 << 30 {
        return Err(err(format!("{what} block implausibly large ({len} bytes)")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)
        .map_err(|_| err(format!("truncated {what} block")))?;
    String::from_utf8(buf).map_err(|_| err(format!("{what} block is not UTF-8")))
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<(LoadedModel<S>, ModelMeta)> {
    let mut f = FileReader::open(path)?;
    let meta = ModelMeta {
        seed: f.meta_parse("seed")?,
        epoch: f.meta_parse("epoch")?,
        sigma1_sq: f.meta_parse("sigma1_sq")?,
        sigma2_sq: f.meta_parse("sigma2_sq")?,
    };
    let k: usize = f.meta_parse("k")?;
    let n: usize = f.meta_parse("n")?;
    let kind = f.meta_str("kind")?.to_string();
    let model = match kind.as_str() {
        "neural" => {
            let enc_layers: usize = f.meta_parse("enc_layers")?;
            let enc_hidden: usize = f.meta_parse("enc_hidden")?;
            let dec_layers: usize = f.meta_parse("dec_layers")?;
            let dec_hidden: usize = f.meta_parse("dec_hidden")?;
            let direction = parse_direction(f.meta_str("direction")?)?;
            let merge_case = MergeCase::from_id(f.meta_parse("merge_case")?)?;
            let head = parse_head(f.meta_str("head")?)?;
            let mode = parse_mode(f.meta_str("mode")?)?;
            let power_layer = parse_power_layer(f.meta_str("power_layer")?)?;

            let mut grus = Vec::new();
            for l in 0..enc_layers {
                let input = if l == 0 { k + 1 } else { enc_hidden };
                grus.push(f.take_gru("enc.gru", l, input, enc_hidden)?);
            }
            let norm_stats = f.norm_stats(n, "enc")?;
            let enc = EncoderModel {
                grus,
                w_e: f.take("enc.w_e", enc_hidden, 1)?,
                b_e: f.take("enc.b_e", 1, 1)?,
                power_w: f.take("enc.power_w", 1, n)?,
                norm_stats,
                mode,
                power_layer,
                k_bits: k,
                n_uses: n,
            };

            let mut fwd = Vec::new();
            let mut bwd = Vec::new();
            for l in 0..dec_layers {
                let input = if l == 0 { 1 } else { dec_hidden };
                fwd.push(f.take_gru("dec.f", l, input, dec_hidden)?);
                if direction == Direction::Bi {
                    bwd.push(f.take_gru("dec.b", l, input, dec_hidden)?);
                }
            }
            let m = match head {
                DecoderHead::Softmax => 1usize << k,
                DecoderHead::Sigmoid => k,
            };
            let head_input = match direction {
                Direction::Bi => 2 * dec_hidden,
                Direction::Uni => dec_hidden,
            };
            let dec = DecoderModel {
                fwd,
                bwd,
                attn_f: f.take("dec.attn_f", 1, n)?,
                attn_b: f.take("dec.attn_b", 1, n)?,
                w_d: f.take("dec.w_d", head_input, m)?,
                v_d: f.take("dec.v_d", 1, m)?,
                head,
                direction,
                merge_case,
                k_bits: k,
                n_uses: n,
            };
            LoadedModel::Neural { enc, dec }
        }
        "linear" => {
            let head = parse_head(f.meta_str("head")?)?;
            let power_layer = parse_power_layer(f.meta_str("power_layer")?)?;
            let m = match head {
                DecoderHead::Softmax => 1usize << k,
                DecoderHead::Sigmoid => k,
            };
            let norm_stats = f.norm_stats(n, "lin")?;
            LoadedModel::Linear(LinearFeedbackModel {
                msg_w: f.take("lin.msg_w", k, n)?,
                fb_w: f.take("lin.fb_w", n, n)?,
                power_w: f.take("lin.power_w", 1, n)?,
                dec_w: f.take("lin.dec_w", n, m)?,
                norm_stats,
                power_layer,
                head,
                k_bits: k,
                n_uses: n,
            })
        }
        other => return Err(err(format!("unknown model kind {other:?}"))),
    };
    if !f.arrays.is_empty() {
        let extra: Vec<&String> = f.arrays.keys().collect();
        return Err(err(format!("unexpected arrays in manifest: {extra:?}")));
    }
    drop(f.manifest);
    Ok((model, meta))
}

/// Names listed in a model file's manifest, in file order.
pub fn manifest_names(path: &Path) -> Result<Vec<String>> {
    let f = FileReader::open(path)?;
    Ok(f.manifest.into_iter().map(|(n, _, _, _)| n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{NeuralScheme, TrainConfig};

    fn tiny_models() -> (EncoderModel<f64>, DecoderModel<f64>) {
        let cfg = TrainConfig {
            k: 3,
            n: 6,
            enc_hidden: 5,
            dec_hidden: 4,
            ..TrainConfig::default()
        };
        let scheme = NeuralScheme::<f64>::init(&cfg).unwrap();
        (scheme.enc, scheme.dec)
    }

    #[test]
    fn neural_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fbnfc");
        let (mut enc, dec) = tiny_models();
        // Attach frozen stats so that branch round-trips too.
        enc.norm_stats = Some(NormStats {
            mean: (0..6).map(|i| i as f64 * 0.17).collect(),
            var: (0..6).map(|i| 0.5 + i as f64 * 0.01).collect(),
            provenance: NormProvenance::Frozen,
            floored: vec![2],
        });
        let meta = ModelMeta {
            seed: 42,
            epoch: 7,
            sigma1_sq: 0.794,
            sigma2_sq: 0.01,
        };
        save_neural_model(&path, &enc, &dec, &meta).unwrap();
        let (loaded, meta2) = load_model::<f64>(&path).unwrap();
        assert_eq!(meta, meta2);
        match loaded {
            LoadedModel::Neural { enc: e2, dec: d2 } => {
                assert_eq!(enc.w_e, e2.w_e);
                assert_eq!(enc.power_w, e2.power_w);
                assert_eq!(enc.grus[0].w_r, e2.grus[0].w_r);
                assert_eq!(enc.grus[1].u_c, e2.grus[1].u_c);
                let s1 = enc.norm_stats.as_ref().unwrap();
                let s2 = e2.norm_stats.as_ref().unwrap();
                assert_eq!(s1.mean, s2.mean);
                assert_eq!(s1.var, s2.var);
                assert_eq!(s1.floored, s2.floored);
                assert_eq!(dec.w_d, d2.w_d);
                assert_eq!(dec.attn_b, d2.attn_b);
                assert_eq!(dec.bwd[1].b_c, d2.bwd[1].b_c);
            }
            _ => panic!("expected neural model"),
        }
        // Saving the loaded model reproduces the file byte-for-byte.
        let path2 = dir.path().join("m2.fbnfc");
        let (loaded, _) = load_model::<f64>(&path).unwrap();
        if let LoadedModel::Neural { enc: e2, dec: d2 } = loaded {
            save_neural_model(&path2, &e2, &d2, &meta).unwrap();
        }
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn wrong_magic_and_version_fail_early() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fbnfc");
        std::fs::write(&path, b"NOTIT\x01\x00\x00\x00").unwrap();
        let e = load_model::<f64>(&path).unwrap_err();
        assert!(format!("{e}").contains("magic"), "{e}");

        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let e = load_model::<f64>(&path).unwrap_err();
        assert!(format!("{e}").contains("version"), "{e}");
    }

    #[test]
    fn manifest_lists_every_model_array() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fbnfc");
        let (enc, dec) = tiny_models();
        let meta = ModelMeta {
            seed: 1,
            epoch: 0,
            sigma1_sq: 1.0,
            sigma2_sq: 0.0,
        };
        save_neural_model(&path, &enc, &dec, &meta).unwrap();
        let names = manifest_names(&path).unwrap();
        for expect in [
            "enc.gru0.w_r",
            "enc.gru1.u_c",
            "enc.w_e",
            "enc.b_e",
            "enc.power_w",
            "dec.f0.w_r",
            "dec.b1.b_u",
            "dec.attn_f",
            "dec.attn_b",
            "dec.w_d",
            "dec.v_d",
        ] {
            assert!(names.iter().any(|n| n == expect), "missing {expect}");
        }
        // No duplicates.
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn linear_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lin.fbnfc");
        let cfg = TrainConfig {
            k: 3,
            n: 6,
            ..TrainConfig::default()
        };
        let mut model = LinearFeedbackModel::<f64>::init(&cfg).unwrap();
        model.msg_w.set(1, 2, 0.123456789);
        let meta = ModelMeta {
            seed: 5,
            epoch: 3,
            sigma1_sq: 1.26,
            sigma2_sq: 0.1,
        };
        save_linear_model(&path, &model, &meta).unwrap();
        match load_model::<f64>(&path).unwrap() {
            (LoadedModel::Linear(m2), meta2) => {
                assert_eq!(model.msg_w, m2.msg_w);
                assert_eq!(model.fb_w, m2.fb_w);
                assert_eq!(model.dec_w, m2.dec_w);
                assert_eq!(meta, meta2);
            }
            _ => panic!("expected linear model"),
        }
    }
}
