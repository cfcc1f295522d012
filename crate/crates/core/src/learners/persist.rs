//! Model files: a short `key: value` header followed by a JSON body.
//!
//! ```text
//! slice-forecast-model
//! format_version: 1
//! kind: forest
//! seed: 42
//! window: 50
//! n_features: 17
//! ---
//! {"hyperparams": ..., "scaler": ..., "params": ...}
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Hyperparams, ModelKind, ModelParams, TrainMeta, TrainedModel};
use crate::datasetgen::Scaler;
use crate::{Error, Result};

pub const FORMAT_MAGIC: &str = "slice-forecast-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Body {
    hyperparams: Hyperparams,
    feature_names: Vec<String>,
    scaler: Scaler,
    meta: TrainMeta,
    params: ModelParams,
}

pub fn write_model<W: Write>(model: &TrainedModel, mut out: W) -> Result<()> {
    let body = Body {
        hyperparams: model.hyperparams.clone(),
        feature_names: model.feature_names.clone(),
        scaler: model.scaler.clone(),
        meta: model.meta.clone(),
        params: model.params.clone(),
    };
    let header = format!(
        "{FORMAT_MAGIC}\nformat_version: {FORMAT_VERSION}\nkind: {}\nseed: {}\nwindow: {}\nn_features: {}\n---\n",
        model.kind,
        model.seed,
        model.window,
        model.feature_names.len()
    );
    let mut buf = header.into_bytes();
    serde_json::to_writer(&mut buf, &body)?;
    buf.push(b'\n');
    out.write_all(&buf).map_err(|e| Error::io("<model>", e))
}

fn mismatch(field: &str, expected: impl ToString, found: impl ToString) -> Error {
    Error::ModelFormat {
        field: field.to_string(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

pub fn read_model<R: Read>(input: R) -> Result<TrainedModel> {
    let mut r = BufReader::new(input);
    let mut line = String::new();
    let mut next = |r: &mut BufReader<R>| -> Result<String> {
        line.clear();
        r.read_line(&mut line).map_err(|e| Error::io("<model>", e))?;
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };
    let magic = next(&mut r)?;
    if magic != FORMAT_MAGIC {
        return Err(mismatch("magic", FORMAT_MAGIC, magic));
    }
    let mut field = |r: &mut BufReader<R>, key: &str| -> Result<String> {
        let l = next(r)?;
        match l.split_once(": ") {
            Some((k, v)) if k == key => Ok(v.to_string()),
            _ => Err(mismatch(key, format!("{key}: <value>"), l)),
        }
    };
    let version = field(&mut r, "format_version")?;
    if version != FORMAT_VERSION.to_string() {
        return Err(mismatch("format_version", FORMAT_VERSION, version));
    }
    let kind_s = field(&mut r, "kind")?;
    let kind: ModelKind = kind_s
        .parse()
        .map_err(|_| mismatch("kind", "a known model kind", &kind_s))?;
    let seed_s = field(&mut r, "seed")?;
    let seed: u64 = seed_s.parse().map_err(|_| mismatch("seed", "an unsigned integer", &seed_s))?;
    let window_s = field(&mut r, "window")?;
    let window: usize = window_s
        .parse()
        .map_err(|_| mismatch("window", "an unsigned integer", &window_s))?;
    let nf_s = field(&mut r, "n_features")?;
    let n_features: usize = nf_s
        .parse()
        .map_err(|_| mismatch("n_features", "an unsigned integer", &nf_s))?;
    let sep = next(&mut r)?;
    if sep != "---" {
        return Err(mismatch("separator", "---", sep));
    }
    let body: Body = serde_json::from_reader(r)?;
    if body.params.kind() != kind {
        return Err(mismatch("params", kind, body.params.kind()));
    }
    if body.feature_names.len() != n_features {
        return Err(mismatch("feature_names", n_features, body.feature_names.len()));
    }
    // the lagged-target channel is scaled with target statistics
    let scaled = body.scaler.n_features();
    if body.scaler.fitted && scaled != n_features && scaled + 1 != n_features {
        return Err(mismatch("scaler", n_features, scaled));
    }
    Ok(TrainedModel {
        kind,
        hyperparams: body.hyperparams,
        seed,
        window,
        feature_names: body.feature_names,
        scaler: body.scaler,
        meta: body.meta,
        params: body.params,
    })
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_model(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(f)
}

impl TrainedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_model(self, &mut buf).expect("writing to memory");
        buf
    }

    /// Stable identifier: leading hex of the sha256 of the model file.
    pub fn content_id(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        hex::encode(&digest[..8])
    }
}
