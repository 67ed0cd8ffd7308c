//! Single-file model archive.
//!
//! A text manifest followed by raw little-endian payloads:
//!
//! ```text
//! CCPROMPT-CKPT 1
//! meta config_hash 3f2a9c0d11e4b6a7
//! blob model 412
//! blob vocab 1093
//! tensor verbalizer 3 16
//! ...
//! end
//! <blob bytes, in manifest order><f64 tensor data, row-major, in manifest order>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoder::{AdapterRegistry, ToyEncoderConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{Ablations, CcPromptModel, EncoderKind, ModelConfig, TemplateSpec};
use crate::prototype::Denominator;

const MAGIC: &str = "CCPROMPT-CKPT 1";

#[derive(Debug, Serialize, Deserialize)]
struct ModelRecord {
    labels: Vec<String>,
    encoder: String,
    dim: usize,
    hidden: usize,
    layers: usize,
    max_length: usize,
    embedding_std: f64,
    head_hidden: usize,
    template_tokens: Option<usize>,
    template_text: Option<Vec<String>>,
    m: Option<usize>,
    share_encoder: bool,
    include_positive_in_denominator: bool,
    weights: (f64, f64, f64),
    ablations: String,
    seed: u64,
}

impl From<&ModelConfig> for ModelRecord {
    fn from(c: &ModelConfig) -> Self {
        let (template_tokens, template_text) = match &c.template {
            TemplateSpec::Continuous(n) => (Some(*n), None),
            TemplateSpec::Discrete(t) => (None, Some(t.clone())),
        };
        Self {
            labels: c.labels.clone(),
            encoder: c.encoder.to_string(),
            dim: c.toy.dim,
            hidden: c.toy.hidden,
            layers: c.toy.layers,
            max_length: c.toy.max_length,
            embedding_std: c.toy.embedding_std,
            head_hidden: c.head_hidden,
            template_tokens,
            template_text,
            m: c.m,
            share_encoder: c.share_encoder,
            include_positive_in_denominator: c.denominator == Denominator::WithPositive,
            weights: (c.weights.cls, c.weights.siamese, c.weights.contrastive),
            ablations: c.ablations.to_string(),
            seed: c.seed,
        }
    }
}

impl ModelRecord {
    fn into_config(self) -> Result<ModelConfig> {
        let template = match (self.template_tokens, self.template_text) {
            (Some(n), None) => TemplateSpec::Continuous(n),
            (None, Some(t)) => TemplateSpec::Discrete(t),
            _ => return Err(Error::Checkpoint("model record has no template".into())),
        };
        Ok(ModelConfig {
            labels: self.labels,
            encoder: self
                .encoder
                .parse::<EncoderKind>()
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            toy: ToyEncoderConfig {
                dim: self.dim,
                hidden: self.hidden,
                layers: self.layers,
                max_length: self.max_length,
                embedding_std: self.embedding_std,
            },
            head_hidden: self.head_hidden,
            template,
            m: self.m,
            share_encoder: self.share_encoder,
            denominator: if self.include_positive_in_denominator {
                Denominator::WithPositive
            } else {
                Denominator::NegativesOnly
            },
            weights: LossWeights {
                cls: self.weights.0,
                siamese: self.weights.1,
                contrastive: self.weights.2,
            },
            ablations: Ablations::parse_list(&self.ablations)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            seed: self.seed,
        })
    }
}

/// A loaded archive: the model plus free-form metadata and extra blobs.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: CcPromptModel,
    pub meta: BTreeMap<String, String>,
    pub blobs: BTreeMap<String, Vec<u8>>,
}

/// Serialises a model with metadata (`key → value`, no whitespace in keys
/// or values) and extra named blobs.
pub fn to_bytes(
    model: &CcPromptModel,
    meta: &BTreeMap<String, String>,
    extra: &BTreeMap<String, Vec<u8>>,
) -> Result<Vec<u8>> {
    let record = serde_json::to_vec(&ModelRecord::from(model.config()))?;
    let vocab = model.vocabulary().to_text().into_bytes();
    let mut blobs: Vec<(&str, &[u8])> = vec![("model", &record), ("vocab", &vocab)];
    for (name, data) in extra {
        if name == "model" || name == "vocab" || name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid blob name {name:?}")));
        }
        blobs.push((name, data));
    }

    let mut head = String::new();
    head.push_str(MAGIC);
    head.push('\n');
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') || k.is_empty() {
            return Err(Error::Checkpoint(format!("invalid meta entry {k:?}")));
        }
        head.push_str(&format!("meta {k} {v}\n"));
    }
    for (name, data) in &blobs {
        head.push_str(&format!("blob {name} {}\n", data.len()));
    }
    for (_, name, value) in model.params().iter() {
        head.push_str(&format!(
            "tensor {name} {} {}\n",
            value.nrows(),
            value.ncols()
        ));
    }
    head.push_str("end\n");

    let mut out = head.into_bytes();
    for (_, data) in &blobs {
        out.extend_from_slice(data);
    }
    for (_, _, value) in model.params().iter() {
        for x in value.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(
    path: &Path,
    model: &CcPromptModel,
    meta: &BTreeMap<String, String>,
    extra: &BTreeMap<String, Vec<u8>>,
) -> Result<()> {
    let bytes = to_bytes(model, meta, extra)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, registry: &AdapterRegistry) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, registry)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8], registry: &AdapterRegistry) -> Result<Checkpoint> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated manifest"))?;
        pos += nl + 1;
        std::str::from_utf8(&rest[..nl]).map_err(|_| bad("manifest is not UTF-8"))
    };
    if next_line()? != MAGIC {
        return Err(bad("not a checkpoint (bad header)"));
    }
    let mut meta = BTreeMap::new();
    let mut blob_specs = Vec::new();
    let mut tensor_specs = Vec::new();
    loop {
        let line = next_line()?;
        let parts: Vec<&str> = line.splitn(3, ' ').collect();
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(format!("bad manifest line {line:?}")))
        };
        match parts.as_slice() {
            ["end"] => break,
            ["meta", k, v] => {
                meta.insert((*k).to_owned(), (*v).to_owned());
            }
            ["meta", k] => {
                meta.insert((*k).to_owned(), String::new());
            }
            ["blob", name, len] => blob_specs.push(((*name).to_owned(), parse(len)?)),
            ["tensor", name, dims] => {
                let (r, c) = dims
                    .split_once(' ')
                    .ok_or_else(|| bad(format!("bad manifest line {line:?}")))?;
                tensor_specs.push(((*name).to_owned(), parse(r)?, parse(c)?));
            }
            _ => return Err(bad(format!("bad manifest line {line:?}"))),
        }
    }

    let mut blobs = BTreeMap::new();
    for (name, len) in blob_specs {
        let end = pos
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated blob"))?;
        blobs.insert(name, bytes[pos..end].to_vec());
        pos = end;
    }
    let record: ModelRecord = serde_json::from_slice(
        blobs
            .get("model")
            .ok_or_else(|| bad("missing model blob"))?,
    )?;
    let vocab_text = std::str::from_utf8(
        blobs
            .get("vocab")
            .ok_or_else(|| bad("missing vocab blob"))?,
    )
    .map_err(|_| bad("vocabulary is not UTF-8"))?;
    let vocab = Vocabulary::from_text(vocab_text);
    let mut model = CcPromptModel::with_registry(record.into_config()?, vocab, registry)?;

    let mut seen = std::collections::BTreeSet::new();
    for (name, rows, cols) in tensor_specs {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| bad("tensor too large"))?;
        let end = pos
            .checked_add(n * 8)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("truncated tensor {name}")))?;
        let data: Vec<f64> = bytes[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        pos = end;
        let value = Array2::from_shape_vec((rows, cols), data).expect("length checked");
        model.set_param(&name, value)?;
        seen.insert(name);
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensors"));
    }
    let missing: Vec<&str> = model
        .params()
        .iter()
        .map(|(_, n, _)| n)
        .filter(|n| !seen.contains(*n))
        .collect();
    if !missing.is_empty() {
        return Err(bad(format!("missing tensors: {}", missing.join(", "))));
    }
    blobs.remove("model");
    blobs.remove("vocab");
    Ok(Checkpoint { model, meta, blobs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CcPromptModel {
        let vocab = Vocabulary::from_tokens(["a", "b", "c"].map(String::from));
        let mut cfg = ModelConfig::new(vec!["x".into(), "y".into(), "z".into()]);
        cfg.toy.dim = 4;
        cfg.toy.hidden = 5;
        cfg.head_hidden = 3;
        cfg.seed = 9;
        cfg.m = Some(3);
        CcPromptModel::new(cfg, vocab).unwrap()
    }

    #[test]
    fn round_trip_preserves_predictions_and_meta() {
        let m = model();
        let mut meta = BTreeMap::new();
        meta.insert("config_hash".to_owned(), "abc123".to_owned());
        let mut extra = BTreeMap::new();
        extra.insert("config".to_owned(), b"[data]\ntrain = x\n".to_vec());
        let bytes = to_bytes(&m, &meta, &extra).unwrap();
        let ck = from_bytes(&bytes, &AdapterRegistry::default()).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.blobs, extra);
        let tokens = m.encode_tokens(&["a", "c", "b"]);
        assert_eq!(
            ck.model.predict(&tokens).unwrap(),
            m.predict(&tokens).unwrap()
        );
        for ((_, n1, v1), (_, n2, v2)) in m.params().iter().zip(ck.model.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
        assert_eq!(to_bytes(&ck.model, &ck.meta, &ck.blobs).unwrap(), bytes);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let m = model();
        let bytes = to_bytes(&m, &BTreeMap::new(), &BTreeMap::new()).unwrap();
        let reg = AdapterRegistry::default();
        assert!(from_bytes(&bytes[..bytes.len() - 3], &reg).is_err());
        assert!(from_bytes(b"hello\n", &reg).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(from_bytes(&longer, &reg).is_err());
    }
}
