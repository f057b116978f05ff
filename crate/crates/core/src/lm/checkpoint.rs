//! Checkpoint directory layout:
//!
//! - `manifest.txt`: format line, dtype, step, architecture fields, special
//!   token ids, then one `tensor <name> <rows> <cols> <byte_offset>` line
//!   per parameter tensor.
//! - `params.bin`: all tensors back to back, row-major, little-endian.
//! - `vocab.txt`: one escaped token per line, in id order.
//!
//! Loading validates everything before a model is constructed, so a corrupt
//! or truncated checkpoint never yields a partially initialized model.
//! Save and load round-trip bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Elem};

use super::model::{Model, ModelConfig, Params};
use super::vocab::{escape_token, unescape_token, Vocabulary};

const FORMAT_LINE: &str = "format covo-checkpoint v1";

pub fn save<F: Elem>(model: &Model<F>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut blob: Vec<u8> = Vec::new();
    let mut tensor_lines = Vec::new();
    model.params().visit(|name, t| {
        tensor_lines.push(format!(
            "tensor {name} {} {} {}",
            t.rows(),
            t.cols(),
            blob.len()
        ));
        for &v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes_vec());
        }
    });

    let params_path = dir.join("params.bin");
    fs::write(&params_path, &blob).map_err(|e| Error::io(&params_path, e))?;

    let vocab_path = dir.join("vocab.txt");
    let mut vf = fs::File::create(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    for tok in model.vocab().tokens() {
        writeln!(vf, "{}", escape_token(tok)).map_err(|e| Error::io(&vocab_path, e))?;
    }

    let cfg = model.config();
    let mut manifest = String::new();
    manifest.push_str(FORMAT_LINE);
    manifest.push('\n');
    manifest.push_str(&format!("dtype {}\n", F::DTYPE.name()));
    manifest.push_str(&format!("step {}\n", model.step()));
    manifest.push_str(&format!("dim {}\n", cfg.dim));
    manifest.push_str(&format!("layers {}\n", cfg.layers));
    manifest.push_str(&format!("heads {}\n", cfg.heads));
    manifest.push_str(&format!("context {}\n", cfg.context));
    manifest.push_str(&format!("tied_head {}\n", cfg.tied_head));
    manifest.push_str(&format!("final_norm {}\n", cfg.final_norm));
    manifest.push_str(&format!("pad {}\n", model.vocab().pad_id()));
    manifest.push_str(&format!("eos {}\n", model.vocab().eos_id()));
    for line in &tensor_lines {
        manifest.push_str(line);
        manifest.push('\n');
    }
    // Manifest written last: an interrupted save is not loadable.
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

struct ManifestTensor {
    rows: usize,
    cols: usize,
    offset: usize,
}

struct Manifest {
    dtype: Dtype,
    step: u64,
    cfg: ModelConfig,
    pad: u32,
    eos: u32,
    tensors: Vec<(String, ManifestTensor)>,
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let bad = |msg: &str| Error::Checkpoint(format!("manifest: {msg}"));
    let mut lines = text.lines();
    if lines.next() != Some(FORMAT_LINE) {
        return Err(bad("unrecognized format line"));
    }
    let mut fields = std::collections::HashMap::new();
    let mut tensors = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["tensor", name, rows, cols, offset] => {
                let parse = |s: &str, what: &str| {
                    s.parse::<usize>()
                        .map_err(|_| bad(&format!("bad {what} in tensor line {line:?}")))
                };
                tensors.push((
                    name.to_string(),
                    ManifestTensor {
                        rows: parse(rows, "rows")?,
                        cols: parse(cols, "cols")?,
                        offset: parse(offset, "offset")?,
                    },
                ));
            }
            [key, value] => {
                fields.insert(key.to_string(), value.to_string());
            }
            _ => return Err(bad(&format!("unrecognized line {line:?}"))),
        }
    }
    let field = |k: &str| {
        fields
            .get(k)
            .cloned()
            .ok_or_else(|| bad(&format!("missing field {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        field(k)?
            .parse::<usize>()
            .map_err(|_| bad(&format!("bad numeric field {k}")))
    };
    let flag = |k: &str| -> Result<bool> {
        match field(k)?.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(bad(&format!("bad boolean field {k}: {other}"))),
        }
    };
    let dtype = Dtype::parse(&field("dtype")?).ok_or_else(|| bad("unknown dtype"))?;
    Ok(Manifest {
        dtype,
        step: field("step")?
            .parse::<u64>()
            .map_err(|_| bad("bad step"))?,
        cfg: ModelConfig {
            dim: num("dim")?,
            layers: num("layers")?,
            heads: num("heads")?,
            context: num("context")?,
            tied_head: flag("tied_head")?,
            final_norm: flag("final_norm")?,
        },
        pad: num("pad")? as u32,
        eos: num("eos")? as u32,
        tensors,
    })
}

pub fn load<F: Elem>(dir: &Path) -> Result<Model<F>> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest = parse_manifest(&text)?;
    if manifest.dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "dtype mismatch: checkpoint holds {}, requested {}",
            manifest.dtype.name(),
            F::DTYPE.name()
        )));
    }

    let vocab_path = dir.join("vocab.txt");
    let vtext = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    let mut tokens = Vec::new();
    for line in vtext.split('\n') {
        if line.is_empty() {
            continue;
        }
        tokens.push(unescape_token(line)?);
    }
    let vocab = Arc::new(Vocabulary::from_tokens(tokens, manifest.pad, manifest.eos)?);

    let params_path = dir.join("params.bin");
    let blob = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    let width = F::DTYPE.byte_width();

    let mut params: Params<F> = Params::zeros(&manifest.cfg, vocab.size());
    let expected = params.tensor_names();
    let mut seen = std::collections::HashSet::new();
    for (name, mt) in &manifest.tensors {
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        let tensor = params
            .tensor_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if tensor.rows() != mt.rows || tensor.cols() != mt.cols {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {}x{}, expected {}x{}",
                mt.rows,
                mt.cols,
                tensor.rows(),
                tensor.cols()
            )));
        }
        let nbytes = tensor.len() * width;
        let end = mt.offset.checked_add(nbytes).ok_or_else(|| {
            Error::Checkpoint(format!("tensor {name} offset overflows"))
        })?;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "params.bin truncated: tensor {name} needs bytes {}..{end} but file has {}",
                mt.offset,
                blob.len()
            )));
        }
        for (i, chunk) in blob[mt.offset..end].chunks_exact(width).enumerate() {
            tensor.data_mut()[i] = F::from_le_slice(chunk);
        }
    }
    for name in &expected {
        if !seen.contains(name) {
            return Err(Error::Checkpoint(format!("manifest missing tensor {name}")));
        }
    }
    Model::from_params(manifest.cfg, vocab, params, manifest.step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::adam::{optimizer_step, Adam, AdamConfig};
    use crate::lm::loss::{loss_and_gradients, LossSpec};
    use crate::lm::model::ModelConfig;

    fn vocab() -> Arc<Vocabulary> {
        Arc::new(Vocabulary::from_charset("\nab").unwrap())
    }

    fn params_equal<F: Elem>(a: &Params<F>, b: &Params<F>) -> bool {
        let mut flat_a = Vec::new();
        a.visit(|_, t| flat_a.extend(t.data().iter().map(|v| v.as_f64().to_bits())));
        let mut flat_b = Vec::new();
        b.visit(|_, t| flat_b.extend(t.data().iter().map(|v| v.as_f64().to_bits())));
        flat_a == flat_b
    }

    #[test]
    fn roundtrip_is_bit_exact_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut m: Model<f32> = Model::new(ModelConfig::default(), vocab(), 4).unwrap();
        // A couple of training steps so moments of real training are present.
        let docs = vec![vec![2u32, 3, 4, 1]];
        let mut opt = Adam::new(m.params(), AdamConfig::default());
        for _ in 0..2 {
            let mut out = loss_and_gradients(&m, &LossSpec::CrossEntropy { docs: &docs }).unwrap();
            optimizer_step(&mut m, &mut opt, &mut out.grads, 1e-3, 100.0);
        }
        save(&m, dir.path()).unwrap();
        let back: Model<f32> = load(dir.path()).unwrap();
        assert!(params_equal(m.params(), back.params()));
        assert_eq!(back.step(), 2);
        assert!(back.vocab().same_as(m.vocab()));
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn roundtrip_is_bit_exact_f64_untied() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            tied_head: false,
            final_norm: false,
            ..ModelConfig::default()
        };
        let m: Model<f64> = Model::new(cfg, vocab(), 42).unwrap();
        save(&m, dir.path()).unwrap();
        let back: Model<f64> = load(dir.path()).unwrap();
        assert!(params_equal(m.params(), back.params()));
    }

    #[test]
    fn truncated_params_names_a_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let m: Model<f32> = Model::new(ModelConfig::default(), vocab(), 4).unwrap();
        save(&m, dir.path()).unwrap();
        let blob = fs::read(dir.path().join("params.bin")).unwrap();
        fs::write(dir.path().join("params.bin"), &blob[..blob.len() - 1]).unwrap();
        let err = load::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        assert!(err.contains("tensor"), "{err}");
    }

    #[test]
    fn missing_tensor_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let m: Model<f32> = Model::new(ModelConfig::default(), vocab(), 4).unwrap();
        save(&m, dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        let pruned: String = manifest
            .lines()
            .filter(|l| !l.starts_with("tensor wpe"))
            .map(|l| format!("{l}\n"))
            .collect();
        fs::write(dir.path().join("manifest.txt"), pruned).unwrap();
        let err = load::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing tensor wpe"), "{err}");
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m: Model<f32> = Model::new(ModelConfig::default(), vocab(), 4).unwrap();
        save(&m, dir.path()).unwrap();
        let err = load::<f64>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("dtype mismatch"), "{err}");
    }

    #[test]
    fn missing_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load::<f32>(&dir.path().join("nope")).is_err());
    }
}
