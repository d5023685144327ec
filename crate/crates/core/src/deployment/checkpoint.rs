use std::fs;
use std::path::Path;

use super::container::Container;
use crate::network::{build_preset, Activation, Model, ModelConfig, ParamRole, Preset};
use crate::quant::{PactMode, PactState, QuantScheme};
use crate::{Error, Result, Tensor};

pub const MODEL_KIND: &str = "model";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config_hash: u64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn model_to_container(model: &Model, config_hash: u64) -> Container {
    let mut c = Container::new(MODEL_KIND, config_hash);
    c.push_header(&["preset", model.preset.as_str()]);
    let [ch, h, w] = model.input;
    c.push_header(&["input", &ch.to_string(), &h.to_string(), &w.to_string()]);
    c.push_header(&["classes", &model.classes.to_string()]);
    c.push_header(&["width", &model.width.to_string()]);
    let mut m = model.clone();
    for (name, act) in m.activations_mut() {
        if let Activation::Pact(p) = act {
            let bits = p.bits.map(|b| b.to_string()).unwrap_or_else(|| "fp".into());
            c.push_header(&["act", &name, &bits, &p.mode.to_string()]);
        }
    }
    let schemes: Vec<(String, String)> = model
        .linears()
        .iter()
        .map(|l| (l.weight_name(), l.scheme.tag()))
        .collect();
    for (name, role, t) in model.tensors() {
        let scheme = schemes
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, s)| s.as_str())
            .unwrap_or("-");
        let data = t.data().iter().map(|&v| v as f32).collect();
        c.push(&name, role.as_str(), t.shape(), scheme, data);
    }
    c
}

fn one<'a>(c: &'a Container, key: &str) -> Result<&'a str> {
    match c.header_value(key)? {
        [v] => Ok(v),
        other => Err(bad(format!("`{key}` expects one value, got {other:?}"))),
    }
}

fn num(c: &Container, key: &str) -> Result<usize> {
    one(c, key)?
        .parse()
        .map_err(|_| bad(format!("`{key}` is not a count")))
}

pub fn model_from_container(c: &Container) -> Result<Model> {
    if c.kind != MODEL_KIND {
        return Err(bad(format!(
            "file holds a `{}`, not a trainable model",
            c.kind
        )));
    }
    let preset: Preset = one(c, "preset")?
        .parse()
        .map_err(|e: Error| bad(e.to_string()))?;
    let input = c.header_value("input")?;
    let input: Vec<usize> = input
        .iter()
        .map(|v| v.parse().map_err(|_| bad("bad input shape")))
        .collect::<Result<_>>()?;
    let input: [usize; 3] = input.try_into().map_err(|_| bad("input needs 3 extents"))?;
    let cfg = ModelConfig {
        preset,
        input,
        classes: num(c, "classes")?,
        width: num(c, "width")?,
        ..ModelConfig::default()
    };
    let mut model = build_preset(&cfg, 0).map_err(|e| bad(e.to_string()))?;
    for h in c.header.iter().filter(|h| h[0] == "act") {
        let [_, name, bits, mode] = &h[..] else {
            return Err(bad(format!("malformed act line {h:?}")));
        };
        let bits = match bits.as_str() {
            "fp" => None,
            b => Some(
                b.parse::<u32>()
                    .map_err(|_| bad(format!("bad bits in act line {h:?}")))?,
            ),
        };
        let mode: PactMode = mode.parse().map_err(|e: Error| bad(e.to_string()))?;
        let mut found = false;
        for (n, act) in model.activations_mut() {
            if n == *name {
                *act =
                    Activation::Pact(PactState::new(bits, mode).map_err(|e| bad(e.to_string()))?);
                found = true;
            }
        }
        if !found {
            return Err(bad(format!("no activation `{name}` in {preset}")));
        }
    }
    for l in model.linears_mut() {
        let e = c.get(&l.weight_name())?;
        l.scheme =
            QuantScheme::parse_tag(&e.scheme, l.fan_out()).map_err(|err| bad(err.to_string()))?;
    }
    let expected = model.tensors();
    if expected.len() != c.entries.len() {
        return Err(bad(format!(
            "manifest lists {} tensors, architecture has {}",
            c.entries.len(),
            expected.len()
        )));
    }
    for (name, role, _) in expected {
        let e = c.get(&name)?;
        if e.role != role.as_str() {
            return Err(bad(format!(
                "`{name}` has role {}, expected {role}",
                e.role
            )));
        }
        let t = Tensor::new(e.shape.clone(), e.data.iter().map(|&v| v as f64).collect())?;
        model
            .set_tensor(&name, &t)
            .map_err(|err| bad(format!("`{name}`: {err}")))?;
    }
    if model
        .tensors()
        .iter()
        .any(|(_, r, t)| *r == ParamRole::Alpha && !(t.item() > 0.0))
    {
        return Err(bad("non-positive clip level"));
    }
    Ok(model)
}

pub fn encode_checkpoint(model: &Model, config_hash: u64) -> Vec<u8> {
    model_to_container(model, config_hash).encode()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let c = Container::decode(bytes)?;
    Ok(Checkpoint {
        model: model_from_container(&c)?,
        config_hash: c.config_hash,
    })
}

pub fn save_checkpoint(model: &Model, config_hash: u64, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model, config_hash))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

/// Warning text when a checkpoint was written under a different config.
/// Finetuning loads such checkpoints on purpose, so this never fails.
pub fn hash_warning(checkpoint: &Checkpoint, config_hash: u64) -> Option<String> {
    (checkpoint.config_hash != config_hash).then(|| {
        format!(
            "checkpoint config hash {:016x} differs from current config {:016x}",
            checkpoint.config_hash, config_hash
        )
    })
}
