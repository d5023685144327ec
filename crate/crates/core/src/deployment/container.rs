//! Binary container shared by checkpoints and folded models.
//!
//! ```text
//! "QSAT" | version u32 LE | config hash u64 LE | manifest length u32 LE
//! | manifest (UTF-8) | payload (f32 LE, tensors in manifest order)
//! ```
//!
//! The manifest is line-oriented: a `kind` line, free `key value…` header
//! lines, then one `tensor <name> <role> <shape> <scheme>` line per tensor.
//! Shapes are `x`-joined extents; `scheme` is `-` when not applicable.

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QSAT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub role: String,
    pub shape: Vec<usize>,
    pub scheme: String,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config_hash: u64,
    /// Header lines between `kind` and the tensor lines, split on spaces.
    pub header: Vec<Vec<String>>,
    pub entries: Vec<Entry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Container {
    pub fn new(kind: &str, config_hash: u64) -> Self {
        Container {
            kind: kind.to_string(),
            config_hash,
            header: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn push_header(&mut self, fields: &[&str]) {
        self.header
            .push(fields.iter().map(|s| s.to_string()).collect());
    }

    pub fn header_value(&self, key: &str) -> Result<&[String]> {
        self.header
            .iter()
            .find(|h| h[0] == key)
            .map(|h| &h[1..])
            .ok_or_else(|| bad(format!("manifest lacks `{key}`")))
    }

    pub fn push(&mut self, name: &str, role: &str, shape: &[usize], scheme: &str, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(Entry {
            name: name.to_string(),
            role: role.to_string(),
            shape: shape.to_vec(),
            scheme: scheme.to_string(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| bad(format!("no tensor `{name}`")))
    }

    fn manifest(&self) -> String {
        let mut m = format!("kind {}\n", self.kind);
        for h in &self.header {
            m.push_str(&h.join(" "));
            m.push('\n');
        }
        for e in &self.entries {
            let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            m.push_str(&format!(
                "tensor {} {} {} {}\n",
                e.name,
                e.role,
                shape.join("x"),
                e.scheme
            ));
        }
        m
    }

    pub fn encode(&self) -> Vec<u8> {
        let manifest = self.manifest();
        let payload: usize = self.entries.iter().map(|e| 4 * e.data.len()).sum();
        let mut out = Vec::with_capacity(20 + manifest.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(bad("file too short for header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let config_hash = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let mlen = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < mlen {
            return Err(bad("truncated manifest"));
        }
        let manifest =
            std::str::from_utf8(&body[..mlen]).map_err(|_| bad("manifest is not UTF-8"))?;
        let mut lines = manifest.lines();
        let kind = lines
            .next()
            .and_then(|l| l.strip_prefix("kind "))
            .ok_or_else(|| bad("manifest must start with `kind`"))?
            .to_string();
        let mut c = Container::new(&kind, config_hash);
        let mut specs = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(' ').collect();
            if f[0] == "tensor" {
                if f.len() != 5 {
                    return Err(bad(format!("malformed tensor line `{line}`")));
                }
                let shape = f[3]
                    .split('x')
                    .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| bad(format!("bad shape in `{line}`")))?;
                specs.push((f[1], f[2], shape, f[4]));
            } else if !specs.is_empty() {
                return Err(bad(format!("header line `{line}` after tensor lines")));
            } else {
                c.push_header(&f);
            }
        }
        let payload = &body[mlen..];
        let expected: usize = specs
            .iter()
            .map(|s| 4 * s.2.iter().product::<usize>())
            .sum();
        if payload.len() != expected {
            return Err(bad(format!(
                "payload holds {} bytes, manifest describes {expected}",
                payload.len()
            )));
        }
        let mut at = 0;
        for (name, role, shape, scheme) in specs {
            let n: usize = shape.iter().product();
            let data = payload[at..at + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            at += 4 * n;
            c.push(name, role, &shape, scheme, data);
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("model", 42);
        c.push_header(&["preset", "convnet-bn"]);
        c.push(
            "a.weight",
            "weight",
            &[2, 3],
            "q4+constant",
            vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0, 4.0, 5.0],
        );
        c.push("a.alpha", "alpha", &[1], "-", vec![8.0]);
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.encode();
        let d = Container::decode(&bytes).unwrap();
        assert_eq!(d, c);
        assert_eq!(d.encode(), bytes);
        assert_eq!(
            d.header_value("preset").unwrap(),
            &["convnet-bn".to_string()]
        );
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().encode();
        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(Container::decode(&m)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(Container::decode(&v)
            .unwrap_err()
            .to_string()
            .contains("version"));
        assert!(Container::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 0, 0, 0]);
        assert!(Container::decode(&extra).is_err());
        assert!(Container::decode(&bytes[..10]).is_err());
    }
}
