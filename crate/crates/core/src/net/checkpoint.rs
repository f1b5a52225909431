//! Checkpoint files: a text header of `key=value` lines terminated by
//! `end`, then raw little-endian float32 parameters (and, when present,
//! the Adam moments).

use std::path::Path;

use super::{ParamStore, Real};
use crate::error::{Error, Result};
use crate::imgio::write_atomic;

const MAGIC: &str = "panofield-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new<T: Real>(header: Vec<(String, String)>, store: &ParamStore<T>) -> Self {
        Checkpoint {
            header,
            store: store.cast(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(format!("checkpoint is missing '{key}'")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::format(format!("checkpoint field {key}='{raw}' is malformed")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut text = format!("{MAGIC}\n");
        for (k, v) in &self.header {
            text.push_str(&format!("{k}={v}\n"));
        }
        text.push_str(&format!(
            "byte_order=le\nparams={}\nstep={}\nend\n",
            self.store.params.len(),
            self.store.step
        ));
        let mut out = text.into_bytes();
        for block in [&self.store.params, &self.store.m, &self.store.v] {
            for x in block.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format("checkpoint header is not terminated"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| Error::format("checkpoint header is not utf-8"))?
                .to_string();
            pos += end + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
        }
        if lines.first().map(String::as_str) != Some(MAGIC) {
            return Err(Error::format("not a panofield checkpoint"));
        }
        let mut header = Vec::new();
        let (mut count, mut step, mut order) = (None, 0u64, None);
        for line in &lines[1..] {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad checkpoint header line '{line}'")))?;
            match k {
                "params" => count = v.parse::<usize>().ok(),
                "step" => step = v.parse().map_err(|_| Error::format("bad step"))?,
                "byte_order" => order = Some(v.to_string()),
                _ => header.push((k.to_string(), v.to_string())),
            }
        }
        if order.as_deref() != Some("le") {
            return Err(Error::format("checkpoint byte order marker missing or unsupported"));
        }
        let n = count.ok_or_else(|| Error::format("checkpoint parameter count missing"))?;
        let payload = &bytes[pos..];
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if payload.len() % 4 != 0 || floats.len() != 3 * n {
            return Err(Error::format(format!(
                "checkpoint payload holds {} floats, expected {}",
                floats.len(),
                3 * n
            )));
        }
        let store = ParamStore {
            params: floats[..n].to_vec(),
            m: floats[n..2 * n].to_vec(),
            v: floats[2 * n..].to_vec(),
            step,
        };
        Ok(Checkpoint { header, store })
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &ckpt.encode())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
