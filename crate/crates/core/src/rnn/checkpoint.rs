//! Self-describing model checkpoints.
//!
//! Layout:
//!
//! ```text
//! statefuzz-checkpoint 1\n
//! key=value\n          (config fields, token list, tensor count)
//! ...
//! end\n
//! repeated per tensor, in name order:
//!   u32 name length | name bytes (UTF-8) | u32 rank | u64 extent × rank | f64 × product(extents)
//! ```
//!
//! All integers and reals are little-endian. Tokens are stored as
//! comma-separated lowercase hex of their UTF-8 bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CellKind, Model, ModelParams, OutputHead, RnnConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "statefuzz-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Token strings by id, for token models.
    pub tokens: Option<Vec<String>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn hex_encode(s: &str) -> String {
    s.bytes().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<String> {
    if s.len() % 2 != 0 {
        return Err(bad("odd-length hex token"));
    }
    let bytes = (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| bad("invalid hex token")))
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| bad("token is not UTF-8"))
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "none".to_string(), |n| n.to_string())
}

impl Checkpoint {
    pub fn new(model: Model, tokens: Option<Vec<String>>) -> Result<Self> {
        if let (Some(t), Some(v)) = (&tokens, model.config().vocab_size) {
            if t.len() != v {
                return Err(bad(format!("{} tokens for a vocabulary of {v}", t.len())));
            }
        }
        Ok(Self { model, tokens })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let cfg = self.model.config();
        let params = self.model.params();
        let mut header = format!("{MAGIC} {VERSION}\n");
        for (k, v) in [
            ("cell_kind", cfg.cell_kind.as_str().to_string()),
            ("num_layers", cfg.num_layers.to_string()),
            ("state_size", cfg.state_size.to_string()),
            ("input_dim", cfg.input_dim.to_string()),
            ("vocab_size", opt(cfg.vocab_size)),
            ("embedding_dim", opt(cfg.embedding_dim)),
            ("output_head", cfg.output_head.as_str().to_string()),
            ("num_classes", opt(cfg.num_classes)),
            ("tensors", params.len().to_string()),
        ] {
            header.push_str(&format!("{k}={v}\n"));
        }
        if let Some(tokens) = &self.tokens {
            let enc: Vec<String> = tokens.iter().map(|t| hex_encode(t)).collect();
            header.push_str(&format!("tokens={}\n", enc.join(",")));
        }
        header.push_str("end\n");

        let mut buf = header.into_bytes();
        for (name, t) in params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &n in t.shape() {
                buf.extend_from_slice(&(n as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| bad(format!("write failed: {e}")))
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        let mut read_line = |line: &mut String| -> Result<()> {
            line.clear();
            let n = r.read_line(line).map_err(|e| bad(format!("read failed: {e}")))?;
            if n == 0 {
                return Err(bad("truncated header"));
            }
            Ok(())
        };
        read_line(&mut line)?;
        let version = line
            .trim_end()
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| bad("not a checkpoint file"))?;
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }

        let mut fields = std::collections::BTreeMap::new();
        loop {
            read_line(&mut line)?;
            let l = line.trim_end_matches('\n');
            if l == "end" {
                break;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header line {l:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| bad(format!("header lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| bad(format!("{k} is not an integer")))
        };
        let opt_num = |k: &str| -> Result<Option<usize>> {
            match get(k)? {
                "none" => Ok(None),
                s => s.parse().map(Some).map_err(|_| bad(format!("{k} is not an integer"))),
            }
        };
        let config = RnnConfig {
            cell_kind: get("cell_kind")?.parse::<CellKind>()?,
            num_layers: num("num_layers")?,
            state_size: num("state_size")?,
            input_dim: num("input_dim")?,
            vocab_size: opt_num("vocab_size")?,
            embedding_dim: opt_num("embedding_dim")?,
            output_head: get("output_head")?.parse::<OutputHead>()?,
            num_classes: opt_num("num_classes")?,
        };
        let tokens = match fields.get("tokens") {
            None => None,
            Some(s) if s.is_empty() => Some(Vec::new()),
            Some(s) => Some(s.split(',').map(hex_decode).collect::<Result<Vec<_>>>()?),
        };
        let count = num("tensors")?;

        let mut params = ModelParams::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|n| n as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; len * 8];
            read_exact(&mut r, &mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
            return Err(bad("trailing bytes after last tensor"));
        }
        let model = Model::new(config, params)?;
        Self::new(model, tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| bad("truncated tensor data"))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
