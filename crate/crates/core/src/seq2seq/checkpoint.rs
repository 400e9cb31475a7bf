//! Checkpoint file: a UTF-8 manifest terminated by an `end_manifest` line,
//! followed by one little-endian f64 blob per tensor in manifest order.
//!
//! ```text
//! trajseq-checkpoint
//! format_version 1
//! input_dim 6
//! ...
//! normalizer_mean <6 values>
//! normalizer_std <6 values>
//! tensors <count>
//! tensor <name> <dim> [<dim>]
//! end_manifest
//! <raw blobs>
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ModelConfig, ModelParams, Normalizer, OBS_FEATURES};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "trajseq-checkpoint";
const END: &str = "end_manifest\n";

fn manifest(params: &ModelParams) -> String {
    let c = &params.config;
    let join = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:?}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut m = format!("{MAGIC}\nformat_version {FORMAT_VERSION}\n");
    for (k, v) in [
        ("input_dim", c.input_dim),
        ("fc_depth", c.fc_depth),
        ("cell_dim", c.cell_dim),
        ("lstm_stack_depth", c.lstm_stack_depth),
        ("q_w", c.q_w),
        ("q_l", c.q_l),
        ("num_classes", c.num_classes()),
        ("embed_dim_per_axis", c.embed_dim_per_axis),
        ("embed_cols_w", c.embed_cols_w()),
        ("embed_cols_l", c.embed_cols_l()),
        ("obs_len", c.obs_len),
        ("horizon", c.horizon),
        ("beam_width", c.beam_width),
    ] {
        m.push_str(&format!("{k} {v}\n"));
    }
    m.push_str(&format!("zero_hidden_init {}\n", c.zero_hidden_init));
    m.push_str(&format!(
        "normalizer_mean {}\n",
        join(&params.normalizer.mean)
    ));
    m.push_str(&format!(
        "normalizer_std {}\n",
        join(&params.normalizer.std)
    ));
    let layout = params.tensor_layout();
    m.push_str(&format!("tensors {}\n", layout.len()));
    for (name, shape) in layout {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        m.push_str(&format!("tensor {name} {}\n", dims.join(" ")));
    }
    m.push_str(END);
    m
}

/// Writes the checkpoint to a temporary sibling and renames it into place.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut bytes = manifest(params).into_bytes();
    for t in params.tensors() {
        for v in t {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_floats(s: &str, what: &str) -> Result<[f64; OBS_FEATURES]> {
    let vals: Vec<f64> = s
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| bad(format!("{what}: {e}")))?;
    vals.try_into().map_err(|v: Vec<f64>| {
        bad(format!(
            "{what}: expected {OBS_FEATURES} values, got {}",
            v.len()
        ))
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let end = bytes
        .windows(END.len())
        .position(|w| w == END.as_bytes())
        .ok_or_else(|| bad("manifest terminator not found"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8"))?;
    let blob = &bytes[end + END.len()..];

    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a trajseq checkpoint"));
    }
    let mut fields: HashMap<&str, &str> = HashMap::new();
    let mut tensors: Vec<(&str, Vec<usize>)> = Vec::new();
    for line in lines {
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
        if key == "tensor" {
            let mut parts = rest.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| bad("tensor line without name"))?;
            let shape = parts
                .map(str::parse)
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|e| bad(format!("tensor {name}: {e}")))?;
            tensors.push((name, shape));
        } else {
            fields.insert(key, rest);
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| bad(format!("missing field {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .trim()
            .parse()
            .map_err(|e| bad(format!("field {k}: {e}")))
    };

    let version: u32 = get("format_version")?
        .trim()
        .parse()
        .map_err(|e| bad(format!("format_version: {e}")))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let config = ModelConfig {
        input_dim: num("input_dim")?,
        fc_depth: num("fc_depth")?,
        cell_dim: num("cell_dim")?,
        lstm_stack_depth: num("lstm_stack_depth")?,
        q_w: num("q_w")?,
        q_l: num("q_l")?,
        embed_dim_per_axis: num("embed_dim_per_axis")?,
        obs_len: num("obs_len")?,
        horizon: num("horizon")?,
        beam_width: num("beam_width")?,
        zero_hidden_init: get("zero_hidden_init")?
            .trim()
            .parse()
            .map_err(|e| bad(format!("zero_hidden_init: {e}")))?,
    };
    config
        .validate()
        .map_err(|e| bad(format!("manifest config: {e}")))?;
    for (k, derived) in [
        ("num_classes", config.num_classes()),
        ("embed_cols_w", config.embed_cols_w()),
        ("embed_cols_l", config.embed_cols_l()),
    ] {
        if num(k)? != derived {
            return Err(bad(format!(
                "{k} = {} inconsistent with grid dims",
                num(k)?
            )));
        }
    }

    let mut params = ModelParams::zeros(&config);
    params.normalizer = Normalizer {
        mean: parse_floats(get("normalizer_mean")?, "normalizer_mean")?,
        std: parse_floats(get("normalizer_std")?, "normalizer_std")?,
    };
    let layout = params.tensor_layout();
    if num("tensors")? != layout.len() || tensors.len() != layout.len() {
        return Err(bad(format!(
            "manifest lists {} tensors, architecture has {}",
            tensors.len(),
            layout.len()
        )));
    }
    for ((name, shape), (want_name, want_shape)) in tensors.iter().zip(&layout) {
        if name != want_name || shape != want_shape {
            return Err(bad(format!(
                "tensor {name} {shape:?} where {want_name} {want_shape:?} was expected"
            )));
        }
    }
    let expected = params.num_params() * 8;
    if blob.len() != expected {
        return Err(bad(format!(
            "parameter data is {} bytes, expected {expected}{}",
            blob.len(),
            if blob.len() < expected {
                " (truncated)"
            } else {
                ""
            }
        )));
    }
    let mut chunks = blob.chunks_exact(8);
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            let b: [u8; 8] = chunks
                .next()
                .expect("length checked")
                .try_into()
                .expect("8-byte chunk");
            *v = f64::from_le_bytes(b);
        }
    }
    Ok(params)
}
