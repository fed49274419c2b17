//! Detector weight files: a short text header followed by every weight and
//! bias as little-endian `f32`, layer by layer (weights, then biases).
//!
//! ```text
//! PATCHLAB-DETECTOR 1
//! seed 42
//! input 96 96 1
//! classes 1
//! context global
//! layer 1 8 5 2 leaky norm
//! ...
//! layer 32 6 3 1 linear
//! end
//! ```

use std::fs;
use std::path::Path;

use super::network::{Architecture, ConvLayer, DetectorParams, LayerSpec, HEAD_FIXED_CHANNELS};
use crate::error::{Error, Result};

const MAGIC: &str = "PATCHLAB-DETECTOR 1";

pub fn encode_weights(params: &DetectorParams) -> Vec<u8> {
    let a = &params.arch;
    let mut header = format!(
        "{MAGIC}\nseed {}\ninput {} {} {}\nclasses {}\ncontext {}\n",
        params.seed,
        a.input_rows,
        a.input_cols,
        a.input_channels,
        a.classes,
        if a.global_context { "global" } else { "none" }
    );
    for l in &params.layers {
        header.push_str(&format!(
            "layer {} {} {} {} {}{}\n",
            l.in_channels,
            l.out_channels,
            l.kernel,
            l.stride,
            if l.leaky { "leaky" } else { "linear" },
            if l.normalize { " norm" } else { "" }
        ));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    for l in &params.layers {
        for v in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::MalformedHeader(msg.into())
}

fn nums<const N: usize>(fields: &[&str], line: &str) -> Result<[usize; N]> {
    if fields.len() < N {
        return Err(bad(format!("short line {line:?}")));
    }
    let mut out = [0usize; N];
    for (o, f) in out.iter_mut().zip(fields) {
        *o = f.parse().map_err(|_| bad(format!("bad number in {line:?}")))?;
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<DetectorParams> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("header not terminated"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not text"))?;
        pos += end + 1;
        if line == "end" {
            break;
        }
        lines.push(line);
    }
    if lines.first() != Some(&MAGIC) {
        return Err(bad("not a detector weight file"));
    }
    let mut seed = None;
    let mut input = None;
    let mut classes = None;
    let mut context = None;
    let mut layers: Vec<ConvLayer> = Vec::new();
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.first() {
            Some(&"seed") => {
                seed = Some(fields.get(1).and_then(|s| s.parse::<u64>().ok()).ok_or_else(|| bad("bad seed"))?)
            }
            Some(&"input") => input = Some(nums::<3>(&fields[1..], line)?),
            Some(&"classes") => classes = Some(nums::<1>(&fields[1..], line)?[0]),
            Some(&"context") => {
                context = Some(match fields.get(1) {
                    Some(&"global") => true,
                    Some(&"none") => false,
                    _ => return Err(bad(format!("bad context in {line:?}"))),
                })
            }
            Some(&"layer") => {
                let [i, o, k, s] = nums::<4>(&fields[1..], line)?;
                let leaky = match fields.get(5) {
                    Some(&"leaky") => true,
                    Some(&"linear") => false,
                    _ => return Err(bad(format!("bad activation in {line:?}"))),
                };
                let normalize = match fields.get(6) {
                    None => false,
                    Some(&"norm") => true,
                    Some(_) => return Err(bad(format!("bad layer flag in {line:?}"))),
                };
                layers.push(ConvLayer {
                    in_channels: i,
                    out_channels: o,
                    kernel: k,
                    stride: s,
                    leaky,
                    normalize,
                    weights: vec![0.0; o * i * k * k],
                    bias: vec![0.0; o],
                });
            }
            _ => return Err(bad(format!("unknown header line {line:?}"))),
        }
    }
    let (seed, [rows, cols, channels], classes, global_context) = match (seed, input, classes, context) {
        (Some(s), Some(i), Some(c), Some(g)) => (s, i, c, g),
        _ => return Err(bad("missing seed, input, classes, or context")),
    };
    let (head, hidden) = layers.split_last().ok_or_else(|| bad("no layers"))?;
    if head.leaky || head.normalize || head.stride != 1 || head.out_channels != HEAD_FIXED_CHANNELS + classes || hidden.iter().any(|l| !l.leaky) {
        return Err(bad("layer list does not describe a detector"));
    }
    let mut in_ch = channels;
    for (li, l) in layers.iter().enumerate() {
        if li == hidden.len() && global_context {
            in_ch *= 2;
        }
        if l.in_channels != in_ch {
            return Err(bad("layer channel counts do not chain"));
        }
        in_ch = l.out_channels;
    }
    let arch = Architecture {
        input_rows: rows,
        input_cols: cols,
        input_channels: channels,
        hidden: hidden
            .iter()
            .map(|l| LayerSpec { out_channels: l.out_channels, kernel: l.kernel, stride: l.stride, normalize: l.normalize })
            .collect(),
        head_kernel: head.kernel,
        classes,
        global_context,
    };
    arch.grid().map_err(|e| bad(e.to_string()))?;
    let need: usize = layers.iter().map(|l| 4 * (l.weights.len() + l.bias.len())).sum();
    let blob = &bytes[pos..];
    if blob.len() != need {
        return Err(bad(format!("weight blob has {} bytes, header implies {need}", blob.len())));
    }
    let mut vals = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for l in &mut layers {
        for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
            *v = vals.next().expect("length checked");
        }
    }
    let params = DetectorParams { arch, layers, seed };
    if !params.is_finite() {
        return Err(Error::Parameter("non-finite detector weight".into()));
    }
    Ok(params)
}

pub fn save_weights(params: &DetectorParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(params))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<DetectorParams> {
    decode_weights(&fs::read(path)?)
}
