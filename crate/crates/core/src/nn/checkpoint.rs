//! Model checkpoints: one manifest line, then every parameter tensor in the
//! wire tensor encoding.
//!
//! ```text
//! SPLITCNN-CHECKPOINT 1 input=1,64,64 conv:1:8:3:3:1:0 relu maxpool2 ... sigmoid\n
//! <tensor> <tensor> ...
//! ```
//!
//! Conv tokens are `conv:in:out:kh:kw:stride:padding`, dense tokens
//! `dense:inputs:outputs`.

use std::path::Path;

use super::{Init, LayerSpec, Model};
use crate::error::{Error, Result};
use crate::protocol::{decode_tensor_prefix, encode_tensor};
use crate::tensor::{ConvGeometry, Tensor};

const HEADER: &str = "SPLITCNN-CHECKPOINT";
const FORMAT_VERSION: u32 = 1;

fn spec_token(spec: &LayerSpec) -> String {
    match spec {
        LayerSpec::Conv(g) => format!(
            "conv:{}:{}:{}:{}:{}:{}",
            g.in_channels, g.out_channels, g.kernel_h, g.kernel_w, g.stride, g.padding
        ),
        LayerSpec::MaxPool2 => "maxpool2".into(),
        LayerSpec::PadToEven => "pad_even".into(),
        LayerSpec::Flatten => "flatten".into(),
        LayerSpec::Dense { inputs, outputs } => format!("dense:{inputs}:{outputs}"),
        LayerSpec::Relu => "relu".into(),
        LayerSpec::Sigmoid => "sigmoid".into(),
    }
}

fn parse_token(tok: &str) -> Option<LayerSpec> {
    let parts: Vec<&str> = tok.split(':').collect();
    let nums = |xs: &[&str]| xs.iter().map(|x| x.parse::<usize>().ok()).collect::<Option<Vec<_>>>();
    Some(match parts[0] {
        "conv" if parts.len() == 7 => {
            let v = nums(&parts[1..])?;
            LayerSpec::Conv(ConvGeometry {
                in_channels: v[0],
                out_channels: v[1],
                kernel_h: v[2],
                kernel_w: v[3],
                stride: v[4],
                padding: v[5],
            })
        }
        "dense" if parts.len() == 3 => {
            let v = nums(&parts[1..])?;
            LayerSpec::Dense { inputs: v[0], outputs: v[1] }
        }
        "maxpool2" if parts.len() == 1 => LayerSpec::MaxPool2,
        "pad_even" if parts.len() == 1 => LayerSpec::PadToEven,
        "flatten" if parts.len() == 1 => LayerSpec::Flatten,
        "relu" if parts.len() == 1 => LayerSpec::Relu,
        "sigmoid" if parts.len() == 1 => LayerSpec::Sigmoid,
        _ => return None,
    })
}

pub fn write_checkpoint(model: &Model) -> Vec<u8> {
    let input = model.input_shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
    let layers = model.specs().iter().map(spec_token).collect::<Vec<_>>().join(" ");
    let mut out = format!("{HEADER} {FORMAT_VERSION} input={input} {layers}\n").into_bytes();
    for p in model.params() {
        out.extend(encode_tensor(p));
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    let bad = |detail: String| Error::Invalid(format!("checkpoint: {detail}"));
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing manifest line".into()))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("manifest is not UTF-8".into()))?;
    let mut tokens = line.split(' ');
    if tokens.next() != Some(HEADER) {
        return Err(bad("not a checkpoint file".into()));
    }
    match tokens.next().and_then(|v| v.parse::<u32>().ok()) {
        Some(FORMAT_VERSION) => {}
        other => return Err(bad(format!("unsupported version {other:?}"))),
    }
    let input: Vec<usize> = tokens
        .next()
        .and_then(|t| t.strip_prefix("input="))
        .and_then(|t| t.split(',').map(|d| d.parse().ok()).collect())
        .ok_or_else(|| bad("bad input shape".into()))?;
    let specs: Vec<LayerSpec> = tokens
        .map(|t| parse_token(t).ok_or_else(|| bad(format!("unknown layer token `{t}`"))))
        .collect::<Result<_>>()?;
    let mut model = Model::build_with(&specs, &input, 0, Init::Zeros)?;
    let mut offset = nl + 1;
    let mut params: Vec<Tensor> = Vec::new();
    for _ in 0..model.params().len() {
        let (t, used) = decode_tensor_prefix(&bytes[offset..]).map_err(|e| bad(format!("{e} (after byte {offset})")))?;
        params.push(t);
        offset += used;
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    model.set_params(params)?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, small_vgg, INPUT_SHAPE};

    #[test]
    fn round_trip() {
        let m: Model = build_model(&small_vgg(), &INPUT_SHAPE, 4).unwrap();
        let bytes = write_checkpoint(&m);
        let line_end = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert!(std::str::from_utf8(&bytes[..line_end]).unwrap().starts_with(
            "SPLITCNN-CHECKPOINT 1 input=1,64,64 conv:1:8:3:3:1:0 relu maxpool2 conv:8:16:3:3:1:0"
        ));
        assert_eq!(read_checkpoint(&bytes).unwrap(), m);
    }

    #[test]
    fn rejects_damage() {
        let m: Model = build_model(&small_vgg(), &INPUT_SHAPE, 4).unwrap();
        let bytes = write_checkpoint(&m);
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_checkpoint(b"hello\n").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra).is_err());
    }
}
