//! `FTM1` checkpoint files.
//!
//! Layout: magic `FTM1`, then one record per trainable group in group order
//! followed by one record per running statistic
//! (`<stage>.bn.running_mean`, `<stage>.bn.running_var`, stage order). A
//! record is `name_len: u16 LE`, name bytes, `count: u32 LE`, `count` raw
//! `f32` LE values.

use std::path::Path;

use super::net::{BatchNorm, ConvBn, FeatureExtractor, LinearHead, ModelConfig, Network};
use super::{stage_name, ParamGroupIndex};
use crate::augment::CHANNELS;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FTM1";

fn record(w: &mut Writer, name: &str, values: &[f32]) {
    w.u16(name.len() as u16);
    w.bytes(name.as_bytes());
    w.u32(values.len() as u32);
    w.f32s(values);
}

pub fn write_checkpoint(net: &Network<f32>) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    let index = ParamGroupIndex::new(net.config());
    for (name, t) in index.names().iter().zip(net.params()) {
        record(&mut w, name, t.data());
    }
    for (s, st) in net.extractor.stages.iter().enumerate() {
        let p = stage_name(s);
        record(&mut w, &format!("{p}.bn.running_mean"), st.bn.running_mean.data());
        record(&mut w, &format!("{p}.bn.running_var"), st.bn.running_var.data());
    }
    w.finish()
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Network<f32>> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(4)? != MAGIC {
        return Err(Error::format("checkpoint: bad magic (expected FTM1)"));
    }
    let mut records: Vec<(String, Vec<f32>)> = Vec::new();
    while !r.is_at_end() {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint: group name is not UTF-8"))?
            .to_string();
        let count = r.u32()? as usize;
        records.push((name, r.f32s(count)?));
    }
    let first = records
        .first()
        .filter(|(n, _)| n == "stem.conv")
        .ok_or_else(|| Error::format("checkpoint: first group must be stem.conv"))?;
    let base_width = first.1.len() / (9 * CHANNELS);
    let blocks = records
        .iter()
        .filter(|(n, _)| n.starts_with("block") && n.ends_with(".conv"))
        .count();
    let config = ModelConfig { base_width, blocks };
    config
        .validate()
        .map_err(|e| Error::format(format!("checkpoint: {e}")))?;
    let index = ParamGroupIndex::new(config);
    let expected_len = index.len() + 2 * config.stages();
    if records.len() != expected_len {
        return Err(Error::format(format!(
            "checkpoint: {} groups, expected {expected_len}",
            records.len()
        )));
    }
    let mut it = records.into_iter();

    let mut stages = Vec::with_capacity(config.stages());
    for s in 0..config.stages() {
        let p = stage_name(s);
        let cin = if s == 0 { CHANNELS } else { base_width << (s - 1) };
        let cout = if s == 0 { base_width } else { 2 * cin };
        let weight = take_record(&mut it, &format!("{p}.conv"), &[9 * cin, cout])?;
        let scale = take_record(&mut it, &format!("{p}.bn.scale"), &[cout])?;
        let shift = take_record(&mut it, &format!("{p}.bn.shift"), &[cout])?;
        stages.push(ConvBn {
            cin,
            cout,
            weight,
            bn: BatchNorm {
                scale,
                shift,
                running_mean: Tensor::zeros(&[cout]),
                running_var: Tensor::zeros(&[cout]),
            },
        });
    }
    let dim = config.feature_dim();
    let (name, wdata) = it.next().expect("count checked");
    if name != "classifier.weight" || wdata.is_empty() || wdata.len() % dim != 0 {
        return Err(Error::format("checkpoint: bad classifier.weight group"));
    }
    let k = wdata.len() / dim;
    let weight = Tensor::from_vec(&[k, dim], wdata)?;
    let bias = take_record(&mut it, "classifier.bias", &[k])?;
    for (s, st) in stages.iter_mut().enumerate() {
        let p = stage_name(s);
        st.bn.running_mean = take_record(&mut it, &format!("{p}.bn.running_mean"), &[st.cout])?;
        st.bn.running_var = take_record(&mut it, &format!("{p}.bn.running_var"), &[st.cout])?;
    }
    Network::new(FeatureExtractor { config, stages }, LinearHead { weight, bias })
}

fn take_record(
    it: &mut impl Iterator<Item = (String, Vec<f32>)>,
    name: &str,
    shape: &[usize],
) -> Result<Tensor<f32>> {
    let (n, data) = it.next().expect("count checked");
    if n != name {
        return Err(Error::format(format!("checkpoint: expected group {name}, found {n}")));
    }
    Tensor::from_vec(shape, data)
        .map_err(|_| Error::format(format!("checkpoint: group {name} has wrong size")))
}

pub fn save_checkpoint(net: &Network<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Network<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_extractor, init_head};
    use crate::rng::RngStream;

    fn net() -> Network<f32> {
        let cfg = ModelConfig::default();
        let rng = RngStream::new(1);
        let mut n = Network::new(
            init_extractor(cfg, &rng),
            init_head(cfg.feature_dim(), 20, &rng).unwrap(),
        )
        .unwrap();
        n.extractor.stages[1].bn.running_mean.data_mut()[3] = 0.25;
        n
    }

    #[test]
    fn round_trip_is_exact() {
        let n = net();
        let bytes = write_checkpoint(&n);
        assert_eq!(&bytes[..4], b"FTM1");
        assert_eq!(read_checkpoint(&bytes).unwrap(), n);
    }

    #[test]
    fn first_record_layout() {
        let bytes = write_checkpoint(&net());
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 9);
        assert_eq!(&bytes[6..15], b"stem.conv");
        let count = u32::from_le_bytes(bytes[15..19].try_into().unwrap());
        assert_eq!(count, 27 * 16);
    }

    #[test]
    fn corrupt_inputs_are_errors() {
        let mut bytes = write_checkpoint(&net());
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Format(_))));
        assert!(read_checkpoint(b"FTM1").is_err());
    }
}
