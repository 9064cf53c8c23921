//! Synthetic pipelines shaped like common training input pipelines.
//!
//! Every preset is returned in its naive configuration: each knob set to 1
//! and no prefetching.

use crate::engine::spec::{OperatorNode as N, PipelineSpec};
use crate::error::{Error, Result};

/// Names accepted by [`preset`]. `linear_chain` takes a length suffix,
/// e.g. `linear_chain:4`.
pub const PRESETS: [&str; 6] = [
    "resnet_shape",
    "resnet_fused",
    "rcnn_shape",
    "ssd_shape",
    "text_shape",
    "linear_chain",
];

/// Bytes per ImageNet-like record: 110 KiB.
pub const IMAGE_RECORD_BYTES: u64 = 110 * 1024;

pub fn preset(name: &str) -> Result<PipelineSpec> {
    if let Some(n) = name.strip_prefix("linear_chain") {
        let n = match n.strip_prefix([':', '(']) {
            Some(rest) => rest
                .trim_end_matches(')')
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad chain length in `{name}`")))?,
            None if n.is_empty() => 3,
            None => return Err(Error::InvalidArgument(format!("unknown preset `{name}`"))),
        };
        return linear_chain(n);
    }
    Ok(match name {
        "resnet_shape" => resnet_shape(),
        "resnet_fused" => resnet_fused(),
        "rcnn_shape" => rcnn_shape(),
        "ssd_shape" => ssd_shape(),
        "text_shape" => text_shape(),
        _ => return Err(Error::InvalidArgument(format!("unknown preset `{name}`"))),
    })
}

/// Image classification: 1024 files of 144 MiB split into 110 KiB records,
/// a decode that inflates bytes 6x at 2.5 minibatches/s/core, a random crop
/// and batches of 128.
pub fn resnet_shape() -> PipelineSpec {
    PipelineSpec::new(
        "batch",
        vec![
            N::source("src", "imagenet_synth", IMAGE_RECORD_BYTES),
            N::interleave("interleave", &["src"], 16).with_parallelism(1),
            N::map("decode", "interleave", 3125.0, 6.0).with_parallelism(1),
            N::map("crop", "decode", 400.0, 0.25)
                .random()
                .with_parallelism(1),
            N::batch("batch", "crop", 128),
        ],
    )
}

/// `resnet_shape` with decode and crop fused into one cheaper random UDF.
pub fn resnet_fused() -> PipelineSpec {
    PipelineSpec::new(
        "batch",
        vec![
            N::source("src", "imagenet_synth", IMAGE_RECORD_BYTES),
            N::interleave("interleave", &["src"], 16).with_parallelism(1),
            N::map("decode_crop", "interleave", 2500.0, 1.5)
                .random()
                .with_parallelism(1),
            N::batch("batch", "decode_crop", 128),
        ],
    )
}

/// Detection with a heavy augmentation UDF that internally fans out to
/// three threads per element.
pub fn rcnn_shape() -> PipelineSpec {
    PipelineSpec::new(
        "batch",
        vec![
            N::source("src", "coco_synth", 160 * 1024),
            N::interleave("interleave", &["src"], 16).with_parallelism(1),
            N::map("parse", "interleave", 6250.0, 4.0).with_parallelism(1),
            N::map("augment", "parse", 30_000.0, 1.0)
                .random()
                .with_udf_parallelism(3)
                .with_parallelism(1),
            N::batch("batch", "augment", 8),
        ],
    )
}

/// Single-shot detection: parse, drop a few degenerate examples, augment,
/// batch 32.
pub fn ssd_shape() -> PipelineSpec {
    PipelineSpec::new(
        "batch",
        vec![
            N::source("src", "coco_synth", 160 * 1024),
            N::interleave("interleave", &["src"], 16).with_parallelism(1),
            N::map("parse", "interleave", 1560.0, 4.0).with_parallelism(1),
            N::filter("filter", "parse", 0.99, 10.0),
            N::map("augment", "filter", 6250.0, 0.5)
                .random()
                .with_parallelism(1),
            N::batch("batch", "augment", 32),
        ],
    )
}

/// Translation-style text pipeline: tiny elements and microsecond costs.
pub fn text_shape() -> PipelineSpec {
    PipelineSpec::new(
        "batch",
        vec![
            N::source("src", "wmt_synth", 256),
            N::map("tokenize", "src", 5.0, 0.5).with_parallelism(1),
            N::filter("filter", "tokenize", 0.95, 1.0),
            N::shuffle("shuffle", "filter", 1024),
            N::batch("batch", "shuffle", 64),
        ],
    )
}

/// A source followed by `n - 1` maps of 100 us each.
pub fn linear_chain(n: usize) -> Result<PipelineSpec> {
    if n == 0 {
        return Err(Error::InvalidArgument("linear_chain needs n >= 1".into()));
    }
    let mut nodes = vec![N::source("src", "chain_synth", 4096)];
    let mut prev = "src".to_string();
    for i in 1..n {
        let name = format!("map{i}");
        nodes.push(N::map(&name, &prev, 100.0, 1.0).with_parallelism(1));
        prev = name;
    }
    Ok(PipelineSpec::new(prev, nodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::spec::Operator;

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            let spec = preset(name).unwrap();
            assert_eq!(spec.validate(), Ok(()), "{name}");
            assert!(spec
                .nodes
                .iter()
                .filter(|n| n.is_tunable())
                .all(|n| n.parallelism == Some(1)));
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn resnet_decode_rate_calibration() {
        let spec = resnet_shape();
        let Operator::Map(decode) = &spec.node("decode").unwrap().op else {
            panic!()
        };
        let per_minibatch_s = decode.cpu_cost_per_element * 1e-6 * 128.0;
        assert!((1.0 / per_minibatch_s - 2.5).abs() < 1e-12);
        assert_eq!(decode.byte_ratio, 6.0);
    }

    #[test]
    fn text_costs_are_tiny() {
        let spec = text_shape();
        assert!(spec.nodes.iter().all(|n| n.op.cpu_cost_us() <= 5.0));
    }

    #[test]
    fn chain_lengths() {
        assert_eq!(linear_chain(1).unwrap().nodes.len(), 1);
        assert_eq!(preset("linear_chain:4").unwrap().nodes.len(), 4);
        assert_eq!(preset("linear_chain(2)").unwrap().root, "map1");
        assert!(linear_chain(0).is_err());
    }
}
