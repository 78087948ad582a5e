//! Flat parameter layout: every tensor is a named contiguous segment of one
//! parameter vector, so optimizer masks, checkpoints, and geometry analyses
//! all address the same space.

use super::config::ModelConfig;
use crate::error::{Error, Result};
use std::sync::Arc;

/// Standard deviation of the normal init used for embedding tables. The
/// decay path from this scale down to the working scale is what separates
/// memorization from generalization in time: shrinking it shrinks the delay,
/// and at the projection-weight scale the delay disappears entirely.
pub const EMBED_INIT_STD: f64 = 1.0;

/// Multiplier on the uniform bound of every projection, FFN, and head
/// weight: bound = UNIFORM_INIT_SCALE / sqrt(fan_in). Together with
/// EMBED_INIT_STD this sets the total initial weight mass that decay must
/// grind through before the shared representation can reorganize.
pub const UNIFORM_INIT_SCALE: f64 = 4.0;

/// How a segment is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Zero,
    One,
    /// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
    Uniform { fan_in: usize },
    /// N(0, EMBED_INIT_STD^2) per entry; embedding tables only.
    ScaledNormal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentInfo {
    pub name: String,
    pub offset: usize,
    /// [rows, cols] for matrices, [len] for vectors. Matrices are row-major
    /// with shape [in, out]; activations multiply on the left (y = x W).
    pub shape: Vec<usize>,
    /// Whether weight decay applies: true for matrices and embeddings,
    /// false for every bias and LayerNorm parameter.
    pub decayable: bool,
    pub init: InitKind,
}

impl SegmentInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub segments: Vec<SegmentInfo>,
    total: usize,
}

impl ParamLayout {
    pub fn for_config(config: &ModelConfig) -> Arc<ParamLayout> {
        let d = config.d_model;
        let ff = config.d_ff;
        let v = config.vocab;
        let mut b = LayoutBuilder::default();

        b.matrix("tok_embed", v, d, InitKind::ScaledNormal);
        b.matrix("pos_embed", config.positions, d, InitKind::ScaledNormal);
        for l in 0..config.layers {
            b.vector(&format!("layer{l}.ln1.scale"), d, InitKind::One);
            b.vector(&format!("layer{l}.ln1.bias"), d, InitKind::Zero);
            for w in ["wq", "wk", "wv", "wo"] {
                b.matrix(
                    &format!("layer{l}.attn.{w}"),
                    d,
                    d,
                    InitKind::Uniform { fan_in: d },
                );
            }
            b.vector(&format!("layer{l}.ln2.scale"), d, InitKind::One);
            b.vector(&format!("layer{l}.ln2.bias"), d, InitKind::Zero);
            b.matrix(&format!("layer{l}.ffn.w1"), d, ff, InitKind::Uniform { fan_in: d });
            b.vector(&format!("layer{l}.ffn.b1"), ff, InitKind::Zero);
            b.matrix(&format!("layer{l}.ffn.w2"), ff, d, InitKind::Uniform { fan_in: ff });
            b.vector(&format!("layer{l}.ffn.b2"), d, InitKind::Zero);
        }
        b.vector("final_ln.scale", d, InitKind::One);
        b.vector("final_ln.bias", d, InitKind::Zero);
        for task in &config.tasks {
            b.matrix(
                &format!("heads.{task}.weight"),
                d,
                v,
                InitKind::Uniform { fan_in: d },
            );
            b.vector(&format!("heads.{task}.bias"), v, InitKind::Zero);
        }

        Arc::new(ParamLayout {
            total: b.offset,
            segments: b.segments,
        })
    }

    /// Builds a layout directly from segments. Segments must be contiguous
    /// from offset zero; intended for small synthetic parameter spaces.
    pub fn raw(segments: Vec<SegmentInfo>) -> Result<Arc<ParamLayout>> {
        let mut offset = 0usize;
        for seg in &segments {
            if seg.offset != offset {
                return Err(Error::format(format!(
                    "segment '{}' at offset {}, expected {offset}",
                    seg.name, seg.offset
                )));
            }
            offset += seg.len();
        }
        Ok(Arc::new(ParamLayout { segments, total: offset }))
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&SegmentInfo> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&SegmentInfo> {
        self.find(name)
            .ok_or_else(|| Error::format(format!("unknown parameter segment '{name}'")))
    }

    /// Stable fingerprint of (name, offset, shape, decayable) for all
    /// segments; checkpoints store it to reject layout mismatches early.
    pub fn hash64(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &byte in bytes {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for s in &self.segments {
            eat(s.name.as_bytes());
            eat(&(s.offset as u64).to_le_bytes());
            eat(&(s.shape.len() as u64).to_le_bytes());
            for &dim in &s.shape {
                eat(&(dim as u64).to_le_bytes());
            }
            eat(&[s.decayable as u8]);
        }
        eat(&(self.total as u64).to_le_bytes());
        h
    }
}

#[derive(Default)]
struct LayoutBuilder {
    segments: Vec<SegmentInfo>,
    offset: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: &str, shape: Vec<usize>, decayable: bool, init: InitKind) {
        let len: usize = shape.iter().product();
        self.segments.push(SegmentInfo {
            name: name.to_string(),
            offset: self.offset,
            shape,
            decayable,
            init,
        });
        self.offset += len;
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize, init: InitKind) {
        self.push(name, vec![rows, cols], true, init);
    }

    fn vector(&mut self, name: &str, len: usize, init: InitKind) {
        self.push(name, vec![len], false, init);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;

    #[test]
    fn dual_task_totals() {
        let cfg = ModelConfig::standard(vec![TaskKind::Add, TaskKind::Mul]);
        let layout = ParamLayout::for_config(&cfg);
        assert_eq!(layout.total(), 301_890);
        // Ordered, contiguous, non-overlapping coverage.
        let mut expected = 0usize;
        for s in &layout.segments {
            assert_eq!(s.offset, expected, "{}", s.name);
            expected += s.len();
        }
        assert_eq!(expected, layout.total());
    }

    #[test]
    fn each_extra_task_adds_one_head() {
        let dual = ParamLayout::for_config(&ModelConfig::standard(vec![
            TaskKind::Add,
            TaskKind::Mul,
        ]));
        let tri = ParamLayout::for_config(&ModelConfig::standard(vec![
            TaskKind::Add,
            TaskKind::Mul,
            TaskKind::SqSum,
        ]));
        assert_eq!(tri.total() - dual.total(), 128 * 97 + 97);
        assert_eq!(tri.total(), 314_403);
    }

    #[test]
    fn decay_mask_covers_matrices_only() {
        let cfg = ModelConfig::standard(vec![TaskKind::Add, TaskKind::Mul]);
        let layout = ParamLayout::for_config(&cfg);
        for s in &layout.segments {
            assert_eq!(s.decayable, s.is_matrix(), "{}", s.name);
            if s.name.contains("ln") {
                assert!(!s.decayable, "{}", s.name);
            }
        }
        assert!(layout.find("tok_embed").unwrap().decayable);
        assert!(layout.find("heads.add.weight").unwrap().decayable);
        assert!(!layout.find("heads.add.bias").unwrap().decayable);
    }

    #[test]
    fn expected_segment_order() {
        let cfg = ModelConfig::standard(vec![TaskKind::Add, TaskKind::Mul]);
        let layout = ParamLayout::for_config(&cfg);
        let names: Vec<&str> = layout.segments.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names[0], "tok_embed");
        assert_eq!(names[1], "pos_embed");
        assert_eq!(names[2], "layer0.ln1.scale");
        assert_eq!(names[4], "layer0.attn.wq");
        assert_eq!(names[7], "layer0.attn.wo");
        assert!(names.contains(&"layer1.ffn.w2"));
        assert_eq!(names[names.len() - 4], "heads.add.weight");
        assert_eq!(names[names.len() - 1], "heads.mul.bias");
    }

    #[test]
    fn hash_tracks_layout_identity() {
        let a = ParamLayout::for_config(&ModelConfig::standard(vec![
            TaskKind::Add,
            TaskKind::Mul,
        ]));
        let b = ParamLayout::for_config(&ModelConfig::standard(vec![
            TaskKind::Add,
            TaskKind::Mul,
        ]));
        let c = ParamLayout::for_config(&ModelConfig::standard(vec![
            TaskKind::Mul,
            TaskKind::Add,
        ]));
        assert_eq!(a.hash64(), b.hash64());
        assert_ne!(a.hash64(), c.hash64());
    }
}
