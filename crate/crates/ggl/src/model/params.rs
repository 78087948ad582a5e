//! Flat parameter vector bound to a layout.

use super::layout::{InitKind, ParamLayout, SegmentInfo, EMBED_INIT_STD, UNIFORM_INIT_SCALE};
use super::real::Real;
use crate::numerics::SeededRng;
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct ParamVector<T> {
    pub values: Vec<T>,
    layout: Arc<ParamLayout>,
}

impl<T: Real> ParamVector<T> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        ParamVector {
            values: vec![T::zero(); layout.total()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<T>) -> Self {
        assert_eq!(values.len(), layout.total(), "value count != layout total");
        ParamVector { values, layout }
    }

    /// Fresh parameters under the ("init", seed) stream. Weights draw
    /// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); draws happen in f64 and
    /// narrow to T, so f32 and f64 initializations describe the same point.
    pub fn init(layout: Arc<ParamLayout>, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed, "init");
        let mut values = vec![T::zero(); layout.total()];
        for seg in &layout.segments {
            let slot = &mut values[seg.range()];
            match seg.init {
                InitKind::Zero => {}
                InitKind::One => slot.fill(T::one()),
                InitKind::Uniform { fan_in } => {
                    let bound = UNIFORM_INIT_SCALE / (fan_in as f64).sqrt();
                    for v in slot {
                        *v = T::from_f64(rng.uniform_in(-bound, bound));
                    }
                }
                InitKind::ScaledNormal => {
                    for v in slot {
                        *v = T::from_f64(rng.standard_normal() * EMBED_INIT_STD);
                    }
                }
            }
        }
        ParamVector { values, layout }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> &[T] {
        let seg = self
            .layout
            .find(name)
            .unwrap_or_else(|| panic!("no segment named '{name}'"));
        &self.values[seg.range()]
    }

    pub fn segment_mut(&mut self, name: &str) -> &mut [T] {
        let seg = self
            .layout
            .find(name)
            .unwrap_or_else(|| panic!("no segment named '{name}'"))
            .clone();
        &mut self.values[seg.range()]
    }

    pub fn slice(&self, seg: &SegmentInfo) -> &[T] {
        &self.values[seg.range()]
    }

    pub fn fill(&mut self, value: T) {
        self.values.fill(value);
    }

    /// Euclidean norm accumulated in f64 regardless of T.
    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| {
                let x = v.into_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn widen(&self) -> ParamVector<f64> {
        ParamVector {
            values: self.values.iter().map(|v| v.into_f64()).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn narrow(&self) -> ParamVector<f32> {
        ParamVector {
            values: self.values.iter().map(|v| v.into_f64() as f32).collect(),
            layout: self.layout.clone(),
        }
    }

    /// self += scale * other (elementwise, in T).
    pub fn axpy(&mut self, scale: T, other: &ParamVector<T>) {
        assert_eq!(self.len(), other.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = scale.mul_add(*b, *a);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;
    use crate::model::config::ModelConfig;

    fn dual_layout() -> Arc<ParamLayout> {
        ParamLayout::for_config(&ModelConfig::standard(vec![TaskKind::Add, TaskKind::Mul]))
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let layout = dual_layout();
        let a = ParamVector::<f32>::init(layout.clone(), 42);
        let b = ParamVector::<f32>::init(layout.clone(), 42);
        let c = ParamVector::<f32>::init(layout.clone(), 43);
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn init_respects_kinds_and_bounds() {
        let layout = dual_layout();
        let p = ParamVector::<f64>::init(layout.clone(), 7);
        assert!(p.segment("layer0.ln1.scale").iter().all(|&v| v == 1.0));
        assert!(p.segment("layer0.ffn.b1").iter().all(|&v| v == 0.0));
        assert!(p.segment("heads.add.bias").iter().all(|&v| v == 0.0));
        let bound = UNIFORM_INIT_SCALE / 128f64.sqrt();
        for name in ["layer0.attn.wq", "heads.mul.weight"] {
            let seg = p.segment(name);
            assert!(seg.iter().all(|&v| v.abs() < bound), "{name}");
            // Not degenerate: spread fills a good part of the interval.
            let max = seg.iter().cloned().fold(f64::MIN, f64::max);
            assert!(max > bound * 0.9, "{name}: max {max}");
        }
        let w2 = p.segment("layer1.ffn.w2");
        let b2 = UNIFORM_INIT_SCALE / 256f64.sqrt();
        assert!(w2.iter().all(|&v| v.abs() < b2));

        // Embeddings start at the configured scale: sample variance near
        // EMBED_INIT_STD^2 and a spread far beyond the uniform bound of the
        // projection weights.
        let emb = p.segment("tok_embed");
        let var = emb.iter().map(|v| v * v).sum::<f64>() / emb.len() as f64;
        let want = EMBED_INIT_STD * EMBED_INIT_STD;
        assert!((var / want - 1.0).abs() < 0.05, "tok_embed variance {var}");
        assert!(emb.iter().any(|&v| v.abs() > 2.0 * EMBED_INIT_STD));
    }

    #[test]
    fn f32_init_matches_narrowed_f64_init() {
        let layout = dual_layout();
        let single = ParamVector::<f32>::init(layout.clone(), 42);
        let double = ParamVector::<f64>::init(layout.clone(), 42);
        for (a, b) in single.values.iter().zip(&double.values) {
            assert_eq!(*a, *b as f32);
        }
    }

    #[test]
    fn widen_narrow_roundtrip() {
        let layout = dual_layout();
        let p = ParamVector::<f32>::init(layout.clone(), 5);
        let back = p.widen().narrow();
        assert_eq!(p.values, back.values);
    }
}
