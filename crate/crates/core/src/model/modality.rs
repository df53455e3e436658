//! Audio and video encoders and the alignment of their frame axis to the
//! text length.

use super::layers::{sinusoidal_positions, EncoderLayer, LayerNorm, Linear};
use crate::mca2::{visit_prefixed, visit_prefixed_mut};
use crate::tensor::{Graph, Parameterized, Result, Rng, Tensor, TensorError, Var};

/// Row-stochastic `rows x frames` pooling matrix.
///
/// With at least as many frames as rows, frames are split into contiguous
/// buckets as evenly as possible, larger buckets first, and each row is the
/// mean of its bucket. With fewer frames, row `i` copies the frame whose
/// span contains the centre of row `i`.
pub fn alignment_matrix(frames: usize, rows: usize) -> Tensor {
    assert!(
        frames > 0 && rows > 0,
        "alignment needs at least one frame and one row"
    );
    let mut m = vec![0.0; rows * frames];
    if frames >= rows {
        let (base, rem) = (frames / rows, frames % rows);
        let mut start = 0;
        for i in 0..rows {
            let size = base + usize::from(i < rem);
            for j in start..start + size {
                m[i * frames + j] = 1.0 / size as f64;
            }
            start += size;
        }
    } else {
        for i in 0..rows {
            let j = ((2 * i + 1) * frames) / (2 * rows);
            m[i * frames + j] = 1.0;
        }
    }
    Tensor::new(&[rows, frames], m).expect("consistent by construction")
}

/// Maps `f x c` features to exactly `n x c` by bucket mean-pooling.
pub fn align_temporal(features: &Tensor, n: usize) -> Result<Tensor> {
    let (f, c) = features.dims2()?;
    if f == 0 {
        return Err(TensorError::contract(
            "align_temporal",
            "no frames to align",
        ));
    }
    let p = alignment_matrix(f, n);
    let mut out = vec![0.0; n * c];
    crate::tensor::gemm(
        n,
        f,
        c,
        p.data(),
        false,
        features.data(),
        false,
        &mut out,
        false,
    );
    Tensor::new(&[n, c], out)
}

/// Input projection, one single-head encoder layer over frames, a final
/// norm, then alignment to the text length.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEncoder {
    pub proj: Linear,
    pub layer: EncoderLayer,
    pub norm: LayerNorm,
    /// Longer inputs are pooled down to this many frames before encoding.
    pub max_frames: usize,
}

impl ModalityEncoder {
    pub fn new(raw_dim: usize, d_c: usize, max_frames: usize, rng: &mut Rng) -> Self {
        ModalityEncoder {
            proj: Linear::new(raw_dim, d_c, rng),
            layer: EncoderLayer::new(d_c, 1, 2 * d_c, rng),
            norm: LayerNorm::new(d_c),
            max_frames,
        }
    }

    pub fn raw_dim(&self) -> usize {
        self.proj.w.rows()
    }

    pub fn d_c(&self) -> usize {
        self.proj.w.cols()
    }

    /// `features` is `frames x raw_dim`; the result is `n x d_c`.
    pub fn forward(&self, g: &mut Graph, features: &Tensor, n: usize) -> Result<Var> {
        let (f, raw) = features.dims2()?;
        if f == 0 {
            return Err(TensorError::contract(
                "modality_encoder",
                "zero frames; pass a single all-zero frame for a silent modality",
            ));
        }
        if raw != self.raw_dim() {
            return Err(TensorError::shape(
                "modality_encoder",
                features.shape(),
                self.proj.w.shape(),
            ));
        }
        let x = if f > self.max_frames {
            align_temporal(features, self.max_frames)?
        } else {
            features.clone()
        };
        let frames = x.rows();
        let x = g.constant(&x);
        let h = self.proj.forward(g, x)?;
        let pos = g.constant(&sinusoidal_positions(frames, self.d_c()));
        let h = g.add(h, pos)?;
        let h = self.layer.forward(g, h, None)?;
        let h = self.norm.forward(g, h)?;
        let align = g.constant(&alignment_matrix(frames, n));
        g.matmul(align, h)
    }
}

impl Parameterized for ModalityEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_prefixed("proj", &self.proj, f);
        visit_prefixed("layer", &self.layer, f);
        visit_prefixed("norm", &self.norm, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_prefixed_mut("proj", &mut self.proj, f);
        visit_prefixed_mut("layer", &mut self.layer, f);
        visit_prefixed_mut("norm", &mut self.norm, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(rows: &[f64]) -> Tensor {
        Tensor::new(&[rows.len(), 1], rows.to_vec()).unwrap()
    }

    #[test]
    fn equal_length_is_identity() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(align_temporal(&x, 3).unwrap().data(), x.data());
    }

    #[test]
    fn even_pooling() {
        let out = align_temporal(&frames(&[1.0, 3.0, 10.0, 20.0]), 2).unwrap();
        assert_eq!(out.data(), &[2.0, 15.0]);
    }

    #[test]
    fn larger_buckets_first() {
        let out = align_temporal(&frames(&[1.0, 2.0, 6.0, 10.0, 20.0]), 2).unwrap();
        assert_eq!(out.data(), &[3.0, 15.0]);
    }

    #[test]
    fn upsampling_repeats_frames() {
        let out = align_temporal(&frames(&[1.0, 2.0]), 4).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 2.0, 2.0]);
        let out = align_temporal(&frames(&[7.0]), 3).unwrap();
        assert_eq!(out.data(), &[7.0, 7.0, 7.0]);
    }

    #[test]
    fn rows_are_stochastic() {
        for f in 1..12 {
            for n in 1..12 {
                let m = alignment_matrix(f, n);
                for i in 0..n {
                    let s: f64 = m.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12, "f={f} n={n}");
                }
                // every frame is used when downsampling
                if f >= n {
                    for j in 0..f {
                        assert!((0..n).any(|i| m.at(i, j) > 0.0));
                    }
                }
            }
        }
    }
}
