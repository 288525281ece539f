//! Spatiotemporal tokens.
//!
//! A `(B, F, H, W)` frame stack becomes a `(B, C, F, N)` token tensor: each
//! frame is cut into `C = (H/p)·(W/p)` non-overlapping `p×p` patches, each
//! patch is flattened row-major (patches themselves are ordered row-major
//! over the grid) and linearly embedded to length `N`.

use crate::tensor::{Element, Graph, RearrangePlan, Tensor, TensorError, Var};
use crate::{Error, Result};

const PATCHIFY: &str = "b f (gh ph) (gw pw) -> b (gh gw) f (ph pw)";

/// Patch geometry for a fixed frame size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Param("patch size must be positive".into()));
        }
        for dim in [height, width] {
            if dim % patch != 0 {
                return Err(TensorError::NotDivisible {
                    op: "patchify",
                    size: dim,
                    factor: patch,
                }
                .into());
            }
        }
        Ok(Self {
            patch,
            rows: height / patch,
            cols: width / patch,
        })
    }

    /// Number of patch tokens per frame, `C`.
    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch
    }

    fn plan(&self, batch: usize, frames: usize) -> Result<RearrangePlan> {
        Ok(RearrangePlan::new(
            PATCHIFY,
            &[batch, frames, self.height(), self.width()],
            &[("ph", self.patch), ("pw", self.patch)],
        )?)
    }

    /// `(B, F, H, W) -> (B, C, F, p²)`.
    pub fn patchify<E: Element>(&self, frames: &Tensor<E>) -> Result<Tensor<E>> {
        let s = frames.shape();
        if s.len() != 4 {
            return Err(Error::Param(format!("expected (B, F, H, W), got {s:?}")));
        }
        Ok(self.plan(s[0], s[1])?.apply(frames)?)
    }

    /// `(B, C, F, p²) -> (B, F, H, W)`.
    pub fn unpatchify<E: Element>(&self, tokens: &Tensor<E>) -> Result<Tensor<E>> {
        let s = tokens.shape();
        if s.len() != 4 {
            return Err(Error::Param(format!("expected (B, C, F, p²), got {s:?}")));
        }
        Ok(self.plan(s[0], s[2])?.inverse().apply(tokens)?)
    }

    pub fn patchify_var<E: Element>(&self, g: &mut Graph<E>, frames: Var) -> Result<Var> {
        let s = g.shape(frames).to_vec();
        if s.len() != 4 {
            return Err(Error::Param(format!("expected (B, F, H, W), got {s:?}")));
        }
        Ok(g.rearrange(frames, &self.plan(s[0], s[1])?)?)
    }

    pub fn unpatchify_var<E: Element>(&self, g: &mut Graph<E>, tokens: Var) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 4 {
            return Err(Error::Param(format!("expected (B, C, F, p²), got {s:?}")));
        }
        Ok(g.rearrange(tokens, &self.plan(s[0], s[2])?.inverse())?)
    }
}

/// Tokens plus the layout facts needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch<E: Element = f32> {
    /// `(B, C, F, N)`.
    pub tokens: Tensor<E>,
    pub cond_frames: usize,
    pub pred_frames: usize,
    pub grid: PatchGrid,
}

impl<E: Element> TokenBatch<E> {
    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.shape()[3]
    }

    /// Concatenates condition and prediction tokens along the frame axis.
    pub fn assemble(cond: &Self, pred: &Self) -> Result<Self> {
        let (a, b) = (cond.tokens.shape(), pred.tokens.shape());
        if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[1] != b[1] || a[3] != b[3] {
            return Err(TensorError::ShapeMismatch {
                op: "assemble_input",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            }
            .into());
        }
        Ok(Self {
            tokens: Tensor::concat(&[&cond.tokens, &pred.tokens], 2)?,
            cond_frames: a[2],
            pred_frames: b[2],
            grid: cond.grid,
        })
    }

    /// The last `pred_frames` frames.
    pub fn extract_prediction(&self) -> Result<Self> {
        Ok(Self {
            tokens: self.tokens.narrow(2, self.cond_frames, self.pred_frames)?,
            cond_frames: 0,
            pred_frames: self.pred_frames,
            grid: self.grid,
        })
    }

    /// `tokens[b, c, f, :] += patch_pos[c, :] + frame_pos[frame_offset + f, :]`.
    pub fn add_positions(&self, pos: &PositionTables<E>, frame_offset: usize) -> Result<Self> {
        let s = self.tokens.shape();
        let table = pos.combined(frame_offset, s[2])?;
        if table.shape() != &s[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "add_positions",
                lhs: s.to_vec(),
                rhs: table.shape().to_vec(),
            }
            .into());
        }
        let mut tokens = self.tokens.clone();
        let n = table.numel();
        for chunk in tokens.data_mut().chunks_mut(n) {
            for (x, &p) in chunk.iter_mut().zip(table.data()) {
                *x = *x + p;
            }
        }
        Ok(Self {
            tokens,
            ..self.clone()
        })
    }
}

/// Frame stack `(B, F, H, W)` -> unembedded tokens `(B, C, F, p²)`.
pub fn patchify<E: Element>(frames: &Tensor<E>, patch: usize) -> Result<Tensor<E>> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::Param(format!("expected (B, F, H, W), got {s:?}")));
    }
    PatchGrid::new(s[2], s[3], patch)?.patchify(frames)
}

/// Per-token linear map `p² -> N`, with optional bias.
pub fn embed_tokens<E: Element>(
    g: &mut Graph<E>,
    tokens: Var,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    Ok(g.linear(tokens, weight, bias)?)
}

fn sincos_1d(positions: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        let row_start = out.len();
        out.resize(row_start + dim, 0.0);
        for i in 0..half {
            let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
            out[row_start + i] = (p * omega).sin();
            out[row_start + half + i] = (p * omega).cos();
        }
    }
    out
}

/// Fixed sinusoidal position tables.
///
/// Patch positions use a 2-D table (half the channels encode the grid row,
/// half the grid column); frame positions use a 1-D table over frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTables<E: Element = f32> {
    /// `(C, N)`.
    pub patch_pos: Tensor<E>,
    /// `(F, N)`.
    pub frame_pos: Tensor<E>,
}

impl<E: Element> PositionTables<E> {
    pub fn new(grid: PatchGrid, frames: usize, dim: usize) -> Result<Self> {
        if dim % 4 != 0 || dim == 0 {
            return Err(Error::Param(format!(
                "embedding width {dim} must be a positive multiple of 4"
            )));
        }
        let half = dim / 2;
        let rows: Vec<f64> = (0..grid.rows).map(|r| r as f64).collect();
        let cols: Vec<f64> = (0..grid.cols).map(|c| c as f64).collect();
        let row_emb = sincos_1d(&rows, half);
        let col_emb = sincos_1d(&cols, half);
        let mut patch = Vec::with_capacity(grid.tokens() * dim);
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                patch.extend_from_slice(&row_emb[r * half..(r + 1) * half]);
                patch.extend_from_slice(&col_emb[c * half..(c + 1) * half]);
            }
        }
        let fr: Vec<f64> = (0..frames).map(|f| f as f64).collect();
        let frame = sincos_1d(&fr, dim);
        Ok(Self {
            patch_pos: Tensor::from_f64(&[grid.tokens(), dim], &patch)?,
            frame_pos: Tensor::from_f64(&[frames, dim], &frame)?,
        })
    }

    pub fn zeros(channels: usize, frames: usize, dim: usize) -> Self {
        Self {
            patch_pos: Tensor::zeros(&[channels, dim]),
            frame_pos: Tensor::zeros(&[frames, dim]),
        }
    }

    /// `(C, len, N)` table `patch_pos[c] + frame_pos[offset + f]`.
    pub fn combined(&self, frame_offset: usize, len: usize) -> Result<Tensor<E>> {
        let (c, n) = (self.patch_pos.shape()[0], self.patch_pos.shape()[1]);
        if frame_offset + len > self.frame_pos.shape()[0] {
            return Err(Error::Param(format!(
                "frames {frame_offset}..{} exceed position table of {}",
                frame_offset + len,
                self.frame_pos.shape()[0]
            )));
        }
        let mut out = Vec::with_capacity(c * len * n);
        let (pp, fp) = (self.patch_pos.data(), self.frame_pos.data());
        for ci in 0..c {
            for f in 0..len {
                let fr = (frame_offset + f) * n;
                out.extend((0..n).map(|k| pp[ci * n + k] + fp[fr + k]));
            }
        }
        Ok(Tensor::from_vec(&[c, len, n], out)?)
    }

    /// Adds positions to a `(B, C, len, N)` token variable whose frames start
    /// at `frame_offset` in the full sequence.
    pub fn add_to(&self, g: &mut Graph<E>, tokens: Var, frame_offset: usize) -> Result<Var> {
        let len = g.shape(tokens)[2];
        let table = self.combined(frame_offset, len)?;
        let table = g.constant(table);
        Ok(g.add_broadcast(tokens, table)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product::<usize>();
        Tensor::from_vec(shape, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn four_by_four_into_two_by_two_patches() {
        let x = iota(&[1, 1, 4, 4]);
        let t = patchify(&x, 2).unwrap();
        assert_eq!(t.shape(), &[1, 4, 1, 4]);
        // top-left patch, row-major
        assert_eq!(t.narrow(1, 0, 1).unwrap().data(), &[0.0, 1.0, 4.0, 5.0]);
        // top-right patch
        assert_eq!(t.narrow(1, 1, 1).unwrap().data(), &[2.0, 3.0, 6.0, 7.0]);
        // bottom-left
        assert_eq!(t.narrow(1, 2, 1).unwrap().data(), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn whole_frame_patch_is_the_flattened_frame() {
        let x = iota(&[2, 3, 4, 4]);
        let t = patchify(&x, 4).unwrap();
        assert_eq!(t.shape(), &[2, 1, 3, 16]);
        assert_eq!(t.data(), x.data());
    }

    #[test]
    fn paper_latent_grid_has_256_tokens() {
        let grid = PatchGrid::new(32, 32, 2).unwrap();
        assert_eq!(grid.tokens(), 256);
        let x = Tensor::<f32>::zeros(&[1, 20, 32, 32]);
        assert_eq!(grid.patchify(&x).unwrap().shape(), &[1, 256, 20, 4]);
    }

    #[test]
    fn non_divisible_patch_is_rejected() {
        assert!(matches!(
            PatchGrid::new(10, 8, 4),
            Err(Error::Tensor(TensorError::NotDivisible { size: 10, factor: 4, .. }))
        ));
    }

    #[test]
    fn positions_on_zero_tokens_equal_table_sum() {
        let grid = PatchGrid::new(4, 4, 2).unwrap();
        let pos = PositionTables::<f64>::new(grid, 3, 8).unwrap();
        let tb = TokenBatch {
            tokens: Tensor::zeros(&[2, 4, 3, 8]),
            cond_frames: 1,
            pred_frames: 2,
            grid,
        };
        let out = tb.add_positions(&pos, 0).unwrap();
        for b in 0..2 {
            for c in 0..4 {
                for f in 0..3 {
                    for n in 0..8 {
                        let want = pos.patch_pos.get(&[c, n]) + pos.frame_pos.get(&[f, n]);
                        assert_eq!(out.tokens.get(&[b, c, f, n]), want);
                    }
                }
            }
        }
    }

    #[test]
    fn sinusoid_rows_have_standard_norm() {
        let grid = PatchGrid::new(8, 8, 2).unwrap();
        let pos = PositionTables::<f64>::new(grid, 6, 16).unwrap();
        for row in pos.frame_pos.data().chunks(16) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - (8.0f64).sqrt()).abs() < 1e-12);
        }
        for row in pos.patch_pos.data().chunks(16) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - (8.0f64).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn assemble_then_extract() {
        let grid = PatchGrid::new(4, 4, 2).unwrap();
        let mk = |f, seed: f64| TokenBatch {
            tokens: iota(&[2, 4, f, 8]).map(|v| v * seed),
            cond_frames: 0,
            pred_frames: f,
            grid,
        };
        let c = mk(2, 1.0);
        let n = mk(4, -0.5);
        let all = TokenBatch::assemble(&c, &n).unwrap();
        assert_eq!(all.frames(), 6);
        assert_eq!(all.cond_frames, 2);
        // frame-axis slice oracle
        for f in 0..6 {
            let want = if f < 2 {
                c.tokens.get(&[1, 3, f, 5])
            } else {
                n.tokens.get(&[1, 3, f - 2, 5])
            };
            assert_eq!(all.tokens.get(&[1, 3, f, 5]), want);
        }
        assert_eq!(all.extract_prediction().unwrap().tokens, n.tokens);

        let bad = TokenBatch {
            tokens: Tensor::zeros(&[2, 4, 4, 6]),
            ..n.clone()
        };
        assert!(TokenBatch::assemble(&c, &bad).is_err());
    }
}
