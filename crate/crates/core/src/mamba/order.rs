use std::rc::Rc;

use super::MambaBlock;
use crate::error::{dim_err, Result};
use crate::tensor::{kernels, ParamStore, Tape, Var};

/// Token visiting orders. The first four flatten an `H×W` map, the last
/// three flatten a `D×H×W` volume into per-plane sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanOrder {
    RowMajor,
    RowMajorRev,
    ColMajor,
    ColMajorRev,
    /// `D` sequences of `H·W`
    Axial,
    /// `W` sequences of `D·H`
    Coronal,
    /// `H` sequences of `D·W`
    Sagittal,
}

pub const PLANES: [ScanOrder; 3] = [ScanOrder::Axial, ScanOrder::Coronal, ScanOrder::Sagittal];

/// A bijection over token indices. `forward[j]` is the token visited at
/// position `j`; `inverse` undoes it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    pub forward: Rc<Vec<usize>>,
    pub inverse: Rc<Vec<usize>>,
}

impl Permutation {
    fn new(forward: Vec<usize>) -> Self {
        let inverse = kernels::inverse_perm(&forward);
        Permutation { forward: Rc::new(forward), inverse: Rc::new(inverse) }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Same permutation applied independently to `batch` consecutive blocks.
    fn batched(idx: &[usize], batch: usize) -> Rc<Vec<usize>> {
        let n = idx.len();
        Rc::new((0..batch).flat_map(|b| idx.iter().map(move |&i| b * n + i)).collect())
    }
}

impl ScanOrder {
    /// `dims` is `[H, W]` for the 2-D orders and `[D, H, W]` for the planes.
    pub fn permutation(self, dims: &[usize]) -> Result<Permutation> {
        use ScanOrder::*;
        let order: Vec<usize> = match (self, dims) {
            (RowMajor | RowMajorRev | ColMajor | ColMajorRev, &[h, w]) => {
                let mut v: Vec<usize> = match self {
                    RowMajor | RowMajorRev => (0..h * w).collect(),
                    _ => (0..w).flat_map(|c| (0..h).map(move |r| r * w + c)).collect(),
                };
                if matches!(self, RowMajorRev | ColMajorRev) {
                    v.reverse();
                }
                v
            }
            (Axial, &[d, h, w]) => (0..d * h * w).collect(),
            (Coronal, &[d, h, w]) => {
                (0..w).flat_map(|x| (0..d).flat_map(move |z| (0..h).map(move |y| z * h * w + y * w + x))).collect()
            }
            (Sagittal, &[d, h, w]) => {
                (0..h).flat_map(|y| (0..d).flat_map(move |z| (0..w).map(move |x| z * h * w + y * w + x))).collect()
            }
            _ => return Err(dim_err!("{self:?} cannot order a grid of dims {dims:?}")),
        };
        Ok(Permutation::new(order))
    }

    /// `(number of sequences, sequence length)` for a plane order.
    pub fn plane_layout(self, dims: [usize; 3]) -> (usize, usize) {
        let [d, h, w] = dims;
        match self {
            ScanOrder::Axial => (d, h * w),
            ScanOrder::Coronal => (w, d * h),
            ScanOrder::Sagittal => (h, d * w),
            _ => (1, d * h * w),
        }
    }
}

/// Runs `block` over the four 2-D scan orders of `x[B × (H·W) × d]` and
/// merges the inverse-permuted outputs by their mean. All four directions go
/// through the block as one batch.
pub fn cross_scan_2d(tape: &Tape, store: &ParamStore, block: &MambaBlock, x: Var, h: usize, w: usize) -> Result<Var> {
    let shape = tape.shape(x);
    let &[bs, l, d] = &shape[..] else {
        return Err(dim_err!("cross_scan_2d expects B×L×d, got {shape:?}"));
    };
    if l != h * w {
        return Err(dim_err!("cross_scan_2d: {l} tokens for a {h}×{w} map"));
    }
    let orders = [ScanOrder::RowMajor, ScanOrder::RowMajorRev, ScanOrder::ColMajor, ScanOrder::ColMajorRev];
    let perms = orders.map(|o| o.permutation(&[h, w]).expect("2-d dims"));
    let mut gather = Vec::with_capacity(4 * bs * l);
    for p in &perms {
        gather.extend(Permutation::batched(&p.forward, bs).iter());
    }
    let flat = tape.reshape(x, [bs * l, d])?;
    let seqs = tape.reshape(tape.gather_rows(flat, Rc::new(gather))?, [4 * bs, l, d])?;
    let y = tape.reshape(block.forward(tape, store, seqs)?, [4 * bs * l, d])?;
    let mut parts = Vec::with_capacity(4);
    for (k, p) in perms.iter().enumerate() {
        let idx: Vec<usize> = Permutation::batched(&p.inverse, bs).iter().map(|&i| k * bs * l + i).collect();
        parts.push(tape.gather_rows(y, Rc::new(idx))?);
    }
    let merged = tape.mean_n(&parts)?;
    tape.reshape(merged, [bs, l, d])
}

/// Splits token grids of a `D×H×W` volume into the three per-plane sequence
/// batches and reassembles per-plane outputs.
#[derive(Clone, Debug)]
pub struct TriPlane {
    pub dims: [usize; 3],
    perms: [Permutation; 3],
}

impl TriPlane {
    pub fn new(dims: [usize; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(dim_err!("tri-plane dims must be positive, got {dims:?}"));
        }
        let perms = PLANES.map(|o| o.permutation(&dims).expect("3-d dims"));
        Ok(TriPlane { dims, perms })
    }

    fn tokens(&self) -> usize {
        self.dims.iter().product()
    }

    /// `x[B × (D·H·W) × c]` → `[B·n_seq × len × c]` for plane `p`.
    pub fn split(&self, tape: &Tape, x: Var, p: usize) -> Result<Var> {
        let shape = tape.shape(x);
        let &[bs, n, c] = &shape[..] else {
            return Err(dim_err!("tri-plane split expects B×N×c, got {shape:?}"));
        };
        if n != self.tokens() {
            return Err(dim_err!("tri-plane split: {n} tokens for dims {:?}", self.dims));
        }
        let (seqs, len) = PLANES[p].plane_layout(self.dims);
        let flat = tape.reshape(x, [bs * n, c])?;
        let y = tape.gather_rows(flat, Permutation::batched(&self.perms[p].forward, bs))?;
        tape.reshape(y, [bs * seqs, len, c])
    }

    /// Inverse of [`TriPlane::split`] for all three planes, averaged.
    pub fn assemble(&self, tape: &Tape, outs: [Var; 3]) -> Result<Var> {
        let n = self.tokens();
        let mut parts = Vec::with_capacity(3);
        let mut out_shape = None;
        for (p, &o) in outs.iter().enumerate() {
            let shape = tape.shape(o);
            let (seqs, len) = PLANES[p].plane_layout(self.dims);
            let &[rows, l, c] = &shape[..] else {
                return Err(dim_err!("tri-plane assemble expects 3-d outputs, got {shape:?}"));
            };
            if l != len || rows % seqs != 0 {
                return Err(dim_err!(
                    "tri-plane assemble: plane {p} output {shape:?} does not fit dims {:?}",
                    self.dims
                ));
            }
            let bs = rows / seqs;
            if out_shape.is_some_and(|s| s != [bs, n, c]) {
                return Err(dim_err!("tri-plane assemble: plane outputs disagree"));
            }
            out_shape = Some([bs, n, c]);
            let flat = tape.reshape(o, [bs * n, c])?;
            parts.push(tape.gather_rows(flat, Permutation::batched(&self.perms[p].inverse, bs))?);
        }
        let merged = tape.mean_n(&parts)?;
        tape.reshape(merged, out_shape.expect("three planes").to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mamba::{MambaBlockConfig, ScanDirection};
    use crate::tensor::{Init, Tensor};

    #[test]
    fn enumerations_on_2x2() {
        let p = |o: ScanOrder| o.permutation(&[2, 2]).unwrap().forward.to_vec();
        assert_eq!(p(ScanOrder::RowMajor), [0, 1, 2, 3]);
        assert_eq!(p(ScanOrder::RowMajorRev), [3, 2, 1, 0]);
        assert_eq!(p(ScanOrder::ColMajor), [0, 2, 1, 3]);
        assert_eq!(p(ScanOrder::ColMajorRev), [3, 1, 2, 0]);
    }

    #[test]
    fn every_order_is_a_bijection() {
        for o in [ScanOrder::RowMajor, ScanOrder::RowMajorRev, ScanOrder::ColMajor, ScanOrder::ColMajorRev] {
            let p = o.permutation(&[3, 5]).unwrap();
            let back: Vec<usize> = (0..15).map(|j| p.forward[p.inverse[j]]).collect();
            assert_eq!(back, (0..15).collect::<Vec<_>>());
        }
        for o in PLANES {
            let p = o.permutation(&[2, 3, 4]).unwrap();
            let mut seen = p.forward.to_vec();
            seen.sort_unstable();
            assert_eq!(seen, (0..24).collect::<Vec<_>>());
        }
        assert!(ScanOrder::Axial.permutation(&[2, 2]).is_err());
    }

    #[test]
    fn plane_sequences_follow_the_stated_axes() {
        let dims = [2, 3, 4];
        let tp = TriPlane::new(dims).unwrap();
        let x = Tensor::from_fn([1, 24, 1], |i| i as f32);
        let tape = Tape::new();
        let xv = tape.constant(x);
        let cor = tape.value(tp.split(&tape, xv, 1).unwrap());
        assert_eq!(cor.shape(), [4, 6, 1]);
        // sequence w = 1: (d,h) row-major at column 1
        assert_eq!(cor.data()[6..12], [1.0, 5.0, 9.0, 13.0, 17.0, 21.0]);
        let sag = tape.value(tp.split(&tape, xv, 2).unwrap());
        assert_eq!(sag.shape(), [3, 8, 1]);
        assert_eq!(sag.data()[8..16], [4.0, 5.0, 6.0, 7.0, 16.0, 17.0, 18.0, 19.0]);
        let ax = tape.value(tp.split(&tape, xv, 0).unwrap());
        assert_eq!(ax.shape(), [2, 12, 1]);
    }

    #[test]
    fn counts_and_degenerate_depth() {
        let tp = TriPlane::new([2, 2, 2]).unwrap();
        for p in PLANES {
            let (s, l) = p.plane_layout(tp.dims);
            assert_eq!(s * l, 8);
        }
        assert_eq!(ScanOrder::Axial.plane_layout([1, 4, 5]), (1, 20));
    }

    #[test]
    fn identity_roundtrip_is_bitwise() {
        let tp = TriPlane::new([3, 2, 5]).unwrap();
        let x = Tensor::from_fn([2, 30, 3], |i| (i as f32 * 0.713).sin());
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let outs = [0, 1, 2].map(|p| tp.split(&tape, xv, p).unwrap());
        let back = tape.value(tp.assemble(&tape, outs).unwrap());
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn assemble_rejects_mismatch() {
        let tp = TriPlane::new([2, 2, 2]).unwrap();
        let tape = Tape::new();
        let bad = tape.constant(Tensor::zeros([3, 3, 1]));
        assert!(tp.assemble(&tape, [bad, bad, bad]).is_err());
    }

    #[test]
    fn one_by_one_map_equals_single_block_output() {
        let mut store = ParamStore::new();
        let mut init = Init::new(8);
        let cfg = MambaBlockConfig { scan: ScanDirection::Forward, ..MambaBlockConfig::new(4) };
        let block = MambaBlock::new(&mut store, &mut init, "b", cfg, false).unwrap();
        let x = Tensor::from_fn([1, 1, 4], |i| i as f32 * 0.3 - 0.4);
        let tape = Tape::new();
        let xv = tape.constant(x);
        let fused = tape.value(cross_scan_2d(&tape, &store, &block, xv, 1, 1).unwrap());
        let single = tape.value(block.forward(&tape, &store, xv).unwrap());
        assert_eq!(fused.data(), single.data());
    }
}
