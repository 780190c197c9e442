//! The dihedral group D4 as a concrete algebra.
//!
//! Transducers are numbered 1..4 counterclockwise starting at the lower-left
//! corner of the plate; internally they are the corner indices 0..3. The
//! rotation `r` maps corner k to k+1 (mod 4). Element order in the 8-index
//! is `[e, r, r2, r3, s_v, s_h, s13, s24]`, where `s_v`/`s_h` reflect across
//! the vertical/horizontal axis and `s13`/`s24` across the diagonals through
//! corners 1-3 and 2-4.

use std::sync::OnceLock;

use crate::autodiff::Tensor;
use crate::scalar::Real;

pub const GROUP_ORDER: usize = 8;

/// One of the eight elements of D4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupElement(u8);

/// Corner permutations: `CORNER_PERMS[g][i]` is the image of corner `i`.
const CORNER_PERMS: [[usize; 4]; 8] = [
    [0, 1, 2, 3], // e
    [1, 2, 3, 0], // r
    [2, 3, 0, 1], // r2
    [3, 0, 1, 2], // r3
    [1, 0, 3, 2], // s_v
    [3, 2, 1, 0], // s_h
    [0, 3, 2, 1], // s13
    [2, 1, 0, 3], // s24
];

const NAMES: [&str; 8] = ["e", "r", "r2", "r3", "s_v", "s_h", "s13", "s24"];

/// 2x2 orthogonal action on plate coordinates, row-major.
const VECTOR_MATS: [[f64; 4]; 8] = [
    [1.0, 0.0, 0.0, 1.0],   // e
    [0.0, -1.0, 1.0, 0.0],  // r (ccw quarter turn)
    [-1.0, 0.0, 0.0, -1.0], // r2
    [0.0, 1.0, -1.0, 0.0],  // r3
    [-1.0, 0.0, 0.0, 1.0],  // s_v
    [1.0, 0.0, 0.0, -1.0],  // s_h
    [0.0, 1.0, 1.0, 0.0],   // s13
    [0.0, -1.0, -1.0, 0.0], // s24
];

fn cayley() -> &'static [[u8; 8]; 8] {
    static TABLE: OnceLock<[[u8; 8]; 8]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [[0u8; 8]; 8];
        for a in 0..8 {
            for b in 0..8 {
                // (a.b)(i) = a(b(i))
                let mut composed = [0usize; 4];
                for i in 0..4 {
                    composed[i] = CORNER_PERMS[a][CORNER_PERMS[b][i]];
                }
                let idx = CORNER_PERMS
                    .iter()
                    .position(|p| *p == composed)
                    .expect("D4 is closed under composition");
                table[a][b] = idx as u8;
            }
        }
        table
    })
}

impl GroupElement {
    pub const E: Self = Self(0);
    pub const R: Self = Self(1);
    pub const R2: Self = Self(2);
    pub const R3: Self = Self(3);
    pub const SV: Self = Self(4);
    pub const SH: Self = Self(5);
    pub const S13: Self = Self(6);
    pub const S24: Self = Self(7);

    pub fn all() -> impl Iterator<Item = Self> {
        (0..8u8).map(Self)
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < 8, "D4 has eight elements");
        Self(i as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        NAMES[self.index()]
    }

    pub fn compose(self, other: Self) -> Self {
        Self(cayley()[self.index()][other.index()])
    }

    pub fn inverse(self) -> Self {
        for g in Self::all() {
            if self.compose(g) == Self::E {
                return g;
            }
        }
        unreachable!("every element of D4 has an inverse")
    }

    pub fn is_rotation(self) -> bool {
        self.0 < 4
    }

    /// Image of corner `i` under this element.
    pub fn corner(self, i: usize) -> usize {
        CORNER_PERMS[self.index()][i]
    }

    pub fn corner_perm(self) -> [usize; 4] {
        CORNER_PERMS[self.index()]
    }

    /// 4x4 permutation matrix on corner indices.
    pub fn permutation_matrix<F: Real>(self) -> [[F; 4]; 4] {
        let mut m = [[F::zero(); 4]; 4];
        for i in 0..4 {
            m[self.corner(i)][i] = F::one();
        }
        m
    }

    /// 2x2 orthogonal matrix acting on plate coordinates.
    pub fn vector_matrix<F: Real>(self) -> [[F; 2]; 2] {
        let m = VECTOR_MATS[self.index()];
        [
            [F::of(m[0]), F::of(m[1])],
            [F::of(m[2]), F::of(m[3])],
        ]
    }

    /// Apply the vector representation to a point.
    pub fn apply_vector<F: Real>(self, v: [F; 2]) -> [F; 2] {
        let m = self.vector_matrix::<F>();
        [
            m[0][0] * v[0] + m[0][1] * v[1],
            m[1][0] * v[0] + m[1][1] * v[1],
        ]
    }

    /// Permutation of the 8 group indices under the right regular action:
    /// acting by `g` sends the value at index `g^-1 sigma` to index `sigma`.
    pub fn regular_perm(self) -> [usize; 8] {
        let ginv = self.inverse();
        let mut p = [0usize; 8];
        for (s, slot) in p.iter_mut().enumerate() {
            *slot = ginv.compose(Self::from_index(s)).index();
        }
        p
    }
}

impl std::fmt::Display for GroupElement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Permute a tensor along `axis`: out[.., i, ..] = in[.., perm[i], ..].
pub fn permute_axis<F: Real>(t: &Tensor<F>, axis: usize, perm: &[usize]) -> Tensor<F> {
    let shape = t.shape();
    assert!(axis < shape.len());
    assert_eq!(shape[axis], perm.len());
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(shape);
    let src = t.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for (i, &p) in perm.iter().enumerate() {
            let d = (o * n + i) * inner;
            let s = (o * n + p) * inner;
            dst[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    out
}

/// Joint receiver/sender permutation of an adjacency signal.
///
/// The tensor's trailing axes must be `[4, 4, T]` (receiver, sender, time);
/// any leading axes are treated as channels. The output satisfies
/// `V'(e_s, e_r) = V(g^-1 e_s, g^-1 e_r)`; the time axis is untouched.
pub fn act_on_adjacency<F: Real>(g: GroupElement, v: &Tensor<F>) -> Tensor<F> {
    let shape = v.shape();
    assert!(
        shape.len() >= 3 && shape[shape.len() - 3] == 4 && shape[shape.len() - 2] == 4,
        "adjacency tensor must end in [4, 4, T], got {:?}",
        shape
    );
    let t_len = shape[shape.len() - 1];
    let chans: usize = shape[..shape.len() - 3].iter().product();
    let ginv = g.inverse().corner_perm();
    let mut out = Tensor::zeros(shape);
    let src = v.data();
    let dst = out.data_mut();
    for c in 0..chans {
        let base = c * 16 * t_len;
        for r in 0..4 {
            for s in 0..4 {
                let d = base + (r * 4 + s) * t_len;
                let sidx = base + (ginv[r] * 4 + ginv[s]) * t_len;
                dst[d..d + t_len].copy_from_slice(&src[sidx..sidx + t_len]);
            }
        }
    }
    out
}

/// Right regular action on a group-indexed feature along `group_axis`
/// (axis length must be 8): the output at index `sigma` equals the input
/// at index `g^-1 sigma`.
pub fn act_on_regular<F: Real>(g: GroupElement, f: &Tensor<F>, group_axis: usize) -> Tensor<F> {
    permute_axis(f, group_axis, &g.regular_perm())
}
