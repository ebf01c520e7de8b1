//! Index permutations between image and token layouts, expressed as gathers.

use super::{Element, Graph, NumericsError, Var};

fn dims4<T: Element>(g: &Graph<T>, x: Var, op: &'static str) -> Result<[usize; 4], NumericsError> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(NumericsError::ShapeMismatch { op, lhs: s.to_vec(), rhs: vec![0; 4] });
    }
    Ok([s[0], s[1], s[2], s[3]])
}

impl<T: Element> Graph<T> {
    /// `[B×C×H×W] -> [B·H·W × C]`: one row per pixel.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let [b, c, h, w] = dims4(self, x, "nchw_to_rows")?;
        let hw = h * w;
        let mut map = Vec::with_capacity(b * c * hw);
        for n in 0..b {
            for p in 0..hw {
                for ch in 0..c {
                    map.push((n * c + ch) * hw + p);
                }
            }
        }
        self.gather(x, map, &[b * hw, c])
    }

    /// Inverse of [`Graph::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, rows: Var, b: usize, h: usize, w: usize) -> Result<Var, NumericsError> {
        let s = self.shape(rows).to_vec();
        if s.len() != 2 || s[0] != b * h * w {
            return Err(NumericsError::ShapeMismatch { op: "rows_to_nchw", lhs: s, rhs: vec![b, h, w] });
        }
        let (c, hw) = (s[1], h * w);
        let mut map = Vec::with_capacity(b * c * hw);
        for n in 0..b {
            for ch in 0..c {
                for p in 0..hw {
                    map.push((n * hw + p) * c + ch);
                }
            }
        }
        self.gather(rows, map, &[b, c, h, w])
    }

    /// `[B×C×H×W] -> [B·L × C·p·p]` with `L = (H/p)·(W/p)` patches per image
    /// in row-major patch order; each row is channel-major, then patch row,
    /// then patch column.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var, NumericsError> {
        let [b, c, h, w] = dims4(self, x, "patchify")?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(NumericsError::ShapeMismatch { op: "patchify", lhs: vec![b, c, h, w], rhs: vec![p] });
        }
        let (ph, pw) = (h / p, w / p);
        let mut map = Vec::with_capacity(b * c * h * w);
        for n in 0..b {
            for py in 0..ph {
                for px in 0..pw {
                    for ch in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                map.push(((n * c + ch) * h + py * p + dy) * w + px * p + dx);
                            }
                        }
                    }
                }
            }
        }
        self.gather(x, map, &[b * ph * pw, c * p * p])
    }
}
