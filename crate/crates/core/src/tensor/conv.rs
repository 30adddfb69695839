//! Direct-loop convolution kernels for one and two spatial dimensions.
//!
//! One-dimensional inputs are handled as two-dimensional planes of height 1
//! so a single set of loops covers both cases.

use super::{shape_err, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Circular,
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOptions {
    pub padding: Padding,
    pub stride: usize,
    pub transposed: bool,
    pub groups: usize,
}

impl ConvOptions {
    pub fn same(padding: Padding) -> Self {
        ConvOptions {
            padding,
            stride: 1,
            transposed: false,
            groups: 1,
        }
    }

    pub fn down(padding: Padding) -> Self {
        ConvOptions {
            stride: 2,
            ..Self::same(padding)
        }
    }

    pub fn up(padding: Padding) -> Self {
        ConvOptions {
            stride: 2,
            transposed: true,
            ..Self::same(padding)
        }
    }

    pub fn grouped(self, groups: usize) -> Self {
        ConvOptions { groups, ..self }
    }
}

fn map_index(pos: isize, n: usize, padding: Padding) -> usize {
    let ni = n as isize;
    match padding {
        Padding::Circular => pos.rem_euclid(ni) as usize,
        Padding::Reflect => {
            if n == 1 {
                return 0;
            }
            let period = 2 * (ni - 1);
            let mut p = pos.rem_euclid(period);
            if p >= ni {
                p = period - p;
            }
            p as usize
        }
    }
}

/// Per-axis geometry: for every (outer index, tap) pair the mapped partner index.
#[derive(Debug, Clone)]
struct Axis {
    n_in: usize,
    n_out: usize,
    k: usize,
    table: Vec<usize>,
}

impl Axis {
    fn build(n_in: usize, k: usize, stride: usize, transposed: bool, padding: Padding) -> Result<Self> {
        if padding == Padding::Reflect && n_in > 1 && n_in < k {
            return Err(TensorError::ReflectTooSmall { size: n_in, kernel: k });
        }
        if !transposed {
            if n_in % stride != 0 {
                return shape_err(
                    "conv_nd",
                    format!("spatial size {} not divisible by stride {}", n_in, stride),
                );
            }
            let n_out = n_in / stride;
            let off = (k / 2) as isize;
            let mut table = Vec::with_capacity(n_out * k);
            for o in 0..n_out {
                for j in 0..k {
                    let pos = (o * stride + j) as isize - off;
                    table.push(map_index(pos, n_in, padding));
                }
            }
            Ok(Axis { n_in, n_out, k, table })
        } else {
            if k < stride {
                return shape_err("conv_nd", "transposed kernel smaller than stride");
            }
            let n_out = n_in * stride;
            let off = ((k - stride) / 2) as isize;
            let mut table = Vec::with_capacity(n_in * k);
            for i in 0..n_in {
                for j in 0..k {
                    let pos = (i * stride + j) as isize - off;
                    table.push(map_index(pos, n_out, padding));
                }
            }
            if padding == Padding::Reflect && n_out < k && n_out > 1 {
                return Err(TensorError::ReflectTooSmall { size: n_out, kernel: k });
            }
            Ok(Axis { n_in, n_out, k, table })
        }
    }
}

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone)]
pub(crate) struct ConvPlan {
    c_in: usize,
    c_out: usize,
    groups: usize,
    h: Axis,
    w: Axis,
    transposed: bool,
    pub out_shape: Vec<usize>,
}

impl ConvPlan {
    pub fn new(input: &[usize], kernel: &[usize], bias: Option<&[usize]>, opts: ConvOptions) -> Result<Self> {
        if opts.stride != 1 && opts.stride != 2 {
            return Err(TensorError::BadStride(opts.stride));
        }
        let spatial = input.len().saturating_sub(1);
        if spatial != 1 && spatial != 2 {
            return shape_err("conv_nd", format!("input rank {} (need 2 or 3)", input.len()));
        }
        if kernel.len() != spatial + 2 {
            return shape_err(
                "conv_nd",
                format!("kernel rank {} for {} spatial dims", kernel.len(), spatial),
            );
        }
        let groups = opts.groups.max(1);
        let c_in = input[0];
        let c_out = kernel[0];
        if c_in % groups != 0 || c_out % groups != 0 {
            return shape_err(
                "conv_nd",
                format!("groups {} must divide channels {} -> {}", groups, c_in, c_out),
            );
        }
        if kernel[1] * groups != c_in {
            return shape_err(
                "conv_nd",
                format!("kernel expects {} input channels, input has {}", kernel[1] * groups, c_in),
            );
        }
        if let Some(b) = bias {
            if b != [c_out] {
                return shape_err("conv_nd", format!("bias shape {:?}, expected [{}]", b, c_out));
            }
        }
        let ks = &kernel[2..];
        if opts.stride == 1 && ks.iter().any(|k| k % 2 == 0) {
            return shape_err("conv_nd", "stride-1 kernels must have odd size");
        }
        let (h, w) = if spatial == 1 {
            (
                Axis::build(1, 1, 1, opts.transposed, opts.padding)?,
                Axis::build(input[1], ks[0], opts.stride, opts.transposed, opts.padding)?,
            )
        } else {
            (
                Axis::build(input[1], ks[0], opts.stride, opts.transposed, opts.padding)?,
                Axis::build(input[2], ks[1], opts.stride, opts.transposed, opts.padding)?,
            )
        };
        let mut out_shape = vec![c_out];
        if spatial == 2 {
            out_shape.push(h.n_out);
        }
        out_shape.push(w.n_out);
        Ok(ConvPlan {
            c_in,
            c_out,
            groups,
            h,
            w,
            transposed: opts.transposed,
            out_shape,
        })
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    fn ktaps(&self) -> usize {
        self.h.k * self.w.k
    }

    /// Visits every (output channel, input channel, kernel tap) triple.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (cin_g, cout_g) = (self.cin_g(), self.cout_g());
        for g in 0..self.groups {
            for oc in 0..cout_g {
                let o = g * cout_g + oc;
                for ic in 0..cin_g {
                    let c = g * cin_g + ic;
                    let kbase = (o * cin_g + ic) * self.ktaps();
                    for jh in 0..self.h.k {
                        for jw in 0..self.w.k {
                            f(o, c, kbase + jh * self.w.k + jw, jh, jw);
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let plane_in = self.h.n_in * self.w.n_in;
        let plane_out = self.h.n_out * self.w.n_out;
        let mut out = vec![0.0; self.c_out * plane_out];
        if let Some(b) = bias {
            for (o, bv) in b.iter().enumerate() {
                out[o * plane_out..(o + 1) * plane_out].fill(*bv);
            }
        }
        let (h, w) = (&self.h, &self.w);
        self.for_each_tap(|o, c, ki, jh, jw| {
            let wt = kernel[ki];
            if wt == 0.0 {
                return;
            }
            let inp = &input[c * plane_in..(c + 1) * plane_in];
            let outp = &mut out[o * plane_out..(o + 1) * plane_out];
            if !self.transposed {
                for oh in 0..h.n_out {
                    let r = h.table[oh * h.k + jh];
                    let in_row = &inp[r * w.n_in..(r + 1) * w.n_in];
                    let out_row = &mut outp[oh * w.n_out..(oh + 1) * w.n_out];
                    for (ow, ov) in out_row.iter_mut().enumerate() {
                        *ov += wt * in_row[w.table[ow * w.k + jw]];
                    }
                }
            } else {
                for ih in 0..h.n_in {
                    let r = h.table[ih * h.k + jh];
                    let in_row = &inp[ih * w.n_in..(ih + 1) * w.n_in];
                    let out_row = &mut outp[r * w.n_out..(r + 1) * w.n_out];
                    for (iw, iv) in in_row.iter().enumerate() {
                        out_row[w.table[iw * w.k + jw]] += wt * iv;
                    }
                }
            }
        });
        out
    }

    /// Returns (grad input, grad kernel, grad bias) for upstream gradient `gout`.
    pub fn backward(
        &self,
        input: &[f64],
        kernel: &[f64],
        gout: &[f64],
        need_input: bool,
        need_kernel: bool,
        need_bias: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
        let plane_in = self.h.n_in * self.w.n_in;
        let plane_out = self.h.n_out * self.w.n_out;
        let mut gin = need_input.then(|| vec![0.0; self.c_in * plane_in]);
        let mut gk = need_kernel.then(|| vec![0.0; kernel.len()]);
        let gb = need_bias.then(|| {
            (0..self.c_out)
                .map(|o| gout[o * plane_out..(o + 1) * plane_out].iter().sum())
                .collect()
        });
        let (h, w) = (&self.h, &self.w);
        self.for_each_tap(|o, c, ki, jh, jw| {
            let wt = kernel[ki];
            let inp = &input[c * plane_in..(c + 1) * plane_in];
            let go = &gout[o * plane_out..(o + 1) * plane_out];
            let mut acc = 0.0;
            if !self.transposed {
                for oh in 0..h.n_out {
                    let r = h.table[oh * h.k + jh];
                    let in_row = &inp[r * w.n_in..(r + 1) * w.n_in];
                    let go_row = &go[oh * w.n_out..(oh + 1) * w.n_out];
                    for (ow, g) in go_row.iter().enumerate() {
                        acc += g * in_row[w.table[ow * w.k + jw]];
                    }
                    if let Some(gi) = gin.as_mut() {
                        if wt != 0.0 {
                            let gi_row = &mut gi[c * plane_in + r * w.n_in..c * plane_in + (r + 1) * w.n_in];
                            for (ow, g) in go_row.iter().enumerate() {
                                gi_row[w.table[ow * w.k + jw]] += wt * g;
                            }
                        }
                    }
                }
            } else {
                for ih in 0..h.n_in {
                    let r = h.table[ih * h.k + jh];
                    let in_row = &inp[ih * w.n_in..(ih + 1) * w.n_in];
                    let go_row = &go[r * w.n_out..(r + 1) * w.n_out];
                    for (iw, iv) in in_row.iter().enumerate() {
                        acc += go_row[w.table[iw * w.k + jw]] * iv;
                    }
                    if let Some(gi) = gin.as_mut() {
                        if wt != 0.0 {
                            let gi_row = &mut gi[c * plane_in + ih * w.n_in..c * plane_in + (ih + 1) * w.n_in];
                            for (iw, gv) in gi_row.iter_mut().enumerate() {
                                *gv += wt * go_row[w.table[iw * w.k + jw]];
                            }
                        }
                    }
                }
            }
            if let Some(g) = gk.as_mut() {
                g[ki] += acc;
            }
        });
        (gin, gk, gb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        assert_eq!(map_index(-1, 5, Padding::Reflect), 1);
        assert_eq!(map_index(-2, 5, Padding::Reflect), 2);
        assert_eq!(map_index(5, 5, Padding::Reflect), 3);
        assert_eq!(map_index(-1, 5, Padding::Circular), 4);
    }

    #[test]
    fn transposed_k2s2_partitions_outputs() {
        let ax = Axis::build(4, 2, 2, true, Padding::Circular).unwrap();
        let mut seen = ax.table.clone();
        seen.sort();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }
}
