//! Content-aware feature upsampling.
//!
//! Every output pixel embeds its (pooled) color through a small MLP, then
//! attends to the 3x3 patch neighborhood around it. Keys and values come
//! from the backbone's image features; the query adds a Fourier code of the
//! pixel position plus a per-subpixel slot bias, so attention weights may
//! vary with position while a constant feature map stays constant.

use std::sync::Arc;

use crate::autograd::{Graph, LocalTable, SparseMap, Var};
use crate::geometry::RgbImage;
use crate::tensor::{Scalar, Tensor};

use super::{check_factor, linear, Model, Prepared, Result};

/// Mean color of each `patch/f` block, shifted to `[-0.5, 0.5]`.
pub fn pixel_inputs<S: Scalar>(image: &RgbImage, patch: usize, factor: usize) -> Tensor<S> {
    let step = patch / factor;
    let (rows, cols) = (image.height / step, image.width / step);
    let mut data = Vec::with_capacity(rows * cols * 3);
    let norm = 1.0 / (255.0 * (step * step) as f64);
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = [0.0f64; 3];
            for dy in 0..step {
                for dx in 0..step {
                    let px = image.pixel(r * step + dy, c * step + dx);
                    for k in 0..3 {
                        acc[k] += px[k] as f64;
                    }
                }
            }
            for a in acc {
                data.push(S::lit(a * norm - 0.5));
            }
        }
    }
    Tensor::from_vec(rows * cols, 3, data)
}

/// 3x3 patch neighborhood of every output pixel, with key rows offset by
/// `key_offset`.
pub fn local_table(grid: (usize, usize), patch: usize, factor: usize, key_offset: usize) -> LocalTable {
    let (gr, gc) = grid;
    let (rr, rc) = (gr * factor, gc * factor);
    let sub = patch / factor;
    let mut neighbors = Vec::with_capacity(rr * rc * 9);
    let mut bias_row = Vec::with_capacity(rr * rc);
    for py in 0..rr {
        for px in 0..rc {
            let (pr, pc) = ((py / factor) as isize, (px / factor) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nr, nc) = (pr + dy, pc + dx);
                    if nr < 0 || nc < 0 || nr >= gr as isize || nc >= gc as isize {
                        neighbors.push(u32::MAX);
                    } else {
                        neighbors.push((key_offset + nr as usize * gc + nc as usize) as u32);
                    }
                }
            }
            let sy = (py % factor) * sub + sub / 2;
            let sx = (px % factor) * sub + sub / 2;
            bias_row.push((sy * patch + sx) as u32);
        }
    }
    LocalTable { window: 9, neighbors, bias_row }
}

/// Bilinear interpolation between pixel-center grids, edges clamped.
pub fn bilinear_map(src: (usize, usize), dst: (usize, usize)) -> SparseMap {
    let (sr, sc) = src;
    let (dr, dc) = dst;
    let axis = |d: usize, s: usize, i: usize| {
        let x = ((i as f64 + 0.5) * s as f64 / d as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, x - lo as f64)
    };
    let mut rows = Vec::with_capacity(dr * dc);
    for y in 0..dr {
        let (y0, y1, fy) = axis(dr, sr, y);
        for x in 0..dc {
            let (x0, x1, fx) = axis(dc, sc, x);
            let mut e: Vec<(u32, f64)> = Vec::with_capacity(4);
            let mut put = |r: usize, c: usize, w: f64| {
                if w == 0.0 {
                    return;
                }
                let idx = (r * sc + c) as u32;
                match e.iter_mut().find(|(i, _)| *i == idx) {
                    Some(slot) => slot.1 += w,
                    None => e.push((idx, w)),
                }
            };
            put(y0, x0, (1.0 - fy) * (1.0 - fx));
            put(y0, x1, (1.0 - fy) * fx);
            put(y1, x0, fy * (1.0 - fx));
            put(y1, x1, fy * fx);
            rows.push(e);
        }
    }
    SparseMap { n_in: sr * sc, rows }
}

pub(crate) struct VStar {
    pub features: Var,
    pub offsets: Vec<usize>,
    pub pixels: Vec<usize>,
    pub resample: Vec<Option<Arc<SparseMap>>>,
}

fn pixel_centers(rows: usize, cols: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push([(c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64]);
        }
    }
    out
}

impl<S: Scalar> Model<S> {
    /// `V*` for the images of the selected samples, from their output
    /// features and pixels. All selected images must share one grid.
    fn upsample_images(
        &self,
        g: &mut Graph<S>,
        pv: &[Var],
        v_out: Var,
        items: &[(&RgbImage, (usize, usize), usize)],
        factor: usize,
    ) -> Result<VStar> {
        check_factor(factor, self.cfg.patch)?;
        let ids = &self.ids;
        let p = self.cfg.patch;
        let mut pix = Vec::new();
        let mut neighbors = Vec::new();
        let mut bias_row = Vec::new();
        let mut offsets = Vec::new();
        let mut pixels = Vec::new();
        let mut resample = Vec::new();
        let mut qpos_idx = Vec::new();
        let mut total = 0;
        let mut shape: Option<(usize, usize)> = None;
        let mut qpos_src: Option<Var> = None;
        for &(image, grid, key_offset) in items {
            let (rr, rc) = (grid.0 * factor, grid.1 * factor);
            match shape {
                Some(s) if s != (rr, rc) => {
                    return Err(super::ModelError::Config("mixed image grids in one upsample call".into()))
                }
                _ => shape = Some((rr, rc)),
            }
            let t = pixel_inputs::<S>(image, p, factor);
            pix.extend_from_slice(&t.data);
            let table = local_table(grid, p, factor, key_offset);
            neighbors.extend(table.neighbors);
            bias_row.extend(table.bias_row);
            offsets.push(total);
            pixels.push(rr * rc);
            qpos_idx.extend(0..(rr * rc) as u32);
            total += rr * rc;
            resample.push(if (rr, rc) == (image.height, image.width) {
                None
            } else {
                Some(Arc::new(bilinear_map((rr, rc), (image.height, image.width))))
            });
        }
        if let Some((rr, rc)) = shape {
            let f = g.constant(self.fourier_rows(&pixel_centers(rr, rc)));
            qpos_src = Some(g.matmul(f, pv[ids.up_qpos]));
        }
        let rgb = g.constant(Tensor::from_vec(total, 3, pix));
        let e = linear(g, rgb, pv[ids.pix_w1], pv[ids.pix_b1]);
        let e = g.gelu(e);
        let e = linear(g, e, pv[ids.pix_w2], pv[ids.pix_b2]);
        let q = g.matmul(e, pv[ids.up_wq]);
        let qpos = g.gather_rows(qpos_src.expect("at least one image"), Arc::new(qpos_idx));
        let q = g.add(q, qpos);
        let k = g.matmul(v_out, pv[ids.up_wk]);
        let v = g.matmul(v_out, pv[ids.up_wv]);
        let table = Arc::new(LocalTable { window: 9, neighbors, bias_row });
        let a = g.local_attention(q, k, v, pv[ids.up_bias], table);
        let features = g.add(e, a);
        Ok(VStar { features, offsets, pixels, resample })
    }

    /// Plain-value `V*` of one image: `(rows * cols) x d` in raster order at
    /// `grid * factor` resolution.
    pub fn upsample_features(&self, v_out: &Tensor<S>, image: &RgbImage, factor: usize) -> Result<Tensor<S>> {
        let grid = (image.height / self.cfg.patch, image.width / self.cfg.patch);
        let mut g = Graph::new();
        let pv = self.bind_frozen(&mut g);
        let vo = g.constant(v_out.clone());
        let vs = self.upsample_images(&mut g, &pv, vo, &[(image, grid, 0)], factor)?;
        Ok(g.value(vs.features).clone())
    }

    /// Mask logits for seg queries against one image's `V*`, resampled to
    /// image resolution: `n x (H * W)`.
    pub fn predict_mask(&self, seg_query: &Tensor<S>, vstar: &Tensor<S>, src: (usize, usize), dst: (usize, usize)) -> Tensor<S> {
        let mut m = crate::tensor::matmul(seg_query, false, vstar, true);
        let s = S::lit(1.0 / (self.cfg.width as f64).sqrt());
        for x in &mut m.data {
            *x *= s;
        }
        if src == dst {
            return m;
        }
        let map = bilinear_map(src, dst);
        let mut out = Tensor::zeros(m.rows, dst.0 * dst.1);
        for r in 0..m.rows {
            let srow = m.row(r).to_vec();
            for (o, entries) in map.rows.iter().enumerate() {
                out.data[r * map.rows.len() + o] = entries.iter().map(|&(i, w)| srow[i as usize] * S::lit(w)).sum();
            }
        }
        out
    }
}

pub(crate) fn upsample_graph<S: Scalar>(
    model: &Model<S>,
    g: &mut Graph<S>,
    pv: &[Var],
    prep: &Prepared<S>,
    v_out: Var,
    images: &[&RgbImage],
    used: &[usize],
    factor: usize,
) -> Result<VStar> {
    let mut starts = Vec::with_capacity(prep.image_counts.len());
    let mut acc = 0;
    for &c in &prep.image_counts {
        starts.push(acc);
        acc += c;
    }
    let p = model.cfg.patch;
    let items: Vec<(&RgbImage, (usize, usize), usize)> = used
        .iter()
        .map(|&s| (images[s], (images[s].height / p, images[s].width / p), starts[s]))
        .collect();
    model.upsample_images(g, pv, v_out, &items, factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig { layers: 1, width: 16, heads: 2, bins: 16, image_size: 16, patch: 8, pixel_hidden: 4, key_dim: 4, ..Default::default() }
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        let m = bilinear_map((4, 4), (16, 16));
        for r in &m.rows {
            let s: f64 = r.iter().map(|e| e.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let id = bilinear_map((3, 5), (3, 5));
        for (o, r) in id.rows.iter().enumerate() {
            assert_eq!(r, &vec![(o as u32, 1.0)]);
        }
    }

    #[test]
    fn factor_one_keeps_grid_size() {
        let m = Model::<f64>::new(tiny()).unwrap();
        let img = RgbImage::filled(16, 16, [1, 2, 3]);
        let v = Tensor::from_f64(4, 16, &(0..64).map(|i| i as f64 * 0.01).collect::<Vec<_>>());
        assert_eq!(m.upsample_features(&v, &img, 1).unwrap().rows, 4);
        assert_eq!(m.upsample_features(&v, &img, 8).unwrap().rows, 256);
        assert!(m.upsample_features(&v, &img, 3).is_err());
    }

    #[test]
    fn constant_inputs_give_constant_features() {
        let mut m = Model::<f64>::new(tiny()).unwrap();
        // Give the slot bias some structure so the weights differ per pixel.
        let b = m.ids.up_bias;
        m.params[b] = m.params[b].map(|_| 0.0);
        for (i, x) in m.params[b].data.iter_mut().enumerate() {
            *x = (i as f64 * 0.37).sin();
        }
        let img = RgbImage::filled(16, 16, [90, 20, 200]);
        let row: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.4).collect();
        let v = Tensor::from_vec(4, 16, row.iter().cycle().take(64).copied().collect());
        let out = m.upsample_features(&v, &img, 4).unwrap();
        for r in 1..out.rows {
            for c in 0..16 {
                assert!((out.at(r, c) - out.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_gives_half_probability() {
        let m = Model::<f64>::new(tiny()).unwrap();
        let vstar = Tensor::from_f64(4, 16, &(0..64).map(|i| (i as f64).cos()).collect::<Vec<_>>());
        let q = Tensor::zeros(1, 16);
        let l = m.predict_mask(&q, &vstar, (2, 2), (16, 16));
        assert_eq!(l.cols, 256);
        assert!(l.data.iter().all(|&x| x == 0.0));
        // Features aligned with the query push probabilities toward 1 and 0.
        let qv = Tensor::from_f64(1, 16, &[1.0; 16]);
        let pos = Tensor::from_f64(1, 16, &[5.0; 16]);
        let neg = Tensor::from_f64(1, 16, &[-5.0; 16]);
        assert!(m.predict_mask(&qv, &pos, (1, 1), (1, 1)).data[0] > 10.0);
        assert!(m.predict_mask(&qv, &neg, (1, 1), (1, 1)).data[0] < -10.0);
    }
}
