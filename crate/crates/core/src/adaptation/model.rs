//! Per-pixel linear-softmax classifier over a k×k neighborhood.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{load_tensor_raw, save_tensor};
use crate::map::{Image, ProbabilityMap, NUM_CLASSES};
use crate::par::{self, Exec};

#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    pub classes: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// `[class][in_channel][dy][dx]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients with the model's layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(m: &TinyModel) -> Self {
        Self {
            weights: vec![0.0; m.weights.len()],
            bias: vec![0.0; m.bias.len()],
        }
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.bias)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

impl TinyModel {
    pub fn zeros(in_channels: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) || in_channels == 0 {
            return Err(Error::Argument(
                "kernel must be odd and channels positive".into(),
            ));
        }
        Ok(Self {
            classes: NUM_CLASSES,
            in_channels,
            kernel,
            weights: vec![0.0; NUM_CLASSES * in_channels * kernel * kernel],
            bias: vec![0.0; NUM_CLASSES],
        })
    }

    /// Weights drawn from `N(0, scale²)`, zero bias.
    pub fn seeded(in_channels: usize, kernel: usize, seed: u64, scale: f64) -> Result<Self> {
        let mut m = Self::zeros(in_channels, kernel)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).map_err(|e| Error::Argument(e.to_string()))?;
        m.weights
            .iter_mut()
            .for_each(|w| *w = normal.sample(&mut rng));
        Ok(m)
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn taps(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Inputs of the pixel's neighborhood in weight order; borders clamp.
    fn patch(&self, img: &Image, y: usize, x: usize, out: &mut [f64]) {
        let r = (self.kernel / 2) as isize;
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        for ci in 0..self.in_channels {
            for dy in 0..self.kernel {
                let yy = clamp(y as isize + dy as isize - r, img.height);
                for dx in 0..self.kernel {
                    let xx = clamp(x as isize + dx as isize - r, img.width);
                    out[(ci * self.kernel + dy) * self.kernel + dx] = img.at(yy, xx, ci);
                }
            }
        }
    }

    fn check_input(&self, img: &Image) -> Result<()> {
        if img.channels != self.in_channels {
            return Err(Error::Layout {
                expected: self.in_channels,
                got: img.channels,
            });
        }
        Ok(())
    }

    fn pixel_probs(&self, patch: &[f64], out: &mut [f64]) {
        let taps = self.taps();
        for ((o, w), b) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(taps))
            .zip(&self.bias)
        {
            *o = b + w.iter().zip(patch).map(|(a, b)| a * b).sum::<f64>();
        }
        softmax(out);
    }

    fn forward_row(&self, img: &Image, y: usize) -> Vec<f64> {
        let mut patch = vec![0.0; self.taps()];
        let mut row = vec![0.0; img.width * self.classes];
        for x in 0..img.width {
            self.patch(img, y, x, &mut patch);
            self.pixel_probs(&patch, &mut row[x * self.classes..(x + 1) * self.classes]);
        }
        row
    }

    pub fn forward(&self, img: &Image, exec: Exec) -> Result<ProbabilityMap> {
        self.check_input(img)?;
        let rows = par::map_range(exec, img.height, |y| self.forward_row(img, y));
        ProbabilityMap::new(img.height, img.width, self.classes, rows.concat())
    }

    /// Back-propagates `grad_probs = ∂L/∂p` through the softmax and the
    /// linear layer. Rows are reduced in order, so the result does not
    /// depend on `exec`.
    pub fn backward(
        &self,
        img: &Image,
        probs: &ProbabilityMap,
        grad_probs: &[f64],
        exec: Exec,
    ) -> Result<Gradient> {
        self.check_input(img)?;
        if probs.dims() != (img.height, img.width) || grad_probs.len() != probs.data().len() {
            return Err(Error::Argument(
                "gradient buffer does not match the input".into(),
            ));
        }
        let taps = self.taps();
        let c_n = self.classes;
        let rows = par::map_range(exec, img.height, |y| {
            let mut g = Gradient::zeros_like(self);
            let mut patch = vec![0.0; taps];
            let mut delta = vec![0.0; c_n];
            for x in 0..img.width {
                let off = (y * img.width + x) * c_n;
                let p = &probs.data()[off..off + c_n];
                let gp = &grad_probs[off..off + c_n];
                let dot: f64 = p.iter().zip(gp).map(|(a, b)| a * b).sum();
                let mut any = false;
                for c in 0..c_n {
                    delta[c] = p[c] * (gp[c] - dot);
                    any |= delta[c] != 0.0;
                }
                if !any {
                    continue;
                }
                self.patch(img, y, x, &mut patch);
                for ((gw, gb), &d) in g
                    .weights
                    .chunks_exact_mut(taps)
                    .zip(&mut g.bias)
                    .zip(&delta)
                {
                    *gb += d;
                    for (w, v) in gw.iter_mut().zip(&patch) {
                        *w += d * v;
                    }
                }
            }
            g
        });
        let mut total = Gradient::zeros_like(self);
        for g in rows {
            total
                .weights
                .iter_mut()
                .zip(&g.weights)
                .for_each(|(a, b)| *a += b);
            total
                .bias
                .iter_mut()
                .zip(&g.bias)
                .for_each(|(a, b)| *a += b);
        }
        Ok(total)
    }

    /// Stores the model as `weights.grit` (`[C, Cin, k, k]`) and `bias.grit`
    /// (`[C]`) in `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_tensor(
            &dir.join("weights.grit"),
            &[self.classes, self.in_channels, self.kernel, self.kernel],
            self.weights.iter().map(|&v| v as f32),
        )?;
        save_tensor(
            &dir.join("bias.grit"),
            &[self.classes],
            self.bias.iter().map(|&v| v as f32),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let wpath = dir.join("weights.grit");
        let w = load_tensor_raw(&wpath)?;
        let b = load_tensor_raw(&dir.join("bias.grit"))?;
        if w.dims.len() != 4
            || w.dims[2] != w.dims[3]
            || w.dims[2] % 2 == 0
            || b.dims != [w.dims[0]]
        {
            return Err(Error::format(wpath, "inconsistent model tensor shapes"));
        }
        if w.dims[0] != NUM_CLASSES {
            return Err(Error::Layout {
                expected: NUM_CLASSES,
                got: w.dims[0],
            });
        }
        Ok(Self {
            classes: w.dims[0],
            in_channels: w.dims[1],
            kernel: w.dims[2],
            weights: w.data.iter().map(|&v| v as f64).collect(),
            bias: b.data.iter().map(|&v| v as f64).collect(),
        })
    }

    /// Rounds every parameter to `f32`, the precision of checkpoints.
    pub fn quantize(&mut self) {
        self.weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .for_each(|v| *v = *v as f32 as f64);
    }
}

pub fn softmax(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Image::new(
            h,
            w,
            2,
            (0..h * w * 2).map(|_| n.sample(&mut rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = TinyModel::zeros(2, 5).unwrap();
        let p = m.forward(&image(6, 7, 1), Exec::Sequential).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn execution_modes_agree() {
        let m = TinyModel::seeded(2, 5, 3, 0.3).unwrap();
        let img = image(20, 13, 2);
        let a = m.forward(&img, Exec::Sequential).unwrap();
        let b = m.forward(&img, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let g: Vec<f64> = (0..a.data().len()).map(|i| (i % 7) as f64 - 3.0).collect();
        assert_eq!(
            m.backward(&img, &a, &g, Exec::Sequential).unwrap(),
            m.backward(&img, &a, &g, Exec::Parallel).unwrap()
        );
    }

    #[test]
    fn class_permutation_permutes_output() {
        let m = TinyModel::seeded(2, 3, 9, 0.5).unwrap();
        let taps = 2 * 9;
        let perm = [3, 0, 4, 1, 2];
        let mut q = m.clone();
        for (dst, &src) in perm.iter().enumerate() {
            q.weights[dst * taps..(dst + 1) * taps]
                .copy_from_slice(&m.weights[src * taps..(src + 1) * taps]);
            q.bias[dst] = m.bias[src];
        }
        let img = image(5, 5, 4);
        let a = m.forward(&img, Exec::Sequential).unwrap();
        let b = q.forward(&img, Exec::Sequential).unwrap();
        for (pa, pb) in a.pixels().zip(b.pixels()) {
            for (dst, &src) in perm.iter().enumerate() {
                assert!((pb[dst] - pa[src]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = TinyModel::seeded(2, 5, 5, 0.1).unwrap();
        m.quantize();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(TinyModel::load(dir.path()).unwrap(), m);
    }
}
