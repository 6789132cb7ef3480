//! The per-stage velocity network.
//!
//! A deliberately small point network: each point's coordinates are
//! concatenated with a sinusoidal embedding of the stage-local time (plus a
//! learned class embedding when conditioning), pushed through a shared
//! 3-layer encoder, pooled over the cloud (max and mean, concatenated), and
//! decoded per point back to a 3-vector velocity. Shared weights plus
//! symmetric pooling make the field permutation-equivariant by
//! construction. The output layer starts at zero, so a fresh model is the
//! zero velocity field.
//!
//! Parameters live in one flat vector with a named layout, which keeps the
//! optimizer, EMA tracking, and checkpoints trivial. Forward and backward
//! passes are hand-written and generic over the scalar type: training runs
//! in f32, while gradient verification instantiates the same code at f64.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::cloud::PointCloud;
use crate::error::{invalid_arg, Error, Result};

/// Scalar types the network can run at.
pub trait Scalar:
    Float + FromPrimitive + std::iter::Sum + std::fmt::Debug + Send + Sync + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
fn tf<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("finite f64 converts to any Scalar")
}

/// Network shape: encoder layer widths, time-embedding size, and the class
/// vocabulary for conditional models (`None` = unconditional).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelArch {
    pub widths: [usize; 3],
    pub time_dim: usize,
    pub classes: Option<usize>,
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(invalid_arg!("encoder widths must be positive: {:?}", self.widths));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(invalid_arg!("time embedding size must be even and >= 2"));
        }
        if self.classes == Some(0) {
            return Err(invalid_arg!("conditional models need at least one class"));
        }
        Ok(())
    }

    fn in_dim(&self) -> usize {
        3 + self.time_dim
    }
}

/// Sinusoidal embedding of a scalar time with geometrically spaced
/// frequencies (1 to 1000 over `dim / 2` bands).
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub frequencies: Vec<f64>,
}

impl TimeEmbedding {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(invalid_arg!("time embedding size must be even and >= 2"));
        }
        let half = dim / 2;
        let frequencies = (0..half)
            .map(|j| {
                if half == 1 {
                    1.0
                } else {
                    1000.0f64.powf(j as f64 / (half - 1) as f64)
                }
            })
            .collect();
        Ok(TimeEmbedding { dim, frequencies })
    }

    /// `[sin(w_j t) .. | cos(w_j t) ..]` as f64; callers cast as needed.
    pub fn embed(&self, t: f64) -> Vec<f64> {
        let half = self.dim / 2;
        let mut out = vec![0.0; self.dim];
        for (j, &w) in self.frequencies.iter().enumerate() {
            out[j] = (w * t).sin();
            out[half + j] = (w * t).cos();
        }
        out
    }
}

/// One named span of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

fn build_layout(arch: &ModelArch) -> Vec<ParamBlock> {
    let [w0, w1, w2] = arch.widths;
    let in_dim = arch.in_dim();
    let mut blocks = Vec::new();
    let mut offset = 0usize;
    let push = |name: &str, len: usize, offset: &mut usize, blocks: &mut Vec<ParamBlock>| {
        blocks.push(ParamBlock {
            name: name.to_string(),
            offset: *offset,
            len,
        });
        *offset += len;
    };
    push("enc0.w", w0 * in_dim, &mut offset, &mut blocks);
    push("enc0.b", w0, &mut offset, &mut blocks);
    push("enc1.w", w1 * w0, &mut offset, &mut blocks);
    push("enc1.b", w1, &mut offset, &mut blocks);
    push("enc2.w", w2 * w1, &mut offset, &mut blocks);
    push("enc2.b", w2, &mut offset, &mut blocks);
    push("dec0.w", w1 * (3 * w2), &mut offset, &mut blocks);
    push("dec0.b", w1, &mut offset, &mut blocks);
    push("dec1.w", w0 * w1, &mut offset, &mut blocks);
    push("dec1.b", w0, &mut offset, &mut blocks);
    push("out.w", 3 * w0, &mut offset, &mut blocks);
    push("out.b", 3, &mut offset, &mut blocks);
    if let Some(classes) = arch.classes {
        // One learned row per class plus a trailing "unconditional" row.
        push("cond.emb", (classes + 1) * arch.time_dim, &mut offset, &mut blocks);
    }
    blocks
}

/// A velocity field with parameters at scalar type `T`.
#[derive(Debug, Clone)]
pub struct VelocityModel<T: Scalar> {
    arch: ModelArch,
    time_embedding: TimeEmbedding,
    layout: Vec<ParamBlock>,
    params: Vec<T>,
}

impl<T: Scalar> VelocityModel<T> {
    /// Zero-mean scaled-uniform fan-in init for hidden layers; the output
    /// layer starts at zero so the initial field is identically zero.
    pub fn init<R: Rng>(arch: ModelArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let layout = build_layout(&arch);
        let total = layout.iter().map(|b| b.len).sum();
        let mut params = vec![T::zero(); total];
        let time_embedding = TimeEmbedding::new(arch.time_dim)?;
        let [w0, w1, w2] = arch.widths;
        let (in_dim, time_dim) = (arch.in_dim(), arch.time_dim);
        let fan_in = move |name: &str| -> usize {
            match name {
                "enc0.w" => in_dim,
                "enc1.w" => w0,
                "enc2.w" => w1,
                "dec0.w" => 3 * w2,
                "dec1.w" => w1,
                "cond.emb" => time_dim,
                _ => 0,
            }
        };
        let mut model = VelocityModel {
            arch,
            time_embedding,
            layout,
            params: Vec::new(),
        };
        for block in &model.layout {
            let fan = fan_in(&block.name);
            if fan > 0 {
                let scale = 1.0 / (fan as f64).sqrt();
                for slot in &mut params[block.offset..block.offset + block.len] {
                    *slot = tf(rng.gen_range(-scale..scale));
                }
            }
            // Biases and the whole output layer stay zero.
        }
        model.params = params;
        Ok(model)
    }

    /// Rebuild a model around an existing flat parameter vector (same arch).
    pub fn from_params(arch: ModelArch, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        let layout = build_layout(&arch);
        let total: usize = layout.iter().map(|b| b.len).sum();
        if params.len() != total {
            return Err(invalid_arg!(
                "parameter vector has {} floats, arch needs {total}",
                params.len()
            ));
        }
        let time_embedding = TimeEmbedding::new(arch.time_dim)?;
        Ok(VelocityModel {
            arch,
            time_embedding,
            layout,
            params,
        })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn layout(&self) -> &[ParamBlock] {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn block(&self, name: &str) -> &[T] {
        let b = self
            .layout
            .iter()
            .find(|b| b.name == name)
            .unwrap_or_else(|| panic!("no parameter block named {name}"));
        &self.params[b.offset..b.offset + b.len]
    }

    /// Input row for one point: coordinates, then the time embedding with
    /// the class (or unconditional) embedding added when conditional.
    fn input_row(&self, p: &[T; 3], temb: &[T]) -> Vec<T> {
        let mut row = Vec::with_capacity(self.arch.in_dim());
        row.extend_from_slice(p);
        row.extend_from_slice(temb);
        row
    }

    /// Time-plus-condition embedding shared by all points of one call.
    fn conditioned_embedding(&self, t: f64, condition: Option<u32>) -> Result<Vec<T>> {
        let mut emb: Vec<T> = self.time_embedding.embed(t).into_iter().map(tf).collect();
        match (self.arch.classes, condition) {
            (None, None) => {}
            (None, Some(c)) => {
                return Err(invalid_arg!(
                    "model is unconditional but a class ({c}) was supplied"
                ));
            }
            (Some(classes), cond) => {
                let row = match cond {
                    Some(c) if (c as usize) < classes => c as usize,
                    Some(c) => {
                        return Err(invalid_arg!(
                            "class {c} out of range (vocabulary size {classes})"
                        ));
                    }
                    None => classes, // trailing unconditional row
                };
                let table = self.block("cond.emb");
                let dim = self.arch.time_dim;
                for (j, slot) in emb.iter_mut().enumerate() {
                    *slot = *slot + table[row * dim + j];
                }
            }
        }
        Ok(emb)
    }

    /// Evaluate the velocity field at local time `t` for every point.
    pub fn eval(&self, t: f64, points: &[[T; 3]], condition: Option<u32>) -> Result<Vec<[T; 3]>> {
        let fwd = self.forward(t, points, condition)?;
        Ok(fwd.out)
    }

    /// Mean-squared-error loss against `target` and the full parameter
    /// gradient, via hand-written reverse-mode differentiation.
    pub fn eval_with_grads(
        &self,
        t: f64,
        points: &[[T; 3]],
        condition: Option<u32>,
        target: &[[T; 3]],
    ) -> Result<(T, Vec<T>)> {
        if target.len() != points.len() {
            return Err(invalid_arg!(
                "target has {} rows, input has {}",
                target.len(),
                points.len()
            ));
        }
        let fwd = self.forward(t, points, condition)?;
        Ok(self.backward(&fwd, points, condition, target))
    }

    fn validate_inputs(&self, t: f64, points: &[[T; 3]]) -> Result<()> {
        if points.is_empty() {
            return Err(invalid_arg!("cannot evaluate on an empty cloud"));
        }
        if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
            return Err(invalid_arg!("local time {t} outside [0, 1]"));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(invalid_arg!("point {i} has non-finite coordinates"));
            }
        }
        Ok(())
    }

    fn forward(&self, t: f64, points: &[[T; 3]], condition: Option<u32>) -> Result<Forward<T>> {
        self.validate_inputs(t, points)?;
        let temb = self.conditioned_embedding(t, condition)?;
        let n = points.len();
        let [w0, w1, w2] = self.arch.widths;
        let in_dim = self.arch.in_dim();

        let (enc0_w, enc0_b) = (self.block("enc0.w"), self.block("enc0.b"));
        let (enc1_w, enc1_b) = (self.block("enc1.w"), self.block("enc1.b"));
        let (enc2_w, enc2_b) = (self.block("enc2.w"), self.block("enc2.b"));
        let (dec0_w, dec0_b) = (self.block("dec0.w"), self.block("dec0.b"));
        let (dec1_w, dec1_b) = (self.block("dec1.w"), self.block("dec1.b"));
        let (out_w, out_b) = (self.block("out.w"), self.block("out.b"));

        let mut fwd = Forward::alloc(n, &self.arch);
        // Shared per-call input embedding.
        fwd.temb = temb;

        for i in 0..n {
            let x = self.input_row(&points[i], &fwd.temb);
            linear(enc0_w, enc0_b, &x, &mut fwd.a0[i * w0..(i + 1) * w0], in_dim);
            silu_rows(&fwd.a0[i * w0..(i + 1) * w0], &mut fwd.h0[i * w0..(i + 1) * w0]);
            linear(
                enc1_w,
                enc1_b,
                &fwd.h0[i * w0..(i + 1) * w0],
                &mut fwd.a1[i * w1..(i + 1) * w1],
                w0,
            );
            silu_rows(&fwd.a1[i * w1..(i + 1) * w1], &mut fwd.h1[i * w1..(i + 1) * w1]);
            linear(
                enc2_w,
                enc2_b,
                &fwd.h1[i * w1..(i + 1) * w1],
                &mut fwd.a2[i * w2..(i + 1) * w2],
                w1,
            );
            silu_rows(&fwd.a2[i * w2..(i + 1) * w2], &mut fwd.h2[i * w2..(i + 1) * w2]);
        }

        // Global context: feature-wise max (argmax tracked, lowest index on
        // ties) and mean over points.
        for f in 0..w2 {
            let mut best = fwd.h2[f];
            let mut best_i = 0usize;
            let mut sum = T::zero();
            for i in 0..n {
                let v = fwd.h2[i * w2 + f];
                sum = sum + v;
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            fwd.gmax[f] = best;
            fwd.argmax[f] = best_i;
            fwd.gmean[f] = sum / tf(n as f64);
        }

        for i in 0..n {
            let mut feat = Vec::with_capacity(3 * w2);
            feat.extend_from_slice(&fwd.h2[i * w2..(i + 1) * w2]);
            feat.extend_from_slice(&fwd.gmax);
            feat.extend_from_slice(&fwd.gmean);
            linear(dec0_w, dec0_b, &feat, &mut fwd.b0[i * w1..(i + 1) * w1], 3 * w2);
            silu_rows(&fwd.b0[i * w1..(i + 1) * w1], &mut fwd.d0[i * w1..(i + 1) * w1]);
            linear(
                dec1_w,
                dec1_b,
                &fwd.d0[i * w1..(i + 1) * w1],
                &mut fwd.b1[i * w0..(i + 1) * w0],
                w1,
            );
            silu_rows(&fwd.b1[i * w0..(i + 1) * w0], &mut fwd.d1[i * w0..(i + 1) * w0]);
            let mut row = [T::zero(); 3];
            linear(out_w, out_b, &fwd.d1[i * w0..(i + 1) * w0], &mut row, w0);
            fwd.out.push(row);
            fwd.feat.extend_from_slice(&feat);
        }
        Ok(fwd)
    }

    fn backward(
        &self,
        fwd: &Forward<T>,
        points: &[[T; 3]],
        condition: Option<u32>,
        target: &[[T; 3]],
    ) -> (T, Vec<T>) {
        let n = points.len();
        let [w0, w1, w2] = self.arch.widths;
        let in_dim = self.arch.in_dim();
        let denom = tf::<T>((n * 3) as f64);

        let mut grads = vec![T::zero(); self.params.len()];
        let mut loss = T::zero();

        let (enc0_w, enc1_w, enc2_w) =
            (self.block("enc0.w"), self.block("enc1.w"), self.block("enc2.w"));
        let (dec0_w, dec1_w, out_w) =
            (self.block("dec0.w"), self.block("dec1.w"), self.block("out.w"));
        let off = |name: &str| {
            let b = self.layout.iter().find(|b| b.name == name).unwrap();
            b.offset
        };
        let (o_enc0w, o_enc0b) = (off("enc0.w"), off("enc0.b"));
        let (o_enc1w, o_enc1b) = (off("enc1.w"), off("enc1.b"));
        let (o_enc2w, o_enc2b) = (off("enc2.w"), off("enc2.b"));
        let (o_dec0w, o_dec0b) = (off("dec0.w"), off("dec0.b"));
        let (o_dec1w, o_dec1b) = (off("dec1.w"), off("dec1.b"));
        let (o_outw, o_outb) = (off("out.w"), off("out.b"));

        // Phase 1: decoder backward per point; pooled gradients accumulate.
        let mut dh2 = vec![T::zero(); n * w2];
        let mut dgmax = vec![T::zero(); w2];
        let mut dgmean = vec![T::zero(); w2];
        let mut dfeat = vec![T::zero(); 3 * w2];
        let mut db1 = vec![T::zero(); w0];
        let mut db0 = vec![T::zero(); w1];
        for i in 0..n {
            let mut dout = [T::zero(); 3];
            for c in 0..3 {
                let diff = fwd.out[i][c] - target[i][c];
                loss = loss + diff * diff;
                dout[c] = (diff + diff) / denom;
            }
            // out layer
            let d1 = &fwd.d1[i * w0..(i + 1) * w0];
            for c in 0..3 {
                for j in 0..w0 {
                    grads[o_outw + c * w0 + j] = grads[o_outw + c * w0 + j] + dout[c] * d1[j];
                }
                grads[o_outb + c] = grads[o_outb + c] + dout[c];
            }
            // dd1 = out_w^T dout, through silu at b1
            let b1_pre = &fwd.b1[i * w0..(i + 1) * w0];
            for j in 0..w0 {
                let mut acc = T::zero();
                for c in 0..3 {
                    acc = acc + out_w[c * w0 + j] * dout[c];
                }
                db1[j] = acc * silu_prime(b1_pre[j]);
            }
            // dec1 layer
            let d0 = &fwd.d0[i * w1..(i + 1) * w1];
            for o in 0..w0 {
                for j in 0..w1 {
                    grads[o_dec1w + o * w1 + j] = grads[o_dec1w + o * w1 + j] + db1[o] * d0[j];
                }
                grads[o_dec1b + o] = grads[o_dec1b + o] + db1[o];
            }
            let b0_pre = &fwd.b0[i * w1..(i + 1) * w1];
            for j in 0..w1 {
                let mut acc = T::zero();
                for o in 0..w0 {
                    acc = acc + dec1_w[o * w1 + j] * db1[o];
                }
                db0[j] = acc * silu_prime(b0_pre[j]);
            }
            // dec0 layer
            let feat = &fwd.feat[i * 3 * w2..(i + 1) * 3 * w2];
            for o in 0..w1 {
                for j in 0..3 * w2 {
                    grads[o_dec0w + o * 3 * w2 + j] =
                        grads[o_dec0w + o * 3 * w2 + j] + db0[o] * feat[j];
                }
                grads[o_dec0b + o] = grads[o_dec0b + o] + db0[o];
            }
            for j in 0..3 * w2 {
                let mut acc = T::zero();
                for o in 0..w1 {
                    acc = acc + dec0_w[o * 3 * w2 + j] * db0[o];
                }
                dfeat[j] = acc;
            }
            for f in 0..w2 {
                dh2[i * w2 + f] = dh2[i * w2 + f] + dfeat[f];
                dgmax[f] = dgmax[f] + dfeat[w2 + f];
                dgmean[f] = dgmean[f] + dfeat[2 * w2 + f];
            }
        }
        loss = loss / denom;

        // Pooling backward: max routes to the argmax point, mean spreads.
        for f in 0..w2 {
            dh2[fwd.argmax[f] * w2 + f] = dh2[fwd.argmax[f] * w2 + f] + dgmax[f];
        }
        let inv_n = T::one() / tf(n as f64);
        for i in 0..n {
            for f in 0..w2 {
                dh2[i * w2 + f] = dh2[i * w2 + f] + dgmean[f] * inv_n;
            }
        }

        // Phase 2: encoder backward per point.
        let conditional = self.arch.classes.is_some();
        let mut dcond = vec![T::zero(); self.arch.time_dim];
        let mut da2 = vec![T::zero(); w2];
        let mut da1 = vec![T::zero(); w1];
        let mut da0 = vec![T::zero(); w0];
        for i in 0..n {
            let a2 = &fwd.a2[i * w2..(i + 1) * w2];
            for f in 0..w2 {
                da2[f] = dh2[i * w2 + f] * silu_prime(a2[f]);
            }
            let h1 = &fwd.h1[i * w1..(i + 1) * w1];
            for o in 0..w2 {
                for j in 0..w1 {
                    grads[o_enc2w + o * w1 + j] = grads[o_enc2w + o * w1 + j] + da2[o] * h1[j];
                }
                grads[o_enc2b + o] = grads[o_enc2b + o] + da2[o];
            }
            let a1 = &fwd.a1[i * w1..(i + 1) * w1];
            for j in 0..w1 {
                let mut acc = T::zero();
                for o in 0..w2 {
                    acc = acc + enc2_w[o * w1 + j] * da2[o];
                }
                da1[j] = acc * silu_prime(a1[j]);
            }
            let h0 = &fwd.h0[i * w0..(i + 1) * w0];
            for o in 0..w1 {
                for j in 0..w0 {
                    grads[o_enc1w + o * w0 + j] = grads[o_enc1w + o * w0 + j] + da1[o] * h0[j];
                }
                grads[o_enc1b + o] = grads[o_enc1b + o] + da1[o];
            }
            let a0 = &fwd.a0[i * w0..(i + 1) * w0];
            for j in 0..w0 {
                let mut acc = T::zero();
                for o in 0..w1 {
                    acc = acc + enc1_w[o * w0 + j] * da1[o];
                }
                da0[j] = acc * silu_prime(a0[j]);
            }
            let x = self.input_row(&points[i], &fwd.temb);
            for o in 0..w0 {
                for j in 0..in_dim {
                    grads[o_enc0w + o * in_dim + j] =
                        grads[o_enc0w + o * in_dim + j] + da0[o] * x[j];
                }
                grads[o_enc0b + o] = grads[o_enc0b + o] + da0[o];
            }
            if conditional {
                // The class embedding feeds input slots 3.., shared by all
                // points; accumulate its gradient through enc0.
                for j in 0..self.arch.time_dim {
                    let mut acc = T::zero();
                    for o in 0..w0 {
                        acc = acc + enc0_w[o * in_dim + 3 + j] * da0[o];
                    }
                    dcond[j] = dcond[j] + acc;
                }
            }
        }
        if let Some(classes) = self.arch.classes {
            let row = match condition {
                Some(c) => c as usize,
                None => classes,
            };
            let o_cond = off("cond.emb");
            let dim = self.arch.time_dim;
            for j in 0..dim {
                grads[o_cond + row * dim + j] = grads[o_cond + row * dim + j] + dcond[j];
            }
        }
        (loss, grads)
    }
}

impl VelocityModel<f32> {
    /// Convenience wrapper for f32 clouds.
    pub fn eval_cloud(
        &self,
        t: f64,
        cloud: &PointCloud,
        condition: Option<u32>,
    ) -> Result<Vec<[f32; 3]>> {
        self.eval(t, cloud.points(), condition)
    }
}

/// Forward-pass intermediates kept for the backward pass.
struct Forward<T: Scalar> {
    temb: Vec<T>,
    a0: Vec<T>,
    h0: Vec<T>,
    a1: Vec<T>,
    h1: Vec<T>,
    a2: Vec<T>,
    h2: Vec<T>,
    gmax: Vec<T>,
    gmean: Vec<T>,
    argmax: Vec<usize>,
    feat: Vec<T>,
    b0: Vec<T>,
    d0: Vec<T>,
    b1: Vec<T>,
    d1: Vec<T>,
    out: Vec<[T; 3]>,
}

impl<T: Scalar> Forward<T> {
    fn alloc(n: usize, arch: &ModelArch) -> Self {
        let [w0, w1, w2] = arch.widths;
        Forward {
            temb: Vec::new(),
            a0: vec![T::zero(); n * w0],
            h0: vec![T::zero(); n * w0],
            a1: vec![T::zero(); n * w1],
            h1: vec![T::zero(); n * w1],
            a2: vec![T::zero(); n * w2],
            h2: vec![T::zero(); n * w2],
            gmax: vec![T::zero(); w2],
            gmean: vec![T::zero(); w2],
            argmax: vec![0; w2],
            feat: Vec::with_capacity(n * 3 * w2),
            b0: vec![T::zero(); n * w1],
            d0: vec![T::zero(); n * w1],
            b1: vec![T::zero(); n * w0],
            d1: vec![T::zero(); n * w0],
            out: Vec::with_capacity(n),
        }
    }
}

#[inline]
fn linear<T: Scalar>(w: &[T], b: &[T], input: &[T], out: &mut [T], in_dim: usize) {
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for (wi, xi) in row.iter().zip(input.iter()) {
            acc = acc + *wi * *xi;
        }
        *slot = acc;
    }
}

#[inline]
fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
fn silu_prime<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

#[inline]
fn silu_rows<T: Scalar>(pre: &[T], post: &mut [T]) {
    for (a, h) in pre.iter().zip(post.iter_mut()) {
        *h = silu(*a);
    }
}

// --- checkpoint I/O ------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "mfm checkpoint v1";

/// Serialized training snapshot: architecture, stage index, optional class
/// labels, and both parameter sets (live and EMA).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: usize,
    pub arch: ModelArch,
    pub labels: Vec<String>,
    pub live: Vec<f32>,
    pub ema: Vec<f32>,
}

impl Checkpoint {
    pub fn live_model(&self) -> Result<VelocityModel<f32>> {
        VelocityModel::from_params(self.arch.clone(), self.live.clone())
    }

    pub fn ema_model(&self) -> Result<VelocityModel<f32>> {
        VelocityModel::from_params(self.arch.clone(), self.ema.clone())
    }
}

/// Write a checkpoint: a text header naming every parameter block, then the
/// raw little-endian f32 payload (live set first, then EMA).
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let model = ckpt.live_model()?;
    if ckpt.ema.len() != ckpt.live.len() {
        return Err(invalid_arg!(
            "EMA parameter count {} differs from live {}",
            ckpt.ema.len(),
            ckpt.live.len()
        ));
    }
    if let Some(classes) = ckpt.arch.classes {
        if !ckpt.labels.is_empty() && ckpt.labels.len() != classes {
            return Err(invalid_arg!(
                "{} labels for {classes} classes",
                ckpt.labels.len()
            ));
        }
    }
    let mut header = String::new();
    header.push_str(CHECKPOINT_MAGIC);
    header.push('\n');
    header.push_str(&format!("stage = {}\n", ckpt.stage));
    header.push_str(&format!(
        "widths = {} {} {}\n",
        ckpt.arch.widths[0], ckpt.arch.widths[1], ckpt.arch.widths[2]
    ));
    header.push_str(&format!("time_dim = {}\n", ckpt.arch.time_dim));
    header.push_str(&format!("classes = {}\n", ckpt.arch.classes.unwrap_or(0)));
    for (i, label) in ckpt.labels.iter().enumerate() {
        header.push_str(&format!("label {i} = {label}\n"));
    }
    header.push_str(&format!("param_floats = {}\n", ckpt.live.len()));
    for block in model.layout() {
        header.push_str(&format!("block {} = {}\n", block.name, block.len));
    }
    header.push_str("data\n");

    let mut file = fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    let mut payload = Vec::with_capacity((ckpt.live.len() + ckpt.ema.len()) * 4);
    for v in ckpt.live.iter().chain(ckpt.ema.iter()) {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&payload)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let fail = |line: usize, msg: String| Error::Format {
        path: path.display().to_string(),
        line,
        msg,
    };
    // Split the text header from the binary payload at the "data" line.
    let mut cursor = 0usize;
    let mut lines: Vec<(usize, String)> = Vec::new();
    let mut line_no = 0usize;
    let payload_start;
    loop {
        let rest = &bytes[cursor..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fail(line_no + 1, "missing data section".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| fail(line_no + 1, "header is not UTF-8".into()))?
            .to_string();
        cursor += nl + 1;
        line_no += 1;
        if line == "data" {
            payload_start = cursor;
            break;
        }
        lines.push((line_no, line));
    }
    if lines.is_empty() || lines[0].1 != CHECKPOINT_MAGIC {
        return Err(fail(1, format!("expected `{CHECKPOINT_MAGIC}` header")));
    }

    let mut stage = None;
    let mut widths = None;
    let mut time_dim = None;
    let mut classes = None;
    let mut labels: Vec<(usize, String)> = Vec::new();
    let mut param_floats = None;
    for (no, line) in lines.iter().skip(1) {
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| fail(*no, format!("expected `key = value`, got `{line}`")))?;
        match key {
            "stage" => stage = Some(parse_num(value, *no, path)?),
            "widths" => {
                let parts: Vec<usize> = value
                    .split_whitespace()
                    .map(|p| parse_num(p, *no, path))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(fail(*no, "widths must list three sizes".into()));
                }
                widths = Some([parts[0], parts[1], parts[2]]);
            }
            "time_dim" => time_dim = Some(parse_num(value, *no, path)?),
            "classes" => classes = Some(parse_num(value, *no, path)?),
            "param_floats" => param_floats = Some(parse_num(value, *no, path)?),
            _ if key.starts_with("label ") => {
                let idx: usize = parse_num(key.trim_start_matches("label "), *no, path)?;
                labels.push((idx, value.to_string()));
            }
            _ if key.starts_with("block ") => {} // sizes re-derived from arch
            _ => return Err(fail(*no, format!("unknown header key `{key}`"))),
        }
    }
    let stage = stage.ok_or_else(|| fail(0, "missing stage".into()))?;
    let arch = ModelArch {
        widths: widths.ok_or_else(|| fail(0, "missing widths".into()))?,
        time_dim: time_dim.ok_or_else(|| fail(0, "missing time_dim".into()))?,
        classes: match classes.ok_or_else(|| fail(0, "missing classes".into()))? {
            0 => None,
            c => Some(c),
        },
    };
    arch.validate()?;
    let expect: usize = build_layout(&arch).iter().map(|b| b.len).sum();
    let declared = param_floats.ok_or_else(|| fail(0, "missing param_floats".into()))?;
    if declared != expect {
        return Err(fail(
            0,
            format!("param_floats {declared} does not match arch ({expect})"),
        ));
    }
    let payload = &bytes[payload_start..];
    if payload.len() != expect * 2 * 4 {
        return Err(fail(
            0,
            format!(
                "payload holds {} bytes, expected {} (live + EMA)",
                payload.len(),
                expect * 8
            ),
        ));
    }
    let mut floats = Vec::with_capacity(expect * 2);
    for chunk in payload.chunks_exact(4) {
        floats.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let ema = floats.split_off(expect);
    labels.sort_by_key(|(i, _)| *i);
    Ok(Checkpoint {
        stage,
        arch,
        labels: labels.into_iter().map(|(_, l)| l).collect(),
        live: floats,
        ema,
    })
}

fn parse_num(s: &str, line: usize, path: &Path) -> Result<usize> {
    s.parse().map_err(|_| Error::Format {
        path: path.display().to_string(),
        line,
        msg: format!("expected an integer, got `{s}`"),
    })
}
