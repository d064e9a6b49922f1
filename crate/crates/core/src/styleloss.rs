//! Stylization objective: nearest-neighbor feature matching, content,
//! depth, regularizers, total variation, and the color, scale and spatial
//! control variants.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controls::luminance_rgb;
use crate::features::{extract_on_tape, ConvNetWeights, FeatureError, Normalization, SIZE_MULTIPLE};
use crate::mask::Mask;
use crate::render::SceneVars;
use crate::scene::SceneSnapshot;
use crate::tensor::{CustomOp, Real, Tape, Tensor, TensorError, Var};

pub const COSINE_EPS: f64 = 1e-8;
/// Origin pixels with alpha at or below this are excluded from the depth term.
pub const DEPTH_ALPHA_MIN: f64 = 0.05;
pub const CONTENT_LAYER: &str = "conv3_2";

/// Render locations processed per similarity block.
const NN_BLOCK: usize = 256;

#[derive(Debug, Error)]
pub enum StyleError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("feature channels differ: {render} vs {style}")]
    Channels { render: usize, style: usize },
    #[error("{what}: mask has {got} entries, expected {expected}")]
    MaskLength { what: &'static str, expected: usize, got: usize },
    #[error("no render location is selected")]
    EmptySelection,
    #[error("layer weights are all zero")]
    ZeroWeights,
    #[error("invalid layer weight {layer} = {weight}")]
    BadWeight { layer: String, weight: f64 },
    #[error("spatial control needs at least one region")]
    NoRegions,
    #[error("{expected} regions but {got} render masks")]
    RegionMasks { expected: usize, got: usize },
    #[error("snapshot holds {snapshot} Gaussians, scene {scene}")]
    SnapshotLength { snapshot: usize, scene: usize },
    #[error("invalid loss weight {name} = {value}")]
    LossWeight { name: &'static str, value: f64 },
}

/// `1 − a·b/(‖a‖‖b‖ + 1e-8)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb + COSINE_EPS)
}

fn check_mask(what: &'static str, mask: Option<&[bool]>, n: usize) -> Result<(), StyleError> {
    match mask {
        Some(m) if m.len() != n => Err(StyleError::MaskLength {
            what,
            expected: n,
            got: m.len(),
        }),
        _ => Ok(()),
    }
}

fn column_norms<T: Real>(x: &[T], c: usize, n: usize) -> Vec<f64> {
    let mut s = vec![0.0f64; n];
    for ch in 0..c {
        for (j, acc) in s.iter_mut().enumerate() {
            let v = x[ch * n + j].to_f64_lossy();
            *acc += v * v;
        }
    }
    s.into_iter().map(f64::sqrt).collect()
}

/// For every selected render column of `[C,Nr]`, the selected style column
/// of `[C,Ns]` with the smallest cosine distance and that distance. Ties go
/// to the lowest style index.
pub fn nearest_neighbors<T: Real>(
    render: &[T],
    style: &[T],
    channels: usize,
    render_mask: Option<&[bool]>,
    style_mask: Option<&[bool]>,
) -> Vec<Option<(usize, f64)>> {
    let nr = render.len() / channels.max(1);
    let ns = style.len() / channels.max(1);
    let rn = column_norms(render, channels, nr);
    let sn = column_norms(style, channels, ns);
    let style_ok: Vec<bool> = (0..ns).map(|j| style_mask.is_none_or(|m| m[j])).collect();
    if !style_ok.iter().any(|&k| k) {
        return vec![None; nr];
    }
    let blocks: Vec<usize> = (0..nr).step_by(NN_BLOCK).collect();
    blocks
        .par_iter()
        .flat_map_iter(|&start| {
            let rows = NN_BLOCK.min(nr - start);
            let mut dots = vec![T::zero(); rows * ns];
            // dots[i, j] = Σ_c render[c, start + i]·style[c, j]
            T::gemm_raw(
                rows,
                channels,
                ns,
                T::one(),
                &render[start..],
                1,
                nr as isize,
                style,
                ns as isize,
                1,
                T::zero(),
                &mut dots,
                ns as isize,
                1,
            );
            (0..rows)
                .map(|i| {
                    let r = start + i;
                    if render_mask.is_some_and(|m| !m[r]) {
                        return None;
                    }
                    let mut best: Option<(usize, f64)> = None;
                    for j in 0..ns {
                        if !style_ok[j] {
                            continue;
                        }
                        let d = 1.0 - dots[i * ns + j].to_f64_lossy() / (rn[r] * sn[j] + COSINE_EPS);
                        if best.is_none_or(|(_, b)| d < b) {
                            best = Some((j, d));
                        }
                    }
                    best
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

struct NnfmOp {
    channels: usize,
    matches: Vec<Option<usize>>,
    count: usize,
}

impl<T: Real> CustomOp<T> for NnfmOp {
    fn name(&self) -> &'static str {
        "nnfm"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (r, s) = (inputs[0].data(), inputs[1].data());
        let c = self.channels;
        let nr = r.len() / c;
        let ns = s.len() / c;
        let scale = grad_out[0].to_f64_lossy() / self.count as f64;
        let mut gr = needs[0].then(|| vec![0.0f64; r.len()]);
        let mut gs = needs[1].then(|| vec![0.0f64; s.len()]);
        for (i, m) in self.matches.iter().enumerate() {
            let Some(j) = *m else { continue };
            let a: Vec<f64> = (0..c).map(|ch| r[ch * nr + i].to_f64_lossy()).collect();
            let b: Vec<f64> = (0..c).map(|ch| s[ch * ns + j].to_f64_lossy()).collect();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let den = na * nb + COSINE_EPS;
            // d/da of −a·b/(‖a‖‖b‖ + ε)
            if let Some(g) = gr.as_mut() {
                let k = if na > 0.0 { dot * nb / (na * den * den) } else { 0.0 };
                for ch in 0..c {
                    g[ch * nr + i] += scale * (k * a[ch] - b[ch] / den);
                }
            }
            if let Some(g) = gs.as_mut() {
                let k = if nb > 0.0 { dot * na / (nb * den * den) } else { 0.0 };
                for ch in 0..c {
                    g[ch * ns + j] += scale * (k * b[ch] - a[ch] / den);
                }
            }
        }
        let cast = |g: Vec<f64>| g.into_iter().map(T::lit).collect();
        vec![gr.map(cast), gs.map(cast)]
    }
}

/// Mean over selected render locations of the cosine distance to the
/// nearest selected style location. Matching is recomputed on every call
/// and held constant for the gradient.
pub fn nnfm_loss_masked<T: Real>(
    tape: &mut Tape<T>,
    render: Var,
    style: Var,
    render_mask: Option<&[bool]>,
    style_mask: Option<&[bool]>,
) -> Result<Var, StyleError> {
    let (rs, ss) = (tape.shape(render).to_vec(), tape.shape(style).to_vec());
    if rs.is_empty() || ss.is_empty() {
        return Err(TensorError::Rank {
            op: "nnfm",
            expected: 3,
            got: rs,
        }
        .into());
    }
    if rs[0] != ss[0] {
        return Err(StyleError::Channels {
            render: rs[0],
            style: ss[0],
        });
    }
    let c = rs[0];
    let (nr, ns) = (tape.value(render).len() / c, tape.value(style).len() / c);
    check_mask("render mask", render_mask, nr)?;
    check_mask("style mask", style_mask, ns)?;
    let found = nearest_neighbors(tape.value(render).data(), tape.value(style).data(), c, render_mask, style_mask);
    let count = found.iter().filter(|m| m.is_some()).count();
    if count == 0 {
        return Err(StyleError::EmptySelection);
    }
    let mean = found.iter().flatten().map(|&(_, d)| d).sum::<f64>() / count as f64;
    let op = NnfmOp {
        channels: c,
        matches: found.iter().map(|m| m.map(|(j, _)| j)).collect(),
        count,
    };
    Ok(tape.custom(&[render, style], Tensor::scalar(T::lit(mean)), Box::new(op))?)
}

pub fn nnfm_loss<T: Real>(tape: &mut Tape<T>, render: Var, style: Var) -> Result<Var, StyleError> {
    nnfm_loss_masked(tape, render, style, None, None)
}

/// Mean squared difference.
pub fn content_loss<T: Real>(tape: &mut Tape<T>, content: Var, render: Var) -> Result<Var, TensorError> {
    let d = tape.sub(render, content)?;
    let d = tape.square(d)?;
    tape.mean(d)
}

/// Mean squared depth difference over pixels where the origin alpha
/// exceeds [`DEPTH_ALPHA_MIN`]; zero when no pixel qualifies.
pub fn depth_loss<T: Real>(
    tape: &mut Tape<T>,
    origin_depth: &Tensor<T>,
    origin_alpha: &Tensor<T>,
    depth: Var,
) -> Result<Var, TensorError> {
    let shape = tape.shape(depth).to_vec();
    for t in [origin_depth, origin_alpha] {
        if t.shape() != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "depth_loss",
                lhs: shape,
                rhs: t.shape().to_vec(),
            });
        }
    }
    let valid: Vec<T> = origin_alpha
        .data()
        .iter()
        .map(|&a| if a.to_f64_lossy() > DEPTH_ALPHA_MIN { T::one() } else { T::zero() })
        .collect();
    let n = valid.iter().filter(|&&v| v > T::zero()).count();
    if n == 0 {
        warn!("depth loss: no pixel with origin alpha above {DEPTH_ALPHA_MIN}");
        let z = tape.constant(Tensor::scalar(T::zero()));
        let d = tape.sum(depth)?;
        let d = tape.mul_scalar(d, T::zero())?;
        return tape.add(d, z);
    }
    let target = tape.constant(origin_depth.clone());
    let m = tape.constant(Tensor::new(shape, valid)?);
    let d = tape.sub(depth, target)?;
    let d = tape.square(d)?;
    let d = tape.mul(d, m)?;
    let s = tape.sum(d)?;
    tape.mul_scalar(s, T::lit(1.0 / n as f64))
}

/// Mean absolute change of activated scales and opacities from the
/// snapshot: `(scale term, opacity term)`.
pub fn reg_losses<T: Real>(
    tape: &mut Tape<T>,
    vars: &SceneVars,
    snapshot: &SceneSnapshot,
) -> Result<(Var, Var), StyleError> {
    let n = vars.count;
    if snapshot.scales().len() != n {
        return Err(StyleError::SnapshotLength {
            snapshot: snapshot.scales().len(),
            scene: n,
        });
    }
    // Activated from the snapshot's raw values at tape precision, so an
    // unchanged scene gives exactly zero.
    let g0 = &snapshot.scene().gaussians;
    let s0 = Tensor::from_fn([3, n], |k| T::lit(g0[k % n].raw_scale[k / n] as f64).exp());
    let a0 = Tensor::from_fn([1, n], |k| {
        let x = T::lit(g0[k].raw_opacity as f64);
        T::one() / (T::one() + (-x).exp())
    });
    let s0 = tape.constant(s0);
    let a0 = tape.constant(a0);
    let s = tape.exp(vars.raw_scale)?;
    let ds = tape.sub(s, s0)?;
    let ds = tape.abs(ds)?;
    let ls = tape.mean(ds)?;
    let a = tape.sigmoid(vars.raw_opacity)?;
    let da = tape.sub(a, a0)?;
    let da = tape.abs(da)?;
    let la = tape.mean(da)?;
    Ok((ls, la))
}

/// Anisotropic total variation of `[C,H,W]`: mean absolute horizontal
/// difference plus mean absolute vertical difference.
pub fn tv_loss<T: Real>(tape: &mut Tape<T>, img: Var) -> Result<Var, TensorError> {
    let s = tape.shape(img).to_vec();
    if s.len() != 3 {
        return Err(TensorError::Rank {
            op: "tv_loss",
            expected: 3,
            got: s,
        });
    }
    let mut terms = Vec::new();
    for (axis, len) in [(2usize, s[2]), (1, s[1])] {
        if len < 2 {
            continue;
        }
        let a = tape.slice(img, axis, 1, len - 1)?;
        let b = tape.slice(img, axis, 0, len - 1)?;
        let d = tape.sub(a, b)?;
        let d = tape.abs(d)?;
        terms.push(tape.mean(d)?);
    }
    match terms.as_slice() {
        [] => {
            let z = tape.sum(img)?;
            tape.mul_scalar(z, T::zero())
        }
        [t] => Ok(*t),
        [a, b] => tape.add(*a, *b),
        _ => unreachable!(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub style: f64,
    pub content: f64,
    pub depth: f64,
    pub scale: f64,
    pub opacity: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            style: 2.0,
            content: 0.005,
            depth: 0.01,
            scale: 0.05,
            opacity: 0.05,
            tv: 0.02,
        }
    }
}

impl LossWeights {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("style", self.style),
            ("content", self.content),
            ("depth", self.depth),
            ("scale", self.scale),
            ("opacity", self.opacity),
            ("tv", self.tv),
        ]
    }

    pub fn validate(&self) -> Result<(), StyleError> {
        for (name, value) in self.named() {
            if !value.is_finite() || value < 0.0 {
                return Err(StyleError::LossWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Scalar loss terms in [`LossWeights`] order.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub style: Var,
    pub content: Var,
    pub depth: Var,
    pub scale: Var,
    pub opacity: Var,
    pub tv: Var,
}

pub fn total_loss<T: Real>(tape: &mut Tape<T>, terms: &LossTerms, w: &LossWeights) -> Result<Var, TensorError> {
    let pairs = [
        (terms.style, w.style),
        (terms.content, w.content),
        (terms.depth, w.depth),
        (terms.scale, w.scale),
        (terms.opacity, w.opacity),
        (terms.tv, w.tv),
    ];
    let mut acc: Option<Var> = None;
    for (v, lambda) in pairs {
        let t = tape.mul_scalar(v, T::lit(lambda))?;
        acc = Some(match acc {
            None => t,
            Some(a) => tape.add(a, t)?,
        });
    }
    Ok(acc.expect("six terms"))
}

/// Selects the feature cells of an `[h,w]` map whose source pixel, after
/// the feature extractor's center crop, lies inside `mask`.
pub fn feature_mask(mask: &Mask, fh: usize, fw: usize) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let (ch, cw) = (h / SIZE_MULTIPLE * SIZE_MULTIPLE, w / SIZE_MULTIPLE * SIZE_MULTIPLE);
    let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
    let mut out = Vec::with_capacity(fh * fw);
    for i in 0..fh {
        let y = oy + (((i as f64 + 0.5) * ch as f64 / fh as f64) as usize).min(ch - 1);
        for j in 0..fw {
            let x = ox + (((j as f64 + 0.5) * cw as f64 / fw as f64) as usize).min(cw - 1);
            out.push(mask.get(x, y));
        }
    }
    out
}

/// One spatial-control region: its style features and style-side masks
/// per layer.
#[derive(Debug, Clone)]
pub struct RegionTarget {
    pub weight: f64,
    features: Vec<Tensor<f32>>,
    masks: Vec<Vec<bool>>,
}

/// Style features of a fixed style image (or region set) for a list of
/// weighted layers.
#[derive(Debug, Clone)]
pub struct StyleObjective {
    net: ConvNetWeights,
    norm: Normalization,
    layers: Vec<(String, f64)>,
    luminance: bool,
    global: Vec<Tensor<f32>>,
    regions: Vec<RegionTarget>,
}

pub struct StyleEval {
    pub style: Var,
    /// Render features at [`CONTENT_LAYER`] from the RGB render.
    pub content_features: Var,
}

fn style_input<T: Real>(tape: &mut Tape<T>, img: Var, luminance: bool) -> Result<Var, TensorError> {
    if luminance {
        luminance_rgb(tape, img)
    } else {
        Ok(img)
    }
}

impl StyleObjective {
    fn check_layers(layers: &[(String, f64)]) -> Result<(), StyleError> {
        for (layer, weight) in layers {
            if !weight.is_finite() || *weight < 0.0 {
                return Err(StyleError::BadWeight {
                    layer: layer.clone(),
                    weight: *weight,
                });
            }
        }
        if !layers.iter().any(|(_, w)| *w > 0.0) {
            return Err(StyleError::ZeroWeights);
        }
        Ok(())
    }

    fn features_of(
        net: &ConvNetWeights,
        norm: &Normalization,
        layers: &[(String, f64)],
        luminance: bool,
        img: &Tensor<f32>,
    ) -> Result<Vec<Tensor<f32>>, StyleError> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(img.clone());
        let x = style_input(&mut tape, x, luminance)?;
        let names: Vec<&str> = layers.iter().map(|(l, _)| l.as_str()).collect();
        let vars = extract_on_tape(&mut tape, x, net, &names, norm)?;
        Ok(vars.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Whole-image style target.
    pub fn new(
        net: ConvNetWeights,
        norm: Normalization,
        layers: Vec<(String, f64)>,
        luminance: bool,
        style: &Tensor<f32>,
    ) -> Result<Self, StyleError> {
        Self::check_layers(&layers)?;
        let global = Self::features_of(&net, &norm, &layers, luminance, style)?;
        Ok(Self {
            net,
            norm,
            layers,
            luminance,
            global,
            regions: Vec::new(),
        })
    }

    /// Per-region targets from `(style image, style mask, weight)`.
    pub fn with_regions(
        net: ConvNetWeights,
        norm: Normalization,
        layers: Vec<(String, f64)>,
        luminance: bool,
        regions: &[(Tensor<f32>, Mask, f64)],
    ) -> Result<Self, StyleError> {
        Self::check_layers(&layers)?;
        if regions.is_empty() {
            return Err(StyleError::NoRegions);
        }
        let regions = regions
            .iter()
            .map(|(img, mask, weight)| {
                let features = Self::features_of(&net, &norm, &layers, luminance, img)?;
                let masks = features.iter().map(|f| feature_mask(mask, f.shape()[1], f.shape()[2])).collect();
                Ok(RegionTarget {
                    weight: *weight,
                    features,
                    masks,
                })
            })
            .collect::<Result<Vec<_>, StyleError>>()?;
        Ok(Self {
            net,
            norm,
            layers,
            luminance,
            global: Vec::new(),
            regions,
        })
    }

    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    pub fn is_spatial(&self) -> bool {
        !self.regions.is_empty()
    }

    pub fn layers(&self) -> &[(String, f64)] {
        &self.layers
    }

    pub fn net(&self) -> &ConvNetWeights {
        &self.net
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    /// Content-layer features of an image, used as the content target.
    pub fn content_features(&self, img: &Tensor<f32>) -> Result<Tensor<f32>, StyleError> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(img.clone());
        let v = extract_on_tape(&mut tape, x, &self.net, &[CONTENT_LAYER], &self.norm)?;
        Ok(tape.value(v[0]).clone())
    }

    /// Records the style term for `render` and the content-layer features.
    /// Spatial objectives need one render-side mask per region.
    pub fn evaluate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        render: Var,
        render_masks: Option<&[Mask]>,
    ) -> Result<StyleEval, StyleError> {
        let mut names: Vec<&str> = self.layers.iter().map(|(l, _)| l.as_str()).collect();
        let nl = names.len();
        let (feats, content_features) = if self.luminance {
            let y = style_input(tape, render, true)?;
            let f = extract_on_tape(tape, y, &self.net, &names, &self.norm)?;
            let c = extract_on_tape(tape, render, &self.net, &[CONTENT_LAYER], &self.norm)?;
            (f, c[0])
        } else {
            names.push(CONTENT_LAYER);
            let mut f = extract_on_tape(tape, render, &self.net, &names, &self.norm)?;
            let c = f.pop().expect("content layer");
            (f, c)
        };
        debug_assert_eq!(feats.len(), nl);

        let mut acc: Option<Var> = None;
        let mut push = |tape: &mut Tape<T>, v: Var, w: f64| -> Result<(), TensorError> {
            let t = tape.mul_scalar(v, T::lit(w))?;
            acc = Some(match acc {
                None => t,
                Some(a) => tape.add(a, t)?,
            });
            Ok(())
        };
        if self.regions.is_empty() {
            for ((f, (_, w)), target) in feats.iter().zip(&self.layers).zip(&self.global) {
                if *w == 0.0 {
                    continue;
                }
                let s = tape.constant(target.cast());
                let l = nnfm_loss(tape, *f, s)?;
                push(tape, l, *w)?;
            }
        } else {
            let masks = render_masks.ok_or(StyleError::RegionMasks {
                expected: self.regions.len(),
                got: 0,
            })?;
            if masks.len() != self.regions.len() {
                return Err(StyleError::RegionMasks {
                    expected: self.regions.len(),
                    got: masks.len(),
                });
            }
            for (r, (region, mask)) in self.regions.iter().zip(masks).enumerate() {
                for (li, (f, (layer, w))) in feats.iter().zip(&self.layers).enumerate() {
                    if *w == 0.0 || region.weight == 0.0 {
                        continue;
                    }
                    let shape = tape.shape(*f).to_vec();
                    let rm = feature_mask(mask, shape[1], shape[2]);
                    let sm = &region.masks[li];
                    if !rm.iter().any(|&b| b) || !sm.iter().any(|&b| b) {
                        warn!("region {r} is empty at {layer}; skipped");
                        continue;
                    }
                    let s = tape.constant(region.features[li].cast());
                    let l = nnfm_loss_masked(tape, *f, s, Some(&rm), Some(sm))?;
                    push(tape, l, w * region.weight)?;
                }
            }
        }
        let style = match acc {
            Some(v) => v,
            None => {
                let z = tape.sum(content_features)?;
                tape.mul_scalar(z, T::zero())?
            }
        };
        Ok(StyleEval { style, content_features })
    }
}
