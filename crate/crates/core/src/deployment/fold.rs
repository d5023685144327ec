//! BN elimination into per-channel offsets and clip levels of the next
//! quantized activation, and the integer-domain forward pass.
//!
//! A folded conv layer maps integer input indices `n` to integer output
//! indices `ñ ∈ [0, ã]`:
//!
//! ```text
//! acc_i = Σ M·n                              (integer accumulate)
//! ñ_i   = round(requant_i · clip(s_w·acc_i + offset_i, 0, clip_i))
//! ```
//!
//! with `Q = s_w·M` the effective weight, `offset_i = (β_i/γ_i)(a/α)`,
//! `clip_i = (α̃/γ_i)(a/α)` and `requant_i = (ã/α̃)(α/a)γ_i`, where the
//! running statistics are absorbed into `γ, β` first. `α/a` is the real
//! value of one input index (divided by the window area after an average
//! pool, whose sum stays integer).

use super::container::Container;
use crate::network::{Activation, LinearKind, Model, Pool, Preset, Stage, BN_EPS};
use crate::quant::{effective_weight_values, WeightFormat};
use crate::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FoldedConv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Grid indices `M` in `[−a_w, a_w]`, laid out `[out, in, k, k]`.
    pub weight: Vec<i64>,
    /// `Q = weight_scale · M`.
    pub weight_scale: f64,
    /// Real value of one input index.
    pub input_scale: f64,
    pub offset: Vec<f64>,
    pub clip: Vec<f64>,
    pub requant: Vec<f64>,
    /// Output levels `ã` and clip level `α̃` of the activation.
    pub out_levels: u32,
    pub out_alpha: f64,
    pub pool: Pool,
}

/// Last layer, kept in float on integer inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedHead {
    pub name: String,
    pub in_features: usize,
    pub classes: usize,
    /// Grid indices, laid out `[in, out]`.
    pub weight: Vec<i64>,
    pub weight_scale: f64,
    /// Real value of one index of the summed (un-normalized) global pool.
    pub input_scale: f64,
    /// Positive rescale factor discarded from the logits.
    pub dropped_rescale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldedModel {
    pub preset: Preset,
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<FoldedConv>,
    pub head: FoldedHead,
}

fn not_foldable(msg: impl Into<String>) -> Error {
    Error::NotFoldable(msg.into())
}

fn grid_weights(
    name: &str,
    w: &Tensor,
    scheme: &crate::quant::QuantScheme,
) -> Result<(Vec<i64>, f64, f64)> {
    let WeightFormat::Quantized(bits) = scheme.format else {
        return Err(not_foldable(format!(
            "{name}: weights are not quantized ({})",
            scheme.tag()
        )));
    };
    let a = crate::quant::levels(bits)?;
    let (xi, factor) = effective_weight_values(w, scheme)?;
    let m = xi
        .data()
        .iter()
        .map(|&v| (v * a / factor).round() as i64)
        .collect();
    Ok((m, factor / a, factor))
}

/// Absorbs BN into the following quantized activation of every block.
/// Models with residual connections or unquantized layers are rejected.
pub fn fold_bn(model: &Model) -> Result<FoldedModel> {
    let mut layers = Vec::new();
    let mut input_scale = 1.0;
    let [_, mut h, mut w] = model.input;
    for stage in &model.stages {
        let b = match stage {
            Stage::Block(b) => b,
            Stage::Residual(r) => {
                return Err(not_foldable(format!(
                    "{}: skip connection around {} and {}",
                    r.name, r.conv1.name, r.conv2.name
                )))
            }
            Stage::Norm { name, .. } => {
                return Err(not_foldable(format!(
                    "{name}: normalization without a preceding linear layer"
                )))
            }
        };
        let LinearKind::Conv { k, stride, pad } = b.linear.kind else {
            return Err(not_foldable(format!(
                "{}: only convolutions can precede the head",
                b.linear.name
            )));
        };
        let Activation::Pact(p) = &b.act else {
            return Err(not_foldable(format!(
                "{}.act: activation is not quantized",
                b.name
            )));
        };
        let Some(out_bits) = p.bits else {
            return Err(not_foldable(format!(
                "{}.act: activation is not quantized",
                b.name
            )));
        };
        let out_levels = crate::quant::levels(out_bits)?;
        let (mut m, weight_scale, _) =
            grid_weights(&b.linear.name, &b.linear.weight, &b.linear.scheme)?;
        let (out_ch, in_ch) = (b.linear.out_channels(), b.linear.in_channels());
        let (gamma, beta) = match &b.bn {
            Some(bn) => {
                let mut g = Vec::with_capacity(out_ch);
                let mut be = Vec::with_capacity(out_ch);
                for i in 0..out_ch {
                    let inv = 1.0 / (bn.running_var.data()[i] + BN_EPS).sqrt();
                    let gi = bn.gamma.data()[i] * inv;
                    g.push(gi);
                    be.push(bn.beta.data()[i] - gi * bn.running_mean.data()[i]);
                }
                (g, be)
            }
            None => (vec![1.0; out_ch], vec![0.0; out_ch]),
        };
        let per = in_ch * k * k;
        let (mut offset, mut clip, mut requant) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..out_ch {
            let mut g = gamma[i];
            if g == 0.0 {
                return Err(Error::DegenerateChannel(format!(
                    "{} channel {i}: γ = 0",
                    b.name
                )));
            }
            if g < 0.0 {
                m[i * per..(i + 1) * per].iter_mut().for_each(|v| *v = -*v);
                g = -g;
            }
            offset.push(beta[i] / g / input_scale);
            clip.push(p.alpha / g / input_scale);
            requant.push(out_levels / p.alpha * input_scale * g);
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let (mut next_scale, mut hn, mut wn) = (p.alpha / out_levels, ho, wo);
        match b.pool {
            Pool::None => {}
            Pool::Avg(pk) => {
                next_scale /= (pk * pk) as f64;
                hn /= pk;
                wn /= pk;
            }
            Pool::Max(pk) => {
                hn /= pk;
                wn /= pk;
            }
        }
        layers.push(FoldedConv {
            name: b.linear.name.clone(),
            in_ch,
            out_ch,
            kernel: k,
            stride,
            pad,
            weight: m,
            weight_scale,
            input_scale,
            offset,
            clip,
            requant,
            out_levels: out_levels as u32,
            out_alpha: p.alpha,
            pool: b.pool,
        });
        input_scale = next_scale;
        h = hn;
        w = wn;
    }
    if layers.is_empty() {
        return Err(not_foldable("no quantized conv layers to fold"));
    }
    let head = &model.head;
    let (m, weight_scale, factor) = grid_weights(&head.name, &head.weight, &head.scheme)?;
    Ok(FoldedModel {
        preset: model.preset,
        input: model.input,
        classes: model.classes,
        layers,
        head: FoldedHead {
            name: head.name.clone(),
            in_features: head.fan_in(),
            classes: model.classes,
            weight: m,
            weight_scale: weight_scale / factor,
            input_scale: input_scale / (h * w) as f64,
            dropped_rescale: factor,
        },
    })
}

/// Integer activation map of one sample, `C×H×W`.
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<i64>,
}

fn overflow(layer: &str) -> Error {
    Error::Overflow(format!("{layer}: 64-bit accumulator overflow"))
}

fn conv_acc(l: &FoldedConv, x: &Map) -> Result<Map> {
    let (k, s, p) = (l.kernel, l.stride, l.pad);
    let ho = (x.h + 2 * p - k) / s + 1;
    let wo = (x.w + 2 * p - k) / s + 1;
    let mut out = vec![0i64; l.out_ch * ho * wo];
    for o in 0..l.out_ch {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc: i64 = 0;
                for c in 0..l.in_ch {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let wv = l.weight[((o * l.in_ch + c) * k + ky) * k + kx];
                            let xv = x.v[(c * x.h + iy as usize) * x.w + ix as usize];
                            acc = wv
                                .checked_mul(xv)
                                .and_then(|t| acc.checked_add(t))
                                .ok_or_else(|| overflow(&l.name))?;
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Ok(Map {
        c: l.out_ch,
        h: ho,
        w: wo,
        v: out,
    })
}

fn pool(p: Pool, x: Map, layer: &str) -> Result<Map> {
    let k = match p {
        Pool::None => return Ok(x),
        Pool::Avg(k) | Pool::Max(k) => k,
    };
    let (ho, wo) = (x.h / k, x.w / k);
    let mut out = Vec::with_capacity(x.c * ho * wo);
    for c in 0..x.c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut sum: i64 = 0;
                let mut max = i64::MIN;
                for dy in 0..k {
                    for dx in 0..k {
                        let v = x.v[(c * x.h + oy * k + dy) * x.w + ox * k + dx];
                        sum = sum.checked_add(v).ok_or_else(|| overflow(layer))?;
                        max = max.max(v);
                    }
                }
                out.push(if matches!(p, Pool::Max(_)) { max } else { sum });
            }
        }
    }
    Ok(Map {
        c: x.c,
        h: ho,
        w: wo,
        v: out,
    })
}

/// Fixed-point denominator for offsets and clips in the integer path, in
/// fractions of one accumulator unit.
const FRACTION_BITS: u32 = 20;
const ONE: i64 = 1 << FRACTION_BITS;

/// Distance of `v` from the nearest rounding tie.
fn tie_distance(v: f64) -> f64 {
    ((v - v.floor()) - 0.5).abs()
}

impl FoldedModel {
    /// Logits of one sample of integer pixels, plus the smallest distance of
    /// any requantization argument from a rounding tie. `integer` selects
    /// the pure-integer path (offsets and clips in fixed point with
    /// `FRACTION_BITS` below one accumulator unit) over the float-reference path.
    fn run(&self, pixels: &[i64], integer: bool) -> Result<(Vec<f64>, f64)> {
        let [c, h, w] = self.input;
        let mut x = Map {
            c,
            h,
            w,
            v: pixels.to_vec(),
        };
        let mut margin = f64::INFINITY;
        for l in &self.layers {
            let mut acc = conv_acc(l, &x)?;
            let hw = acc.h * acc.w;
            let top = l.out_levels as f64;
            for (o, chunk) in acc.v.chunks_mut(hw).enumerate() {
                let fixed = l.weight_scale / ONE as f64;
                let (off_i, clip_i) = (
                    (l.offset[o] / fixed).round() as i64,
                    (l.clip[o] / fixed).round() as i64,
                );
                let unit = l.requant[o] * fixed;
                for v in chunk.iter_mut() {
                    let arg = if integer {
                        let t = v
                            .checked_mul(ONE)
                            .and_then(|t| t.checked_add(off_i))
                            .ok_or_else(|| overflow(&l.name))?
                            .clamp(0, clip_i.max(0));
                        unit * t as f64
                    } else {
                        let y = (l.weight_scale * *v as f64 + l.offset[o]).clamp(0.0, l.clip[o]);
                        l.requant[o] * y
                    };
                    margin = margin.min(tie_distance(arg));
                    *v = arg.round().clamp(0.0, top) as i64;
                }
            }
            x = pool(l.pool, acc, &l.name)?;
        }
        let hd = &self.head;
        let mut pooled = vec![0i64; x.c];
        for (ci, chunk) in x.v.chunks(x.h * x.w).enumerate() {
            pooled[ci] = chunk
                .iter()
                .try_fold(0i64, |s, &v| s.checked_add(v))
                .ok_or_else(|| overflow(&hd.name))?;
        }
        let mut logits = vec![0.0; hd.classes];
        for (j, z) in logits.iter_mut().enumerate() {
            let mut acc: i64 = 0;
            for (i, &n) in pooled.iter().enumerate() {
                acc = hd.weight[i * hd.classes + j]
                    .checked_mul(n)
                    .and_then(|t| acc.checked_add(t))
                    .ok_or_else(|| overflow(&hd.name))?;
            }
            *z = hd.weight_scale * hd.input_scale * acc as f64;
        }
        Ok((logits, margin))
    }

    fn pixels(&self, images: &Tensor) -> Result<Vec<Vec<i64>>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != self.input[..] {
            return Err(Error::DimensionMismatch {
                op: "folded input",
                lhs: self.input.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        if let Some(&bad) = images
            .data()
            .iter()
            .find(|&&v| !(0.0..=255.0).contains(&v) || v.fract() != 0.0)
        {
            return Err(Error::domain(
                "folded input",
                format!("pixel {bad} is not a uint8 value"),
            ));
        }
        let per: usize = self.input.iter().product();
        Ok(images
            .data()
            .chunks(per)
            .map(|s| s.iter().map(|&v| v as i64).collect())
            .collect())
    }

    fn batch(&self, images: &Tensor, integer: bool) -> Result<(Tensor, Vec<f64>)> {
        let samples = self.pixels(images)?;
        let mut logits = Vec::with_capacity(samples.len() * self.classes);
        let mut margins = Vec::with_capacity(samples.len());
        for s in &samples {
            let (z, m) = self.run(s, integer)?;
            logits.extend(z);
            margins.push(m);
        }
        Ok((
            Tensor::new(vec![samples.len(), self.classes], logits)?,
            margins,
        ))
    }

    /// Float-reference folded forward on `uint8` images. Logits omit the
    /// head's rescale factor; the second value holds each sample's
    /// distance from the nearest rounding tie.
    pub fn forward_float(&self, images: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.batch(images, false)
    }

    /// Pure-integer forward: integer accumulation, fixed-point offsets and
    /// clips, and one real requantization per channel.
    pub fn integer_forward(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.batch(images, true)?.0)
    }
}

pub const FOLDED_KIND: &str = "folded";

fn pool_tag(p: Pool) -> String {
    match p {
        Pool::None => "none".into(),
        Pool::Avg(k) => format!("avg{k}"),
        Pool::Max(k) => format!("max{k}"),
    }
}

fn parse_pool(s: &str) -> Option<Pool> {
    if s == "none" {
        return Some(Pool::None);
    }
    let k = |p: &str| {
        s.strip_prefix(p)
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&k| k > 0)
    };
    k("avg").map(Pool::Avg).or_else(|| k("max").map(Pool::Max))
}

fn f32s(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl FoldedModel {
    /// Folded-model file: same container as checkpoints, with roles
    /// `int_weight`, `offset`, `clip` and `scale`. Reals are stored at f32
    /// precision; layer geometry and clip levels live in the header.
    pub fn to_container(&self, config_hash: u64) -> Container {
        let mut c = Container::new(FOLDED_KIND, config_hash);
        c.push_header(&["preset", self.preset.as_str()]);
        let [ch, h, w] = self.input;
        c.push_header(&["input", &ch.to_string(), &h.to_string(), &w.to_string()]);
        c.push_header(&["classes", &self.classes.to_string()]);
        for l in &self.layers {
            c.push_header(&[
                "layer",
                &l.name,
                &l.in_ch.to_string(),
                &l.out_ch.to_string(),
                &l.kernel.to_string(),
                &l.stride.to_string(),
                &l.pad.to_string(),
                &pool_tag(l.pool),
                &l.out_levels.to_string(),
                &l.out_alpha.to_string(),
            ]);
        }
        let hd = &self.head;
        c.push_header(&[
            "head",
            &hd.name,
            &hd.in_features.to_string(),
            &hd.classes.to_string(),
        ]);
        for l in &self.layers {
            let n = &l.name;
            let k = l.kernel;
            let ints = l.weight.iter().map(|&v| v as f32).collect();
            c.push(
                &format!("{n}.int_weight"),
                "int_weight",
                &[l.out_ch, l.in_ch, k, k],
                "-",
                ints,
            );
            c.push(
                &format!("{n}.offset"),
                "offset",
                &[l.out_ch],
                "-",
                f32s(&l.offset),
            );
            c.push(
                &format!("{n}.clip"),
                "clip",
                &[l.out_ch],
                "-",
                f32s(&l.clip),
            );
            c.push(
                &format!("{n}.requant"),
                "scale",
                &[l.out_ch],
                "-",
                f32s(&l.requant),
            );
            c.push(
                &format!("{n}.weight_scale"),
                "scale",
                &[1],
                "-",
                f32s(&[l.weight_scale]),
            );
            c.push(
                &format!("{n}.input_scale"),
                "scale",
                &[1],
                "-",
                f32s(&[l.input_scale]),
            );
        }
        let n = &hd.name;
        let ints = hd.weight.iter().map(|&v| v as f32).collect();
        c.push(
            &format!("{n}.int_weight"),
            "int_weight",
            &[hd.in_features, hd.classes],
            "-",
            ints,
        );
        c.push(
            &format!("{n}.weight_scale"),
            "scale",
            &[1],
            "-",
            f32s(&[hd.weight_scale]),
        );
        c.push(
            &format!("{n}.input_scale"),
            "scale",
            &[1],
            "-",
            f32s(&[hd.input_scale]),
        );
        c.push(
            &format!("{n}.dropped_rescale"),
            "scale",
            &[1],
            "-",
            f32s(&[hd.dropped_rescale]),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if c.kind != FOLDED_KIND {
            return Err(bad(format!(
                "file holds a `{}`, not a folded model",
                c.kind
            )));
        }
        let count = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(format!("bad count `{s}`")))
        };
        let real =
            |e: &super::container::Entry| e.data.iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let ints =
            |e: &super::container::Entry| e.data.iter().map(|&v| v as i64).collect::<Vec<i64>>();
        let scalar = |name: String| -> Result<f64> {
            let e = c.get(&name)?;
            Ok(e.data[0] as f64)
        };
        let preset: Preset = c.header_value("preset")?[0].parse()?;
        let input = c.header_value("input")?;
        if input.len() != 3 {
            return Err(bad("input needs 3 extents".into()));
        }
        let input = [count(&input[0])?, count(&input[1])?, count(&input[2])?];
        let classes = count(&c.header_value("classes")?[0])?;
        let mut layers = Vec::new();
        for h in c.header.iter().filter(|h| h[0] == "layer") {
            if h.len() != 10 {
                return Err(bad(format!("malformed layer line {h:?}")));
            }
            let name = h[1].clone();
            let pool = parse_pool(&h[7]).ok_or_else(|| bad(format!("bad pool `{}`", h[7])))?;
            let out_alpha: f64 = h[9]
                .parse()
                .map_err(|_| bad(format!("bad clip level `{}`", h[9])))?;
            let out_levels: u32 = h[8]
                .parse()
                .map_err(|_| bad(format!("bad level count `{}`", h[8])))?;
            layers.push(FoldedConv {
                in_ch: count(&h[2])?,
                out_ch: count(&h[3])?,
                kernel: count(&h[4])?,
                stride: count(&h[5])?,
                pad: count(&h[6])?,
                weight: ints(c.get(&format!("{name}.int_weight"))?),
                weight_scale: scalar(format!("{name}.weight_scale"))?,
                input_scale: scalar(format!("{name}.input_scale"))?,
                offset: real(c.get(&format!("{name}.offset"))?),
                clip: real(c.get(&format!("{name}.clip"))?),
                requant: real(c.get(&format!("{name}.requant"))?),
                out_levels,
                out_alpha,
                pool,
                name,
            });
        }
        let hh = c.header_value("head")?;
        if hh.len() != 3 {
            return Err(bad("malformed head line".into()));
        }
        let name = hh[0].clone();
        let head = FoldedHead {
            in_features: count(&hh[1])?,
            classes: count(&hh[2])?,
            weight: ints(c.get(&format!("{name}.int_weight"))?),
            weight_scale: scalar(format!("{name}.weight_scale"))?,
            input_scale: scalar(format!("{name}.input_scale"))?,
            dropped_rescale: scalar(format!("{name}.dropped_rescale"))?,
            name,
        };
        Ok(FoldedModel {
            preset,
            input,
            classes,
            layers,
            head,
        })
    }
}
