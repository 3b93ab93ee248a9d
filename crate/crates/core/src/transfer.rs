//! Initialization from a pretrained image ViT and cross-modal conversion of
//! patch and positional embeddings.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoder::{adaptor_prefix, shared_prefix, EncoderLayer, EncoderStack, LayerNormParams, FINAL_LN_PREFIX};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{ModelConfig, PolyViT, TaskSpec};
use crate::tensor::{Element, Tensor};
use crate::tokenizer::{Geometry, Modality, Tokenizer};

/// How a 2D patch embedding becomes a tubelet embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InflateStrategy {
    /// Kernel at frame `⌊f/2⌋`, zeros elsewhere.
    CentralFrame,
    /// Kernel copied to every frame.
    Replicate,
    /// Kernel divided by `f` and copied to every frame.
    ReplicateScaled,
}

impl InflateStrategy {
    pub fn name(self) -> &'static str {
        match self {
            InflateStrategy::CentralFrame => "central_frame",
            InflateStrategy::Replicate => "replicate",
            InflateStrategy::ReplicateScaled => "replicate_scaled",
        }
    }
}

impl fmt::Display for InflateStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InflateStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "central_frame" => Ok(InflateStrategy::CentralFrame),
            "replicate" => Ok(InflateStrategy::Replicate),
            "replicate_scaled" => Ok(InflateStrategy::ReplicateScaled),
            _ => Err(Error::Model(format!("unknown inflation strategy `{s}`"))),
        }
    }
}

fn check_table<T: Element>(p: &Tensor<T>, cells: usize, what: &str) -> Result<usize> {
    match p.shape() {
        [n, d] if *n == cells + 1 => Ok(*d),
        s => Err(Error::Geometry(format!(
            "{what}: positional table {s:?} does not hold 1 + {cells} rows"
        ))),
    }
}

/// Source coordinate of destination index `i` under align-corners sampling.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Bilinearly resamples the grid part of a positional table from `src` to
/// `dst` cells (align-corners); the class slot is copied.
pub fn interp_pos<T: Element>(p: &Tensor<T>, src: (usize, usize), dst: (usize, usize)) -> Result<Tensor<T>> {
    let d = check_table(p, src.0 * src.1, "interp_pos")?;
    if dst.0 == 0 || dst.1 == 0 {
        return Err(Error::Geometry("interp_pos: empty destination grid".into()));
    }
    if src == dst {
        return Ok(p.clone());
    }
    let data = p.data();
    let at = |i: usize, j: usize, c: usize| data[(1 + i * src.1 + j) * d + c].to_f64_lossy();
    let mut out = Vec::with_capacity((1 + dst.0 * dst.1) * d);
    out.extend_from_slice(&data[..d]);
    for i in 0..dst.0 {
        let y = source_coord(i, src.0, dst.0);
        let (y0, y1) = (y.floor() as usize, (y.ceil() as usize).min(src.0 - 1));
        let ty = y - y0 as f64;
        for j in 0..dst.1 {
            let x = source_coord(j, src.1, dst.1);
            let (x0, x1) = (x.floor() as usize, (x.ceil() as usize).min(src.1 - 1));
            let tx = x - x0 as f64;
            for c in 0..d {
                let top = at(y0, x0, c) * (1.0 - tx) + at(y0, x1, c) * tx;
                let bottom = at(y1, x0, c) * (1.0 - tx) + at(y1, x1, c) * tx;
                out.push(T::from_f64_lossy(top * (1.0 - ty) + bottom * ty));
            }
        }
    }
    Ok(Tensor::new([1 + dst.0 * dst.1, d], out)?)
}

/// Turns a `[h·w·c, d]` patch kernel into a `[f·h·w·c, d]` tubelet kernel.
pub fn inflate_2d_to_3d<T: Element>(e_img: &Tensor<T>, frames: usize, strategy: InflateStrategy) -> Result<Tensor<T>> {
    let (rows, d) = match e_img.shape() {
        [r, d] => (*r, *d),
        s => return Err(Error::Geometry(format!("patch kernel must be 2-D, got {s:?}"))),
    };
    if frames == 0 {
        return Err(Error::Geometry("cannot inflate to zero frames".into()));
    }
    let block = rows * d;
    let mut out = vec![T::zero(); frames * block];
    let scale = T::from_f64_lossy(1.0 / frames as f64);
    for t in 0..frames {
        let dst = &mut out[t * block..(t + 1) * block];
        match strategy {
            InflateStrategy::CentralFrame if t == frames / 2 => dst.copy_from_slice(e_img.data()),
            InflateStrategy::CentralFrame => {}
            InflateStrategy::Replicate => dst.copy_from_slice(e_img.data()),
            InflateStrategy::ReplicateScaled if frames == 1 => dst.copy_from_slice(e_img.data()),
            InflateStrategy::ReplicateScaled => {
                for (o, &v) in dst.iter_mut().zip(e_img.data()) {
                    *o = v * scale;
                }
            }
        }
    }
    Ok(Tensor::new([frames * rows, d], out)?)
}

/// Sums a `[f·h·w·c, d]` tubelet kernel over its frame axis.
pub fn collapse_3d_to_2d<T: Element>(e_vid: &Tensor<T>, frames: usize) -> Result<Tensor<T>> {
    let (rows, d) = match e_vid.shape() {
        [r, d] => (*r, *d),
        s => return Err(Error::Geometry(format!("tubelet kernel must be 2-D, got {s:?}"))),
    };
    if frames == 0 || rows % frames != 0 {
        return Err(Error::Geometry(format!("{rows} kernel rows do not split into {frames} frames")));
    }
    let block = rows / frames * d;
    let mut out = e_vid.data()[..block].to_vec();
    for t in 1..frames {
        for (o, &v) in out.iter_mut().zip(&e_vid.data()[t * block..(t + 1) * block]) {
            *o = *o + v;
        }
    }
    Ok(Tensor::new([rows / frames, d], out)?)
}

/// Averages a video positional table over frames, then resamples to `dst`.
pub fn pos_video_to_2d<T: Element>(
    p_vid: &Tensor<T>,
    grid: (usize, usize, usize),
    dst: (usize, usize),
) -> Result<Tensor<T>> {
    let (gf, gh, gw) = grid;
    let d = check_table(p_vid, gf * gh * gw, "pos_video_to_2d")?;
    let cells = gh * gw;
    let data = p_vid.data();
    let mut out = Vec::with_capacity((1 + cells) * d);
    out.extend_from_slice(&data[..d]);
    for cell in 0..cells {
        for c in 0..d {
            let first = data[(1 + cell) * d + c].to_f64_lossy();
            let shift: f64 = (1..gf)
                .map(|t| data[(1 + t * cells + cell) * d + c].to_f64_lossy() - first)
                .sum();
            out.push(T::from_f64_lossy(first + shift / gf as f64));
        }
    }
    let mean = Tensor::new([1 + cells, d], out)?;
    interp_pos(&mean, (gh, gw), dst)
}

/// Resamples a 2D positional table to the video's spatial grid and repeats it
/// for every frame.
pub fn pos_2d_to_video<T: Element>(
    p_img: &Tensor<T>,
    src: (usize, usize),
    grid: (usize, usize, usize),
) -> Result<Tensor<T>> {
    let (gf, gh, gw) = grid;
    if gf == 0 {
        return Err(Error::Geometry("video grid has no frames".into()));
    }
    let spatial = interp_pos(p_img, src, (gh, gw))?;
    let d = spatial.shape()[1];
    let data = spatial.data();
    let mut out = Vec::with_capacity((1 + gf * gh * gw) * d);
    out.extend_from_slice(&data[..d]);
    for _ in 0..gf {
        out.extend_from_slice(&data[d..]);
    }
    Ok(Tensor::new([1 + gf * gh * gw, d], out)?)
}

/// Resamples every frame of a video positional table spatially.
fn interp_frames<T: Element>(
    p: &Tensor<T>,
    grid: (usize, usize, usize),
    dst: (usize, usize),
) -> Result<Tensor<T>> {
    let (gf, gh, gw) = grid;
    let d = check_table(p, gf * gh * gw, "interp_frames")?;
    let data = p.data();
    let cells = gh * gw;
    let mut out = data[..d].to_vec();
    for t in 0..gf {
        let mut frame = data[..d].to_vec();
        frame.extend_from_slice(&data[(1 + t * cells) * d..(1 + (t + 1) * cells) * d]);
        let resized = interp_pos(&Tensor::new([1 + cells, d], frame)?, (gh, gw), dst)?;
        out.extend_from_slice(&resized.data()[d..]);
    }
    Ok(Tensor::new([1 + gf * dst.0 * dst.1, d], out)?)
}

/// Adapts a `[h·w·c_src, d]` kernel to `c_dst` channels: summing channels
/// when reducing to one, replicating scaled by `1/c_dst` when expanding from
/// one.
pub fn convert_channels<T: Element>(e: &Tensor<T>, c_src: usize, c_dst: usize) -> Result<Tensor<T>> {
    let (rows, d) = match e.shape() {
        [r, d] => (*r, *d),
        s => return Err(Error::Geometry(format!("patch kernel must be 2-D, got {s:?}"))),
    };
    if c_src == c_dst {
        return Ok(e.clone());
    }
    if c_src == 0 || rows % c_src != 0 {
        return Err(Error::Geometry(format!("{rows} kernel rows do not split into {c_src} channels")));
    }
    let pixels = rows / c_src;
    let data = e.data();
    if c_dst == 1 {
        let mut out = vec![T::zero(); pixels * d];
        for px in 0..pixels {
            for ch in 0..c_src {
                let src = &data[(px * c_src + ch) * d..(px * c_src + ch + 1) * d];
                for (o, &v) in out[px * d..(px + 1) * d].iter_mut().zip(src) {
                    *o = *o + v;
                }
            }
        }
        Ok(Tensor::new([pixels, d], out)?)
    } else if c_src == 1 {
        let scale = T::from_f64_lossy(1.0 / c_dst as f64);
        let mut out = Vec::with_capacity(pixels * c_dst * d);
        for px in 0..pixels {
            for _ in 0..c_dst {
                out.extend(data[px * d..(px + 1) * d].iter().map(|&v| v * scale));
            }
        }
        Ok(Tensor::new([pixels * c_dst, d], out)?)
    } else {
        Err(Error::Geometry(format!(
            "no channel conversion from {c_src} to {c_dst} channels"
        )))
    }
}

/// Frames-per-tubelet (1 for 2D modalities) and spatial patch extents.
fn patch_parts(g: &Geometry) -> (usize, (usize, usize)) {
    match g.patch.as_slice() {
        [f, h, w] => (*f, (*h, *w)),
        [h, w] => (1, (*h, *w)),
        _ => (1, (0, 0)),
    }
}

/// Token grid as `(frames, rows, cols)`.
fn token_grid(g: &Geometry) -> Result<(usize, usize, usize)> {
    Ok(match g.grid()?.as_slice() {
        [f, h, w] => (*f, *h, *w),
        [h, w] => (1, *h, *w),
        other => return Err(Error::Geometry(format!("unexpected token grid {other:?}"))),
    })
}

/// Converts a tokenizer to another geometry (possibly another modality):
/// kernels are collapsed or inflated along the frame axis and adapted in
/// channels, positional tables are frame-averaged or repeated and resampled
/// bilinearly. Spatial patch extents must agree.
pub fn convert_tokenizer<T: Element>(
    src: &Tokenizer<T>,
    dst: &Geometry,
    strategy: InflateStrategy,
) -> Result<Tokenizer<T>> {
    dst.validate()?;
    let (sf, s_patch) = patch_parts(&src.geometry);
    let (df, d_patch) = patch_parts(dst);
    if s_patch != d_patch {
        return Err(Error::Geometry(format!(
            "cannot convert {}x{} patches to {}x{}",
            s_patch.0, s_patch.1, d_patch.0, d_patch.1
        )));
    }
    let (sgf, sgh, sgw) = token_grid(&src.geometry)?;
    let (dgf, dgh, dgw) = token_grid(dst)?;

    let (cs, cd) = (src.geometry.channels(), dst.channels());
    let (s_video, d_video) = (src.geometry.modality.is_temporal(), dst.modality.is_temporal());

    let kernel = if s_video && d_video && sf == df && cs == cd {
        src.embed.value.clone()
    } else {
        let flat = convert_channels(&collapse_3d_to_2d(&src.embed.value, sf)?, cs, cd)?;
        if d_video {
            inflate_2d_to_3d(&flat, df, strategy)?
        } else {
            flat
        }
    };

    let pos = match (s_video, d_video) {
        (false, false) => interp_pos(&src.pos.value, (sgh, sgw), (dgh, dgw))?,
        (true, false) => pos_video_to_2d(&src.pos.value, (sgf, sgh, sgw), (dgh, dgw))?,
        (false, true) => pos_2d_to_video(&src.pos.value, (sgh, sgw), (dgf, dgh, dgw))?,
        (true, true) if sgf == dgf => interp_frames(&src.pos.value, (sgf, sgh, sgw), (dgh, dgw))?,
        (true, true) => {
            let flat = pos_video_to_2d(&src.pos.value, (sgf, sgh, sgw), (sgh, sgw))?;
            pos_2d_to_video(&flat, (sgh, sgw), (dgf, dgh, dgw))?
        }
    };

    let mut out = Tokenizer::zeros(dst.clone(), src.width())?;
    out.embed.value = kernel;
    out.embed_bias.value = src.embed_bias.value.clone();
    out.cls.value = src.cls.value.clone();
    out.pos.value = pos;
    out.check()?;
    Ok(out)
}

/// A single-modality image ViT standing in for a large-scale pretrained
/// checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedViT<T> {
    pub tokenizer: Tokenizer<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub final_ln: LayerNormParams<T>,
}

impl<T: Element> PretrainedViT<T> {
    pub fn random(config: &ModelConfig, geometry: Geometry, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if geometry.modality != Modality::Image {
            return Err(Error::Geometry("pretrained ViT must be an image model".into()));
        }
        let mut tokenizer = Tokenizer::random(geometry, config.width, rng)?;
        tokenizer.cls.value = crate::tokenizer::normal_tensor([config.width], 0.02, rng);
        let layers = (0..config.layers)
            .map(|k| EncoderLayer::random(&format!("pretrained.layer{k}"), config.width, config.heads, config.mlp_dim, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut final_ln = LayerNormParams::new(FINAL_LN_PREFIX, config.width);
        final_ln.beta.value = crate::tokenizer::normal_tensor([config.width], 0.02, rng);
        Ok(Self {
            tokenizer,
            layers,
            final_ln,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.tokenizer.geometry.spatial_grid()
    }

    /// Eval-mode class-token encodings `[B, d]`.
    pub fn features(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::eval().frozen();
        let seq = self.tokenizer.geometry.seq_len();
        let mut z = self.tokenizer.tokenize_batch(&mut g, inputs)?;
        for layer in &self.layers {
            z = layer.forward(&mut g, z, seq, 1.0)?;
        }
        let z = self.final_ln.apply(&mut g, z)?;
        let rows = (0..inputs.len()).map(|b| b * seq).collect();
        let cls = g.tape.select_rows(z, rows)?;
        Ok(g.value(cls).clone())
    }
}

fn renamed_copy<T: Element>(layer: &EncoderLayer<T>, from: &str, to: &str) -> EncoderLayer<T> {
    let mut l = layer.clone();
    l.rename(from, to);
    l
}

/// Deep-copies pretrained layers `0..adapt_layers` into every modality's
/// adaptor stack and the remaining layers into the shared stack.
pub fn assign_layers<T: Element>(
    pretrained: &PretrainedViT<T>,
    adapt_layers: usize,
    modalities: &[Modality],
) -> Result<EncoderStack<T>> {
    let layers = pretrained.layers.len();
    if adapt_layers > layers {
        return Err(Error::Model(format!(
            "adapt_layers {adapt_layers} exceeds the {layers} pretrained layers"
        )));
    }
    let src = |k: usize| format!("pretrained.layer{k}");
    let adaptors: BTreeMap<Modality, Vec<EncoderLayer<T>>> = modalities
        .iter()
        .map(|&m| {
            let stack = (0..adapt_layers)
                .map(|k| renamed_copy(&pretrained.layers[k], &src(k), &adaptor_prefix(m, k)))
                .collect();
            (m, stack)
        })
        .collect();
    let shared = (adapt_layers..layers)
        .map(|k| renamed_copy(&pretrained.layers[k], &src(k), &shared_prefix(k)))
        .collect();
    Ok(EncoderStack {
        adaptors,
        shared,
        final_ln: pretrained.final_ln.clone(),
        drop_path: modalities.iter().map(|&m| (m, 0.0)).collect(),
    })
}

/// Builds a PolyViT whose trunk comes from `pretrained`: tokenizers are
/// converted to each geometry (`strategy` inflates video kernels), layers are
/// assigned per [`assign_layers`] and heads follow each task's init kind.
pub fn init_polyvit<T: Element>(
    pretrained: &PretrainedViT<T>,
    adapt_layers: usize,
    geometries: &[Geometry],
    tasks: Vec<TaskSpec>,
    strategy: InflateStrategy,
    rng: &mut impl Rng,
) -> Result<PolyViT<T>> {
    let first = pretrained
        .layers
        .first()
        .ok_or_else(|| Error::Model("pretrained model has no layers".into()))?;
    let config = ModelConfig {
        layers: pretrained.layers.len(),
        width: first.width(),
        heads: first.heads,
        mlp_dim: first.fc1.b.value.len(),
        adapt_layers,
    };
    let mut tokenizers = BTreeMap::new();
    for g in geometries {
        tokenizers.insert(g.modality, convert_tokenizer(&pretrained.tokenizer, g, strategy)?);
    }
    let modalities: Vec<Modality> = tokenizers.keys().copied().collect();
    let encoder = assign_layers(pretrained, adapt_layers, &modalities)?;
    PolyViT::assemble(config, tokenizers, encoder, tasks, rng)
}

/// Returns a copy of `model` extended with a tokenizer for `geometry`
/// converted from an existing modality (image, then audio, then video is
/// preferred) and adaptor layers copied from that modality.
pub fn with_converted_modality<T: Element>(
    model: &PolyViT<T>,
    geometry: &Geometry,
    strategy: InflateStrategy,
) -> Result<PolyViT<T>> {
    if model.tokenizers.contains_key(&geometry.modality) {
        return Ok(model.clone());
    }
    let source = [Modality::Image, Modality::Audio, Modality::Video]
        .into_iter()
        .find(|m| model.tokenizers.contains_key(m))
        .ok_or_else(|| Error::Model("model has no tokenizer to convert from".into()))?;
    let tok = convert_tokenizer(&model.tokenizers[&source], geometry, strategy)?;
    let adaptors = model.encoder.adaptors[&source]
        .iter()
        .enumerate()
        .map(|(k, l)| renamed_copy(l, &adaptor_prefix(source, k), &adaptor_prefix(geometry.modality, k)))
        .collect();
    let mut out = model.clone();
    out.add_modality(tok, adaptors)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::normal_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    #[test]
    fn interp_identity_and_constants() {
        let p: Tensor<f64> = normal_tensor([1 + 6, 3], 1.0, &mut rng());
        assert_eq!(interp_pos(&p, (2, 3), (2, 3)).unwrap(), p);
        let c = Tensor::<f64>::full([1 + 4, 2], 0.7);
        let up = interp_pos(&c, (2, 2), (5, 3)).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
        assert!(interp_pos(&p, (2, 2), (3, 3)).is_err());
    }

    #[test]
    fn interp_center_of_corner_grid() {
        let p = Tensor::<f64>::from_f64([5, 1], &[9.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = interp_pos(&p, (2, 2), (3, 3)).unwrap();
        assert_eq!(up.at(&[0, 0]), 9.0);
        assert!((up.at(&[5, 0]) - 1.5).abs() < 1e-12);
        assert_eq!(up.at(&[1, 0]), 0.0);
        assert_eq!(up.at(&[3, 0]), 1.0);
        assert_eq!(up.at(&[9, 0]), 3.0);
    }

    #[test]
    fn inflate_and_collapse() {
        let e: Tensor<f64> = normal_tensor([12, 4], 1.0, &mut rng());
        for s in [InflateStrategy::CentralFrame, InflateStrategy::Replicate, InflateStrategy::ReplicateScaled] {
            assert_eq!(inflate_2d_to_3d(&e, 1, s).unwrap(), e);
        }
        let rep = inflate_2d_to_3d(&e, 4, InflateStrategy::Replicate).unwrap();
        assert_eq!(collapse_3d_to_2d(&rep, 4).unwrap(), e.scale(4.0));
        let central = inflate_2d_to_3d(&e, 3, InflateStrategy::CentralFrame).unwrap();
        assert_eq!(collapse_3d_to_2d(&central, 3).unwrap(), e);
        assert_eq!(&central.data()[48..96], e.data());
        assert!(collapse_3d_to_2d(&e, 5).is_err());
    }

    #[test]
    fn frame_mean_of_shifted_frames() {
        let a = [0.5, -1.0, 2.0, 3.5];
        let mut v = vec![7.0];
        v.extend(a);
        v.extend(a.iter().map(|x| x + 2.0));
        let p = Tensor::<f64>::from_f64([9, 1], &v).unwrap();
        let m = pos_video_to_2d(&p, (2, 2, 2), (2, 2)).unwrap();
        assert_eq!(m.at(&[0, 0]), 7.0);
        for (i, x) in a.iter().enumerate() {
            assert!((m.at(&[i + 1, 0]) - (x + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn repeat_then_mean_is_identity() {
        let p: Tensor<f64> = normal_tensor([1 + 6, 5], 1.0, &mut rng());
        let vid = pos_2d_to_video(&p, (2, 3), (3, 2, 3)).unwrap();
        assert_eq!(vid.shape(), [19, 5]);
        for t in 1..3 {
            assert_eq!(&vid.data()[(1 + t * 6) * 5..(1 + (t + 1) * 6) * 5], &vid.data()[5..35]);
        }
        assert_eq!(pos_video_to_2d(&vid, (3, 2, 3), (2, 3)).unwrap(), p);
    }

    #[test]
    fn channel_conversion() {
        let e = Tensor::<f64>::from_f64([4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let one = convert_channels(&e, 2, 1).unwrap();
        assert_eq!(one.data(), &[3.0, 7.0]);
        let back = convert_channels(&one, 1, 2).unwrap();
        assert_eq!(back.data(), &[1.5, 1.5, 3.5, 3.5]);
        assert!(convert_channels(&e, 2, 3).is_err());
    }

    fn pretrained() -> PretrainedViT<f64> {
        let config = ModelConfig {
            layers: 2,
            width: 8,
            heads: 2,
            mlp_dim: 16,
            adapt_layers: 0,
        };
        PretrainedViT::random(&config, Geometry::image(8, 8, 3, 4, 4).unwrap(), &mut rng()).unwrap()
    }

    #[test]
    fn adaptors_are_independent_copies() {
        let pre = pretrained();
        let s = assign_layers(&pre, 1, &[Modality::Image, Modality::Audio]).unwrap();
        let img = &s.adaptors[&Modality::Image][0];
        let aud = &s.adaptors[&Modality::Audio][0];
        for ((a, b), c) in img.params().iter().zip(aud.params()).zip(pre.layers[0].params()) {
            assert_eq!(a.value, b.value);
            assert_eq!(a.value, c.value);
        }
        assert_eq!(s.shared[0].params()[2].name, "shared.layer1.msa.q_w");
        assert!(assign_layers(&pre, 3, &[Modality::Image]).is_err());
        let none = assign_layers(&pre, 0, &[Modality::Image]).unwrap();
        assert_eq!(none.shared.len(), 2);
    }

    #[test]
    fn zero_adaptor_init_reproduces_pretrained_features() {
        let pre = pretrained();
        let geoms = [pre.tokenizer.geometry.clone(), Geometry::audio(8, 8, 4, 4).unwrap()];
        let task = TaskSpec::new("t", Modality::Image, 3);
        let m = init_polyvit(&pre, 0, &geoms, vec![task], InflateStrategy::CentralFrame, &mut rng()).unwrap();
        let x: Vec<Tensor<f64>> = (0..2).map(|_| normal_tensor([8, 8, 3], 1.0, &mut rng())).collect();
        assert_eq!(m.encode_features(Modality::Image, &x).unwrap(), pre.features(&x).unwrap());
        assert!(m.logits(0, &x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_modal_conversions_have_target_shapes() {
        let pre = pretrained();
        let targets = [
            Geometry::audio(16, 8, 4, 4).unwrap(),
            Geometry::video(4, 8, 8, 3, 2, 4, 4).unwrap(),
            Geometry::image(12, 12, 1, 4, 4).unwrap(),
        ];
        for g in &targets {
            for s in [InflateStrategy::CentralFrame, InflateStrategy::Replicate] {
                let t = convert_tokenizer(&pre.tokenizer, g, s).unwrap();
                t.check().unwrap();
                let vid = convert_tokenizer(&t, &targets[1], s).unwrap();
                convert_tokenizer(&vid, &targets[0], s).unwrap().check().unwrap();
            }
        }
        assert!(convert_tokenizer(&pre.tokenizer, &Geometry::image(8, 8, 3, 2, 2).unwrap(), InflateStrategy::Replicate).is_err());
    }

    #[test]
    fn replicate_scaled_static_video_matches_image_token() {
        let pre = pretrained();
        let vg = Geometry::video(2, 8, 8, 3, 2, 4, 4).unwrap();
        let mut img_tok = pre.tokenizer.clone();
        img_tok.pos.value = Tensor::zeros(img_tok.pos.value.shape().to_vec());
        let vid_tok = convert_tokenizer(&img_tok, &vg, InflateStrategy::ReplicateScaled).unwrap();
        let frame: Tensor<f64> = normal_tensor([8, 8, 3], 1.0, &mut rng());
        let mut video = frame.data().to_vec();
        video.extend_from_slice(frame.data());
        let video = Tensor::new([2, 8, 8, 3], video).unwrap();
        let a = img_tok.tokenize(&frame).unwrap();
        let b = vid_tok.tokenize(&video).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
}
