//! Per-modality tokenizers: non-overlapping patches (or tubelets), a linear
//! patch embedding, a class token and a positional table.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Param};
use crate::tensor::{Element, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Image,
    Video,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Video, Modality::Audio];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Video => "video",
            Modality::Audio => "audio",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Video => 1,
            Modality::Audio => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }

    /// Video carries a leading frame axis.
    pub fn is_temporal(self) -> bool {
        self == Modality::Video
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Geometry(format!("unknown modality `{s}`")))
    }
}

/// Input and patch extents for one modality.
///
/// `input` is `[H, W, C]` for images and spectrograms (time × frequency × 1)
/// and `[F, H, W, C]` for video. `patch` is `[h, w]` or `[f, h, w]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Geometry {
    pub modality: Modality,
    pub input: Vec<usize>,
    pub patch: Vec<usize>,
    /// Floor-crop inputs whose extents are not multiples of the patch.
    pub allow_crop: bool,
}

impl Geometry {
    pub fn new(modality: Modality, input: Vec<usize>, patch: Vec<usize>) -> Result<Self> {
        let g = Self {
            modality,
            input,
            patch,
            allow_crop: false,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn image(h: usize, w: usize, c: usize, ph: usize, pw: usize) -> Result<Self> {
        Self::new(Modality::Image, vec![h, w, c], vec![ph, pw])
    }

    pub fn audio(time: usize, freq: usize, ph: usize, pw: usize) -> Result<Self> {
        Self::new(Modality::Audio, vec![time, freq, 1], vec![ph, pw])
    }

    #[allow(clippy::too_many_arguments)]
    pub fn video(
        f: usize,
        h: usize,
        w: usize,
        c: usize,
        pf: usize,
        ph: usize,
        pw: usize,
    ) -> Result<Self> {
        Self::new(Modality::Video, vec![f, h, w, c], vec![pf, ph, pw])
    }

    pub fn with_crop(mut self, allow: bool) -> Result<Self> {
        self.allow_crop = allow;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (want_in, want_patch) = if self.modality.is_temporal() { (4, 3) } else { (3, 2) };
        if self.input.len() != want_in || self.patch.len() != want_patch {
            return Err(Error::Geometry(format!(
                "{} expects {want_in} input extents and {want_patch} patch extents, got {:?} and {:?}",
                self.modality, self.input, self.patch
            )));
        }
        if self.input.iter().chain(&self.patch).any(|&e| e == 0) {
            return Err(Error::Geometry(format!(
                "{}: extents must be positive ({:?}, patch {:?})",
                self.modality, self.input, self.patch
            )));
        }
        if self.modality == Modality::Audio && self.channels() != 1 {
            return Err(Error::Geometry(format!(
                "audio spectrograms have one channel, got {}",
                self.channels()
            )));
        }
        self.grid().map(|_| ())
    }

    pub fn channels(&self) -> usize {
        *self.input.last().expect("validated rank")
    }

    /// Spatial (and temporal) input extents, without channels.
    pub fn extents(&self) -> &[usize] {
        &self.input[..self.input.len() - 1]
    }

    /// Patches along each axis: `[g_h, g_w]` or `[g_f, g_h, g_w]`.
    pub fn grid(&self) -> Result<Vec<usize>> {
        self.extents()
            .iter()
            .zip(&self.patch)
            .map(|(&n, &p)| {
                if p > n {
                    Err(Error::Geometry(format!(
                        "patch {:?} larger than input {:?}",
                        self.patch, self.input
                    )))
                } else if n % p != 0 && !self.allow_crop {
                    Err(Error::Geometry(format!(
                        "input {:?} is not divisible by patch {:?}; enable allow_crop to floor-crop",
                        self.input, self.patch
                    )))
                } else {
                    Ok(n / p)
                }
            })
            .collect()
    }

    pub fn num_patches(&self) -> usize {
        self.grid().expect("validated geometry").iter().product()
    }

    /// `1 + [(F/f)·](H/h)·(W/w)`: class token plus patch tokens.
    pub fn seq_len(&self) -> usize {
        1 + self.num_patches()
    }

    /// Length of one flattened patch: `[f·]h·w·C`.
    pub fn patch_dim(&self) -> usize {
        self.patch.iter().product::<usize>() * self.channels()
    }

    /// `[g_h, g_w]`, dropping the frame axis for video.
    pub fn spatial_grid(&self) -> (usize, usize) {
        let g = self.grid().expect("validated geometry");
        let n = g.len();
        (g[n - 2], g[n - 1])
    }
}

/// Splits one input into flattened patches, returned as `[N, patch_dim]`.
///
/// Patches are in raster order (frame block, then row, then column); inside a
/// patch values are ordered (frame, row, column, channel).
pub fn patchify<T: Element>(input: &Tensor<T>, geometry: &Geometry) -> Result<Tensor<T>> {
    if input.shape() != geometry.input.as_slice() {
        return Err(Error::Geometry(format!(
            "{} input has shape {:?}, expected {:?}",
            geometry.modality,
            input.shape(),
            geometry.input
        )));
    }
    let grid = geometry.grid()?;
    let c = geometry.channels();
    // Images are handled as single-frame videos.
    let (h, w) = match geometry.input.as_slice() {
        [_, h, w, _] | [h, w, _] => (*h, *w),
        _ => unreachable!("validated rank"),
    };
    let (gf, gh, gw) = match grid.as_slice() {
        [gf, gh, gw] => (*gf, *gh, *gw),
        [gh, gw] => (1, *gh, *gw),
        _ => unreachable!(),
    };
    let (pf, ph, pw) = match geometry.patch.as_slice() {
        [pf, ph, pw] => (*pf, *ph, *pw),
        [ph, pw] => (1, *ph, *pw),
        _ => unreachable!(),
    };
    let data = input.data();
    let pdim = pf * ph * pw * c;
    let mut out = Vec::with_capacity(gf * gh * gw * pdim);
    for bf in 0..gf {
        for bh in 0..gh {
            for bw in 0..gw {
                for df in 0..pf {
                    for dh in 0..ph {
                        let f = bf * pf + df;
                        let y = bh * ph + dh;
                        let x0 = bw * pw;
                        let start = ((f * h + y) * w + x0) * c;
                        out.extend_from_slice(&data[start..start + pw * c]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![gf * gh * gw, pdim], out))
}

/// Stacks the patches of several same-geometry inputs into `[B·N, patch_dim]`.
pub fn patchify_batch<T: Element>(inputs: &[Tensor<T>], geometry: &Geometry) -> Result<Tensor<T>> {
    if inputs.is_empty() {
        return Err(Error::Geometry("empty batch".into()));
    }
    let n = geometry.num_patches();
    let pdim = geometry.patch_dim();
    let mut data = Vec::with_capacity(inputs.len() * n * pdim);
    for x in inputs {
        data.extend(patchify(x, geometry)?.into_data());
    }
    Ok(Tensor::from_parts(vec![inputs.len() * n, pdim], data))
}

/// Modality-specific embedding parameters shared by every task of that modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer<T> {
    pub geometry: Geometry,
    /// `[patch_dim, d]`: token = patch · embed + embed_bias.
    pub embed: Param<T>,
    pub embed_bias: Param<T>,
    pub cls: Param<T>,
    /// `[N + 1, d]`, row 0 belongs to the class token.
    pub pos: Param<T>,
}

impl<T: Element> Tokenizer<T> {
    pub fn zeros(geometry: Geometry, width: usize) -> Result<Self> {
        geometry.validate()?;
        let prefix = geometry.modality.name();
        let (p, n) = (geometry.patch_dim(), geometry.seq_len());
        Ok(Self {
            embed: Param::new(format!("{prefix}.tokenizer.E"), Tensor::zeros([p, width])),
            embed_bias: Param::new(format!("{prefix}.tokenizer.E_bias"), Tensor::zeros([width])),
            cls: Param::new(format!("{prefix}.tokenizer.cls"), Tensor::zeros([width])),
            pos: Param::new(format!("{prefix}.tokenizer.pos"), Tensor::zeros([n, width])),
            geometry,
        })
    }

    /// LeCun-normal patch embedding, `N(0, 0.02²)` positions, zero class token.
    pub fn random(geometry: Geometry, width: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut t = Self::zeros(geometry, width)?;
        let p = t.geometry.patch_dim();
        t.embed.value = normal_tensor([p, width], (1.0 / p as f64).sqrt(), rng);
        t.pos.value = normal_tensor([t.geometry.seq_len(), width], 0.02, rng);
        Ok(t)
    }

    pub fn width(&self) -> usize {
        self.cls.value.len()
    }

    pub fn modality(&self) -> Modality {
        self.geometry.modality
    }

    pub fn params(&self) -> [&Param<T>; 4] {
        [&self.embed, &self.embed_bias, &self.cls, &self.pos]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 4] {
        [
            &mut self.embed,
            &mut self.embed_bias,
            &mut self.cls,
            &mut self.pos,
        ]
    }

    pub fn check(&self) -> Result<()> {
        let d = self.width();
        let want = [
            (&self.embed, vec![self.geometry.patch_dim(), d]),
            (&self.embed_bias, vec![d]),
            (&self.cls, vec![d]),
            (&self.pos, vec![self.geometry.seq_len(), d]),
        ];
        for (p, shape) in want {
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Geometry(format!(
                    "{} has shape {:?}, expected {:?}",
                    p.name,
                    p.value.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Records tokenization of a batch on `graph`; returns `[B·(N+1), d]`.
    pub fn tokenize_batch(&self, graph: &mut Graph<'_, T>, inputs: &[Tensor<T>]) -> Result<Var> {
        let patches = patchify_batch(inputs, &self.geometry)?;
        let patches = graph.input(patches);
        let e = graph.bind(&self.embed);
        let eb = graph.bind(&self.embed_bias);
        let cls = graph.bind(&self.cls);
        let pos = graph.bind(&self.pos);
        let tokens = graph.tape.matmul(patches, e)?;
        let tokens = graph.tape.add_bias(tokens, eb)?;
        Ok(graph
            .tape
            .assemble_sequence(tokens, cls, pos, inputs.len())?)
    }

    /// Tokenizes a single input into `[N+1, d]`.
    pub fn tokenize(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::eval().frozen();
        let v = self.tokenize_batch(&mut graph, std::slice::from_ref(input))?;
        Ok(graph.value(v).clone())
    }
}

pub(crate) fn normal_tensor<T: Element>(
    shape: impl Into<Vec<usize>>,
    std: f64,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seq_len_matches_reference_geometries() {
        assert_eq!(Geometry::image(224, 224, 3, 16, 16).unwrap().seq_len(), 197);
        assert_eq!(Geometry::image(384, 384, 3, 16, 16).unwrap().seq_len(), 577);
        assert_eq!(
            Geometry::video(32, 224, 224, 3, 4, 16, 16).unwrap().seq_len(),
            1569
        );
        assert_eq!(Geometry::audio(800, 128, 16, 16).unwrap().seq_len(), 401);
    }

    #[test]
    fn non_divisible_inputs_are_rejected_unless_cropping() {
        assert!(Geometry::image(7, 6, 1, 2, 2).is_err());
        let g = Geometry {
            modality: Modality::Image,
            input: vec![7, 6, 1],
            patch: vec![2, 2],
            allow_crop: true,
        };
        assert_eq!(g.num_patches(), 9);
        let x = Tensor::<f64>::from_fn([7, 6, 1], |i| i as f64);
        let p = patchify(&x, &g).unwrap();
        assert_eq!(p.shape(), &[9, 4]);
        // last patch covers rows 4..6, cols 4..6; row 6 is cropped away
        assert_eq!(p.data()[8 * 4..], [28.0, 29.0, 34.0, 35.0]);
    }

    #[test]
    fn patchify_counts_and_order() {
        let g = Geometry::image(6, 6, 1, 2, 2).unwrap();
        let x = Tensor::<f64>::from_fn([6, 6, 1], |i| i as f64);
        let p = patchify(&x, &g).unwrap();
        assert_eq!(p.shape(), &[9, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 8.0, 9.0]);

        let big = Geometry::video(32, 224, 224, 3, 4, 16, 16).unwrap();
        assert_eq!(big.num_patches(), 1568);
        let audio = Geometry::audio(800, 128, 16, 16).unwrap();
        assert_eq!(audio.num_patches(), 400);
    }

    #[test]
    fn video_patches_are_frame_major() {
        let g = Geometry::video(2, 2, 2, 1, 2, 1, 1).unwrap();
        let x = Tensor::<f64>::from_fn([2, 2, 2, 1], |i| i as f64);
        let p = patchify(&x, &g).unwrap();
        // tubelet (0,0): frame 0 pixel (0,0) then frame 1 pixel (0,0)
        assert_eq!(p.shape(), &[4, 2]);
        assert_eq!(&p.data()[..2], &[0.0, 4.0]);
        assert_eq!(&p.data()[2..4], &[1.0, 5.0]);
    }

    #[test]
    fn zero_embedding_yields_positional_table() {
        let g = Geometry::image(4, 4, 3, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tokenizer::<f64>::random(g, 8, &mut rng).unwrap();
        t.embed.value = Tensor::zeros(t.embed.value.shape().to_vec());
        let x = normal_tensor::<f64>([4, 4, 3], 1.0, &mut rng);
        assert_eq!(t.tokenize(&x).unwrap(), t.pos.value);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let g = Geometry::image(4, 4, 3, 2, 2).unwrap();
        let t = Tokenizer::<f64>::zeros(g, 4).unwrap();
        assert!(t.tokenize(&Tensor::zeros([4, 4, 1])).is_err());
        assert!(Geometry::new(Modality::Audio, vec![8, 8, 3], vec![4, 4]).is_err());
    }
}
