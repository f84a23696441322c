use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::transformer::{self, custom_attention, CustAttnTrace};
use super::{EncodedImage, PatchGrid};
use crate::autograd::{Graph, Var};
use crate::datamodel::Image;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionEncoderConfig {
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Dimension of the joint image-text space.
    pub embed_dim: usize,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
    pub seed: u64,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            image_size: 32,
            channels: 3,
            depth: 2,
            width: 32,
            heads: 4,
            embed_dim: 32,
            pixel_mean: [0.5; 3],
            pixel_std: [0.25; 3],
            seed: 0,
        }
    }
}

impl VisionEncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.heads == 0 || self.depth == 0 || self.width == 0 || self.embed_dim == 0 {
            return Err(Error::Config("vision encoder sizes must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 || self.channels > 3 {
            return Err(Error::Config("channels must be 1..=3".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub config: VisionEncoderConfig,
    pub params: ParamSet,
}

const PREFIX: &str = "visual";

impl VisionEncoder {
    pub fn new(config: VisionEncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, "init/visual");
        let mut p = ParamSet::new();
        let w = config.width;
        let pdim = config.patch_size * config.patch_size * config.channels;
        let scale = (w as f64).powf(-0.5);
        p.normal("visual.patch_embed", (pdim, w), (pdim as f64).powf(-0.5), &mut rng);
        p.normal("visual.class_embed", (1, w), scale, &mut rng);
        p.normal("visual.pos_embed", (config.tokens(), w), scale, &mut rng);
        transformer::init_layer_norm(&mut p, "visual.ln_pre", w);
        for i in 0..config.depth {
            transformer::init_block(&mut p, &format!("visual.blocks.{i}"), w, config.depth, &mut rng);
        }
        transformer::init_layer_norm(&mut p, "visual.ln_post", w);
        p.normal("visual.proj.w", (w, config.embed_dim), scale, &mut rng);
        p.zeros("visual.proj.b", (1, config.embed_dim));
        Ok(Self { config, params: p })
    }

    /// Standardized, flattened patches: (h·w) x (p²·C), row-major over cells.
    pub fn patchify(&self, image: &Image) -> Result<Array2<f64>> {
        let c = &self.config;
        let (h, w, ch) = image.dim();
        if h != c.image_size || w != c.image_size || ch != c.channels {
            return Err(Error::Shape(format!(
                "image {h}x{w}x{ch}, encoder expects {0}x{0}x{1}",
                c.image_size, c.channels
            )));
        }
        let p = c.patch_size;
        let g = c.grid();
        let mut out = Array2::zeros((g * g, p * p * ch));
        for gy in 0..g {
            for gx in 0..g {
                let row = gy * g + gx;
                let mut col = 0;
                for py in 0..p {
                    for px in 0..p {
                        for k in 0..ch {
                            let v = image[[gy * p + py, gx * p + px, k]];
                            out[[row, col]] = (v - c.pixel_mean[k]) / c.pixel_std[k];
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Token stream entering the first block (after `ln_pre`).
    fn embed(&self, g: &mut Graph, b: &Bound, image: &Image) -> Result<Var> {
        let patches = g.constant(self.patchify(image)?);
        let tokens = g.matmul(patches, b.get("visual.patch_embed"));
        let x = g.concat_rows(&[b.get("visual.class_embed"), tokens]);
        let x = g.add(x, b.get("visual.pos_embed"));
        Ok(transformer::layer_norm(g, b, "visual.ln_pre", x))
    }

    fn head(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let x = transformer::layer_norm(g, b, "visual.ln_post", x);
        transformer::linear(g, b, "visual.proj", x)
    }

    /// Full forward pass on `g`. Returns `(cls 1 x e, patches hw x e)`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, image: &Image) -> Result<(Var, Var)> {
        let mut x = self.embed(g, b, image)?;
        for i in 0..self.config.depth {
            x = transformer::block_forward(g, b, &format!("{PREFIX}.blocks.{i}"), x, self.config.heads, false);
        }
        let out = self.head(g, b, x);
        let n = self.config.tokens();
        let cls = g.slice_rows(out, 0, 1);
        let patches = g.slice_rows(out, 1, n - 1);
        Ok((cls, patches))
    }

    pub fn encode_image(&self, image: &Image) -> Result<EncodedImage> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let (cls, patches) = self.forward(&mut g, &b, image)?;
        let n = self.config.grid();
        Ok(EncodedImage {
            cls: g.value(cls).row(0).to_owned(),
            patches: PatchGrid::new(n, n, g.value(patches).clone())?,
        })
    }

    pub fn encode_images(&self, images: &[Image]) -> Result<Vec<EncodedImage>> {
        images.iter().map(|im| self.encode_image(im)).collect()
    }

    /// Input of the final block, T x width.
    pub fn final_block_input(&self, image: &Image) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let mut x = self.embed(&mut g, &b, image)?;
        for i in 0..self.config.depth - 1 {
            x = transformer::block_forward(&mut g, &b, &format!("{PREFIX}.blocks.{i}"), x, self.config.heads, false);
        }
        Ok(g.value(x).clone())
    }

    /// Dense features with the customized attention trace of the final block.
    pub fn dense_trace(&self, image: &Image) -> Result<(PatchGrid, CustAttnTrace)> {
        let x = self.final_block_input(image)?;
        let last = format!("{PREFIX}.blocks.{}", self.config.depth - 1);
        let trace = custom_attention(&self.params, &last, &x, self.config.heads);
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let y = g.constant(trace.output.clone());
        let out = self.head(&mut g, &b, y);
        let n = self.config.grid();
        let patches = g.value(out).slice(ndarray::s![1.., ..]).to_owned();
        Ok((PatchGrid::new(n, n, patches)?, trace))
    }

    /// h x w grid of patch features from the customized final block, mapped
    /// into the joint space; the CLS row is dropped.
    pub fn dense_features(&self, image: &Image) -> Result<PatchGrid> {
        Ok(self.dense_trace(image)?.0)
    }
}
