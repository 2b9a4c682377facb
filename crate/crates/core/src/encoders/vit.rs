//! Frozen pre-norm vision transformer standing in for a pretrained CLIP image
//! tower. Weights are drawn once from a seed and never receive updates; the
//! forward pass is still recorded on the tape so gradients reach the prompts.

use super::Image;
use crate::autodiff::{checksum_all, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{self, AttentionVars};
use crate::rng;

/// Std of every block weight.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenVitConfig {
    /// Images are cut into `patch_grid × patch_grid` patches.
    pub patch_grid: usize,
    pub d_v: usize,
    /// Width of the output feature (the joint image/text space).
    pub d_out: usize,
    pub depth: usize,
    pub heads: usize,
    pub channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub seed: u64,
}

impl FrozenVitConfig {
    pub fn num_patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn mlp_width(&self) -> usize {
        2 * self.d_v
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("vision encoder depth must be >= 1"));
        }
        if self.heads == 0 || !self.d_v.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "d_v = {} is not divisible by heads = {}",
                self.d_v, self.heads
            )));
        }
        if self.patch_grid == 0 || self.d_out == 0 || self.channels == 0 {
            return Err(Error::invalid("patch_grid, d_out and channels must be positive"));
        }
        if !self.image_height.is_multiple_of(self.patch_grid) || !self.image_width.is_multiple_of(self.patch_grid) {
            return Err(Error::invalid(format!(
                "image {}x{} is not divisible into a {}x{} patch grid",
                self.image_height, self.image_width, self.patch_grid, self.patch_grid
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block<S> {
    ln1_g: Tensor<S>,
    ln1_b: Tensor<S>,
    wq: Tensor<S>,
    wk: Tensor<S>,
    wv: Tensor<S>,
    wo: Tensor<S>,
    bq: Tensor<S>,
    bk: Tensor<S>,
    bv: Tensor<S>,
    bo: Tensor<S>,
    ln2_g: Tensor<S>,
    ln2_b: Tensor<S>,
    w1: Tensor<S>,
    b1: Tensor<S>,
    w2: Tensor<S>,
    b2: Tensor<S>,
}

impl<S: Scalar> Block<S> {
    fn init(d: usize, mlp: usize, r: &mut rng::Rng) -> Self {
        let ones = Tensor::full(&[1, d], S::one());
        let zeros = Tensor::zeros(&[1, d]);
        Self {
            ln1_g: ones.clone(),
            ln1_b: zeros.clone(),
            wq: Tensor::randn(&[d, d], INIT_STD, r),
            wk: Tensor::randn(&[d, d], INIT_STD, r),
            wv: Tensor::randn(&[d, d], INIT_STD, r),
            wo: Tensor::randn(&[d, d], INIT_STD, r),
            bq: zeros.clone(),
            bk: zeros.clone(),
            bv: zeros.clone(),
            bo: zeros.clone(),
            ln2_g: ones,
            ln2_b: zeros.clone(),
            w1: Tensor::randn(&[d, mlp], INIT_STD, r),
            b1: Tensor::zeros(&[1, mlp]),
            w2: Tensor::randn(&[mlp, d], INIT_STD, r),
            b2: zeros,
        }
    }

    fn tensors(&self) -> [&Tensor<S>; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo, &self.bq, &self.bk, &self.bv,
            &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }
}

/// Input tokens for one image: the class token and its patch embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPack<S> {
    /// 1×d_v
    pub cls: Tensor<S>,
    /// b×d_v, positional encodings added
    pub patches: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct FrozenVit<S> {
    config: FrozenVitConfig,
    patch_w: Tensor<S>,
    patch_b: Tensor<S>,
    pos: Tensor<S>,
    cls: Tensor<S>,
    blocks: Vec<Block<S>>,
    ln_post_g: Tensor<S>,
    ln_post_b: Tensor<S>,
    head: Tensor<S>,
}

/// The encoder's weights recorded as constants on one tape.
#[derive(Clone, Debug)]
pub struct VitHandles {
    blocks: Vec<BlockHandles>,
    ln_post_g: Var,
    ln_post_b: Var,
    head: Var,
}

#[derive(Clone, Debug)]
struct BlockHandles {
    ln1_g: Var,
    ln1_b: Var,
    attn: AttentionVars,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Fixed sinusoidal position table, `rows × d`.
pub fn sinusoidal_positions<S: Scalar>(rows: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(rows * d);
    for pos in 0..rows {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            data.push(S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::matrix(rows, d, data).expect("positions shape")
}

impl<S: Scalar> FrozenVit<S> {
    pub fn build(config: FrozenVitConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_v;
        let ph = config.image_height / config.patch_grid;
        let pw = config.image_width / config.patch_grid;
        let fan_in = config.channels * ph * pw;
        let mut r = rng::child_rng(config.seed, "frozen-vit", &[]);
        // Patch projection is scaled by fan-in so patch content is O(1) next
        // to the unit-amplitude positional table.
        let patch_w = Tensor::randn(&[fan_in, d], 1.0 / (fan_in as f64).sqrt(), &mut r);
        let cls = Tensor::randn(&[1, d], INIT_STD, &mut r);
        let blocks = (0..config.depth).map(|_| Block::init(d, config.mlp_width(), &mut r)).collect();
        let head = Tensor::randn(&[d, config.d_out], INIT_STD, &mut r);
        Ok(Self {
            patch_b: Tensor::zeros(&[1, d]),
            pos: sinusoidal_positions(config.num_patches(), d),
            ln_post_g: Tensor::full(&[1, d], S::one()),
            ln_post_b: Tensor::zeros(&[1, d]),
            patch_w,
            cls,
            blocks,
            head,
            config,
        })
    }

    pub fn config(&self) -> &FrozenVitConfig {
        &self.config
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.patch_w, &self.patch_b, &self.pos, &self.cls];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.ln_post_g, &self.ln_post_b, &self.head]);
        out
    }

    /// Checksum over every frozen weight.
    pub fn checksum(&self) -> u64 {
        checksum_all(self.tensors())
    }

    /// Linear patch embeddings without positional encodings, `b × d_v`, in
    /// row-major patch order.
    pub fn patch_content(&self, image: &Image) -> Result<Tensor<S>> {
        let c = &self.config;
        if image.channels() != c.channels || image.height() != c.image_height || image.width() != c.image_width {
            return Err(Error::shape(
                "patchify",
                format!(
                    "image {}x{}x{} vs encoder {}x{}x{}",
                    image.channels(),
                    image.height(),
                    image.width(),
                    c.channels,
                    c.image_height,
                    c.image_width
                ),
            ));
        }
        let (ph, pw) = (c.image_height / c.patch_grid, c.image_width / c.patch_grid);
        let fan_in = c.channels * ph * pw;
        let b = c.num_patches();
        let mut flat = Vec::with_capacity(b * fan_in);
        for gy in 0..c.patch_grid {
            for gx in 0..c.patch_grid {
                for ch in 0..c.channels {
                    for y in 0..ph {
                        for x in 0..pw {
                            flat.push(S::lit(image.get(ch, gy * ph + y, gx * pw + x)));
                        }
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(b, fan_in, flat)?)?;
        let w = tape.constant(self.patch_w.clone())?;
        let bias = tape.constant(self.patch_b.clone())?;
        let e = tape.linear(x, w, bias)?;
        Ok(tape.value(e).clone())
    }

    pub fn patchify(&self, image: &Image) -> Result<PatchPack<S>> {
        let content = self.patch_content(image)?;
        let data = content.data().iter().zip(self.pos.data()).map(|(&a, &p)| a + p).collect();
        Ok(PatchPack {
            cls: self.cls.clone(),
            patches: Tensor::matrix(content.rows(), content.cols(), data)?,
        })
    }

    /// Records all weights as non-trainable constants on `tape`.
    pub fn register(&self, tape: &mut Tape<S>) -> Result<VitHandles> {
        let mut c = |t: &Tensor<S>| tape.constant(t.clone());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push(BlockHandles {
                ln1_g: c(&b.ln1_g)?,
                ln1_b: c(&b.ln1_b)?,
                attn: AttentionVars {
                    wq: c(&b.wq)?,
                    wk: c(&b.wk)?,
                    wv: c(&b.wv)?,
                    wo: c(&b.wo)?,
                    bq: Some(c(&b.bq)?),
                    bk: Some(c(&b.bk)?),
                    bv: Some(c(&b.bv)?),
                    bo: Some(c(&b.bo)?),
                },
                ln2_g: c(&b.ln2_g)?,
                ln2_b: c(&b.ln2_b)?,
                w1: c(&b.w1)?,
                b1: c(&b.b1)?,
                w2: c(&b.w2)?,
                b2: c(&b.b2)?,
            });
        }
        Ok(VitHandles {
            blocks,
            ln_post_g: c(&self.ln_post_g)?,
            ln_post_b: c(&self.ln_post_b)?,
            head: c(&self.head)?,
        })
    }

    /// Builds the first-layer input `[cls; patches; prompts]`.
    pub fn assemble_input(&self, tape: &mut Tape<S>, cls: Var, patches: Var, prompts: Option<Var>) -> Result<Var> {
        let d = self.config.d_v;
        for (name, v) in [("cls", Some(cls)), ("patches", Some(patches)), ("prompts", prompts)] {
            if let Some(v) = v {
                if tape.value(v).cols() != d {
                    return Err(Error::shape(
                        "encode",
                        format!("{name} width {} vs d_v {d}", tape.value(v).cols()),
                    ));
                }
            }
        }
        match prompts {
            Some(p) => tape.concat_rows(&[cls, patches, p]),
            None => tape.concat_rows(&[cls, patches]),
        }
    }

    /// Runs the transformer over an assembled sequence and returns the
    /// unit-normalized projected class-token feature (1×d_out).
    pub fn encode_sequence(&self, tape: &mut Tape<S>, h: &VitHandles, seq: Var) -> Result<Var> {
        let mut x = seq;
        for b in &h.blocks {
            let n = tape.layer_norm(x, b.ln1_g, b.ln1_b)?;
            let a = nn::multi_head_attention(tape, n, n, &b.attn, self.config.heads)?;
            x = tape.add(x, a)?;
            let n = tape.layer_norm(x, b.ln2_g, b.ln2_b)?;
            let f = nn::feed_forward(tape, n, b.w1, b.b1, b.w2, b.b2)?;
            x = tape.add(x, f)?;
        }
        let cls = tape.slice_rows(x, 0, 1)?;
        let cls = tape.layer_norm(cls, h.ln_post_g, h.ln_post_b)?;
        let feat = tape.matmul(cls, h.head)?;
        tape.normalize_rows(feat)
    }

    pub fn encode(
        &self,
        tape: &mut Tape<S>,
        h: &VitHandles,
        cls: Var,
        patches: Var,
        prompts: Option<Var>,
    ) -> Result<Var> {
        let seq = self.assemble_input(tape, cls, patches, prompts)?;
        self.encode_sequence(tape, h, seq)
    }

    /// Forward-only convenience: feature of a patch pack with optional prompts.
    pub fn encode_value(&self, pack: &PatchPack<S>, prompts: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let h = self.register(&mut tape)?;
        let cls = tape.constant(pack.cls.clone())?;
        let patches = tape.constant(pack.patches.clone())?;
        let p = prompts.map(|p| tape.constant(p.clone())).transpose()?;
        let out = self.encode(&mut tape, &h, cls, patches, p)?;
        Ok(tape.value(out).clone())
    }

    pub fn encode_image(&self, image: &Image) -> Result<Tensor<S>> {
        self.encode_value(&self.patchify(image)?, None)
    }
}
