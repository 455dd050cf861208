//! Patch tokenization: images and edge maps to token sequences and back,
//! plus a deterministic hash-bucket text encoder stand-in.

use serde::{Deserialize, Serialize};

use crate::imaging::ImageBuffer;
use crate::numerics::{Tape, Var};
use crate::util::fnv1a;
use crate::{Error, Result};

/// What a token sequence carries; decides which positional table and kind
/// embedding apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Image,
    Text,
    Canny,
    StyleGlobal,
    StyleLocal,
    Noise,
}

impl TokenKind {
    pub fn name(self) -> &'static str {
        match self {
            TokenKind::Image => "image",
            TokenKind::Text => "text",
            TokenKind::Canny => "canny",
            TokenKind::StyleGlobal => "style_global",
            TokenKind::StyleLocal => "style_local",
            TokenKind::Noise => "noise",
        }
    }
}

/// L×d token matrix living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub var: Var,
    pub kind: TokenKind,
    /// (rows, cols) of the patch grid for image-derived sequences
    pub grid: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// embedding width
    pub d: usize,
    /// patch edge in pixels
    pub patch_px: usize,
    /// training image edge in pixels
    pub base_resolution: usize,
    /// style patch count
    pub n_patches: usize,
    pub heads: usize,
    pub blocks: usize,
    pub text_vocab: usize,
    pub text_max_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            patch_px: 4,
            base_resolution: 16,
            n_patches: 10,
            heads: 4,
            blocks: 2,
            text_vocab: 1024,
            text_max_tokens: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.base_resolution.is_multiple_of(self.patch_px) {
            return Err(Error::Config(format!(
                "base_resolution {} not divisible by patch_px {}",
                self.base_resolution, self.patch_px
            )));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d {} not divisible by heads {}",
                self.d, self.heads
            )));
        }
        if self.blocks < 1 || self.n_patches < 1 || self.text_vocab < 2 {
            return Err(Error::Config("blocks, n_patches >= 1; text_vocab >= 2".into()));
        }
        Ok(())
    }

    /// Patch grid edge of a base-resolution image.
    pub fn grid_edge(&self) -> usize {
        self.base_resolution / self.patch_px
    }

    /// Token count of a base-resolution image.
    pub fn image_tokens(&self) -> usize {
        self.grid_edge() * self.grid_edge()
    }

    /// Width of a flattened RGB patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_px * self.patch_px * 3
    }
}

/// Flatten an image into non-overlapping patches, row-major over the grid
/// and row-major (pixel-interleaved channels) within each patch.
/// Returns the L×(patch_px²·C) matrix plus the patch grid shape.
pub fn patchify(img: &ImageBuffer, patch_px: usize) -> Result<(Vec<f64>, (usize, usize))> {
    let raw = patchify_raw(&img.values, img.width, img.height, img.channels, patch_px)?;
    Ok((raw, (img.height / patch_px, img.width / patch_px)))
}

/// [`patchify`] over a raw interleaved pixel buffer; values need not lie
/// in [0,1] (noisy interpolants do not).
pub fn patchify_raw(
    values: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    patch_px: usize,
) -> Result<Vec<f64>> {
    if !width.is_multiple_of(patch_px) || !height.is_multiple_of(patch_px) {
        return Err(Error::Dimension(format!(
            "image {width}x{height} not divisible by patch {patch_px}"
        )));
    }
    if values.len() != width * height * channels {
        return Err(Error::Dimension("pixel buffer length mismatch".into()));
    }
    let (rows, cols) = (height / patch_px, width / patch_px);
    let c = channels;
    let stride = patch_px * patch_px * c;
    let mut out = Vec::with_capacity(rows * cols * stride);
    for gy in 0..rows {
        for gx in 0..cols {
            for py in 0..patch_px {
                for px in 0..patch_px {
                    let x = gx * patch_px + px;
                    let y = gy * patch_px + py;
                    for ch in 0..c {
                        out.push(values[(y * width + x) * c + ch]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`patchify`]'s layout. No clamping: callers clamp only
/// at final image write.
pub fn unpatchify(
    patches: &[f64],
    grid: (usize, usize),
    patch_px: usize,
    channels: usize,
) -> Result<Vec<f64>> {
    let (rows, cols) = grid;
    let width = patch_px * patch_px * channels;
    if patches.len() != rows * cols * width {
        return Err(Error::Dimension(format!(
            "patch data length {} does not match grid {rows}x{cols}",
            patches.len()
        )));
    }
    let (w, h) = (cols * patch_px, rows * patch_px);
    let mut out = vec![0.0; w * h * channels];
    for gy in 0..rows {
        for gx in 0..cols {
            let base = (gy * cols + gx) * width;
            for py in 0..patch_px {
                for px in 0..patch_px {
                    for ch in 0..channels {
                        let x = gx * patch_px + px;
                        let y = gy * patch_px + py;
                        out[(y * w + x) * channels + ch] =
                            patches[base + (py * patch_px + px) * channels + ch];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Clamp raw unpatchified pixels into an [`ImageBuffer`].
pub fn pixels_to_image(
    pixels: &[f64],
    width: usize,
    height: usize,
    channels: usize,
) -> Result<ImageBuffer> {
    let clamped = pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageBuffer::new(width, height, channels, clamped)
}

/// Learned linear patch embedding plus additive positional table and kind
/// vector: tokens = raw·W + b + pos + kind.
#[allow(clippy::too_many_arguments)]
pub fn embed(
    tape: &mut Tape,
    raw: Var,
    kind: TokenKind,
    grid: Option<(usize, usize)>,
    w_embed: Var,
    b_embed: Var,
    pos_table: Var,
    kind_vec: Var,
) -> Result<TokenSequence> {
    let x = tape.linear(raw, w_embed, b_embed)?;
    let x = tape.add(x, pos_table)?;
    let var = tape.add_bias(x, kind_vec)?;
    Ok(TokenSequence { var, kind, grid })
}

/// Deterministic hash-bucket token ids for a prompt: bucket 0 is padding,
/// words land in 1..vocab.
pub fn text_token_ids(prompt: &str, vocab: usize, max_tokens: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = prompt
        .split_whitespace()
        .take(max_tokens)
        .map(|w| 1 + (fnv1a(w.as_bytes()) as usize % (vocab - 1)))
        .collect();
    ids.resize(max_tokens, 0);
    ids
}

/// Text embedding: gather learned table rows by hashed ids (via one-hot
/// selection so the table participates in backprop), then positional table
/// and kind vector.
#[allow(clippy::too_many_arguments)]
pub fn embed_text(
    tape: &mut Tape,
    prompt: &str,
    vocab: usize,
    max_tokens: usize,
    table: Var,
    pos_table: Var,
    kind_vec: Var,
) -> Result<TokenSequence> {
    let ids = text_token_ids(prompt, vocab, max_tokens);
    let mut onehot = vec![0.0; max_tokens * vocab];
    for (i, &id) in ids.iter().enumerate() {
        onehot[i * vocab + id] = 1.0;
    }
    let sel = tape.leaf(max_tokens, vocab, onehot);
    let x = tape.matmul(sel, table)?;
    let x = tape.add(x, pos_table)?;
    let var = tape.add_bias(x, kind_vec)?;
    Ok(TokenSequence {
        var,
        kind: TokenKind::Text,
        grid: None,
    })
}
