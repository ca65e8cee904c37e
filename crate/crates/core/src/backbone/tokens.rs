use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::LatentGrid;

/// Which stream of the joint sequence a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenGroup {
    Txt,
    Img,
    Subj,
}

/// `N×d` token matrix with a group label per row. Image tokens, if any, are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    tokens: Array2<f64>,
    groups: Vec<TokenGroup>,
    words: Vec<String>,
}

impl TokenSeq {
    pub fn new(tokens: Array2<f64>, groups: Vec<TokenGroup>) -> Result<Self> {
        if tokens.nrows() != groups.len() {
            return Err(Error::invalid(format!(
                "{} tokens but {} group labels",
                tokens.nrows(),
                groups.len()
            )));
        }
        let img: Vec<usize> = (0..groups.len()).filter(|i| groups[*i] == TokenGroup::Img).collect();
        if let (Some(first), Some(last)) = (img.first(), img.last()) {
            if last - first + 1 != img.len() {
                return Err(Error::invalid("image tokens must form a contiguous block"));
            }
        }
        Ok(Self { tokens, groups, words: Vec::new() })
    }

    /// Text tokens synthesized from a seeded hash of each whitespace-separated word of
    /// `prompt`, plus a sinusoidal position code. An empty prompt yields one token.
    pub fn from_prompt(prompt: &str, dim: usize, seed: u64) -> Self {
        let mut words: Vec<String> = prompt.split_whitespace().map(|w| w.to_lowercase()).collect();
        if words.is_empty() {
            words.push(String::new());
        }
        let mut tokens = Array2::zeros((words.len(), dim));
        for (i, word) in words.iter().enumerate() {
            let mut hasher = Sha256::new();
            hasher.update(b"shine-lab/token");
            hasher.update(seed.to_le_bytes());
            hasher.update(word.as_bytes());
            let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
            let pos = sinusoid(i as f64, dim);
            for j in 0..dim {
                let v: f64 = StandardNormal.sample(&mut rng);
                tokens[(i, j)] = v + 0.1 * pos[j];
            }
        }
        let groups = vec![TokenGroup::Txt; words.len()];
        Self { tokens, groups, words }
    }

    pub fn tokens(&self) -> ArrayView2<'_, f64> {
        self.tokens.view()
    }

    pub fn groups(&self) -> &[TokenGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// The words a prompt-derived sequence was built from (empty otherwise).
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Indices of tokens whose word equals `word`, case-insensitively.
    pub fn find_word(&self, word: &str) -> Vec<usize> {
        let word = word.to_lowercase();
        self.words.iter().enumerate().filter(|(_, w)| **w == word).map(|(i, _)| i).collect()
    }

    /// Contiguous range of image tokens, if present.
    pub fn image_range(&self) -> Option<std::ops::Range<usize>> {
        let first = self.groups.iter().position(|g| *g == TokenGroup::Img)?;
        let len = self.groups[first..].iter().take_while(|g| **g == TokenGroup::Img).count();
        Some(first..first + len)
    }
}

pub(crate) fn sinusoid(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    (0..dim)
        .map(|j| {
            let k = j % half.max(1);
            let freq = (-(k as f64) / half.max(1) as f64 * 10000f64.ln()).exp();
            if j < half {
                (position * freq).sin()
            } else {
                (position * freq).cos()
            }
        })
        .collect()
}

/// Rows are `patch×patch` latent blocks in raster order; columns run channel-major
/// within a block.
pub(crate) fn patchify(z: &LatentGrid, patch: usize) -> Result<Array2<f64>> {
    let (c, h, w) = z.shape();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(format!("latent {h}x{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let a = z.array();
    let mut out = Array2::zeros((gh * gw, c * patch * patch));
    for gy in 0..gh {
        for gx in 0..gw {
            let block = a.slice(s![.., gy * patch..(gy + 1) * patch, gx * patch..(gx + 1) * patch]);
            out.row_mut(gy * gw + gx)
                .iter_mut()
                .zip(block.iter())
                .for_each(|(d, s)| *d = *s);
        }
    }
    Ok(out)
}

pub(crate) fn unpatchify(tokens: ArrayView2<f64>, channels: usize, height: usize, width: usize, patch: usize) -> LatentGrid {
    let gw = width / patch;
    let mut out = LatentGrid::zeros(channels, height, width);
    let a = out.array_mut();
    for (i, row) in tokens.rows().into_iter().enumerate() {
        let (gy, gx) = (i / gw, i % gw);
        let mut block = a.slice_mut(s![.., gy * patch..(gy + 1) * patch, gx * patch..(gx + 1) * patch]);
        block.iter_mut().zip(row.iter()).for_each(|(d, s)| *d = *s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_tokens_are_seeded() {
        let a = TokenSeq::from_prompt("a photo of a dog", 16, 1);
        let b = TokenSeq::from_prompt("A photo of a DOG", 16, 1);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert_eq!(a.find_word("dog"), vec![4]);
        assert_eq!(a.find_word("a"), vec![0, 3]);
        // same word, different position, differs only by the position code
        assert_ne!(a.tokens().row(0), a.tokens().row(3));
        assert_ne!(a, TokenSeq::from_prompt("a photo of a dog", 16, 2));
        assert_eq!(TokenSeq::from_prompt("   ", 16, 1).len(), 1);
    }

    #[test]
    fn image_tokens_must_be_contiguous() {
        use TokenGroup::*;
        let t = Array2::zeros((4, 2));
        assert!(TokenSeq::new(t.clone(), vec![Txt, Img, Img, Subj]).is_ok());
        assert!(TokenSeq::new(t.clone(), vec![Img, Txt, Img, Subj]).is_err());
        assert!(TokenSeq::new(t, vec![Txt, Img]).is_err());
        let ok = TokenSeq::new(Array2::zeros((4, 2)), vec![Txt, Img, Img, Subj]).unwrap();
        assert_eq!(ok.image_range(), Some(1..3));
    }

    #[test]
    fn patchify_roundtrip() {
        let data: Vec<f64> = (0..3 * 4 * 6).map(|v| v as f64).collect();
        let z = LatentGrid::from_vec(3, 4, 6, data).unwrap();
        let p = patchify(&z, 2).unwrap();
        assert_eq!(p.dim(), (6, 12));
        assert_eq!(p[(0, 0)], 0.0);
        assert_eq!(p[(0, 1)], 1.0);
        assert_eq!(p[(0, 2)], 6.0);
        assert_eq!(p[(1, 0)], 2.0);
        assert!(unpatchify(p.view(), 3, 4, 6, 2).bitwise_eq(&z));
        assert!(patchify(&z, 4).is_err());
    }
}
