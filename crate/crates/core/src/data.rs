//! Synthetic patch-query task.
//!
//! An image is a `G × G` grid of colour ids. Each cell becomes one visual
//! token whose features are a colour code plus a position code plus Gaussian
//! noise; the codes are fixed by the task's `world_seed`. Queries ask for the
//! colour at a cell or for the count of a colour modulo `M`. Answers are one
//! token followed by the end-of-answer token.
//!
//! Vocabulary: `0` end of answer, `1` lookup query, `2` count query, then
//! `C` colour tokens, then number tokens `0..max(G, M + 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const END_OF_ANSWER: usize = 0;
pub const QUERY_LOOKUP: usize = 1;
pub const QUERY_COUNT: usize = 2;
const FIRST_COLOR: usize = 3;

/// Number of query tokens in every prompt.
pub const QUERY_LEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    Lookup,
    CountMod,
    /// Half lookup, half count-mod.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub grid: usize,
    pub colors: usize,
    pub modulus: usize,
    pub mode: TaskMode,
    pub noise: f64,
    pub d_visual: usize,
    pub world_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            grid: 3,
            colors: 3,
            modulus: 3,
            mode: TaskMode::CountMod,
            noise: 0.1,
            d_visual: 16,
            world_seed: 7,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::TaskSpec(m.into()));
        if self.grid == 0 || self.grid > 16 {
            return bad("grid must be in 1..=16");
        }
        if self.colors < 2 || self.colors > 64 {
            return bad("colors must be in 2..=64");
        }
        if self.modulus < 2 || self.modulus > 64 {
            return bad("modulus must be in 2..=64");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) || self.d_visual == 0 {
            return bad("noise must be finite and non-negative, d_visual positive");
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.grid * self.grid
    }

    fn n_numbers(&self) -> usize {
        self.grid.max(self.modulus + 1)
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_COLOR + self.colors + self.n_numbers()
    }

    pub fn color_token(&self, c: usize) -> usize {
        FIRST_COLOR + c
    }

    pub fn number_token(&self, n: usize) -> usize {
        FIRST_COLOR + self.colors + n
    }

    /// Prompt length: visual tokens, query tokens, latency token.
    pub fn prompt_len(&self) -> usize {
        self.n_cells() + QUERY_LEN + 1
    }

    /// Length of a full teacher-forced sequence (prompt plus answer inputs).
    pub fn sequence_len(&self) -> usize {
        self.prompt_len() + 1
    }

    fn codes(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = Rng::new(self.world_seed);
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..self.d_visual).map(|_| rng.normal()).collect()).collect()
        };
        let colors = draw(self.colors);
        let cells = draw(self.n_cells());
        (colors, cells)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub grid: Vec<usize>,
    /// `n_cells × d_visual`
    pub features: Tensor<f32>,
    pub query: Vec<usize>,
    /// Gold answer including the end-of-answer token.
    pub answer: Vec<usize>,
}

impl Sample {
    /// Answer without the end-of-answer token.
    pub fn label(&self) -> &[usize] {
        &self.answer[..self.answer.len() - 1]
    }

    /// Tokens fed after the latency token under teacher forcing.
    pub fn answer_inputs(&self) -> &[usize] {
        &self.answer[..self.answer.len() - 1]
    }
}

/// FNV-1a over the grid; decides the split of a sample. Splitting by grid
/// rather than by (grid, query) keeps a model that memorizes grids from
/// scoring on the eval split.
fn content_hash(grid: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &v in grid {
        for byte in (v as u64).to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn split_of(hash: u64) -> Split {
    // High bits: the low bits of FNV-1a barely mix small inputs.
    if hash >> 61 == 0 {
        Split::Eval
    } else {
        Split::Train
    }
}

/// `n` samples of the requested split. The two splits never share a grid.
pub fn make_synthetic_dataset(spec: &TaskSpec, n: usize, seed: u64, split: Split) -> Result<Vec<Sample>> {
    spec.validate()?;
    let (color_codes, cell_codes) = spec.codes();
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 1000 * (n + 10) {
            return Err(Error::TaskSpec("task too small to draw the requested split".into()));
        }
        let grid: Vec<usize> = (0..spec.n_cells()).map(|_| rng.below(spec.colors)).collect();
        let count_query = match spec.mode {
            TaskMode::Lookup => false,
            TaskMode::CountMod => true,
            TaskMode::Mixed => rng.below(2) == 1,
        };
        let (query, label) = if count_query {
            let c = rng.below(spec.colors);
            let count = grid.iter().filter(|&&g| g == c).count();
            (
                vec![QUERY_COUNT, spec.color_token(c), spec.number_token(spec.modulus)],
                spec.number_token(count % spec.modulus),
            )
        } else {
            let (r, c) = (rng.below(spec.grid), rng.below(spec.grid));
            (
                vec![QUERY_LOOKUP, spec.number_token(r), spec.number_token(c)],
                spec.color_token(grid[r * spec.grid + c]),
            )
        };
        let hash = content_hash(&grid);
        let mut noise = rng.fork(attempts as u64);
        if split_of(hash) != split {
            continue;
        }
        let mut data = Vec::with_capacity(spec.n_cells() * spec.d_visual);
        for (cell, &color) in grid.iter().enumerate() {
            for j in 0..spec.d_visual {
                let v = color_codes[color][j] + cell_codes[cell][j] + spec.noise * noise.normal();
                data.push(v as f32);
            }
        }
        out.push(Sample {
            id: out.len() as u64,
            grid,
            features: Tensor::matrix(spec.n_cells(), spec.d_visual, data)?,
            query,
            answer: vec![label, END_OF_ANSWER],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let spec = TaskSpec::default();
        let a = make_synthetic_dataset(&spec, 50, 3, Split::Train).unwrap();
        let b = make_synthetic_dataset(&spec, 50, 3, Split::Train).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_dataset(&spec, 50, 4, Split::Train).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn splits_are_disjoint() {
        let spec = TaskSpec {
            mode: TaskMode::Mixed,
            ..TaskSpec::default()
        };
        let train = make_synthetic_dataset(&spec, 2000, 1, Split::Train).unwrap();
        let eval = make_synthetic_dataset(&spec, 500, 1, Split::Eval).unwrap();
        let seen: std::collections::HashSet<_> = train.iter().map(|s| s.grid.clone()).collect();
        assert!(eval.iter().all(|s| !seen.contains(&s.grid)));
    }

    #[test]
    fn answers_are_correct_and_tokens_in_vocab() {
        let spec = TaskSpec {
            mode: TaskMode::Mixed,
            ..TaskSpec::default()
        };
        for s in make_synthetic_dataset(&spec, 300, 2, Split::Train).unwrap() {
            assert_eq!(s.answer.len(), 2);
            assert_eq!(s.answer[1], END_OF_ANSWER);
            assert!(s.query.iter().chain(&s.answer).all(|&t| t < spec.vocab_size()));
            assert_eq!(s.query.len(), QUERY_LEN);
            if s.query[0] == QUERY_COUNT {
                let c = s.query[1] - spec.color_token(0);
                let n = s.grid.iter().filter(|&&g| g == c).count();
                assert_eq!(s.answer[0], spec.number_token(n % spec.modulus));
            } else {
                let r = s.query[1] - spec.number_token(0);
                let c = s.query[2] - spec.number_token(0);
                assert_eq!(s.answer[0], spec.color_token(s.grid[r * spec.grid + c]));
            }
        }
    }

    #[test]
    fn lookup_labels_are_uniform_over_colors() {
        let spec = TaskSpec {
            mode: TaskMode::Lookup,
            ..TaskSpec::default()
        };
        let data = make_synthetic_dataset(&spec, 10_000, 5, Split::Train).unwrap();
        let mut counts = vec![0f64; spec.colors];
        for s in &data {
            counts[s.answer[0] - spec.color_token(0)] += 1.0;
        }
        let expected = data.len() as f64 / spec.colors as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 2 degrees of freedom.
        assert!(chi2 < 9.21, "{chi2}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let spec = TaskSpec {
            colors: 1,
            ..TaskSpec::default()
        };
        assert!(make_synthetic_dataset(&spec, 1, 0, Split::Train).is_err());
    }
}
