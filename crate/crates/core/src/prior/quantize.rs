use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Learned set of `K` code vectors of dimension `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub dim: usize,
    /// `K × n`, row-major.
    pub entries: Vec<f64>,
    /// Number of times each entry has been selected during training.
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 || entries.len() % dim != 0 {
            return Err(Error::invalid("codebook entries do not match the code dimension"));
        }
        let k = entries.len() / dim;
        Ok(Codebook {
            dim,
            entries,
            usage: vec![0; k],
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the nearest entry (squared L2, ties to the lowest index).
    pub fn nearest(&self, code: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.len() {
            let d: f64 = self.entry(k).iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    pub fn zeros_like(&self) -> Codebook {
        Codebook {
            dim: self.dim,
            entries: vec![0.0; self.entries.len()],
            usage: vec![0; self.usage.len()],
        }
    }

    /// Fraction of entries selected at least once.
    pub fn usage_fraction(&self) -> f64 {
        self.usage.iter().filter(|u| **u > 0).count() as f64 / self.len().max(1) as f64
    }
}

/// Result of replacing every spatial code by its nearest codebook entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub z: Tensor,
    pub zq: Tensor,
    pub indices: Vec<usize>,
    /// Mean of `(sg(z) − ẑ)²`.
    pub codebook_loss: f64,
    /// Mean of `(z − sg(ẑ))²`, before the commitment weight.
    pub commit_loss: f64,
}

/// Vector quantization of an `n × h × w` latent grid.
pub fn quantize(z: &Tensor, book: &Codebook) -> Result<Quantized> {
    if book.is_empty() {
        return Err(Error::InvalidState("empty codebook".into()));
    }
    if z.c != book.dim {
        return Err(Error::invalid(format!("latent has {} channels, codebook entries have {}", z.c, book.dim)));
    }
    let hw = z.h * z.w;
    let mut zq = z.clone();
    let mut indices = Vec::with_capacity(hw);
    let mut code = vec![0.0; z.c];
    let mut sq = 0.0;
    for p in 0..hw {
        for (k, c) in code.iter_mut().enumerate() {
            *c = z.data[k * hw + p];
        }
        let idx = book.nearest(&code);
        for (k, e) in book.entry(idx).iter().enumerate() {
            let d = z.data[k * hw + p] - e;
            sq += d * d;
            zq.data[k * hw + p] = *e;
        }
        indices.push(idx);
    }
    let mse = sq / z.data.len() as f64;
    Ok(Quantized {
        z: z.clone(),
        zq,
        indices,
        codebook_loss: mse,
        commit_loss: mse,
    })
}

impl Quantized {
    /// `codebook + β·commit`.
    pub fn loss(&self, beta: f64) -> f64 {
        self.codebook_loss + beta * self.commit_loss
    }

    /// Straight-through backward. `g_zq` is the upstream gradient at `ẑ`;
    /// `weight` scales the quantization losses. Returns the gradient at `z`
    /// and accumulates the codebook gradient into `book_grad`.
    pub fn backward(&self, g_zq: &Tensor, beta: f64, weight: f64, book_grad: &mut Codebook) -> Tensor {
        let mut gz = g_zq.clone();
        if weight == 0.0 {
            return gz;
        }
        let n = self.z.data.len() as f64;
        let hw = self.z.h * self.z.w;
        for (p, &idx) in self.indices.iter().enumerate() {
            for k in 0..self.z.c {
                let d = self.z.data[k * hw + p] - self.zq.data[k * hw + p];
                gz.data[k * hw + p] += weight * beta * 2.0 * d / n;
                book_grad.entries[idx * self.z.c + k] -= weight * 2.0 * d / n;
            }
        }
        gz
    }

    pub fn record_usage(&self, book: &mut Codebook) {
        for &i in &self.indices {
            book.usage[i] += 1;
        }
    }
}

/// Moves every selected entry toward the mean of the codes assigned to it:
/// `e ← decay·e + (1 − decay)·mean`.
pub fn ema_update(book: &mut Codebook, q: &Quantized, decay: f64) {
    let n = book.dim;
    let hw = q.z.h * q.z.w;
    let mut sums = vec![0.0; book.entries.len()];
    let mut counts = vec![0usize; book.len()];
    for (p, &idx) in q.indices.iter().enumerate() {
        counts[idx] += 1;
        for k in 0..n {
            sums[idx * n + k] += q.z.data[k * hw + p];
        }
    }
    for (idx, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        for k in 0..n {
            let e = &mut book.entries[idx * n + k];
            *e = decay * *e + (1.0 - decay) * sums[idx * n + k] / c as f64;
        }
    }
}
