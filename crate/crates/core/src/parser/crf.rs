//! Linear-chain CRF numerics over a dense score lattice.
//!
//! Scores are in log space. Forbidden starts and transitions carry
//! `f64::NEG_INFINITY` and receive zero probability mass.

use crate::seqlogical::BioTag;

/// Per-position tag scores plus start and transition scores for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub n: usize,
    pub k: usize,
    /// `n * k`, row-major by position.
    pub emissions: Vec<f64>,
    pub start: Vec<f64>,
    /// `k * k`, `trans[a * k + b]` scores `a` followed by `b`.
    pub trans: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub emissions: Vec<f64>,
    pub start: Vec<f64>,
    pub trans: Vec<f64>,
}

pub fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl Lattice {
    pub fn new(n: usize, k: usize, emissions: Vec<f64>, start: Vec<f64>, trans: Vec<f64>) -> Self {
        assert!(n > 0 && k > 0);
        assert_eq!(emissions.len(), n * k);
        assert_eq!(start.len(), k);
        assert_eq!(trans.len(), k * k);
        Lattice { n, k, emissions, start, trans }
    }

    #[inline]
    pub fn em(&self, t: usize, j: usize) -> f64 {
        self.emissions[t * self.k + j]
    }

    #[inline]
    pub fn tr(&self, a: usize, b: usize) -> f64 {
        self.trans[a * self.k + b]
    }

    pub fn path_score(&self, path: &[usize]) -> f64 {
        assert_eq!(path.len(), self.n);
        let mut s = self.start[path[0]] + self.em(0, path[0]);
        for t in 1..self.n {
            s += self.tr(path[t - 1], path[t]) + self.em(t, path[t]);
        }
        s
    }

    fn forward(&self) -> Vec<f64> {
        let (n, k) = (self.n, self.k);
        let mut alpha = vec![0.0; n * k];
        for j in 0..k {
            alpha[j] = self.start[j] + self.em(0, j);
        }
        for t in 1..n {
            for b in 0..k {
                let lse = log_sum_exp((0..k).map(|a| alpha[(t - 1) * k + a] + self.tr(a, b)));
                alpha[t * k + b] = lse + self.em(t, b);
            }
        }
        alpha
    }

    fn backward(&self) -> Vec<f64> {
        let (n, k) = (self.n, self.k);
        let mut beta = vec![0.0; n * k];
        for t in (0..n - 1).rev() {
            for a in 0..k {
                beta[t * k + a] =
                    log_sum_exp((0..k).map(|b| self.tr(a, b) + self.em(t + 1, b) + beta[(t + 1) * k + b]));
            }
        }
        beta
    }

    pub fn log_partition(&self) -> f64 {
        let alpha = self.forward();
        log_sum_exp(alpha[(self.n - 1) * self.k..].iter().copied())
    }

    /// Per-position tag marginals, `n * k`.
    pub fn marginals(&self) -> Vec<f64> {
        let alpha = self.forward();
        let beta = self.backward();
        let z = log_sum_exp(alpha[(self.n - 1) * self.k..].iter().copied());
        alpha.iter().zip(&beta).map(|(a, b)| (a + b - z).exp()).collect()
    }

    /// Negative log-likelihood of `gold` and its gradient with respect to
    /// every lattice score.
    pub fn nll_and_grad(&self, gold: &[usize]) -> (f64, Gradient) {
        let (n, k) = (self.n, self.k);
        let alpha = self.forward();
        let beta = self.backward();
        let z = log_sum_exp(alpha[(n - 1) * k..].iter().copied());

        let mut emissions: Vec<f64> = alpha.iter().zip(&beta).map(|(a, b)| (a + b - z).exp()).collect();
        let mut start = emissions[..k].to_vec();
        let mut trans = vec![0.0; k * k];
        for t in 0..n - 1 {
            for a in 0..k {
                let left = alpha[t * k + a];
                if left == f64::NEG_INFINITY {
                    continue;
                }
                for b in 0..k {
                    let s = left + self.tr(a, b) + self.em(t + 1, b) + beta[(t + 1) * k + b] - z;
                    trans[a * k + b] += s.exp();
                }
            }
        }

        for (t, &g) in gold.iter().enumerate() {
            emissions[t * k + g] -= 1.0;
        }
        start[gold[0]] -= 1.0;
        for w in gold.windows(2) {
            trans[w[0] * k + w[1]] -= 1.0;
        }
        (z - self.path_score(gold), Gradient { emissions, start, trans })
    }

    /// Best path; ties go to the lowest tag index.
    pub fn viterbi(&self) -> (Vec<usize>, f64) {
        let (n, k) = (self.n, self.k);
        let mut delta = vec![f64::NEG_INFINITY; n * k];
        let mut back = vec![0usize; n * k];
        for j in 0..k {
            delta[j] = self.start[j] + self.em(0, j);
        }
        for t in 1..n {
            for b in 0..k {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for a in 0..k {
                    let s = delta[(t - 1) * k + a] + self.tr(a, b);
                    if s > best {
                        best = s;
                        arg = a;
                    }
                }
                delta[t * k + b] = best + self.em(t, b);
                back[t * k + b] = arg;
            }
        }
        let mut last = 0;
        for j in 1..k {
            if delta[(n - 1) * k + j] > delta[(n - 1) * k + last] {
                last = j;
            }
        }
        let score = delta[(n - 1) * k + last];
        let mut path = vec![last; n];
        for t in (1..n).rev() {
            path[t - 1] = back[t * k + path[t]];
        }
        (path, score)
    }
}

/// Whether `next` may follow `prev` (`None` at sentence start) under BIO.
pub fn bio_allowed(prev: Option<&BioTag>, next: &BioTag) -> bool {
    match next {
        BioTag::Inside(label) => match prev {
            Some(BioTag::Begin(p)) | Some(BioTag::Inside(p)) => p == label,
            _ => false,
        },
        _ => true,
    }
}

/// Start and transition masks: 0 where allowed, `-inf` otherwise.
pub fn bio_masks(tags: &[BioTag]) -> (Vec<f64>, Vec<f64>) {
    let mask = |ok: bool| if ok { 0.0 } else { f64::NEG_INFINITY };
    let start = tags.iter().map(|t| mask(bio_allowed(None, t))).collect();
    let trans = tags.iter().flat_map(|a| tags.iter().map(move |b| mask(bio_allowed(Some(a), b)))).collect();
    (start, trans)
}
