//! Exact entropies over small joint tables, used to check the conditional-coding
//! bounds and the residual-coding identities by enumeration.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_ALPHABET: usize = 16;
const NORMALIZATION_TOL: f64 = 1e-12;

/// Joint probability table over named discrete variables, row-major in variable order.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPmf {
    names: Vec<String>,
    sizes: Vec<usize>,
    probs: Vec<f64>,
}

impl JointPmf {
    pub fn new(names: &[&str], sizes: &[usize], probs: Vec<f64>) -> Result<Self> {
        if names.len() != sizes.len() || names.is_empty() {
            return Err(Error::Contract("one alphabet size per variable".into()));
        }
        if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > MAX_ALPHABET) {
            return Err(Error::Contract(format!("alphabet size {s} outside 1..={MAX_ALPHABET}")));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::Contract(format!("variable `{a}` named twice")));
            }
        }
        let len: usize = sizes.iter().product();
        if probs.len() != len {
            return Err(Error::Contract(format!("table has {} entries, alphabets need {len}", probs.len())));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Contract("probabilities must be non-negative".into()));
        }
        let total = sorted_sum(probs.clone());
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Contract(format!("probabilities sum to {total}")));
        }
        Ok(JointPmf {
            names: names.iter().map(|s| s.to_string()).collect(),
            sizes: sizes.to_vec(),
            probs,
        })
    }

    /// Random table: independent uniform weights, a random subset zeroed, normalized.
    pub fn random(names: &[&str], sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let len: usize = sizes.iter().product();
        let sparsity = rng.gen_range(0.0..0.5);
        let mut w: Vec<f64> = (0..len)
            .map(|_| if rng.gen_bool(sparsity) { 0.0 } else { rng.gen::<f64>() })
            .collect();
        if w.iter().all(|&v| v == 0.0) {
            w[rng.gen_range(0..len)] = 1.0;
        }
        let total = sorted_sum(w.clone());
        w.iter_mut().for_each(|v| *v /= total);
        let s = sorted_sum(w.clone());
        // push the rounding residue onto the largest entry
        let imax = (0..len).max_by(|&a, &b| w[a].total_cmp(&w[b])).expect("non-empty");
        w[imax] += 1.0 - s;
        Self::new(names, sizes, w)
    }

    /// Table of a deterministic extension: adds variable `name = f(source)` with alphabet `size`.
    pub fn with_function(&self, name: &str, size: usize, source: &[&str], f: impl Fn(&[usize]) -> usize) -> Result<Self> {
        let src = self.indices(source)?;
        let mut names: Vec<&str> = self.names.iter().map(String::as_str).collect();
        names.push(name);
        let mut sizes = self.sizes.clone();
        sizes.push(size);
        let mut probs = vec![0.0; self.probs.len() * size];
        let mut idx = vec![0usize; self.sizes.len()];
        let mut picked = vec![0usize; src.len()];
        for (flat, &p) in self.probs.iter().enumerate() {
            self.unravel(flat, &mut idx);
            for (k, &v) in src.iter().enumerate() {
                picked[k] = idx[v];
            }
            let value = f(&picked);
            if value >= size {
                return Err(Error::Contract(format!("function value {value} outside alphabet of `{name}`")));
            }
            probs[flat * size + value] += p;
        }
        Self::new(&names, &sizes, probs)
    }

    fn unravel(&self, mut flat: usize, out: &mut [usize]) {
        for v in (0..self.sizes.len()).rev() {
            out[v] = flat % self.sizes[v];
            flat /= self.sizes[v];
        }
    }

    fn indices(&self, vars: &[&str]) -> Result<Vec<usize>> {
        vars.iter()
            .map(|v| {
                self.names
                    .iter()
                    .position(|n| n == v)
                    .ok_or_else(|| Error::Contract(format!("unknown variable `{v}`")))
            })
            .collect()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Marginal table over `vars` (in the order given).
    pub fn marginal(&self, vars: &[&str]) -> Result<Vec<f64>> {
        let ids = self.indices(vars)?;
        let len: usize = ids.iter().map(|&i| self.sizes[i]).product();
        let mut terms: Vec<Vec<f64>> = vec![Vec::new(); len];
        let mut idx = vec![0usize; self.sizes.len()];
        for (flat, &p) in self.probs.iter().enumerate() {
            self.unravel(flat, &mut idx);
            let m = ids.iter().fold(0, |acc, &i| acc * self.sizes[i] + idx[i]);
            terms[m].push(p);
        }
        Ok(terms.into_iter().map(sorted_sum).collect())
    }

    /// Shannon entropy in bits of the marginal over `vars`; `0·log 0 = 0`.
    pub fn entropy(&self, vars: &[&str]) -> Result<f64> {
        if vars.is_empty() {
            return Ok(0.0);
        }
        let m = self.marginal(vars)?;
        Ok(sorted_sum(m.into_iter().filter(|&p| p > 0.0).map(|p| -p * p.log2()).collect()))
    }

    fn check_disjoint(a: &[&str], b: &[&str]) -> Result<()> {
        if let Some(v) = a.iter().find(|v| b.contains(v)) {
            return Err(Error::Contract(format!("variable `{v}` appears on both sides")));
        }
        Ok(())
    }

    pub fn conditional_entropy(&self, target: &[&str], given: &[&str]) -> Result<f64> {
        Self::check_disjoint(target, given)?;
        let joint: Vec<&str> = target.iter().chain(given).copied().collect();
        Ok(self.entropy(&joint)? - self.entropy(given)?)
    }

    /// `I(a; b)`, clipped to 0 when rounding leaves it within −10⁻¹⁰.
    pub fn mutual_information(&self, a: &[&str], b: &[&str]) -> Result<f64> {
        Self::check_disjoint(a, b)?;
        let joint: Vec<&str> = a.iter().chain(b).copied().collect();
        let i = self.entropy(a)? + self.entropy(b)? - self.entropy(&joint)?;
        Ok(if i < 0.0 && i >= -1e-10 { 0.0 } else { i })
    }
}

/// Sum in ascending magnitude order.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    v.into_iter().sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionalBounds {
    pub h_b: f64,
    pub h_c: f64,
    pub h_t: f64,
    pub h_c_given_t: f64,
    pub h_t_given_c: f64,
    pub i_c_t: f64,
    /// `H(Y_b) + H(Y_c|Y_t) − H(Y_c)`.
    pub lower_slack: f64,
    /// `H(Y_b) + H(Y_c) − (H(Y_b) + H(Y_c|Y_t))`.
    pub upper_slack: f64,
    /// `H(Y_b) − H(Y_t)`.
    pub processing_slack: f64,
    /// `lower_slack − (H(Y_t|Y_c) + H(Y_b) − H(Y_t))`; zero up to rounding.
    pub decomposition_residual: f64,
    /// `H(Y_b) − I(Y_c; Y_t)`; zero when the lower bound is tight.
    pub lower_tightness: f64,
}

impl ConditionalBounds {
    pub fn min_slack(&self) -> f64 {
        self.lower_slack.min(self.upper_slack).min(self.processing_slack)
    }
}

/// Bounds for a table over `Y_b, Y_c` with side information `Y_t = t[Y_b]`.
pub fn check_conditional_bounds(pmf: &JointPmf, t: &[usize]) -> Result<ConditionalBounds> {
    if pmf.sizes().len() != 2 || t.len() != pmf.sizes()[0] {
        return Err(Error::Contract("need a table over (Y_b, Y_c) and one map entry per Y_b symbol".into()));
    }
    let t_size = t.iter().max().map_or(1, |&m| m + 1);
    let full = JointPmf::new(&["b", "c"], pmf.sizes(), pmf.probs.clone())?
        .with_function("t", t_size, &["b"], |v| t[v[0]])?;
    let h_b = full.entropy(&["b"])?;
    let h_c = full.entropy(&["c"])?;
    let h_t = full.entropy(&["t"])?;
    let h_c_given_t = full.conditional_entropy(&["c"], &["t"])?;
    let h_t_given_c = full.conditional_entropy(&["t"], &["c"])?;
    let i_c_t = full.mutual_information(&["c"], &["t"])?;
    let lower_slack = h_b + h_c_given_t - h_c;
    Ok(ConditionalBounds {
        h_b,
        h_c,
        h_t,
        h_c_given_t,
        h_t_given_c,
        i_c_t,
        lower_slack,
        upper_slack: h_c - h_c_given_t,
        processing_slack: h_b - h_t,
        decomposition_residual: lower_slack - (h_t_given_c + h_b - h_t),
        lower_tightness: h_b - i_c_t,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualArithmetic {
    /// `X_r = (X − X_p) mod m`; both alphabets must have size `m`.
    Modular(usize),
    /// `X_r = X − X_p` over the integers, stored with an offset.
    Integer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualIdentities {
    pub h_x: f64,
    pub h_r: f64,
    pub h_x_given_p: f64,
    pub h_r_given_p: f64,
    /// `I(X_p; X_r)`, the residual penalty.
    pub i_p_r: f64,
    /// `max |H(X|X_p) − H(X_r|X_p)|, |H(X_r|X_p) − (H(X_r) − I(X_p;X_r))|`.
    pub identity_error: f64,
    /// `H(X_r) − H(X|X_p)`.
    pub bound_slack: f64,
}

/// Identities for a table over `X, X_p` with `X_r = X − X_p`.
pub fn check_residual_identities(pmf: &JointPmf, arithmetic: ResidualArithmetic) -> Result<ResidualIdentities> {
    if pmf.sizes().len() != 2 {
        return Err(Error::Contract("need a table over (X, X_p)".into()));
    }
    let (nx, np) = (pmf.sizes()[0], pmf.sizes()[1]);
    let base = JointPmf::new(&["x", "p"], pmf.sizes(), pmf.probs.clone())?;
    let full = match arithmetic {
        ResidualArithmetic::Modular(m) => {
            if nx != m || np != m {
                return Err(Error::Contract(format!("modular residual needs both alphabets of size {m}")));
            }
            base.with_function("r", m, &["x", "p"], |v| (v[0] + m - v[1]) % m)?
        }
        ResidualArithmetic::Integer => {
            let size = nx + np - 1;
            if size > MAX_ALPHABET {
                return Err(Error::Contract(format!("integer residual alphabet {size} exceeds {MAX_ALPHABET}")));
            }
            base.with_function("r", size, &["x", "p"], |v| v[0] + np - 1 - v[1])?
        }
    };
    let h_x = full.entropy(&["x"])?;
    let h_r = full.entropy(&["r"])?;
    let h_x_given_p = full.conditional_entropy(&["x"], &["p"])?;
    let h_r_given_p = full.conditional_entropy(&["r"], &["p"])?;
    let i_p_r = full.mutual_information(&["p"], &["r"])?;
    let identity_error = (h_x_given_p - h_r_given_p)
        .abs()
        .max((h_r_given_p - (h_r - i_p_r)).abs());
    Ok(ResidualIdentities {
        h_x,
        h_r,
        h_x_given_p,
        h_r_given_p,
        i_p_r,
        identity_error,
        bound_slack: h_r - h_x_given_p,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundsRow {
    pub instance: usize,
    pub conditional: ConditionalBounds,
    pub residual: ResidualIdentities,
}

/// One random conditional instance and one random residual instance per row.
/// Residual instances alternate between modular and integer arithmetic.
pub fn run_bounds_lab(instances: usize, seed: u64) -> Result<Vec<BoundsRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .map(|instance| {
            let (nb, nc) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
            let pmf = JointPmf::random(&["b", "c"], &[nb, nc], &mut rng)?;
            let nt = rng.gen_range(1..=nb);
            let t: Vec<usize> = (0..nb).map(|_| rng.gen_range(0..nt)).collect();
            let conditional = check_conditional_bounds(&pmf, &t)?;
            let residual = if instance % 2 == 0 {
                let m = rng.gen_range(2..=8);
                let pmf = JointPmf::random(&["x", "p"], &[m, m], &mut rng)?;
                check_residual_identities(&pmf, ResidualArithmetic::Modular(m))?
            } else {
                let (nx, np) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
                let pmf = JointPmf::random(&["x", "p"], &[nx, np], &mut rng)?;
                check_residual_identities(&pmf, ResidualArithmetic::Integer)?
            };
            Ok(BoundsRow {
                instance,
                conditional,
                residual,
            })
        })
        .collect()
}

pub const BOUNDS_CSV_HEADER: &str = "instance,h_b,h_c,h_t,h_c_given_t,h_t_given_c,i_c_t,lower_slack,upper_slack,processing_slack,decomposition_residual,h_x,h_r,h_x_given_p,h_r_given_p,i_p_r,residual_slack,identity_error";

pub fn bounds_csv(rows: &[BoundsRow]) -> String {
    let mut s = String::from(BOUNDS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let c = &r.conditional;
        let e = &r.residual;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.instance,
            c.h_b,
            c.h_c,
            c.h_t,
            c.h_c_given_t,
            c.h_t_given_c,
            c.i_c_t,
            c.lower_slack,
            c.upper_slack,
            c.processing_slack,
            c.decomposition_residual,
            e.h_x,
            e.h_r,
            e.h_x_given_p,
            e.h_r_given_p,
            e.i_p_r,
            e.bound_slack,
            e.identity_error
        );
    }
    s
}
