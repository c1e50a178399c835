//! Named trainable parameters, Adam state, initialization and the `CKP1` checkpoint format.

use std::io::{Read, Write};

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Array4, Shape4};

const CKP1_MAGIC: &[u8; 4] = b"CKP1";

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    value: Array4,
    m: Vec<f32>,
    v: Vec<f32>,
    step: u64,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Array4 {
        &self.value
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f32], &[f32]) {
        (&self.m, &self.v)
    }
}

/// Ordered collection of named parameters. Iteration order is insertion order,
/// which fixes the checkpoint byte layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: IndexMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array4) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        let n = value.len();
        self.params.push(Param {
            name: name.clone(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        self.index.insert(name, id);
        Ok(ParamId(id))
    }

    /// Kernel drawn from `U(−√(6/fan_in), √(6/fan_in))`, which keeps activation scale
    /// roughly constant through leaky-rectified layers.
    pub fn add_kernel(&mut self, name: impl Into<String>, shape: Shape4, rng: &mut impl Rng) -> Result<ParamId> {
        let fan_in = (shape.c * shape.h * shape.w).max(1);
        let bound = (6.0 / fan_in as f32).sqrt();
        let value = Array4::from_fn(shape, |_, _, _, _| rng.gen_range(-bound..bound));
        self.add(name, value)
    }

    /// Vector parameter (stored as `1×1×1×len`).
    pub fn add_vector(&mut self, name: impl Into<String>, len: usize, fill: f32) -> Result<ParamId> {
        self.add(name, Array4::full(Shape4::new(1, 1, 1, len), fill))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array4 {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array4 {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Add `grad` into the parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f32]) -> Result<()> {
        let p = &mut self.params[id.0];
        match p.value.take_grad() {
            Some(mut g) => {
                if g.len() != grad.len() {
                    return Err(Error::dim("ParamStore::accumulate_grad", format!("gradient length mismatch for `{}`", p.name)));
                }
                g.iter_mut().zip(grad).for_each(|(a, b)| *a += b);
                p.value.set_grad(g)
            }
            None => p.value.set_grad(grad.to_vec()),
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.take_grad();
        }
    }

    /// Global L2 norm over all populated gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.value.grad())
            .flat_map(|g| g.iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale all gradients so their global norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = (max_norm / norm) as f32;
            for p in &mut self.params {
                if let Some(mut g) = p.value.take_grad() {
                    g.iter_mut().for_each(|v| *v *= scale);
                    p.value.set_grad(g).expect("same length");
                }
            }
        }
        norm
    }

    /// One Adam step (β₁ = 0.9, β₂ = 0.999, ε = 10⁻⁸) on every parameter, then clear gradients.
    ///
    /// Every parameter must carry a gradient; a missing one is a contract error
    /// and leaves the store untouched.
    pub fn adam_step(&mut self, learning_rate: f64) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.value.grad().is_none()) {
            return Err(Error::Contract(format!("parameter `{}` has no gradient", p.name)));
        }
        for p in &mut self.params {
            let g = p.value.take_grad().expect("checked above");
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let gi = g[i] as f64;
                let m = ADAM_BETA1 * p.m[i] as f64 + (1.0 - ADAM_BETA1) * gi;
                let v = ADAM_BETA2 * p.v[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
                p.m[i] = m as f32;
                p.v[i] = v as f32;
                let update = learning_rate * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
                values[i] = (values[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }

    /// Serialize as `CKP1`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CKP1_MAGIC)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name `{}` too long", p.name)))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name)?;
            let dims = p.value.shape().dims();
            let lead = dims.iter().take(3).take_while(|&&d| d == 1).count();
            w.write_all(&[(4 - lead) as u8])?;
            for &d in &dims[lead..] {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&p.value.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + self.num_values() * 4);
        self.write_checkpoint(&mut buf).expect("writing to Vec cannot fail");
        buf
    }

    /// Parse a `CKP1` stream into `(name, tensor)` pairs in file order.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Array4)>> {
        let truncated = |what: &str| Error::Format(format!("CKP1: truncated {what}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
        if &magic != CKP1_MAGIC {
            return Err(Error::Format(format!("CKP1: bad magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| truncated("count"))?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2).map_err(|_| truncated("name length"))?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name).map_err(|_| truncated("name"))?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("CKP1: name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank).map_err(|_| truncated("rank"))?;
            let rank = rank[0] as usize;
            if !(1..=4).contains(&rank) {
                return Err(Error::Format(format!("CKP1: `{name}` has unsupported rank {rank}")));
            }
            let mut dims = [1usize; 4];
            for i in 0..rank {
                r.read_exact(&mut b4).map_err(|_| truncated("dims"))?;
                dims[4 - rank + i] = u32::from_le_bytes(b4) as usize;
            }
            let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
            let mut bytes = vec![0u8; shape.len() * 4];
            r.read_exact(&mut bytes).map_err(|_| truncated("data"))?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            out.push((name, Array4::from_vec(shape, data)?));
        }
        Ok(out)
    }

    /// Copy every checkpoint entry whose name exists here. Returns the names that were
    /// ignored because this store has no such parameter. A shape conflict on a shared
    /// name is a contract error and nothing is copied.
    pub fn load_matching(&mut self, entries: &[(String, Array4)]) -> Result<Vec<String>> {
        let mut extras = Vec::new();
        for (name, value) in entries {
            if let Some(&i) = self.index.get(name) {
                if self.params[i].value.shape() != value.shape() {
                    return Err(Error::Contract(format!(
                        "parameter `{name}` has shape {} but checkpoint holds {}",
                        self.params[i].value.shape(),
                        value.shape()
                    )));
                }
            } else {
                extras.push(name.clone());
            }
        }
        for (name, value) in entries {
            if let Some(&i) = self.index.get(name) {
                self.params[i].value.data_mut().copy_from_slice(value.data());
            }
        }
        Ok(extras)
    }

    /// Names present here but absent from `entries`.
    pub fn missing_from(&self, entries: &[(String, Array4)]) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| !entries.iter().any(|(n, _)| n == &p.name))
            .map(|p| p.name.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add_vector("a", 2, 0.0).unwrap();
        assert!(matches!(s.add_vector("a", 2, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_zero_grad_keeps_parameter() {
        let mut s = ParamStore::new();
        let id = s.add_vector("w", 3, 0.5).unwrap();
        s.accumulate_grad(id, &[0.0; 3]).unwrap();
        s.adam_step(1e-2).unwrap();
        assert_eq!(s.value(id).data(), &[0.5; 3]);
        assert_eq!(s.param(id).step(), 1);
        assert!(s.value(id).grad().is_none());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut s = ParamStore::new();
        let id = s.add_vector("w", 3, 1.0).unwrap();
        s.accumulate_grad(id, &[2.5, -0.01, 40.0]).unwrap();
        let lr = 1e-3;
        s.adam_step(lr).unwrap();
        // closed form: m̂ = g, v̂ = g², update = lr·g/(|g| + ε)
        for (v, g) in s.value(id).data().iter().zip([2.5f64, -0.01, 40.0]) {
            let expect = 1.0 - lr * g / (g.abs() + ADAM_EPS);
            assert!((*v as f64 - expect).abs() < 1e-7, "{v} vs {expect}");
        }
    }

    /// Scalar Adam run side by side with an independent f64 implementation.
    #[test]
    fn adam_matches_scalar_oracle() {
        let grads = [0.3, 0.3, -0.1, 0.05, 0.3];
        let lr = 0.01;
        let (mut p, mut m, mut v) = (0.2f64, 0.0f64, 0.0f64);
        let mut s = ParamStore::new();
        let id = s.add_vector("w", 1, 0.2).unwrap();
        let mut steps = Vec::new();
        for (t, &g) in grads.iter().enumerate() {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            let before = p;
            p -= lr * mh / (vh.sqrt() + 1e-8);
            steps.push((before - p).abs());
            s.accumulate_grad(id, &[g as f32]).unwrap();
            s.adam_step(lr).unwrap();
            assert!((s.value(id).data()[0] as f64 - p).abs() < 1e-6);
        }
        // two identical gradients: bias correction keeps the second step at lr as well
        assert!((steps[0] - lr).abs() < 1e-9 && (steps[1] - lr).abs() < 1e-9);
        // a sign flip is damped by the first moment
        assert!(steps[2] < lr);
    }

    #[test]
    fn adam_requires_all_grads() {
        let mut s = ParamStore::new();
        let a = s.add_vector("a", 1, 0.0).unwrap();
        s.add_vector("needs_grad", 1, 0.0).unwrap();
        s.accumulate_grad(a, &[1.0]).unwrap();
        let err = s.adam_step(0.1).unwrap_err();
        assert!(err.to_string().contains("needs_grad"));
        assert_eq!(s.value(a).data(), &[0.0]);
    }

    #[test]
    fn checkpoint_roundtrip_and_warm_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::new();
        s.add_kernel("conv.w", Shape4::new(4, 3, 3, 3), &mut rng).unwrap();
        s.add_vector("conv.b", 4, 0.0).unwrap();
        s.add_kernel("one", Shape4::new(1, 1, 1, 1), &mut rng).unwrap();
        let bytes = s.checkpoint_bytes();
        let entries = ParamStore::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[1].1.shape(), Shape4::new(1, 1, 1, 4));

        let mut t = ParamStore::new();
        t.add_kernel("conv.w", Shape4::new(4, 3, 3, 3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        t.add_vector("conv.b", 4, 1.0).unwrap();
        t.add_kernel("one", Shape4::new(1, 1, 1, 1), &mut rng).unwrap();
        t.load_matching(&entries).unwrap();
        assert_eq!(t.checkpoint_bytes(), bytes);
    }

    #[test]
    fn checkpoint_errors() {
        assert!(matches!(ParamStore::read_checkpoint(&b"CKP2"[..]), Err(Error::Format(_))));
        let mut s = ParamStore::new();
        s.add_vector("a", 8, 1.0).unwrap();
        let bytes = s.checkpoint_bytes();
        assert!(matches!(ParamStore::read_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));

        let mut t = ParamStore::new();
        t.add_vector("a", 4, 1.0).unwrap();
        let entries = ParamStore::read_checkpoint(&bytes[..]).unwrap();
        assert!(matches!(t.load_matching(&entries), Err(Error::Contract(_))));
    }
}
