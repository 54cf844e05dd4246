//! Parameter storage and the handful of layers both networks are built from.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor, Var, D};
use rand::Rng as _;

use crate::datamodel::NamedTensor;
use crate::error::{LocError, Result};
use crate::lora::{injected_projection, LayerDelta, Slot};
use crate::rng::{normal_vec, Rng};

/// Named trainable tensors, kept in name order.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_named(tensors: &[NamedTensor], device: &Device) -> Result<Self> {
        let mut store = Self::new();
        for t in tensors {
            if store.params.contains_key(&t.name) {
                return Err(LocError::DuplicateName(t.name.clone()));
            }
            let v = Var::from_slice(&t.data, t.shape.as_slice(), device)?;
            store.params.insert(t.name.clone(), v);
        }
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn to_named(&self) -> Result<Vec<NamedTensor>> {
        self.params
            .iter()
            .map(|(name, v)| {
                NamedTensor::new(
                    name.clone(),
                    v.dims().to_vec(),
                    v.flatten_all()?.to_vec1::<f32>()?,
                )
            })
            .collect()
    }

    /// Overwrites the value of every stored parameter from `tensors`, in place.
    /// Every parameter must be present with a matching shape.
    pub fn load_named(&self, tensors: &[NamedTensor]) -> Result<()> {
        let by_name: BTreeMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (name, var) in &self.params {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| LocError::Manifest(format!("missing parameter `{name}`")))?;
            if t.shape != var.dims() {
                return Err(LocError::Shape(format!(
                    "parameter `{name}`: stored {:?}, checkpoint {:?}",
                    var.dims(),
                    t.shape
                )));
            }
            var.set(&Tensor::from_slice(&t.data, t.shape.as_slice(), var.device())?)?;
        }
        Ok(())
    }

    /// Independent copy of every value.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (name, v) in &self.params {
            params.insert(name.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self { params })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f32),
    /// Uniform in `[-bound, bound]`.
    Uniform(f32),
}

/// Hands out parameters by dotted name, creating missing ones from `init`.
///
/// A builder without an RNG only resolves existing entries, which is how models
/// are rebuilt from checkpoints. A frozen builder returns detached tensors, so
/// nothing downstream of them is tracked for gradients.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: Option<&'a mut Rng>,
    prefix: String,
    frozen: bool,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: Option<&'a mut Rng>, frozen: bool) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            frozen,
        }
    }

    pub fn pp(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: &mut *self.store,
            rng: self.rng.as_deref_mut(),
            prefix,
            frozen: self.frozen,
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let var = match self.store.params.get(&full) {
            Some(v) => {
                if v.dims() != shape {
                    return Err(LocError::Shape(format!(
                        "parameter `{full}` is {:?}, model expects {shape:?}",
                        v.dims()
                    )));
                }
                v.clone()
            }
            None => {
                let rng = self.rng.as_deref_mut().ok_or_else(|| {
                    LocError::Manifest(format!("missing parameter `{full}`"))
                })?;
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal(std) => normal_vec(rng, n).into_iter().map(|v| v * std).collect(),
                    Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-b..=b)).collect(),
                };
                let v = Var::from_vec(data, shape, &Device::Cpu)?;
                self.store.params.insert(full, v.clone());
                v
            }
        };
        Ok(if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }
}

/// `x·w` over the last axis of `x`, for `w` of shape `in×out`.
pub fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    let inner = *dims.last().ok_or_else(|| LocError::Shape("scalar input".into()))?;
    let (win, wout) = w.dims2()?;
    if inner != win {
        return Err(LocError::Shape(format!(
            "input width {inner} does not match weight {win}x{wout}"
        )));
    }
    let lead: usize = dims[..dims.len() - 1].iter().product();
    let mut out_dims = dims.to_vec();
    *out_dims.last_mut().unwrap() = wout;
    Ok(x.reshape((lead, inner))?.matmul(w)?.reshape(out_dims)?)
}

pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, inp: usize, out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (inp as f32).sqrt();
        let w = pb.tensor("w", &[inp, out], Init::Uniform(bound))?;
        let b = if bias {
            Some(pb.tensor("b", &[out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn from_parts(w: Tensor, b: Option<Tensor>) -> Self {
        Self { w, b }
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul_last(x, &self.w)?;
        Ok(match &self.b {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: pb.tensor("g", &[dim], Init::Ones)?,
            bias: pb.tensor("b", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Scaled dot-product attention over `heads` heads; inputs are `B×N×d`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, nq, d) = q.dims3()?;
    let nk = k.dim(1)?;
    if d % heads != 0 {
        return Err(LocError::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |t: &Tensor, n: usize| -> Result<Tensor> {
        Ok(t.reshape((b, n, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let (q, k, v) = (split(q, nq)?, split(k, nk)?, split(v, nk)?);
    let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
    let out = softmax_last(&scores)?.matmul(&v)?;
    Ok(out.transpose(1, 2)?.reshape((b, nq, d))?)
}

/// Multi-head attention with bias-free square projections; every projection can
/// carry a LoRA delta.
pub struct Attention {
    proj: [Tensor; 4],
    heads: usize,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        let bound = 1.0 / (dim as f32).sqrt();
        let mut p = |n: &str| pb.tensor(n, &[dim, dim], Init::Uniform(bound));
        Ok(Self {
            proj: [p("q")?, p("k")?, p("v")?, p("o")?],
            heads,
        })
    }

    pub fn weight(&self, slot: Slot) -> &Tensor {
        &self.proj[slot.index()]
    }

    /// Attends from `x` to `context` (self-attention when `context` is `x`).
    pub fn forward(
        &self,
        x: &Tensor,
        context: &Tensor,
        delta: Option<&LayerDelta>,
    ) -> Result<Tensor> {
        let p = |t: &Tensor, s: Slot| injected_projection(t, &self.proj[s.index()], delta, s);
        let q = p(x, Slot::Query)?;
        let k = p(context, Slot::Key)?;
        let v = p(context, Slot::Value)?;
        let h = attention(&q, &k, &v, self.heads)?;
        p(&h, Slot::Output)
    }
}

pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, dim: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&mut pb.pp("up"), dim, dim * mult, true)?,
            down: Linear::new(&mut pb.pp("down"), dim * mult, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu()?)
    }
}

/// Sinusoidal embedding of integer timesteps, `B×dim`.
pub fn timestep_embedding(ts: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos() as f32);
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin() as f32);
        }
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?)
}

/// `B×H×W×C` grid to `B×(H/p·W/p)×(p·p·C)` non-overlapping patches, row-major.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % p != 0 || w % p != 0 {
        return Err(LocError::Shape(format!("{h}x{w} grid is not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    Ok(x.reshape(vec![b, gh, p, gw, p, c])?
        .permute(vec![0, 1, 3, 2, 4, 5])?
        .contiguous()?
        .reshape((b, gh * gw, p * p * c))?)
}

/// Inverse of [`patchify`] for a square `grid×grid` layout.
pub fn unpatchify(x: &Tensor, grid: usize, p: usize) -> Result<Tensor> {
    let (b, n, f) = x.dims3()?;
    if n != grid * grid || f % (p * p) != 0 {
        return Err(LocError::Shape(format!(
            "{n} tokens of width {f} do not form a {grid}x{grid} grid of {p}x{p} patches"
        )));
    }
    let c = f / (p * p);
    Ok(x.reshape(vec![b, grid, grid, p, p, c])?
        .permute(vec![0, 1, 3, 2, 4, 5])?
        .contiguous()?
        .reshape((b, grid * p, grid * p, c))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn builder_is_seeded_and_reuses_existing() {
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        let (mut r1, mut r2) = (substream(1, "p"), substream(1, "p"));
        let a = ParamBuilder::new(&mut s1, Some(&mut r1), false)
            .pp("x")
            .tensor("w", &[3, 2], Init::Normal(1.0))
            .unwrap();
        let b = ParamBuilder::new(&mut s2, Some(&mut r2), false)
            .pp("x")
            .tensor("w", &[3, 2], Init::Normal(1.0))
            .unwrap();
        assert_eq!(a.to_vec2::<f32>().unwrap(), b.to_vec2::<f32>().unwrap());
        assert!(s1.get("x.w").is_some());
        let again = ParamBuilder::new(&mut s1, None, false)
            .pp("x")
            .tensor("w", &[3, 2], Init::Zeros)
            .unwrap();
        assert_eq!(again.to_vec2::<f32>().unwrap(), a.to_vec2::<f32>().unwrap());
        assert!(ParamBuilder::new(&mut s1, None, false).tensor("missing", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn patchify_round_trip_and_layout() {
        let x = Tensor::arange(0f32, 2.0 * 4.0 * 4.0 * 3.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 4, 4, 3))
            .unwrap();
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.dims(), &[2, 4, 12]);
        // second patch of the first image starts at pixel (0, 2)
        let first = p.get(0).unwrap().get(1).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(&first[..3], &[6.0, 7.0, 8.0]);
        let back = unpatchify(&p, 2, 2).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f32, 2.0, 3.0], [1000.0, 1000.0, 1000.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = substream(3, "ln");
        let ln = LayerNorm::new(&mut ParamBuilder::new(&mut store, Some(&mut rng), false), 5).unwrap();
        let xv = normal_vec(&mut rng, 10);
        let wv = normal_vec(&mut rng, 10);
        let w = Tensor::from_vec(wv.clone(), (2, 5), &Device::Cpu).unwrap();
        let f = |v: &[f32]| -> f64 {
            let x = Tensor::from_slice(v, (2, 5), &Device::Cpu).unwrap();
            let y = ln.forward(&x).unwrap().gelu().unwrap();
            f64::from((y * &w).unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap())
        };
        let x = Var::from_slice(&xv, (2, 5), &Device::Cpu).unwrap();
        let y = ln.forward(x.as_tensor()).unwrap().gelu().unwrap();
        let g = (y * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let grad = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for i in 0..10 {
            let (mut p, mut m) = (xv.clone(), xv.clone());
            p[i] += 1e-2;
            m[i] -= 1e-2;
            let fd = (f(&p) - f(&m)) / 2e-2;
            assert!((fd - f64::from(grad[i])).abs() < 2e-2, "{i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn attention_over_single_key_returns_value() {
        let v = Tensor::new(&[[[0.5f32, -1.0, 2.0, 3.0]]], &Device::Cpu).unwrap();
        let q = Tensor::ones((1, 3, 4), candle_core::DType::F32, &Device::Cpu).unwrap();
        let out = attention(&q, &v, &v, 2).unwrap();
        for row in out.squeeze(0).unwrap().to_vec2::<f32>().unwrap() {
            assert_eq!(row, vec![0.5, -1.0, 2.0, 3.0]);
        }
    }
}
