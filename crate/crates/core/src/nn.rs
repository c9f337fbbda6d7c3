//! Feed-forward networks with exact reverse-mode gradients.
//!
//! Parameters live in one flat vector. Layer `i` contributes its weight
//! matrix (`out × in`, row-major) followed by its bias (`out`). Hidden layers
//! use ReLU, the output layer is linear. The ReLU derivative at exactly zero
//! is taken to be zero.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 5] = b"CTNN1";

/// `x̃ = (x, cos(2πt/T), sin(2πt/T))`.
pub fn time_embed(t: f64, x: &[f64], horizon: f64) -> Result<Vec<f64>> {
    let tol = 1e-9 * horizon.abs().max(1.0);
    if t < -tol || t > horizon + tol {
        return Err(Error::InvalidArgument(format!("t={t} outside [0, {horizon}]")));
    }
    let mut out = Vec::with_capacity(x.len() + 2);
    out.extend_from_slice(x);
    out.extend(time_features(t, horizon));
    Ok(out)
}

/// The two sinusoidal time features, without range checking.
pub fn time_features(t: f64, horizon: f64) -> [f64; 2] {
    let phase = 2.0 * PI * t / horizon;
    [phase.cos(), phase.sin()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpNet {
    sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations saved by [`MlpNet::forward_batch`]; index 0 is the input.
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }
}

pub struct BatchGrad {
    pub params: Vec<f64>,
    /// Gradient with respect to each input row.
    pub input: Array2<f64>,
    /// `‖∂_params ⟨output_i, cotangent_i⟩‖²` per row, when requested.
    pub sample_sq_norms: Option<Vec<f64>>,
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl MlpNet {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(Error::Dimension {
                what: "parameter vector",
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    /// Uniform `±1/√fan_in` for weights and biases; the output layer is
    /// additionally scaled by `output_scale`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R, output_scale: f64) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let last = sizes.len() - 2;
        let mut off = 0;
        for (l, w) in sizes.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let scale = if l == last { output_scale } else { 1.0 };
            let count = w[0] * w[1] + w[1];
            for p in &mut net.params[off..off + count] {
                *p = scale * rng.random_range(-bound..bound);
            }
            off += count;
        }
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer_views(&self) -> impl Iterator<Item = (ArrayView2<'_, f64>, &[f64])> + '_ {
        let mut off = 0;
        self.sizes.windows(2).map(move |w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = ArrayView2::from_shape((fan_out, fan_in), &self.params[off..off + fan_in * fan_out])
                .expect("layout matches sizes");
            let bias = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            (weights, bias)
        })
    }

    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.input_dim(),
                got: inputs.ncols(),
            });
        }
        let num_layers = self.sizes.len() - 1;
        let mut activations = Vec::with_capacity(num_layers + 1);
        activations.push(inputs.to_owned());
        for (l, (weights, bias)) in self.layer_views().enumerate() {
            let mut z = activations[l].dot(&weights.t());
            for mut row in z.rows_mut() {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            if l + 1 < num_layers {
                z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    /// Reverse pass of `Σ_i ⟨output_i, cotangent_i⟩`.
    pub fn backward(&self, cache: &ForwardCache, cotangent: ArrayView2<'_, f64>, sample_norms: bool) -> Result<BatchGrad> {
        let batch = cache.batch_size();
        if cotangent.dim() != (batch, self.output_dim()) {
            return Err(Error::Dimension {
                what: "output cotangent",
                expected: batch * self.output_dim(),
                got: cotangent.len(),
            });
        }
        let layers: Vec<_> = self.layer_views().collect();
        let mut grad = vec![0.0; self.params.len()];
        let mut norms = sample_norms.then(|| vec![0.0; batch]);
        let mut delta = cotangent.to_owned();
        let mut off = self.params.len();
        for l in (0..layers.len()).rev() {
            let (weights, _) = layers[l];
            let (fan_out, fan_in) = weights.dim();
            off -= fan_in * fan_out + fan_out;
            let prev = &cache.activations[l];
            let gw = delta.t().dot(prev);
            grad[off..off + fan_in * fan_out].copy_from_slice(gw.as_slice().expect("standard layout"));
            let gb = delta.sum_axis(Axis(0));
            grad[off + fan_in * fan_out..off + fan_in * fan_out + fan_out].copy_from_slice(gb.as_slice().unwrap());
            if let Some(norms) = norms.as_mut() {
                for (i, n) in norms.iter_mut().enumerate() {
                    let d2: f64 = delta.row(i).iter().map(|v| v * v).sum();
                    let a2: f64 = prev.row(i).iter().map(|v| v * v).sum();
                    *n += d2 * (a2 + 1.0);
                }
            }
            let mut next = delta.dot(&weights);
            if l > 0 {
                ndarray::Zip::from(&mut next).and(prev).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            delta = next;
        }
        Ok(BatchGrad {
            params: grad,
            input: delta,
            sample_sq_norms: norms,
        })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let cache = self.forward_batch(view)?;
        Ok(cache.output().row(0).to_vec())
    }

    /// Scalar output convenience.
    pub fn value(&self, input: &[f64]) -> Result<f64> {
        Ok(self.forward(input)?[0])
    }

    /// Gradients of `⟨forward(input), cotangent⟩` with respect to the
    /// parameters and the input.
    pub fn grads(&self, input: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let view = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let cache = self.forward_batch(view)?;
        let cot = ArrayView2::from_shape((1, cotangent.len()), cotangent).map_err(|_| Error::Dimension {
            what: "output cotangent",
            expected: self.output_dim(),
            got: cotangent.len(),
        })?;
        let g = self.backward(&cache, cot, false)?;
        Ok((g.params, g.input.row(0).to_vec()))
    }

    /// Splits the flat vector into per-layer `(weights, bias)` arrays.
    pub fn unflatten(&self) -> Vec<(Array2<f64>, Array1<f64>)> {
        self.layer_views().map(|(w, b)| (w.to_owned(), Array1::from(b.to_vec()))).collect()
    }

    pub fn flatten(layers: &[(Array2<f64>, Array1<f64>)]) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * (self.sizes.len() + self.params.len()));
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.sizes.len() as u32).to_le_bytes());
        for &s in &self.sizes {
            buf.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, buf)?;
        let mut manifest = fs::File::create(path.with_extension("ctnn.txt"))?;
        writeln!(manifest, "format=CTNN1")?;
        writeln!(
            manifest,
            "layer_sizes={}",
            self.sizes.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
        )?;
        writeln!(manifest, "num_params={}", self.params.len())?;
        writeln!(manifest, "activation=relu_hidden,identity_output")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < 9 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(bad("missing CTNN1 header"));
        }
        let num_sizes = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let mut words = bytes[9..].chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).unwrap());
        let sizes: Vec<usize> = words
            .by_ref()
            .take(num_sizes)
            .map(|w| u64::from_le_bytes(w) as usize)
            .collect();
        if sizes.len() != num_sizes {
            return Err(bad("truncated layer sizes"));
        }
        let params: Vec<f64> = words.map(f64::from_le_bytes).collect();
        if (bytes.len() - 9) % 8 != 0 {
            return Err(bad("trailing bytes"));
        }
        Self::from_params(&sizes, params).map_err(|e| bad(&e.to_string()))
    }
}

/// Copies the rows of `rows` into a dense `len × width` matrix.
pub fn stack_rows(rows: &[Vec<f64>], width: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), width));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(&src[..width]));
    }
    out
}

/// `[states | actions]` column concatenation.
pub fn concat_cols(left: ArrayView2<'_, f64>, right: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((left.nrows(), left.ncols() + right.ncols()));
    out.slice_mut(s![.., ..left.ncols()]).assign(&left);
    out.slice_mut(s![.., left.ncols()..]).assign(&right);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.first_moment.len() {
        return Err(Error::Dimension {
            what: "adam parameters",
            expected: params.len(),
            got: grad.len().min(state.first_moment.len()),
        });
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grad[i];
        let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
        let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        params[i] -= lr * (m / c1) / ((v / c2).sqrt() + state.eps);
    }
    Ok(())
}

/// `target ← τ·online + (1 − τ)·target`.
pub fn soft_update(target: &mut [f64], online: &[f64], tau: f64) {
    debug_assert!((0.0..=1.0).contains(&tau));
    if tau == 1.0 {
        target.copy_from_slice(online);
        return;
    }
    for (t, o) in target.iter_mut().zip(online) {
        *t = tau * o + (1.0 - tau) * *t;
    }
}
