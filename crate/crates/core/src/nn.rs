//! Parameter storage, forward-pass binding and the basic layers shared by
//! every network (equalized-learning-rate convolutions and linear maps,
//! style-modulated convolutions, normalization).

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use fcf_tensor::{ConvOpts, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter `{name}`");
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.values[id.0].clone()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(
            value.shape(),
            self.values[id.0].shape(),
            "shape change for `{}`",
            self.names[id.0]
        );
        self.values[id.0] = Arc::new(value);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Bitwise equality of every tensor.
    pub fn same_values(&self, other: &Self) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a == b)
    }
}

/// Binds a [`ParamStore`] to a tape for one forward pass.
///
/// Parameters become tape leaves on first use; with `trainable = false` they
/// are constants, which freezes the network for that pass.
pub struct Ctx<'t, 's, T: Scalar> {
    pub tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    trainable: bool,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
    capture: Option<RefCell<Capture<T>>>,
    noise_rng: Option<RefCell<ChaCha8Rng>>,
}

/// Activations recorded by named sites during a forward pass.
#[derive(Debug, Default)]
pub struct Capture<T: Scalar> {
    pub sites: Vec<String>,
    pub values: BTreeMap<String, Tensor<T>>,
}

impl<'t, 's, T: Scalar> Ctx<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
            bound: RefCell::new(vec![None; store.len()]),
            capture: None,
            noise_rng: None,
        }
    }

    pub fn with_capture(mut self) -> Self {
        self.capture = Some(RefCell::new(Capture::default()));
        self
    }

    pub fn with_noise(mut self, rng: ChaCha8Rng) -> Self {
        self.noise_rng = Some(RefCell::new(rng));
        self
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let value = self.store.shared(id);
        let v = if self.trainable {
            self.tape.var_shared(value)
        } else {
            self.tape.constant_shared(value)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Uses `v` in place of parameter `id` for this pass.
    pub fn bind(&self, id: ParamId, v: Var<'t, T>) {
        assert_eq!(v.shape(), self.store.get(id).shape(), "bind shape for `{}`", self.store.name(id));
        self.bound.borrow_mut()[id.0] = Some(v);
    }

    /// Parameters touched so far, in store order.
    pub fn bound(&self) -> Vec<(ParamId, Var<'t, T>)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    /// Binds every parameter (so that unused ones report zero gradients).
    pub fn bind_all(&self) -> Vec<(ParamId, Var<'t, T>)> {
        for id in self.store.ids() {
            self.param(id);
        }
        self.bound()
    }

    pub fn capture(&self, site: &str, v: Var<'t, T>) {
        if let Some(c) = &self.capture {
            let mut c = c.borrow_mut();
            c.sites.push(site.to_string());
            c.values.insert(site.to_string(), v.value().as_ref().clone());
        }
    }

    pub fn take_capture(&self) -> Capture<T> {
        self.capture
            .as_ref()
            .map(|c| std::mem::take(&mut *c.borrow_mut()))
            .unwrap_or_default()
    }

    /// Standard normal noise for stochastic layers, if a noise source is set.
    pub fn noise(&self, shape: &[usize]) -> Option<Tensor<T>> {
        self.noise_rng
            .as_ref()
            .map(|r| Tensor::randn(shape, 1.0, &mut *r.borrow_mut()))
    }
}

/// Weight initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Unit normal, rescaled at runtime by `lr_mul / sqrt(fan_in)`.
    EqualizedNormal,
    Zero,
}

fn init_tensor<T: Scalar>(shape: &[usize], init: Init, lr_mul: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    match init {
        Init::EqualizedNormal => Tensor::randn(shape, 1.0 / lr_mul, rng),
        Init::Zero => Tensor::zeros(shape),
    }
}

/// Leaky ReLU with slope 0.2 and gain sqrt(2).
pub fn lrelu<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    x.leaky_relu(0.2).scale(std::f64::consts::SQRT_2)
}

/// Convolution with equalized learning rate and optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub opts: ConvOpts,
    gain: f64,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        opts: ConvOpts,
        bias: bool,
        init: Init,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[out_ch, in_ch, kernel, kernel], init, 1.0, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            opts,
            gain: 1.0 / ((in_ch * kernel * kernel) as f64).sqrt(),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let w = ctx.param(self.weight).scale(self.gain);
        let y = x.conv2d(w, self.opts);
        match self.bias {
            Some(b) => y + ctx.param(b).reshape(&[1, self.out_ch, 1, 1]),
            None => y,
        }
    }

    /// Stored weight value that makes the effective kernel equal `w`.
    pub fn raw_weight_for<T: Scalar>(&self, w: &Tensor<T>) -> Tensor<T> {
        w.map(|v| v / T::lit(self.gain))
    }
}

/// Fully connected layer with equalized learning rate.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    gain: f64,
    lr_mul: f64,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias_init: f64,
        lr_mul: f64,
        init: Init,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[out_dim, in_dim], init, lr_mul, rng),
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::full(&[out_dim], T::lit(bias_init / lr_mul)),
        );
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            gain: lr_mul / (in_dim as f64).sqrt(),
            lr_mul,
        }
    }

    /// `(B, in) -> (B, out)`.
    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let w = ctx.param(self.weight).scale(self.gain);
        let b = ctx.param(self.bias).scale(self.lr_mul).reshape(&[1, self.out_dim]);
        x.matmul_t(w, false, true) + b
    }
}

/// Convolution whose weights are scaled per input channel by a style
/// vector, optionally followed by per-output-channel demodulation.
///
/// Implemented as `demod * conv(x * s, w)`, which equals convolving with the
/// per-sample weights `w[o,i] * s[i]` (normalised to unit energy when
/// demodulating).
#[derive(Clone, Debug)]
pub struct ModConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub demodulate: bool,
    gain: f64,
}

pub const DEMOD_EPS: f64 = 1e-8;

impl ModConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        demodulate: bool,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[out_ch, in_ch, kernel, kernel], 1.0, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            demodulate,
            gain: 1.0 / ((in_ch * kernel * kernel) as f64).sqrt(),
        }
    }

    /// `x: (B, in, H, W)`, `style: (B, in)`.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
        style: Var<'t, T>,
    ) -> Var<'t, T> {
        let b = x.shape()[0];
        let w = ctx.param(self.weight).scale(self.gain);
        let y = modulated_conv(x, w, style, self.demodulate, ConvOpts::same(self.kernel));
        let _ = b;
        match self.bias {
            Some(bias) => y + ctx.param(bias).reshape(&[1, self.out_ch, 1, 1]),
            None => y,
        }
    }
}

/// Modulated convolution on tape values; `w` is the effective kernel.
pub fn modulated_conv<'t, T: Scalar>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    style: Var<'t, T>,
    demodulate: bool,
    opts: ConvOpts,
) -> Var<'t, T> {
    let xs = x.shape();
    let ws = w.shape();
    let (b, i, o) = (xs[0], xs[1], ws[0]);
    let y = (x * style.reshape(&[b, i, 1, 1])).conv2d(w, opts);
    if !demodulate {
        return y;
    }
    // sum_{i,k} (w[o,i,k] s[b,i])^2 = sum_i s[b,i]^2 * sum_k w[o,i,k]^2
    let wsq = w.square().sum_axes(&[2, 3]).reshape(&[o, i]);
    let energy = style.square().matmul_t(wsq, false, true);
    let d = energy.add_scalar(DEMOD_EPS).rsqrt();
    y * d.reshape(&[b, o, 1, 1])
}

/// Per-sample effective kernel of a modulated convolution.
pub fn modulated_weights<T: Scalar>(w: &Tensor<T>, style: &[T], demodulate: bool) -> Tensor<T> {
    let s = w.shape();
    let (o, i, kh, kw) = (s[0], s[1], s[2], s[3]);
    assert_eq!(style.len(), i, "style length must equal input channels");
    let mut out = w.clone();
    let k = kh * kw;
    for oi in 0..o {
        for ii in 0..i {
            for v in &mut out.data_mut()[(oi * i + ii) * k..(oi * i + ii + 1) * k] {
                *v *= style[ii];
            }
        }
        if demodulate {
            let row = &mut out.data_mut()[oi * i * k..(oi + 1) * i * k];
            let e: T = row.iter().map(|&v| v * v).sum();
            let d = (e + T::lit(DEMOD_EPS)).sqrt().recip();
            row.iter_mut().for_each(|v| *v *= d);
        }
    }
    out
}

/// Standard normal vector batch `(rows, dim)` from `rng`.
pub fn normal_rows<T: Scalar, R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(&[rows, dim], |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::lit(v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn modulated_conv_with_unit_style_is_plain_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::randn(&[2, 3, 6, 6], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[4, 3, 3, 3], 0.3, &mut rng);
        let tape = Tape::new();
        let (xv, wv) = (tape.constant(x), tape.constant(w));
        let s = tape.constant(Tensor::ones(&[2, 3]));
        let a = modulated_conv(xv, wv, s, false, ConvOpts::same(3)).value();
        let b = xv.conv2d(wv, ConvOpts::same(3)).value();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn demodulated_single_tap() {
        let w = Tensor::<f64>::full(&[1, 1, 1, 1], 2.0);
        let eff = modulated_weights(&w, &[1.0], true);
        let want = 2.0 / (4.0f64 + DEMOD_EPS).sqrt();
        assert!((eff.item() - want).abs() < 1e-15);
        assert!((eff.item() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn demodulated_energy_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::randn(&[5, 4, 3, 3], 1.0, &mut rng);
        let s: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..2.0)).collect();
        let eff = modulated_weights(&w, &s, true);
        for o in 0..5 {
            let e: f64 = eff.data()[o * 36..(o + 1) * 36].iter().map(|v| v * v).sum();
            assert!((e - 1.0).abs() < 1e-6, "{e}");
        }
    }

    #[test]
    fn fused_path_matches_explicit_per_sample_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[2, 3, 5, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let s = Tensor::<f64>::uniform(&[2, 3], 0.5, 1.5, &mut rng);
        let tape = Tape::new();
        let fused = modulated_conv(
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(s.clone()),
            true,
            ConvOpts::same(3),
        )
        .value();
        for b in 0..2 {
            let eff = modulated_weights(&w, &s.data()[b * 3..b * 3 + 3], true);
            let xb = tape.constant(x.narrow(0, b, 1));
            let yb = xb.conv2d(tape.constant(eff), ConvOpts::same(3)).value();
            assert!(yb.max_abs_diff(&fused.narrow(0, b, 1)) < 1e-12);
        }
    }
}
