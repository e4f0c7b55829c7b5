//! Finite-difference checks of every differentiable operation and of
//! the full HIT-micro training loss, in `f64`.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::bim::{transposed_attention, Bim, CrossScalePair};
use crate::error::{HitError, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{
    window_merge_var, window_partition_var, wmsa, Bound, Ffn, Init, ParamStore, TransformerBlock,
    WindowAttention,
};
use crate::tensor::{Conv2dSpec, Tensor};
use crate::training::{charbonnier_var, LossReduction};
use crate::wim::{inject, Extractor, ExtractorConfig};

type Forward = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

/// One differentiable function of a list of tensors.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    forward: Forward,
    /// Number of randomly chosen scalars to perturb; `None` perturbs every one.
    pub probes: Option<usize>,
    /// Finite-difference step overriding the suite default.
    pub step: Option<f64>,
}

impl Case {
    pub fn new(
        name: &'static str,
        inputs: Vec<Tensor<f64>>,
        forward: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
    ) -> Self {
        Self {
            name,
            inputs,
            forward: Box::new(forward),
            probes: None,
            step: None,
        }
    }

    pub fn with_probes(mut self, n: usize) -> Self {
        self.probes = Some(n);
        self
    }

    pub fn with_step(mut self, h: f64) -> Self {
        self.step = Some(h);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    /// `(input index, element index)` of the largest error.
    pub worst_at: (usize, usize),
    pub probes: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seeds: Vec<u64>,
    /// Restricts the suite to these case names.
    pub ops: Option<Vec<String>>,
    /// Forwarded to [`Tape::corrupt_rule`] on the analytic pass.
    pub corrupt: Option<String>,
    pub step: f64,
    /// Lower bound of the denominator in the relative error.
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            ops: None,
            corrupt: None,
            step: 1e-3,
            floor: 1e-4,
            tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub results: Vec<CheckResult>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn worst(&self) -> Option<&CheckResult> {
        self.results
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(|r| r.max_rel_err < self.tolerance)
    }

    /// Names of the checked cases in suite order, without repeats.
    pub fn names(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.results {
            if !out.contains(&r.name.as_str()) {
                out.push(&r.name);
            }
        }
        out
    }

    /// Worst error per case across seeds.
    pub fn per_case(&self) -> Vec<(&str, f64)> {
        self.names()
            .into_iter()
            .map(|n| {
                let e = self
                    .results
                    .iter()
                    .filter(|r| r.name == n)
                    .map(|r| r.max_rel_err)
                    .fold(0.0, f64::max);
                (n, e)
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (n, e) in self.per_case() {
            let mark = if e < self.tolerance { "ok" } else { "FAIL" };
            let _ = writeln!(s, "{n:<24} max_rel_err {e:.3e}  {mark}");
        }
        if let Some(w) = self.worst() {
            let _ = writeln!(
                s,
                "worst: {} (seed {}, input {}, element {}) rel_err {:.3e}, tolerance {:.0e}",
                w.name, w.seed, w.worst_at.0, w.worst_at.1, w.max_rel_err, self.tolerance
            );
        }
        s
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Evaluates `sum(f(inputs) * r)`; `r` is fixed per check so every output
/// element contributes with a distinct weight.
fn projected<'t>(
    case: &Case,
    tape: &'t Tape<f64>,
    vars: &[Var<'t, f64>],
    r: &mut Option<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<Var<'t, f64>> {
    let y = (case.forward)(tape, vars)?;
    let weights = r.get_or_insert_with(|| randn(rng, y.shape())).clone();
    if weights.shape() != y.shape() {
        return Err(HitError::Contract(format!("{}: output shape changed", case.name)));
    }
    Ok(y.mul(&tape.constant(weights))?.sum())
}

fn eval(case: &Case, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = (case.forward)(&tape, &vars)?;
    Ok(y.value().mul(r)?.sum())
}

/// Compares the tape gradient of one case with central differences.
pub fn check_case(case: &Case, seed: u64, opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00);
    let tape = Tape::new();
    tape.corrupt_rule(opts.corrupt.as_deref());
    let vars: Vec<_> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let mut r = None;
    let loss = projected(case, &tape, &vars, &mut r, &mut rng)?;
    let r = r.expect("projection weights are set by the forward pass");
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.wrt(v)).collect();

    let all: Vec<(usize, usize)> = case
        .inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let probes: Vec<(usize, usize)> = match case.probes {
        Some(n) if n < all.len() => (0..n).map(|_| all[rng.random_range(0..all.len())]).collect(),
        _ => all,
    };

    let mut inputs = case.inputs.clone();
    let (mut worst, mut worst_at) = (0.0f64, (0, 0));
    for &(i, j) in &probes {
        let x0 = inputs[i].data()[j];
        let mut central = |h: f64| -> Result<f64> {
            inputs[i].data_mut()[j] = x0 + h;
            let up = eval(case, &inputs, &r)?;
            inputs[i].data_mut()[j] = x0 - h;
            let down = eval(case, &inputs, &r)?;
            inputs[i].data_mut()[j] = x0;
            Ok((up - down) / (2.0 * h))
        };
        // Richardson extrapolation cancels the h^2 term of the central difference.
        let h = case.step.unwrap_or(opts.step);
        let (coarse, fine) = (central(h)?, central(h / 2.0)?);
        let numeric = (4.0 * fine - coarse) / 3.0;
        let a = analytic[i].data()[j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if !(err <= worst) {
            worst = err;
            worst_at = (i, j);
        }
    }
    Ok(CheckResult {
        name: case.name.to_owned(),
        seed,
        max_rel_err: worst,
        worst_at,
        probes: probes.len(),
    })
}

/// Wraps a module: input 0 is the feature map, the rest are the store's parameters.
fn module_case(
    name: &'static str,
    x: Tensor<f64>,
    store: ParamStore<f64>,
    f: impl for<'t> Fn(&Bound<'t, f64>, &Var<'t, f64>) -> Result<Var<'t, f64>> + 'static,
) -> Case {
    let mut inputs = vec![x];
    inputs.extend(store.tensors().iter().cloned());
    Case::new(name, inputs, move |tape, v| {
        let b = Bound::from_vars(tape, v[1..].to_vec());
        f(&b, &v[0])
    })
}

/// Names of all cases in the default suite.
pub fn case_names() -> Vec<&'static str> {
    build_cases(0).iter().map(|c| c.name).collect()
}

/// The default suite for one seed: every primitive op, each module, the
/// Charbonnier loss and the HIT-micro forward plus loss.
pub fn build_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
    let mut cases = Vec::new();

    let a = randn(rng, &[3, 4]);
    let b = randn(rng, &[3, 4]);
    cases.push(Case::new("add", vec![a.clone(), b.clone()], |_, v| v[0].add(&v[1])));
    cases.push(Case::new("sub", vec![a.clone(), b.clone()], |_, v| v[0].sub(&v[1])));
    cases.push(Case::new("mul", vec![a.clone(), b.clone()], |_, v| v[0].mul(&v[1])));
    cases.push(Case::new("add_bcast", vec![randn(rng, &[2, 3, 4]), randn(rng, &[4])], |_, v| {
        v[0].add_bcast(&v[1])
    }));
    cases.push(Case::new("scale", vec![a.clone()], |_, v| Ok(v[0].scale(-1.7))));
    cases.push(Case::new("add_scalar", vec![a.clone()], |_, v| Ok(v[0].add_scalar(0.3))));
    cases.push(Case::new("mul_scalar", vec![a.clone(), randn(rng, &[])], |_, v| {
        v[0].mul_scalar(&v[1])
    }));
    cases.push(Case::new("exp", vec![a.clone()], |_, v| Ok(v[0].exp())));
    cases.push(Case::new("sqrt", vec![uniform(rng, &[3, 4], 0.5, 2.0)], |_, v| Ok(v[0].sqrt())));
    cases.push(Case::new("gelu", vec![randn(rng, &[4, 5]).scale(2.0)], |_, v| Ok(v[0].gelu())));
    cases.push(Case::new("square", vec![a.clone()], |_, v| Ok(v[0].square())));
    cases.push(Case::new("sum", vec![a.clone()], |_, v| Ok(v[0].sum())));
    cases.push(Case::new("mean", vec![a.clone()], |_, v| Ok(v[0].mean())));
    cases.push(Case::new("matmul", vec![randn(rng, &[3, 5]), randn(rng, &[5, 4])], |_, v| {
        v[0].matmul(&v[1])
    }));
    cases.push(Case::new("bmm", vec![randn(rng, &[2, 3, 4]), randn(rng, &[2, 4, 3])], |_, v| {
        v[0].bmm(&v[1])
    }));
    cases.push(Case::new("reshape", vec![a.clone()], |_, v| Ok(v[0].reshape(&[2, 6])?.square())));
    cases.push(Case::new("permute", vec![randn(rng, &[2, 3, 4])], |_, v| {
        Ok(v[0].permute(&[2, 0, 1])?.square())
    }));
    cases.push(Case::new("transpose", vec![a.clone()], |_, v| Ok(v[0].transpose()?.square())));
    cases.push(Case::new("softmax", vec![randn(rng, &[3, 5])], |_, v| v[0].softmax_last()));
    cases.push(Case::new(
        "layer_norm",
        vec![randn(rng, &[4, 6]), randn(rng, &[6]), randn(rng, &[6])],
        |_, v| v[0].layer_norm(&v[1], &v[2], 1e-5),
    ));
    cases.push(Case::new("conv2d", vec![randn(rng, &[5, 6, 3]), randn(rng, &[3, 3, 3, 4])], |_, v| {
        v[0].conv2d(&v[1], Conv2dSpec::same(3))
    }));
    cases.push(Case::new(
        "conv2d_strided",
        vec![randn(rng, &[6, 6, 2]), randn(rng, &[4, 4, 2, 3])],
        |_, v| v[0].conv2d(&v[1], Conv2dSpec::new(2, 1, 1)),
    ));
    cases.push(Case::new(
        "conv2d_depthwise",
        vec![randn(rng, &[5, 4, 3]), randn(rng, &[3, 3, 1, 3])],
        |_, v| v[0].conv2d(&v[1], Conv2dSpec::depthwise(3, 3)),
    ));
    cases.push(Case::new(
        "concat",
        vec![randn(rng, &[3, 2]), randn(rng, &[3, 4]), randn(rng, &[3, 1])],
        |_, v| Ok(Var::concat_last(&[&v[0], &v[1], &v[2]])?.square()),
    ));
    cases.push(Case::new("narrow", vec![randn(rng, &[3, 6])], |_, v| {
        Ok(v[0].narrow_last(2, 3)?.square())
    }));
    cases.push(Case::new("pad_reflect", vec![randn(rng, &[3, 4, 2])], |_, v| {
        Ok(v[0].pad_reflect(3, 2)?.square())
    }));
    cases.push(Case::new("crop", vec![randn(rng, &[5, 6, 2])], |_, v| Ok(v[0].crop(3, 4)?.square())));
    cases.push(Case::new("resize_bilinear", vec![randn(rng, &[3, 4, 2])], |_, v| {
        Ok(v[0].resize_bilinear(7, 5)?.square())
    }));
    cases.push(Case::new("channel_pool", vec![randn(rng, &[3, 3, 7])], |_, v| {
        Ok(v[0].channel_pool(3)?.square())
    }));
    let idx = Arc::new((0..9).map(|_| rng.random_range(0..4)).collect::<Vec<usize>>());
    cases.push(Case::new("index_rows", vec![randn(rng, &[4, 3])], move |_, v| {
        Ok(v[0].index_rows(idx.clone())?.square())
    }));
    cases.push(Case::new("window_partition_merge", vec![randn(rng, &[4, 6, 2])], |_, v| {
        let ws = window_partition_var(&v[0], 2)?;
        let ws = crate::nn::WindowStack {
            windows: ws.windows.square(),
            ..ws
        };
        window_merge_var(&ws)
    }));

    let mut store = ParamStore::new();
    let attn = WindowAttention::new(&mut store, &mut init, "attn", 4, 2, 2)
        .expect("4 channels split into 2 heads");
    for t in store.tensors_mut() {
        *t = t.scale(20.0);
    }
    cases.push(module_case("wmsa", randn(rng, &[4, 4, 4]), store, move |b, x| {
        window_merge_var(&wmsa(b, &window_partition_var(x, 2)?, &attn)?)
    }));

    let mut store = ParamStore::new();
    let ffn = Ffn::new(&mut store, &mut init, "ffn", 3, 2);
    cases.push(
        module_case("ffn", randn(rng, &[3, 3, 3]), store, move |b, x| ffn.forward(b, x)).with_probes(48),
    );

    let mut store = ParamStore::new();
    let blk = TransformerBlock::new(&mut store, &mut init, "blk", 4, 2, 2, 2, true)
        .expect("valid block configuration");
    cases.push(
        module_case("transformer_block", randn(rng, &[4, 4, 4]), store, move |b, x| {
            blk.forward(b, x, true)
        })
        .with_probes(48),
    );

    let ecfg = ExtractorConfig::from_pairs(&[(3, 1), (4, 2)]);
    let mut store = ParamStore::new();
    let ext = Extractor::new(&mut store, &mut init, "ext", &ecfg, 3).expect("valid extractor");
    cases.push(
        module_case("extractor", uniform(rng, &[4, 4, 3], 0.0, 1.0), store, move |b, x| {
            ext.forward(b, x)
        })
        .with_probes(48),
    );

    cases.push(Case::new("inject", vec![randn(rng, &[4, 4, 3]), randn(rng, &[4, 4, 5])], |_, v| {
        Ok(inject(&v[0], &v[1], 2)?.square())
    }));

    cases.push(Case::new(
        "transposed_attention",
        vec![randn(rng, &[3, 5]), randn(rng, &[5, 4]), randn(rng, &[4, 5]), randn(rng, &[])],
        |_, v| Ok(transposed_attention(&v[0], &v[1], &v[2], &v[3])?.0),
    ));

    let mut store = ParamStore::new();
    let bim = Bim::new(&mut store, &mut init, "bim", 2);
    for t in store.tensors_mut() {
        *t = t.scale(10.0);
    }
    let fine = randn(rng, &[4, 4, 2]);
    let coarse = randn(rng, &[2, 2, 4]);
    let mut inputs = vec![fine, coarse];
    inputs.extend(store.tensors().iter().cloned());
    cases.push(
        Case::new("bim", inputs, move |tape, v| {
            let b = Bound::from_vars(tape, v[2..].to_vec());
            bim.forward(&b, &CrossScalePair::new(v[0].clone(), v[1].clone())?)
        })
        .with_probes(64),
    );

    let target = uniform(rng, &[4, 4, 3], 0.0, 1.0);
    let t2 = target.clone();
    cases.push(Case::new("charbonnier", vec![uniform(rng, &[4, 4, 3], 0.0, 1.0)], move |tape, v| {
        charbonnier_var(&v[0], &tape.constant(target.clone()), 1e-3, LossReduction::GlobalNorm)
    }));
    cases.push(Case::new(
        "charbonnier_pixel_mean",
        vec![uniform(rng, &[4, 4, 3], 0.0, 1.0)],
        move |tape, v| charbonnier_var(&v[0], &tape.constant(t2.clone()), 1e-3, LossReduction::PixelMean),
    )
    // Per-element terms bend on the scale of eps, so the step must be far below it.
    .with_step(1e-5));

    cases.push(hit_micro_case(seed));
    cases
}

/// HIT-micro forward plus Charbonnier on a small image. The zero-initialised
/// output convolution is re-drawn so gradients reach every parameter.
pub fn hit_micro_case(seed: u64) -> Case {
    let mut model = Model::<f64>::build(&ModelConfig::hit_micro(), seed).expect("HIT-micro builds");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let w = model.out_conv.w;
    let shape = model.params().get(w).shape().to_vec();
    *model.params_mut().get_mut(w) = uniform(&mut rng, &shape, -0.1, 0.1);
    let image = uniform(&mut rng, &[12, 10, 3], 0.0, 1.0);
    let clean = uniform(&mut rng, &[12, 10, 3], 0.0, 1.0);
    let mut inputs = vec![image];
    inputs.extend(model.params().tensors().iter().cloned());
    Case::new("hit_micro", inputs, move |tape, v| {
        let b = Bound::from_vars(tape, v[1..].to_vec());
        let (restored, _) = model.forward_var(&b, &v[0], None)?;
        charbonnier_var(&restored, &tape.constant(clean.clone()), 1e-3, LossReduction::GlobalNorm)
    })
    .with_probes(12)
}

/// Runs the suite for every seed in `opts`.
pub fn run(opts: &GradcheckOptions) -> Result<GradReport> {
    if let Some(ops) = &opts.ops {
        let known = case_names();
        if let Some(bad) = ops.iter().find(|o| !known.contains(&o.as_str())) {
            return Err(HitError::Config(format!("unknown gradcheck case `{bad}`")));
        }
    }
    let mut results = Vec::new();
    for &seed in &opts.seeds {
        for case in build_cases(seed) {
            if opts.ops.as_ref().is_some_and(|o| !o.iter().any(|n| n == case.name)) {
                continue;
            }
            results.push(check_case(&case, seed, opts)?);
        }
    }
    Ok(GradReport {
        results,
        tolerance: opts.tolerance,
    })
}
