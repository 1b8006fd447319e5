//! The reconstruction stage: an initial linear reconstruction followed by `K`
//! deep reconstruction modules (DRMs). Module `k` maps the previous estimate
//! `x` of every mean-subtracted patch to a new one:
//!
//! ```text
//! z  = Net_z(x − λ/ρ)
//! λ' = λ + ρ(z − x)
//! x̃  = (AᵀA + ρI)⁻¹(Aᵀy + λ' + ρz)
//! x' = split(HFC(splice(x̃ + x̄*))) − mean
//! ```
//!
//! with its own penalty `ρ = softplus(θ_ρ)`, proximal network, HFC network and
//! multiplier buffer. The HFC network sees the whole image so it can repair
//! patch seams.

use std::rc::Rc;
use std::sync::{Arc, Mutex};

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, softplus_inv, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::imaging::{extract_patches, GridShape, Image};
use crate::linalg::XSolver;
use crate::nn::{square_side, BatchNorm, BnMode, BnStats, ProxNet, ProxNetParams};
use crate::sampling::{init_whitened, sample_patches_var, SamplingOperator};

/// Starting value of every penalty.
pub const INITIAL_RHO: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Each module's input is cut from the graph, so a module's parameters
    /// only see the losses of that module and the ones it feeds directly.
    #[default]
    Detached,
    End2end,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoMode {
    #[default]
    PerModule,
    /// Every module uses module 0's penalty.
    Shared,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// One stored vector per module, overwritten with the batch mean of the
    /// per-sample multipliers after every training step.
    #[default]
    BufferMean,
    /// No stored state: multipliers start at zero on every pass and stay in
    /// the graph.
    PerSampleZeroInit,
    /// A single stored vector updated in turn by every module.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_side: usize,
    /// Measurements per patch.
    pub measurements: usize,
    pub modules: usize,
    pub channels: usize,
    #[serde(default)]
    pub coupling: Coupling,
    #[serde(default)]
    pub rho_mode: RhoMode,
    #[serde(default)]
    pub lambda_mode: LambdaMode,
    pub mss: bool,
    pub hfc: bool,
    pub trainable_sampling: bool,
}

impl ModelConfig {
    pub fn n(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn validate(&self) -> Result<()> {
        square_side(self.n())?;
        if self.measurements == 0 || self.measurements >= self.n() {
            return Err(Error::Config(format!(
                "need 1 <= m < n, got m = {} for n = {}",
                self.measurements,
                self.n()
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channel count must be positive".into()));
        }
        Ok(())
    }

    /// Number of stored multiplier buffers.
    pub fn lambda_slots(&self) -> usize {
        match self.lambda_mode {
            LambdaMode::Shared => 1,
            _ => self.modules,
        }
    }
}

/// `x⁰ = W y + b`, one fully connected layer.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialReconstructor<T> {
    /// `n × m`.
    pub weight: T,
    /// `n`.
    pub bias: T,
}

/// Learnable parameters of one module.
#[derive(Clone, Debug, PartialEq)]
pub struct DrmParams<T> {
    /// Unconstrained penalty; `ρ = softplus(rho_raw)`.
    pub rho_raw: T,
    pub prox: ProxNet<T>,
    pub hfc: ProxNet<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineParams<T> {
    /// The `m × n` sampling matrix.
    pub sampling: T,
    pub irm: InitialReconstructor<T>,
    pub modules: Vec<DrmParams<T>>,
}

impl<T> PipelineParams<T> {
    /// Visits every learnable tensor with a stable dotted name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("sampling".into(), &self.sampling);
        f("irm.weight".into(), &self.irm.weight);
        f("irm.bias".into(), &self.irm.bias);
        for (k, m) in self.modules.iter().enumerate() {
            f(format!("drm{k}.rho_raw"), &m.rho_raw);
            m.prox.visit(&format!("drm{k}.prox"), f);
            m.hfc.visit(&format!("drm{k}.hfc"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("sampling".into(), &mut self.sampling);
        f("irm.weight".into(), &mut self.irm.weight);
        f("irm.bias".into(), &mut self.irm.bias);
        for (k, m) in self.modules.iter_mut().enumerate() {
            f(format!("drm{k}.rho_raw"), &mut m.rho_raw);
            m.prox.visit_mut(&format!("drm{k}.prox"), f);
            m.hfc.visit_mut(&format!("drm{k}.hfc"), f);
        }
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> PipelineParams<U> {
        PipelineParams {
            sampling: f(&self.sampling),
            irm: InitialReconstructor {
                weight: f(&self.irm.weight),
                bias: f(&self.irm.bias),
            },
            modules: self
                .modules
                .iter()
                .map(|m| DrmParams {
                    rho_raw: f(&m.rho_raw),
                    prox: m.prox.map(f),
                    hfc: m.hfc.map(f),
                })
                .collect(),
        }
    }

    /// Batch-norm running statistics as named tensors.
    pub fn visit_state<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (k, m) in self.modules.iter().enumerate() {
            m.prox.visit_state(&format!("drm{k}.prox"), f);
            m.hfc.visit_state(&format!("drm{k}.hfc"), f);
        }
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (k, m) in self.modules.iter_mut().enumerate() {
            m.prox.visit_state_mut(&format!("drm{k}.prox"), f);
            m.hfc.visit_state_mut(&format!("drm{k}.hfc"), f);
        }
    }

    fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm<T>> {
        self.modules.iter_mut().flat_map(|m| {
            let DrmParams { prox, hfc, .. } = m;
            prox.batch_norms_mut().into_iter().chain(hfc.batch_norms_mut())
        })
    }
}

impl PipelineParams<Tensor> {
    /// Registers every tensor on `tape`. The sampling matrix becomes a
    /// constant unless `trainable_sampling` is set.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable_sampling: bool) -> PipelineParams<Var<'t>> {
        let mut p = self.map(&mut |t| tape.param(t.clone()));
        if !trainable_sampling {
            p.sampling = tape.constant(self.sampling.clone());
        }
        p
    }

    pub fn sampling_matrix(&self) -> Array2<f64> {
        as2(&self.sampling).to_owned()
    }
}

/// Per-module intermediate signals, one row per patch.
#[derive(Clone, Debug)]
pub struct ModuleTrace {
    pub z: Array2<f64>,
    /// Multipliers used by the x-update: a single row when shared across the
    /// batch, one row per patch otherwise.
    pub lambda: Array2<f64>,
    pub x_tilde: Array2<f64>,
    pub x: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub x0: Array2<f64>,
    pub means: Array1<f64>,
    pub modules: Vec<ModuleTrace>,
}

/// State changes produced by a training-mode pass; applied with
/// [`Pipeline::apply_update`].
#[derive(Clone, Debug, Default)]
pub struct StateUpdate {
    pub lambdas: Vec<Array1<f64>>,
    /// Statistics of every normalization layer in pipeline order.
    pub batch_norm: Vec<BnStats>,
}

pub struct Forward<'t> {
    /// `[N, 1, H, W]`, cropped to the input size.
    pub final_image: Var<'t>,
    /// Whole-image output of every module, same layout as `final_image`.
    pub module_images: Vec<Var<'t>>,
    pub trace: Trace,
    pub update: StateUpdate,
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// Clamped to `[0, 1]`.
    pub image: Image,
    pub trace: Trace,
}

/// Index tables between the stacked patch matrix `[N·P, n]`, the padded
/// images `[N, 1, Hp, Wp]` and the cropped images `[N, 1, H, W]`.
struct Layout {
    grid: GridShape,
    count: usize,
    patches_to_padded: Rc<Vec<usize>>,
    padded_to_patches: Rc<Vec<usize>>,
    patches_to_cropped: Rc<Vec<usize>>,
    padded_to_cropped: Rc<Vec<usize>>,
}

impl Layout {
    fn new(grid: GridShape, count: usize) -> Self {
        let (p, n) = (grid.count(), grid.n());
        let (hp, wp) = (grid.padded_height(), grid.padded_width());
        let fwd = grid.patch_to_pixel_index();
        let inv = grid.pixel_to_patch_index();
        let mut patches_to_padded = Vec::with_capacity(count * hp * wp);
        let mut padded_to_patches = Vec::with_capacity(count * p * n);
        let mut patches_to_cropped = Vec::with_capacity(count * grid.height * grid.width);
        let mut padded_to_cropped = Vec::with_capacity(count * grid.height * grid.width);
        for j in 0..count {
            patches_to_padded.extend(inv.iter().map(|&k| j * p * n + k));
            padded_to_patches.extend(fwd.iter().map(|&q| j * hp * wp + q));
            for r in 0..grid.height {
                for c in 0..grid.width {
                    patches_to_cropped.push(j * p * n + inv[r * wp + c]);
                    padded_to_cropped.push(j * hp * wp + r * wp + c);
                }
            }
        }
        Layout {
            grid,
            count,
            patches_to_padded: Rc::new(patches_to_padded),
            padded_to_patches: Rc::new(padded_to_patches),
            patches_to_cropped: Rc::new(patches_to_cropped),
            padded_to_cropped: Rc::new(padded_to_cropped),
        }
    }

    fn rows(&self) -> usize {
        self.count * self.grid.count()
    }

    fn padded_shape(&self) -> [usize; 4] {
        [self.count, 1, self.grid.padded_height(), self.grid.padded_width()]
    }

    fn cropped_shape(&self) -> [usize; 4] {
        [self.count, 1, self.grid.height, self.grid.width]
    }
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected a matrix")
}

fn row_vector(v: ArrayView1<'_, f64>) -> Tensor {
    v.to_owned().insert_axis(Axis(0)).into_dyn()
}

/// `x − λ/ρ`, the proximal network's input.
fn shifted<'t>(x: &Var<'t>, lambda: &Var<'t>, rho: &Var<'t>) -> Var<'t> {
    x.sub(&lambda.div(rho))
}

/// `λ + ρ(z − x)` per row.
fn multiplier<'t>(lambda: &Var<'t>, rho: &Var<'t>, z: &Var<'t>, x: &Var<'t>) -> Var<'t> {
    lambda.add(&z.sub(x).mul(rho))
}

/// Rows of `(AᵀA + ρI)⁻¹ R`, differentiable in `R`, `ρ` and `A`.
fn solve_var<'t>(solver: Arc<XSolver>, a: &Var<'t>, rho: &Var<'t>, rhs: &Var<'t>) -> Result<Var<'t>> {
    let x = solver.apply(as2(rhs.value()))?;
    let xs = Rc::new(x.clone());
    let out = rhs.tape().record(x.into_dyn(), &[rhs, rho, a], move |g, need| {
        let gb = solver.solve_rows(as2(g));
        let grad_rho = need[1].then(|| {
            let s: f64 = gb.iter().zip(xs.iter()).map(|(u, v)| u * v).sum();
            ArrayD::from_elem(IxDyn(&[]), -s)
        });
        let grad_a = need[2].then(|| {
            let am = solver.matrix();
            let ax = am.dot(&xs.t());
            let ag = am.dot(&gb.t());
            (-(ax.dot(&gb) + ag.dot(&*xs))).into_dyn()
        });
        vec![Some(gb.into_dyn()), grad_rho, grad_a]
    });
    Ok(out)
}

/// `Aᵀy + λ + ρz` for row batches.
fn x_rhs<'t>(y: &Var<'t>, a: &Var<'t>, lambda: &Var<'t>, rho: &Var<'t>, z: &Var<'t>) -> Var<'t> {
    y.matmul(a).add(lambda).add(&z.mul(rho))
}

fn prox_rows<'t>(
    net: &ProxNet<Var<'t>>,
    v: &Var<'t>,
    mode: BnMode,
    stats: &mut Vec<BnStats>,
) -> Result<Var<'t>> {
    let (b, n) = (v.shape()[0], v.shape()[1]);
    let side = square_side(n)?;
    Ok(net.forward(&v.reshape(&[b, 1, side, side]), mode, stats).reshape(&[b, n]))
}

/// Adds the patch means back, runs the network on the spliced padded images
/// and splits the result again. Returns the next patch estimate and the
/// cropped whole-image output.
fn hfc_rows<'t>(
    net: Option<&ProxNet<Var<'t>>>,
    x_tilde: &Var<'t>,
    means: &Var<'t>,
    layout: &Layout,
    mss: bool,
    mode: BnMode,
    stats: &mut Vec<BnStats>,
) -> (Var<'t>, Var<'t>) {
    let with_means = x_tilde.add(means);
    let Some(net) = net else {
        let image = with_means.gather(layout.patches_to_cropped.clone(), &layout.cropped_shape());
        return (x_tilde.clone(), image);
    };
    let padded = with_means.gather(layout.patches_to_padded.clone(), &layout.padded_shape());
    let refined = net.forward(&padded, mode, stats);
    let rows = refined.gather(layout.padded_to_patches.clone(), &[layout.rows(), layout.grid.n()]);
    let next = if mss { rows.center_rows() } else { rows };
    let image = refined.gather(layout.padded_to_cropped.clone(), &layout.cropped_shape());
    (next, image)
}

/// Factorizations of `AAᵀ + ρ_k I` for every module, sharing one Gram matrix.
pub fn build_solvers(a: ArrayView2<'_, f64>, rhos: &[f64]) -> Result<Vec<Arc<XSolver>>> {
    let gram = a.dot(&a.t());
    rhos.iter()
        .map(|&rho| XSolver::with_gram(a, &gram, rho).map(Arc::new))
        .collect()
}

#[derive(Default)]
struct SolverCache {
    key: Option<(Array2<f64>, Vec<f64>)>,
    solvers: Vec<Arc<XSolver>>,
}

/// A full reconstruction network with its persistent multiplier buffers.
pub struct Pipeline {
    pub config: ModelConfig,
    pub params: PipelineParams<Tensor>,
    /// One buffer per module, or a single one in shared mode.
    pub lambdas: Vec<Array1<f64>>,
    cache: Mutex<SolverCache>,
}

impl Clone for Pipeline {
    fn clone(&self) -> Self {
        Pipeline::from_parts(self.config.clone(), self.params.clone(), self.lambdas.clone())
    }
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline").field("config", &self.config).finish()
    }
}

impl Pipeline {
    /// Whitened sampling matrix, adjoint initial reconstruction (`W = Aᵀ`,
    /// `b = 0`), `ρ = 0.1`, zero multipliers and randomly initialized
    /// networks.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (n, m) = (config.n(), config.measurements);
        let op = init_whitened(m, n, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let modules = (0..config.modules)
            .map(|_| DrmParams {
                rho_raw: ArrayD::from_elem(IxDyn(&[]), softplus_inv(INITIAL_RHO)),
                prox: ProxNet::init(config.channels, &mut rng),
                hfc: ProxNet::init(config.channels, &mut rng),
            })
            .collect();
        let params = PipelineParams {
            irm: InitialReconstructor {
                weight: op.matrix.t().to_owned().into_dyn(),
                bias: ArrayD::zeros(IxDyn(&[n])),
            },
            sampling: op.matrix.into_dyn(),
            modules,
        };
        let lambdas = vec![Array1::zeros(n); config.lambda_slots()];
        Ok(Pipeline::from_parts(config, params, lambdas))
    }

    /// Correctly shaped pipeline with every tensor zero, to be filled in by
    /// a loader.
    pub fn skeleton(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (n, m) = (config.n(), config.measurements);
        let modules = (0..config.modules)
            .map(|_| DrmParams {
                rho_raw: ArrayD::zeros(IxDyn(&[])),
                prox: ProxNet::zeros(config.channels),
                hfc: ProxNet::zeros(config.channels),
            })
            .collect();
        let params = PipelineParams {
            sampling: ArrayD::zeros(IxDyn(&[m, n])),
            irm: InitialReconstructor {
                weight: ArrayD::zeros(IxDyn(&[n, m])),
                bias: ArrayD::zeros(IxDyn(&[n])),
            },
            modules,
        };
        let lambdas = vec![Array1::zeros(n); config.lambda_slots()];
        Ok(Pipeline::from_parts(config, params, lambdas))
    }

    pub fn from_parts(config: ModelConfig, params: PipelineParams<Tensor>, lambdas: Vec<Array1<f64>>) -> Self {
        Pipeline {
            config,
            params,
            lambdas,
            cache: Mutex::new(SolverCache::default()),
        }
    }

    /// Checks that parameter and buffer shapes agree with the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (n, m, k) = (self.config.n(), self.config.measurements, self.config.modules);
        let expect = |what: &str, t: &Tensor, shape: &[usize]| {
            if t.shape() != shape {
                return dim_err(format!("{what} has shape {:?}, expected {shape:?}", t.shape()));
            }
            Ok(())
        };
        expect("sampling matrix", &self.params.sampling, &[m, n])?;
        expect("IRM weight", &self.params.irm.weight, &[n, m])?;
        expect("IRM bias", &self.params.irm.bias, &[n])?;
        if self.params.modules.len() != k {
            return dim_err(format!("{} modules stored, config says {k}", self.params.modules.len()));
        }
        for (i, mp) in self.params.modules.iter().enumerate() {
            expect("penalty", &mp.rho_raw, &[])?;
            for net in [&mp.prox, &mp.hfc] {
                if net.channels() != self.config.channels {
                    return dim_err(format!("module {i} has {} channels", net.channels()));
                }
            }
        }
        if self.lambdas.len() != self.config.lambda_slots() || self.lambdas.iter().any(|l| l.len() != n) {
            return dim_err("multiplier buffers do not match the config");
        }
        Ok(())
    }

    pub fn operator(&self) -> SamplingOperator {
        SamplingOperator {
            matrix: self.params.sampling_matrix(),
            whitened: false,
            trainable: self.config.trainable_sampling,
        }
    }

    fn rho_index(&self, k: usize) -> usize {
        match self.config.rho_mode {
            RhoMode::PerModule => k,
            RhoMode::Shared => 0,
        }
    }

    fn lambda_index(&self, k: usize) -> usize {
        match self.config.lambda_mode {
            LambdaMode::Shared => 0,
            _ => k,
        }
    }

    /// Effective penalty of module `k`.
    pub fn rho(&self, k: usize) -> f64 {
        softplus(*self.params.modules[self.rho_index(k)].rho_raw.iter().next().unwrap())
    }

    pub fn rhos(&self) -> Vec<f64> {
        (0..self.config.modules).map(|k| self.rho(k)).collect()
    }

    /// Solvers for the current parameters, rebuilt only when `A` or a
    /// penalty changed since the last call.
    pub fn solvers(&self) -> Result<Vec<Arc<XSolver>>> {
        let a = self.params.sampling_matrix();
        let rhos = self.rhos();
        let mut cache = self.cache.lock().unwrap();
        let fresh = matches!(&cache.key, Some((ka, kr)) if *ka == a && *kr == rhos);
        if !fresh {
            cache.solvers = build_solvers(a.view(), &rhos)?;
            cache.key = Some((a, rhos));
        }
        Ok(cache.solvers.clone())
    }

    /// Training-mode pass over a batch of equally sized images.
    pub fn forward_train<'t>(
        &self,
        vars: &PipelineParams<Var<'t>>,
        images: &[Image],
        solvers: &[Arc<XSolver>],
    ) -> Result<Forward<'t>> {
        let layout = self.layout_for(images)?;
        let mut patches = Array2::zeros((layout.rows(), layout.grid.n()));
        let per = layout.grid.count();
        for (j, img) in images.iter().enumerate() {
            let grid = extract_patches(img, self.config.patch_side)?;
            patches.slice_mut(ndarray::s![j * per..(j + 1) * per, ..]).assign(&grid.patches);
        }
        let (y, means) = sample_patches_var(&vars.sampling, &patches, self.config.mss);
        self.run(vars, y, &means, &layout, BnMode::Train, solvers)
    }

    fn layout_for(&self, images: &[Image]) -> Result<Layout> {
        let Some(first) = images.first() else {
            return dim_err("empty image batch");
        };
        if images.iter().any(|i| i.pixels.dim() != first.pixels.dim()) {
            return dim_err("all images in a batch must have the same size");
        }
        let grid = GridShape::for_image(first.height(), first.width(), self.config.patch_side)?;
        Ok(Layout::new(grid, images.len()))
    }

    /// Evaluation-mode reconstruction of one image: stored normalization
    /// statistics, frozen multipliers, no state change.
    pub fn reconstruct(&self, image: &Image) -> Result<Reconstruction> {
        let grid = extract_patches(image, self.config.patch_side)?;
        let (y, means) = crate::sampling::sample_patches(&self.operator(), grid.patches.view(), self.config.mss)?;
        let mut rec = self.reconstruct_measurements(y.view(), means.view(), grid.shape())?;
        rec.image.name = image.name.clone();
        Ok(rec)
    }

    /// Reconstruction from stored measurements (`P × m`) and patch means.
    pub fn reconstruct_measurements(
        &self,
        y: ArrayView2<'_, f64>,
        means: ArrayView1<'_, f64>,
        grid: GridShape,
    ) -> Result<Reconstruction> {
        if grid.patch_side != self.config.patch_side {
            return Err(Error::Config(format!(
                "measurements use patch side {}, model uses {}",
                grid.patch_side, self.config.patch_side
            )));
        }
        if y.dim() != (grid.count(), self.config.measurements) || means.len() != grid.count() {
            return dim_err(format!(
                "expected {} x {} measurements and {} means, got {:?} and {}",
                grid.count(),
                self.config.measurements,
                grid.count(),
                y.dim(),
                means.len()
            ));
        }
        let tape = Tape::no_grad();
        let vars = self.params.bind(&tape, false);
        let solvers = self.solvers()?;
        let layout = Layout::new(grid, 1);
        let yv = tape.constant(y.to_owned().into_dyn());
        let fwd = self.run(&vars, yv, &means.to_owned(), &layout, BnMode::Eval, &solvers)?;
        let px = fwd
            .final_image
            .value()
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<Ix2>()
            .unwrap();
        Ok(Reconstruction {
            image: Image::new("", px).clamped(),
            trace: fwd.trace,
        })
    }

    fn run<'t>(
        &self,
        vars: &PipelineParams<Var<'t>>,
        y: Var<'t>,
        means: &Array1<f64>,
        layout: &Layout,
        mode: BnMode,
        solvers: &[Arc<XSolver>],
    ) -> Result<Forward<'t>> {
        let cfg = &self.config;
        if solvers.len() != cfg.modules {
            return dim_err(format!("{} solvers for {} modules", solvers.len(), cfg.modules));
        }
        let tape = y.tape();
        let train = mode == BnMode::Train;
        let a = &vars.sampling;
        let mean_col = tape.constant(means.clone().insert_axis(Axis(1)).into_dyn());

        let x0 = y.matmul(&vars.irm.weight.t()).add(&vars.irm.bias);
        let mut trace = Trace {
            x0: as2(x0.value()).to_owned(),
            means: means.clone(),
            modules: Vec::with_capacity(cfg.modules),
        };
        let mut update = StateUpdate::default();
        let mut lambdas = self.lambdas.clone();
        let mut module_images = Vec::with_capacity(cfg.modules);
        let mut x = x0.clone();

        for (k, solver) in solvers.iter().enumerate() {
            let mp = &vars.modules[k];
            let x_in = if cfg.coupling == Coupling::Detached && k > 0 {
                x.detach()
            } else {
                x.clone()
            };
            let rho = vars.modules[self.rho_index(k)].rho_raw.softplus();
            debug_assert!((rho.item() - solver.rho()).abs() <= 1e-12 * solver.rho());
            let slot = self.lambda_index(k);
            let lam_prev = match cfg.lambda_mode {
                LambdaMode::PerSampleZeroInit => tape.constant(ArrayD::zeros(IxDyn(&[1, cfg.n()]))),
                _ => tape.constant(row_vector(lambdas[slot].view())),
            };

            let mut stats = Vec::new();
            let z = prox_rows(&mp.prox, &shifted(&x_in, &lam_prev, &rho), mode, &mut stats)?;
            let lam = match (cfg.lambda_mode, train) {
                (LambdaMode::PerSampleZeroInit, _) => multiplier(&lam_prev, &rho, &z, &x_in),
                (_, true) => {
                    let per_sample = multiplier(&lam_prev, &rho, &z, &x_in);
                    let mean = as2(per_sample.value()).mean_axis(Axis(0)).unwrap();
                    lambdas[slot] = mean.clone();
                    tape.constant(row_vector(mean.view()))
                }
                (_, false) => lam_prev,
            };
            let x_tilde = solve_var(solver.clone(), a, &rho, &x_rhs(&y, a, &lam, &rho, &z))?;
            let (next, image) = hfc_rows(
                cfg.hfc.then_some(&mp.hfc),
                &x_tilde,
                &mean_col,
                layout,
                cfg.mss,
                mode,
                &mut stats,
            );
            if !cfg.hfc {
                // Keep the per-layer statistics aligned with the layer list.
                stats.extend(hfc_passthrough_stats(cfg.channels));
            }
            if train {
                update.batch_norm.extend(stats);
            }
            trace.modules.push(ModuleTrace {
                z: as2(z.value()).to_owned(),
                lambda: as2(lam.value()).to_owned(),
                x_tilde: as2(x_tilde.value()).to_owned(),
                x: as2(next.value()).to_owned(),
            });
            module_images.push(image);
            x = next;
        }

        let final_image = match module_images.last() {
            Some(img) => img.clone(),
            None => x0
                .add(&mean_col)
                .gather(layout.patches_to_cropped.clone(), &layout.cropped_shape()),
        };
        if train && cfg.lambda_mode != LambdaMode::PerSampleZeroInit {
            update.lambdas = lambdas;
        }
        Ok(Forward {
            final_image,
            module_images,
            trace,
            update,
        })
    }

    /// Absorbs the statistics of a training pass: running batch-norm
    /// averages and the multiplier buffers.
    pub fn apply_update(&mut self, update: StateUpdate) -> Result<()> {
        if !update.lambdas.is_empty() {
            if update.lambdas.len() != self.lambdas.len() {
                return dim_err("multiplier update does not match the buffers");
            }
            self.lambdas = update.lambdas;
        }
        if update.batch_norm.is_empty() {
            return Ok(());
        }
        let layers: Vec<_> = self.params.batch_norms_mut().collect();
        if layers.len() != update.batch_norm.len() {
            return dim_err(format!(
                "{} normalization layers, {} statistics",
                layers.len(),
                update.batch_norm.len()
            ));
        }
        for (layer, stats) in layers.into_iter().zip(&update.batch_norm) {
            if stats.count > 0 {
                layer.absorb(stats);
            }
        }
        Ok(())
    }
}

/// Placeholder statistics (count 0) for the layers of a disabled HFC block.
fn hfc_passthrough_stats(channels: usize) -> Vec<BnStats> {
    (0..4)
        .map(|_| BnStats {
            mean: Array1::zeros(channels),
            var: Array1::zeros(channels),
            count: 0,
        })
        .collect()
}

/// `x⁰ = W y + b` for a batch of measurements (`B × m`).
pub fn initial_reconstruct(ir: &InitialReconstructor<Tensor>, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let w = as2(&ir.weight);
    if y.ncols() != w.ncols() || ir.bias.len() != w.nrows() {
        return dim_err(format!(
            "IRM is {}x{} with {} biases, measurements have {} entries",
            w.nrows(),
            w.ncols(),
            ir.bias.len(),
            y.ncols()
        ));
    }
    let bias = ir.bias.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    Ok(y.dot(&w.t()) + bias)
}

/// `z = Net_z(x − λ/ρ)` with the stored normalization statistics.
pub fn z_update(
    prox: &ProxNetParams,
    rho: f64,
    lambda: ArrayView1<'_, f64>,
    x_prev: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let v = &x_prev - &(&lambda / rho);
    crate::nn::prox_apply(prox, v.view())
}

/// Batch mean of `λ + ρ(z_s − x_s)`.
pub fn lambda_update(
    lambda: ArrayView1<'_, f64>,
    rho: f64,
    z: ArrayView2<'_, f64>,
    x_prev: ArrayView2<'_, f64>,
) -> Result<Array1<f64>> {
    if z.dim() != x_prev.dim() || z.ncols() != lambda.len() || z.nrows() == 0 {
        return dim_err("multiplier update shapes disagree");
    }
    let residual = (&z - &x_prev).mean_axis(Axis(0)).unwrap();
    Ok(&lambda + &(residual * rho))
}

/// `x̃ = (AᵀA + ρI)⁻¹(Aᵀy + λ + ρz)` row by row; `solver` fixes `A` and `ρ`.
pub fn x_update(
    solver: &XSolver,
    y: ArrayView2<'_, f64>,
    z: ArrayView2<'_, f64>,
    lambda: ArrayView1<'_, f64>,
) -> Result<Array2<f64>> {
    let a = solver.matrix();
    if y.ncols() != a.nrows() || z.ncols() != a.ncols() || y.nrows() != z.nrows() || lambda.len() != a.ncols() {
        return dim_err("x-update shapes disagree");
    }
    let rhs = y.dot(a) + lambda + &(&z * solver.rho());
    solver.apply(rhs.view())
}

/// HFC refinement of one image's patch estimates. Returns the next module's
/// input rows and the cropped whole image.
pub fn hfc_apply(
    hfc: &ProxNetParams,
    x_tilde: ArrayView2<'_, f64>,
    means: ArrayView1<'_, f64>,
    grid: GridShape,
    mss: bool,
) -> Result<(Array2<f64>, Image)> {
    if x_tilde.dim() != (grid.count(), grid.n()) || means.len() != grid.count() {
        return dim_err(format!(
            "HFC expects {} x {} patches, got {:?}",
            grid.count(),
            grid.n(),
            x_tilde.dim()
        ));
    }
    let tape = Tape::no_grad();
    let net = hfc.bind(&tape);
    let layout = Layout::new(grid, 1);
    let xt = tape.constant(x_tilde.to_owned().into_dyn());
    let mc = tape.constant(means.to_owned().insert_axis(Axis(1)).into_dyn());
    let (next, image) = hfc_rows(Some(&net), &xt, &mc, &layout, mss, BnMode::Eval, &mut Vec::new());
    let px = image.value().clone().into_shape_with_order((grid.height, grid.width)).unwrap();
    Ok((as2(next.value()).to_owned(), Image::new("", px)))
}

/// Result of one module's three updates.
#[derive(Clone, Debug)]
pub struct DrmStep {
    pub z: Array2<f64>,
    pub lambda: Array2<f64>,
    pub x_tilde: Array2<f64>,
}

/// z-, λ- and x-updates for a batch with per-row multipliers and an
/// arbitrary proximal map, using the same graph operations as the learned
/// modules.
pub fn drm_step(
    solver: &Arc<XSolver>,
    y: ArrayView2<'_, f64>,
    x_prev: ArrayView2<'_, f64>,
    lambda: ArrayView2<'_, f64>,
    prox: impl Fn(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
) -> Result<DrmStep> {
    let tape = Tape::no_grad();
    let c = |a: ArrayView2<'_, f64>| tape.constant(a.to_owned().into_dyn());
    let (x, lam, yv) = (c(x_prev), c(lambda), c(y));
    let rho = tape.scalar(solver.rho());
    let a = tape.constant(solver.matrix().clone().into_dyn());
    let v = shifted(&x, &lam, &rho);
    let z = c(prox(as2(v.value()))?.view());
    let lam = multiplier(&lam, &rho, &z, &x);
    let x_tilde = solve_var(solver.clone(), &a, &rho, &x_rhs(&yv, &a, &lam, &rho, &z))?;
    Ok(DrmStep {
        z: as2(z.value()).to_owned(),
        lambda: as2(lam.value()).to_owned(),
        x_tilde: as2(x_tilde.value()).to_owned(),
    })
}
