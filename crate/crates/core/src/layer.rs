//! The full layer: multi-scale neighborhoods → normalized kernel scores →
//! composite biases → concatenation with input features → affine projection,
//! with an exact backward pass for every learnable parameter.
//!
//! Points are processed in fixed-size chunks. Each chunk is reduced
//! sequentially in ascending point and neighbor order and chunk partials are
//! folded in chunk order, so results do not depend on the worker count.

use std::collections::hash_map::DefaultHasher;
use std::f64::consts::PI;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bench::{Clock, NoClock, Phase};
use crate::composite::{init_weights, regularizer, CompositeWeights, RegularizerConfig};
use crate::error::{Error, Result};
use crate::geometry::{CanonicalOffset, Vec3};
use crate::kernels::{raw_from_positive, GibGrad, GibKind, GibParams, PreparedGib};
use crate::neighborhood::{
    MultiScaleNeighborhoods, NeighborCap, NeighborhoodIndex, PointCloud, ScaleSchedule,
};
use crate::normalization::{derive_seed, make_mc_samples, mean_grad_prepared, omega_prepared, McSampleSet};

/// Points per work unit. Fixed so that reductions are independent of the
/// number of workers.
const CHUNK: usize = 32;
/// Scale membership is tracked in a `u32` bitmask.
pub const MAX_SCALES: usize = 32;

const STREAM_GIBS: u64 = 1_000;
const STREAM_WEIGHTS: u64 = 2_000;
const STREAM_PROJECTION: u64 = 3_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GiblyConfig {
    pub schedule: ScaleSchedule,
    pub gibs_per_kind: usize,
    pub num_composites: usize,
    pub mc_samples: usize,
    pub projection_dim: usize,
    pub reg: RegularizerConfig,
    pub global_seed: u64,
    pub neighbor_cap: Option<NeighborCap>,
}

impl Default for GiblyConfig {
    fn default() -> Self {
        GiblyConfig {
            schedule: ScaleSchedule::default(),
            gibs_per_kind: 2,
            num_composites: 16,
            mc_samples: crate::normalization::DEFAULT_MC_SAMPLES,
            projection_dim: 32,
            reg: RegularizerConfig::default(),
            global_seed: 0,
            neighbor_cap: None,
        }
    }
}

impl GiblyConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.reg.validate()?;
        if self.schedule.num_scales > MAX_SCALES {
            return Err(Error::Config(format!("at most {MAX_SCALES} scales are supported")));
        }
        for (name, v) in [
            ("gibs_per_kind", self.gibs_per_kind),
            ("num_composites", self.num_composites),
            ("mc_samples", self.mc_samples),
            ("projection_dim", self.projection_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if let Some(cap) = self.neighbor_cap {
            if cap.max == 0 {
                return Err(Error::Config("max_neighbors must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Total kernel instances, `8 · gibs_per_kind`.
    pub fn num_gibs(&self) -> usize {
        GibKind::ALL.len() * self.gibs_per_kind
    }

    /// Width of the composite block, `n · S`.
    pub fn composite_width(&self) -> usize {
        self.num_composites * self.schedule.num_scales
    }
}

/// Kernel parameters drawn from the neighborhood's length scale.
pub fn init_gib_params(config: &GiblyConfig) -> Vec<GibParams> {
    let base = config.schedule.base_radius;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.global_seed, STREAM_GIBS));
    let mut out = Vec::with_capacity(config.num_gibs());
    for kind in GibKind::ALL {
        for _ in 0..config.gibs_per_kind {
            let mut p = GibParams::new(kind);
            p.r = rng.gen_range(0.1..=1.0) * base;
            p.t = rng.gen_range(0.1..=1.0) * base;
            p.w = rng.gen_range(0.1..=1.0) * base;
            p.beta = rng.gen_range(0.05..=0.45);
            p.angles.phi_x = -rng.gen_range(-PI..PI);
            p.angles.phi_y = -rng.gen_range(-PI..PI);
            p.angles.phi_z = -rng.gen_range(-PI..PI);
            for s in p.ell_scales.iter_mut() {
                *s = raw_from_positive(rng.gen_range(0.5..=2.0));
            }
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GiblyLayer {
    config: GiblyConfig,
    input_dim: usize,
    pub gib_params: Vec<GibParams>,
    pub weights: CompositeWeights,
    /// `(C_in + n·S) × projection_dim`
    pub projection: Array2<f64>,
    pub bias: Array1<f64>,
    mc_sets: Vec<McSampleSet>,
}

/// Gradients for every learnable parameter of a [`GiblyLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub gibs: Vec<GibGrad>,
    pub weights: Array2<f64>,
    pub projection: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrads {
    /// Flattened in [`GiblyLayer::params_to_vec`] order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for g in &self.gibs {
            v.extend_from_slice(&g.to_array());
        }
        v.extend(self.weights.iter());
        v.extend(self.projection.iter());
        v.extend(self.bias.iter());
        v
    }
}

/// Output of a forward pass plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `N × projection_dim`
    pub output: Array2<f64>,
    /// `N × (C_in + n·S)`: input features followed by composites, scale-major.
    pub pre_projection: Array2<f64>,
    /// Aggregated normalized scores, `N × S × m`.
    scores: Vec<f64>,
    num_scales: usize,
    num_gibs: usize,
    fingerprint: u64,
}

impl ForwardPass {
    /// Mean normalized score of every kernel at point `i`, scale `s`.
    pub fn gib_scores(&self, i: usize, s: usize) -> &[f64] {
        let start = (i * self.num_scales + s) * self.num_gibs;
        &self.scores[start..start + self.num_gibs]
    }

    pub fn num_points(&self) -> usize {
        self.output.nrows()
    }
}

/// Where per-point, per-scale neighbor lists come from.
pub trait NeighborSource: Sync {
    fn fill(&self, query: usize, point: Vec3, scratch: &mut Vec<(u32, f64)>, out: &mut [Vec<u32>]);
    fn num_points(&self) -> usize;
}

struct IndexSource<'i, 'a> {
    index: &'i NeighborhoodIndex<'a>,
    radii: Vec<f64>,
    cap: Option<NeighborCap>,
}

impl NeighborSource for IndexSource<'_, '_> {
    fn fill(&self, _query: usize, point: Vec3, scratch: &mut Vec<(u32, f64)>, out: &mut [Vec<u32>]) {
        self.index.multi_scale_into(point, &self.radii, self.cap, scratch, out);
    }

    fn num_points(&self) -> usize {
        self.index.len()
    }
}

impl NeighborSource for MultiScaleNeighborhoods {
    fn fill(&self, query: usize, _point: Vec3, _scratch: &mut Vec<(u32, f64)>, out: &mut [Vec<u32>]) {
        for (s, list) in out.iter_mut().enumerate() {
            list.clear();
            list.extend_from_slice(self.get(query, s));
        }
    }

    fn num_points(&self) -> usize {
        self.num_queries()
    }
}

/// Per-worker scratch buffers reused across chunks.
#[derive(Default)]
struct Workspace {
    scratch: Vec<(u32, f64)>,
    lists: Vec<Vec<u32>>,
    heads: Vec<usize>,
    /// Union of the per-scale lists of every chunk point, concatenated.
    union: Vec<u32>,
    masks: Vec<u32>,
    ranges: Vec<(usize, usize)>,
    /// `|N_i^s|` per chunk point and scale.
    counts: Vec<usize>,
    zbuf: Vec<CanonicalOffset>,
    psi: Vec<f64>,
}

impl Workspace {
    fn gather(&mut self, source: &impl NeighborSource, coords: &[Vec3], start: usize, end: usize, num_scales: usize) {
        self.lists.resize_with(num_scales, Vec::new);
        self.union.clear();
        self.masks.clear();
        self.ranges.clear();
        self.counts.clear();
        for i in start..end {
            source.fill(i, coords[i], &mut self.scratch, &mut self.lists);
            let begin = self.union.len();
            merge_union(&self.lists, &mut self.heads, &mut self.union, &mut self.masks);
            self.ranges.push((begin, self.union.len()));
            self.counts.extend(self.lists.iter().map(Vec::len));
        }
    }
}

/// Sorted union of ascending lists, with a bitmask of which lists hold each entry.
fn merge_union(lists: &[Vec<u32>], heads: &mut Vec<usize>, union: &mut Vec<u32>, masks: &mut Vec<u32>) {
    heads.clear();
    heads.resize(lists.len(), 0);
    loop {
        let mut min = u32::MAX;
        let mut any = false;
        for (list, &h) in lists.iter().zip(heads.iter()) {
            if h < list.len() && (!any || list[h] < min) {
                min = list[h];
                any = true;
            }
        }
        if !any {
            break;
        }
        let mut mask = 0u32;
        for (s, (list, h)) in lists.iter().zip(heads.iter_mut()).enumerate() {
            if *h < list.len() && list[*h] == min {
                mask |= 1 << s;
                *h += 1;
            }
        }
        union.push(min);
        masks.push(mask);
    }
}

struct ChunkForward<C> {
    scores: Vec<f64>,
    pre: Vec<f64>,
    out: Vec<f64>,
    clock: C,
}

struct ChunkBackward {
    gibs: Vec<GibGrad>,
    weights: Vec<f64>,
    /// `Σ_i ∂L/∂g_{i,j,s}`, `S × m`
    score_grad_sum: Vec<f64>,
}

impl GiblyLayer {
    pub fn new(config: GiblyConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let gib_params = init_gib_params(&config);
        let weights = init_weights(
            config.num_composites,
            config.num_gibs(),
            derive_seed(config.global_seed, STREAM_WEIGHTS),
        )?;
        let width = input_dim + config.composite_width();
        let bound = 1.0 / (width as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.global_seed, STREAM_PROJECTION));
        let projection = Array2::from_shape_simple_fn((width, config.projection_dim), || rng.gen_range(-bound..bound));
        let bias = Array1::zeros(config.projection_dim);
        let mc_sets = make_mc_sets(&config)?;
        Ok(GiblyLayer {
            config,
            input_dim,
            gib_params,
            weights,
            projection,
            bias,
            mc_sets,
        })
    }

    pub fn config(&self) -> &GiblyConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_gibs(&self) -> usize {
        self.gib_params.len()
    }

    /// `C_in + n·S`.
    pub fn pre_projection_width(&self) -> usize {
        self.input_dim + self.config.composite_width()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn mc_sets(&self) -> &[McSampleSet] {
        &self.mc_sets
    }

    /// Replaces the projection (and resets the bias) with a matrix of any output width.
    pub fn set_projection(&mut self, projection: Array2<f64>, bias: Array1<f64>) -> Result<()> {
        if projection.nrows() != self.pre_projection_width() {
            return Err(Error::DimensionMismatch {
                expected: self.pre_projection_width(),
                got: projection.nrows(),
            });
        }
        if bias.len() != projection.ncols() {
            return Err(Error::DimensionMismatch {
                expected: projection.ncols(),
                got: bias.len(),
            });
        }
        self.projection = projection;
        self.bias = bias;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.gib_params.len() * GibParams::NUM_SCALARS + self.weights.matrix().len() + self.projection.len() + self.bias.len()
    }

    /// Kernel scalars (10 per kernel), then `W`, projection and bias, row-major.
    pub fn params_to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for p in &self.gib_params {
            v.extend_from_slice(&p.to_array());
        }
        v.extend(self.weights.matrix().iter());
        v.extend(self.projection.iter());
        v.extend(self.bias.iter());
        v
    }

    pub fn set_params_from_slice(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                v.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.gib_params {
            p.set_from_slice(&v[off..off + GibParams::NUM_SCALARS]);
            off += GibParams::NUM_SCALARS;
        }
        for x in self.weights.matrix_mut().iter_mut() {
            *x = v[off];
            off += 1;
        }
        for x in self.projection.iter_mut() {
            *x = v[off];
            off += 1;
        }
        for x in self.bias.iter_mut() {
            *x = v[off];
            off += 1;
        }
        Ok(())
    }

    /// Clamps kernel parameters into their admissible ranges; idempotent.
    pub fn project_parameters(&mut self) {
        for p in &mut self.gib_params {
            p.project();
        }
    }

    pub fn regularizer_value(&self) -> f64 {
        regularizer(&self.weights, &self.config.reg).0
    }

    /// Hash of every parameter bit pattern; a forward cache is only valid for
    /// the parameters it was computed with.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.input_dim.hash(&mut h);
        self.config.schedule.num_scales.hash(&mut h);
        for v in self.params_to_vec() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn check_cloud(&self, cloud: &PointCloud, source_len: usize) -> Result<()> {
        if source_len != cloud.len() {
            return Err(Error::IndexCloudMismatch {
                index: source_len,
                cloud: cloud.len(),
            });
        }
        if cloud.feature_dim() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: cloud.feature_dim(),
            });
        }
        if self.projection.nrows() != self.pre_projection_width() || self.bias.len() != self.projection.ncols() {
            return Err(Error::ShapeMismatch("projection does not match the layer width".into()));
        }
        if self.weights.n() != self.config.num_composites || self.weights.m() != self.gib_params.len() {
            return Err(Error::ShapeMismatch("composite weights do not match the kernel count".into()));
        }
        Ok(())
    }

    fn index_source<'i, 'a>(&self, cloud: &PointCloud, index: &'i NeighborhoodIndex<'a>) -> Result<IndexSource<'i, 'a>> {
        let same = std::ptr::eq(index.points().as_ptr(), cloud.coords().as_ptr()) || index.points() == cloud.coords();
        if !same {
            return Err(Error::IndexCloudMismatch {
                index: index.len(),
                cloud: cloud.len(),
            });
        }
        Ok(IndexSource {
            index,
            radii: self.config.schedule.radii(),
            cap: self.config.neighbor_cap,
        })
    }

    /// Runs the layer with every cloud point as a query.
    pub fn forward(&self, cloud: &PointCloud, index: &NeighborhoodIndex<'_>) -> Result<ForwardPass> {
        let source = self.index_source(cloud, index)?;
        self.run_forward(cloud, &source, &mut NoClock)
    }

    /// Same as [`forward`](Self::forward) with per-phase timing.
    pub fn forward_clocked<C: Clock>(
        &self,
        cloud: &PointCloud,
        index: &NeighborhoodIndex<'_>,
        clock: &mut C,
    ) -> Result<ForwardPass> {
        let source = self.index_source(cloud, index)?;
        self.run_forward(cloud, &source, clock)
    }

    /// Forward pass over neighborhoods computed ahead of time (reused across
    /// training steps when the cloud is fixed).
    pub fn forward_with_neighborhoods(
        &self,
        cloud: &PointCloud,
        neighborhoods: &MultiScaleNeighborhoods,
    ) -> Result<ForwardPass> {
        if neighborhoods.num_scales() != self.config.schedule.num_scales {
            return Err(Error::DimensionMismatch {
                expected: self.config.schedule.num_scales,
                got: neighborhoods.num_scales(),
            });
        }
        self.run_forward(cloud, neighborhoods, &mut NoClock)
    }

    pub fn backward(
        &self,
        cloud: &PointCloud,
        index: &NeighborhoodIndex<'_>,
        pass: &ForwardPass,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<LayerGrads> {
        let source = self.index_source(cloud, index)?;
        self.run_backward(cloud, &source, pass, upstream)
    }

    pub fn backward_with_neighborhoods(
        &self,
        cloud: &PointCloud,
        neighborhoods: &MultiScaleNeighborhoods,
        pass: &ForwardPass,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<LayerGrads> {
        self.run_backward(cloud, neighborhoods, pass, upstream)
    }

    fn run_forward<C: Clock>(
        &self,
        cloud: &PointCloud,
        source: &impl NeighborSource,
        clock: &mut C,
    ) -> Result<ForwardPass> {
        self.check_cloud(cloud, source.num_points())?;
        let n_pts = cloud.len();
        let m = self.gib_params.len();
        let s_count = self.config.schedule.num_scales;
        let width = self.pre_projection_width();
        let d = self.output_dim();

        clock.mark();
        let gibs: Vec<PreparedGib> = self.gib_params.iter().map(PreparedGib::new).collect();
        let means: Vec<f64> = self
            .mc_sets
            .iter()
            .flat_map(|mc| gibs.iter().map(move |g| omega_prepared(g, mc) / mc.len() as f64))
            .collect();
        clock.lap(Phase::Normalization);

        let w = self.weights.matrix().as_standard_layout().into_owned();
        let proj = self.projection.as_standard_layout().into_owned();
        let w = w.as_slice().expect("standard layout");
        let proj = proj.as_slice().expect("standard layout");
        let bias = self.bias.to_vec();
        let features = cloud.features().map(|f| f.as_standard_layout().into_owned());
        let n_comp = self.config.num_composites;
        let coords = cloud.coords();

        let n_chunks = n_pts.div_ceil(CHUNK);
        let par_start = C::ENABLED.then(Instant::now);
        let chunks: Vec<ChunkForward<C>> = (0..n_chunks)
            .into_par_iter()
            .map_init(Workspace::default, |ws, c| {
                let mut ck = C::default();
                ck.mark();
                let start = c * CHUNK;
                let end = (start + CHUNK).min(n_pts);
                let len = end - start;
                ws.gather(source, coords, start, end, s_count);
                ck.lap(Phase::Neighborhood);

                let total = ws.union.len();
                // One kernel at a time keeps its rotated offsets in cache
                // between the two phases.
                ws.zbuf.resize(total, CanonicalOffset::default());
                ws.psi.resize(m * total, 0.0);
                for (j, gib) in gibs.iter().enumerate() {
                    for (ii, &(b, e)) in ws.ranges.iter().enumerate() {
                        let q = coords[start + ii];
                        for k in b..e {
                            ws.zbuf[k] = gib.canonical(coords[ws.union[k] as usize] - q);
                        }
                    }
                    ck.lap(Phase::Rotation);
                    let prow = &mut ws.psi[j * total..(j + 1) * total];
                    for (p, &z) in prow.iter_mut().zip(&ws.zbuf) {
                        *p = gib.eval_canonical(z);
                    }
                    ck.lap(Phase::Gib);
                }
                let mut scores = vec![0.0; len * s_count * m];
                for (ii, &(b, e)) in ws.ranges.iter().enumerate() {
                    for j in 0..m {
                        let prow = &ws.psi[j * total..(j + 1) * total];
                        for k in b..e {
                            let mut mask = ws.masks[k];
                            while mask != 0 {
                                let s = mask.trailing_zeros() as usize;
                                scores[(ii * s_count + s) * m + j] += prow[k];
                                mask &= mask - 1;
                            }
                        }
                    }
                    for s in 0..s_count {
                        let count = ws.counts[ii * s_count + s];
                        let row = &mut scores[(ii * s_count + s) * m..(ii * s_count + s + 1) * m];
                        if count > 0 {
                            let inv = 1.0 / count as f64;
                            row.iter_mut().for_each(|v| *v *= inv);
                        }
                    }
                }
                ck.lap(Phase::Gib);

                for ii in 0..len {
                    for s in 0..s_count {
                        let row = &mut scores[(ii * s_count + s) * m..(ii * s_count + s + 1) * m];
                        for (v, mean) in row.iter_mut().zip(&means[s * m..(s + 1) * m]) {
                            *v -= mean;
                        }
                    }
                }
                ck.lap(Phase::Normalization);

                let mut pre = vec![0.0; len * width];
                for ii in 0..len {
                    for s in 0..s_count {
                        let g = &scores[(ii * s_count + s) * m..(ii * s_count + s + 1) * m];
                        let dst = &mut pre[ii * width + self.input_dim + s * n_comp..][..n_comp];
                        for (c, out) in dst.iter_mut().enumerate() {
                            *out = w[c * m..(c + 1) * m].iter().zip(g).map(|(a, b)| a * b).sum();
                        }
                    }
                }
                ck.lap(Phase::Composite);

                if let Some(f) = &features {
                    for ii in 0..len {
                        pre[ii * width..ii * width + self.input_dim].copy_from_slice(f.row(start + ii).as_slice().unwrap());
                    }
                }
                let mut out = vec![0.0; len * d];
                for ii in 0..len {
                    let row = &mut out[ii * d..(ii + 1) * d];
                    row.copy_from_slice(&bias);
                    for (k, &x) in pre[ii * width..(ii + 1) * width].iter().enumerate() {
                        if x != 0.0 {
                            for (o, p) in row.iter_mut().zip(&proj[k * d..(k + 1) * d]) {
                                *o += x * p;
                            }
                        }
                    }
                }
                ck.lap(Phase::Other);
                ChunkForward {
                    scores,
                    pre,
                    out,
                    clock: ck,
                }
            })
            .collect();
        if let Some(t) = par_start {
            clock.parallel_wall(t.elapsed());
        }

        let mut scores = Vec::with_capacity(n_pts * s_count * m);
        let mut pre = Vec::with_capacity(n_pts * width);
        let mut out = Vec::with_capacity(n_pts * d);
        for ch in chunks {
            clock.absorb(&ch.clock);
            scores.extend_from_slice(&ch.scores);
            pre.extend_from_slice(&ch.pre);
            out.extend_from_slice(&ch.out);
        }
        Ok(ForwardPass {
            output: Array2::from_shape_vec((n_pts, d), out).expect("output shape"),
            pre_projection: Array2::from_shape_vec((n_pts, width), pre).expect("pre-projection shape"),
            scores,
            num_scales: s_count,
            num_gibs: m,
            fingerprint: self.fingerprint(),
        })
    }

    fn run_backward(
        &self,
        cloud: &PointCloud,
        source: &impl NeighborSource,
        pass: &ForwardPass,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<LayerGrads> {
        self.check_cloud(cloud, source.num_points())?;
        if pass.fingerprint != self.fingerprint() || pass.num_points() != cloud.len() {
            return Err(Error::StaleCache);
        }
        if upstream.dim() != pass.output.dim() {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient is {:?}, output is {:?}",
                upstream.dim(),
                pass.output.dim()
            )));
        }
        let n_pts = cloud.len();
        let m = self.gib_params.len();
        let s_count = self.config.schedule.num_scales;
        let n_comp = self.config.num_composites;
        let cin = self.input_dim;

        let d_bias = upstream.sum_axis(Axis(0));
        let d_proj = pass.pre_projection.t().dot(&upstream);
        let d_pre = upstream.dot(&self.projection.t());

        let gibs: Vec<PreparedGib> = self.gib_params.iter().map(PreparedGib::new).collect();
        let w = self.weights.matrix().as_standard_layout().into_owned();
        let w = w.as_slice().expect("standard layout");
        let coords = cloud.coords();

        let n_chunks = n_pts.div_ceil(CHUNK);
        let chunks: Vec<ChunkBackward> = (0..n_chunks)
            .into_par_iter()
            .map_init(Workspace::default, |ws, c| {
                let start = c * CHUNK;
                let end = (start + CHUNK).min(n_pts);
                let mut out = ChunkBackward {
                    gibs: vec![GibGrad::default(); m],
                    weights: vec![0.0; n_comp * m],
                    score_grad_sum: vec![0.0; s_count * m],
                };
                ws.gather(source, coords, start, end, s_count);
                // ∂L/∂g for every scale of the current point
                let mut dg = vec![0.0; s_count * m];
                for (ii, &(b, e)) in ws.ranges.iter().enumerate() {
                    let i = start + ii;
                    dg.iter_mut().for_each(|v| *v = 0.0);
                    for s in 0..s_count {
                        let g = pass.gib_scores(i, s);
                        let dgs = &mut dg[s * m..(s + 1) * m];
                        for c in 0..n_comp {
                            let dc = d_pre[[i, cin + s * n_comp + c]];
                            if dc == 0.0 {
                                continue;
                            }
                            let wrow = &w[c * m..(c + 1) * m];
                            let dwrow = &mut out.weights[c * m..(c + 1) * m];
                            for j in 0..m {
                                dgs[j] += wrow[j] * dc;
                                dwrow[j] += dc * g[j];
                            }
                        }
                        for j in 0..m {
                            out.score_grad_sum[s * m + j] += dgs[j];
                        }
                    }
                    let q = coords[i];
                    for (j, gib) in gibs.iter().enumerate() {
                        let mut per_scale = [0.0; MAX_SCALES];
                        let mut any = false;
                        for s in 0..s_count {
                            let count = ws.counts[ii * s_count + s];
                            if count > 0 {
                                per_scale[s] = dg[s * m + j] / count as f64;
                                any |= per_scale[s] != 0.0;
                            }
                        }
                        if !any {
                            continue;
                        }
                        let acc = &mut out.gibs[j];
                        for k in b..e {
                            let mut mask = ws.masks[k];
                            let mut weight = 0.0;
                            while mask != 0 {
                                let s = mask.trailing_zeros() as usize;
                                weight += per_scale[s];
                                mask &= mask - 1;
                            }
                            if weight != 0.0 {
                                let (_, grad) = gib.eval_grad(coords[ws.union[k] as usize] - q);
                                acc.add_scaled(&grad, weight);
                            }
                        }
                    }
                }
                out
            })
            .collect();

        let mut gib_grads = vec![GibGrad::default(); m];
        let mut d_w = vec![0.0; n_comp * m];
        let mut score_grad_sum = vec![0.0; s_count * m];
        for ch in &chunks {
            for (a, b) in gib_grads.iter_mut().zip(&ch.gibs) {
                a.add_scaled(b, 1.0);
            }
            for (a, b) in d_w.iter_mut().zip(&ch.weights) {
                *a += b;
            }
            for (a, b) in score_grad_sum.iter_mut().zip(&ch.score_grad_sum) {
                *a += b;
            }
        }
        // the subtracted Monte-Carlo mean depends on the kernel parameters too
        for (s, mc) in self.mc_sets.iter().enumerate() {
            for (j, gib) in gibs.iter().enumerate() {
                let total = score_grad_sum[s * m + j];
                if total != 0.0 {
                    gib_grads[j].add_scaled(&mean_grad_prepared(gib, mc), -total);
                }
            }
        }
        let mut d_w = Array2::from_shape_vec((n_comp, m), d_w).expect("weight grad shape");
        d_w += &regularizer(&self.weights, &self.config.reg).1;
        Ok(LayerGrads {
            gibs: gib_grads,
            weights: d_w,
            projection: d_proj,
            bias: d_bias,
        })
    }
}

fn make_mc_sets(config: &GiblyConfig) -> Result<Vec<McSampleSet>> {
    (0..config.schedule.num_scales)
        .map(|s| {
            make_mc_samples(
                config.mc_samples,
                config.schedule.radius(s),
                derive_seed(config.global_seed, s as u64),
            )
        })
        .collect()
}
