//! Point-wise segmentation: the layer followed by a linear softmax head,
//! trained with cross-entropy, against a head on the raw inputs alone.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::GibKind;
use crate::layer::{ForwardPass, GiblyConfig, GiblyLayer};
use crate::neighborhood::{multi_scale_neighborhoods_capped, NeighborhoodIndex, PointCloud};
use crate::normalization::derive_seed;
use crate::training::optim::{AdamWConfig, OptimizerState};

const STREAM_HEAD: u64 = 4_000;
const STREAM_BASELINE_HEAD: u64 = 5_000;

/// Dense class ids for the distinct labels of a cloud, in ascending label order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    labels: Vec<u16>,
}

impl ClassMap {
    pub fn from_labels(labels: &[u16]) -> Self {
        let mut distinct = labels.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        ClassMap { labels: distinct }
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn class_of(&self, label: u16) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    pub fn label_of(&self, class: usize) -> u16 {
        self.labels[class]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `D × K`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearHead {
    pub fn new(input_dim: usize, num_classes: usize, seed: u64) -> Self {
        let bound = 1.0 / (input_dim.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearHead {
            weights: Array2::from_shape_simple_fn((input_dim, num_classes), || rng.gen_range(-bound..bound)),
            bias: Array1::zeros(num_classes),
        }
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Mean cross-entropy of row-wise softmax and its gradient with respect to
/// the logits.
pub fn softmax_cross_entropy(logits: ArrayView2<'_, f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, row) in logits.outer_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for (k, &z) in row.iter().enumerate() {
            let e = (z - max).exp();
            grad[[i, k]] = e;
            sum += e;
        }
        loss += sum.ln() + max - row[targets[i]];
        for k in 0..row.len() {
            grad[[i, k]] /= sum;
        }
        grad[[i, targets[i]]] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    grad.mapv_inplace(|g| g * inv);
    (loss * inv, grad)
}

/// Row-wise argmax; ties go to the lower class.
pub fn predict_classes(logits: ArrayView2<'_, f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMetrics {
    pub accuracy: f64,
    pub per_class_iou: Vec<f64>,
    pub miou: f64,
}

/// Accuracy and intersection-over-union per class. A class with neither
/// ground-truth nor predicted points gets IoU 1.
pub fn segmentation_metrics(predicted: &[usize], target: &[usize], num_classes: usize) -> SegmentationMetrics {
    assert_eq!(predicted.len(), target.len());
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut correct = 0;
    for (&p, &t) in predicted.iter().zip(target) {
        if p == t {
            tp[t] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let per_class_iou: Vec<f64> = (0..num_classes)
        .map(|c| {
            let denom = tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                1.0
            } else {
                tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let miou = per_class_iou.iter().sum::<f64>() / num_classes.max(1) as f64;
    SegmentationMetrics {
        accuracy: correct as f64 / predicted.len().max(1) as f64,
        per_class_iou,
        miou,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub metrics: SegmentationMetrics,
}

/// A named parameter block for the text dump.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        NamedTensor {
            name: name.into(),
            shape,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub model: String,
    /// Metrics before each update; the entry for `epochs` is after the last one.
    pub epochs: Vec<EpochMetrics>,
    pub parameters: Vec<NamedTensor>,
}

impl TrainReport {
    pub fn final_metrics(&self) -> &EpochMetrics {
        self.epochs.last().expect("report has at least one entry")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterOptions {
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Keep kernel parameters at their initial values.
    pub freeze_geometry: bool,
}

impl Default for SegmenterOptions {
    fn default() -> Self {
        SegmenterOptions {
            epochs: 60,
            optimizer: AdamWConfig::default(),
            seed: 0,
            freeze_geometry: false,
        }
    }
}

/// Both trained models and their reports.
#[derive(Debug, Clone)]
pub struct SegmentationOutcome {
    pub gibly: TrainReport,
    pub baseline: TrainReport,
    pub layer: GiblyLayer,
    pub head: LinearHead,
    pub baseline_head: LinearHead,
    pub classes: ClassMap,
    /// Input cloud as seen by the layer (features = standardized inputs).
    pub input: PointCloud,
    pub last_pass: ForwardPass,
}

/// Coordinates centered on the centroid and scaled to unit RMS radius,
/// followed by any features the cloud already carries.
pub fn standardized_inputs(cloud: &PointCloud) -> Array2<f64> {
    let c = cloud.centroid();
    let n = cloud.len();
    let rms = (cloud.coords().iter().map(|p| p.distance_squared(c)).sum::<f64>() / n as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    let coords = Array2::from_shape_fn((n, 3), |(i, k)| (cloud.coords()[i][k] - c[k]) * scale);
    match cloud.features() {
        Some(f) => concatenate(Axis(1), &[coords.view(), f.view()]).expect("row counts agree"),
        None => coords,
    }
}

fn targets_of(cloud: &PointCloud) -> Result<(ClassMap, Vec<usize>)> {
    let labels = cloud.labels().ok_or(Error::DegenerateLabels)?;
    let classes = ClassMap::from_labels(labels);
    if classes.num_classes() < 2 {
        return Err(Error::DegenerateLabels);
    }
    let targets = labels.iter().map(|&l| classes.class_of(l).expect("label is in the map")).collect();
    Ok((classes, targets))
}

fn head_snapshot(prefix: &str, head: &LinearHead) -> Vec<NamedTensor> {
    vec![
        NamedTensor::new(
            format!("{prefix}.weights"),
            head.weights.shape().to_vec(),
            head.weights.iter().copied().collect(),
        ),
        NamedTensor::new(format!("{prefix}.bias"), vec![head.bias.len()], head.bias.to_vec()),
    ]
}

/// Snapshot of a layer's parameters as named blocks.
pub fn layer_snapshot(layer: &GiblyLayer) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (j, p) in layer.gib_params.iter().enumerate() {
        out.push(NamedTensor::new(format!("gib{j}.{}", p.kind.name()), vec![10], p.to_array().to_vec()));
    }
    let w = layer.weights.matrix();
    out.push(NamedTensor::new("composite.weights", w.shape().to_vec(), w.iter().copied().collect()));
    out.push(NamedTensor::new(
        "projection.weights",
        layer.projection.shape().to_vec(),
        layer.projection.iter().copied().collect(),
    ));
    out.push(NamedTensor::new("projection.bias", vec![layer.bias.len()], layer.bias.to_vec()));
    out
}

/// Layer slots get weight decay on composite weights and projection only.
fn layer_decay_mask(layer: &GiblyLayer) -> Vec<bool> {
    let gib = layer.num_gibs() * crate::kernels::GibParams::NUM_SCALARS;
    let mut mask = vec![false; gib];
    mask.extend(std::iter::repeat_n(true, layer.weights.matrix().len() + layer.projection.len()));
    mask.extend(std::iter::repeat_n(false, layer.bias.len()));
    mask
}

fn head_params(head: &LinearHead) -> impl Iterator<Item = f64> + '_ {
    head.weights.iter().copied().chain(head.bias.iter().copied())
}

fn set_head(head: &mut LinearHead, v: &[f64]) {
    let nw = head.weights.len();
    for (x, &y) in head.weights.iter_mut().zip(&v[..nw]) {
        *x = y;
    }
    for (x, &y) in head.bias.iter_mut().zip(&v[nw..]) {
        *x = y;
    }
}

/// Trains the layer plus a linear head on the labeled `scene`, and a head on
/// the raw inputs with the same optimizer and epoch budget. The layer is
/// seeded from `options.seed`, overriding `config.global_seed`.
pub fn train_segmenter(scene: &PointCloud, config: &GiblyConfig, options: &SegmenterOptions) -> Result<SegmentationOutcome> {
    let (classes, targets) = targets_of(scene)?;
    let k = classes.num_classes();
    let inputs = standardized_inputs(scene);
    let input = PointCloud::new(scene.coords().to_vec())?
        .with_labels(scene.labels().expect("checked").to_vec())?
        .with_features(inputs.clone())?;

    let mut config = config.clone();
    config.global_seed = options.seed;
    let mut layer = GiblyLayer::new(config, inputs.ncols())?;
    let index = NeighborhoodIndex::new(input.coords(), layer.config().schedule.max_radius())?;
    let hoods = multi_scale_neighborhoods_capped(
        &index,
        input.coords(),
        &layer.config().schedule,
        layer.config().neighbor_cap,
    );
    let mut head = LinearHead::new(layer.output_dim(), k, derive_seed(options.seed, STREAM_HEAD));

    let n_layer = layer.num_params();
    let mut decay = layer_decay_mask(&layer);
    decay.extend(std::iter::repeat_n(true, head.weights.len()));
    decay.extend(std::iter::repeat_n(false, head.bias.len()));
    let mut opt = OptimizerState::new(options.optimizer, n_layer + head.num_params());
    let mut epochs = Vec::with_capacity(options.epochs + 1);
    let last_pass;
    let mut epoch = 0;
    loop {
        let pass = layer.forward_with_neighborhoods(&input, &hoods)?;
        let logits = head.logits(pass.output.view());
        let (ce, dlogits) = softmax_cross_entropy(logits.view(), &targets);
        let loss = ce + layer.regularizer_value();
        if !loss.is_finite() {
            return Err(Error::ShapeMismatch(format!("loss became non-finite at epoch {epoch}")));
        }
        let metrics = segmentation_metrics(&predict_classes(logits.view()), &targets, k);
        epochs.push(EpochMetrics { epoch, loss, metrics });
        if epoch == options.epochs {
            last_pass = pass;
            break;
        }
        let d_head_w = pass.output.t().dot(&dlogits);
        let d_head_b = dlogits.sum_axis(Axis(0));
        let upstream = dlogits.dot(&head.weights.t());
        let grads = layer.backward_with_neighborhoods(&input, &hoods, &pass, upstream.view())?;
        let mut g = grads.to_vec();
        if options.freeze_geometry {
            let gib = layer.num_gibs() * crate::kernels::GibParams::NUM_SCALARS;
            g[..gib].iter_mut().for_each(|x| *x = 0.0);
        }
        g.extend(d_head_w.iter().copied());
        g.extend(d_head_b.iter().copied());
        let mut params = layer.params_to_vec();
        params.extend(head_params(&head));
        opt.step(&mut params, &g, Some(&decay))?;
        layer.set_params_from_slice(&params[..n_layer])?;
        layer.project_parameters();
        set_head(&mut head, &params[n_layer..]);
        epoch += 1;
    }
    let mut parameters = layer_snapshot(&layer);
    parameters.extend(head_snapshot("head", &head));
    let gibly = TrainReport {
        model: "gibly".into(),
        epochs,
        parameters,
    };

    let (baseline, baseline_head) = train_baseline(&inputs, &targets, k, options)?;
    Ok(SegmentationOutcome {
        gibly,
        baseline,
        layer,
        head,
        baseline_head,
        classes,
        input,
        last_pass,
    })
}

fn train_baseline(
    inputs: &Array2<f64>,
    targets: &[usize],
    k: usize,
    options: &SegmenterOptions,
) -> Result<(TrainReport, LinearHead)> {
    let mut head = LinearHead::new(inputs.ncols(), k, derive_seed(options.seed, STREAM_BASELINE_HEAD));
    let mut decay = vec![true; head.weights.len()];
    decay.extend(std::iter::repeat_n(false, head.bias.len()));
    let mut opt = OptimizerState::new(options.optimizer, head.num_params());
    let mut epochs = Vec::with_capacity(options.epochs + 1);
    for epoch in 0..=options.epochs {
        let logits = head.logits(inputs.view());
        let (loss, dlogits) = softmax_cross_entropy(logits.view(), targets);
        let metrics = segmentation_metrics(&predict_classes(logits.view()), targets, k);
        epochs.push(EpochMetrics { epoch, loss, metrics });
        if epoch == options.epochs {
            break;
        }
        let mut g: Vec<f64> = inputs.t().dot(&dlogits).iter().copied().collect();
        g.extend(dlogits.sum_axis(Axis(0)).iter().copied());
        let mut params: Vec<f64> = head_params(&head).collect();
        opt.step(&mut params, &g, Some(&decay))?;
        set_head(&mut head, &params);
    }
    Ok((
        TrainReport {
            model: "baseline".into(),
            epochs,
            parameters: head_snapshot("head", &head),
        },
        head,
    ))
}

/// Per-composite class separability of the pre-projection composite block:
/// the ratio of between-class to within-class variance, maximized over
/// scales.
pub fn composite_discriminability(layer: &GiblyLayer, pass: &ForwardPass, targets: &[usize], num_classes: usize) -> Vec<f64> {
    let n_comp = layer.config().num_composites;
    let block = pass.pre_projection.slice(s![.., layer.input_dim()..]);
    let num_scales = layer.config().schedule.num_scales;
    (0..n_comp)
        .map(|i| {
            (0..num_scales)
                .map(|sc| separability(block.column(sc * n_comp + i).iter().copied(), targets, num_classes))
                .fold(0.0, f64::max)
        })
        .collect()
}

fn separability(values: impl Iterator<Item = f64>, targets: &[usize], k: usize) -> f64 {
    let mut sum = vec![0.0; k];
    let mut sq = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (v, &t) in values.zip(targets) {
        sum[t] += v;
        sq[t] += v * v;
        count[t] += 1;
    }
    let total: usize = count.iter().sum();
    let grand = sum.iter().sum::<f64>() / total as f64;
    let (mut between, mut within) = (0.0, 0.0);
    for c in 0..k {
        if count[c] == 0 {
            continue;
        }
        let mean = sum[c] / count[c] as f64;
        between += count[c] as f64 * (mean - grand).powi(2);
        within += sq[c] - count[c] as f64 * mean * mean;
    }
    if within <= 0.0 {
        if between > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        between / within
    }
}

/// The most separating composite and the kernel with the largest |W_ij| in it.
pub fn dominant_kernel(layer: &GiblyLayer, pass: &ForwardPass, targets: &[usize], num_classes: usize) -> (usize, usize, GibKind) {
    let scores = composite_discriminability(layer, pass, targets, num_classes);
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    let row = layer.weights.matrix().row(best);
    let mut j = 0;
    for (c, &w) in row.iter().enumerate() {
        if w.abs() > row[j].abs() {
            j = c;
        }
    }
    (best, j, layer.gib_params[j].kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::gradcheck::{gradcheck, GradcheckOptions};

    #[test]
    fn metrics_on_a_small_confusion() {
        let m = segmentation_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], 2);
        assert_eq!(m.accuracy, 0.75);
        assert!((m.per_class_iou[0] - 0.5).abs() < 1e-15);
        assert!((m.per_class_iou[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_gradient() {
        let targets = [2usize, 0];
        let f = |v: &[f64]| {
            let l = Array2::from_shape_vec((2, 3), v.to_vec()).unwrap();
            let (loss, g) = softmax_cross_entropy(l.view(), &targets);
            (loss, g.iter().copied().collect())
        };
        let r = gradcheck(f, &[0.1, -0.4, 0.7, 2.0, 0.3, -1.0], GradcheckOptions::relative(1e-6, 1e-7));
        assert!(r.passed(), "{:?}", r.worst());
        // Uniform logits give ln K.
        let (loss, _) = softmax_cross_entropy(Array2::zeros((1, 4)).view(), &[1]);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn class_map_is_dense_and_sorted() {
        let m = ClassMap::from_labels(&[7, 2, 7, 9]);
        assert_eq!(m.labels(), &[2, 7, 9]);
        assert_eq!(m.class_of(9), Some(2));
        assert_eq!(m.class_of(3), None);
        assert_eq!(m.label_of(1), 7);
    }

    #[test]
    fn single_class_is_rejected() {
        let cloud = PointCloud::new(vec![crate::Vec3::ZERO, crate::Vec3::new(1.0, 0.0, 0.0)])
            .unwrap()
            .with_labels(vec![3, 3])
            .unwrap();
        let err = train_segmenter(&cloud, &GiblyConfig::default(), &SegmenterOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateLabels));
    }

    #[test]
    fn separability_ratio() {
        assert_eq!(separability([0.0, 0.0, 1.0, 1.0].into_iter(), &[0, 0, 1, 1], 2), f64::INFINITY);
        assert_eq!(separability([1.0, 1.0, 1.0, 1.0].into_iter(), &[0, 0, 1, 1], 2), 0.0);
        let r = separability([0.0, 1.0, 1.0, 2.0].into_iter(), &[0, 0, 1, 1], 2);
        assert!((r - 1.0).abs() < 1e-12);
    }
}
