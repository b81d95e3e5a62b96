//! Small single-head attention classifier with frozen weights.
//!
//! Each sample is a token sequence. Per layer:
//! `Q = X Wq'`, `K = X Wk`, `V = X Wv'`, `P = softmax(Q K^T / sqrt(d))`,
//! `H = X + (P V) Wo`, `X' = H + tanh(H W1) W2`, where `Wq' = Wq + dWq` and
//! `Wv' = Wv + dWv` carry the adapter deltas. The classifier reads the
//! mean of the last layer's rows.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::adapter::NamedTensors;
use crate::error::{Error, Result};
use crate::grouping::{ManifestEntry, WeightManifest};
use crate::rng::{stream, SeededStream};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelSpec {
    pub layers: usize,
    pub width: usize,
    /// MLP hidden width.
    pub hidden: usize,
    pub classes: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// Standard deviation of frozen weights times sqrt(fan-in).
    pub init_scale: f64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 16,
            hidden: 32,
            classes: 4,
            vocab: 32,
            seq_len: 4,
            init_scale: 1.0,
        }
    }
}

impl ToyModelSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.layers,
            self.width,
            self.hidden,
            self.classes,
            self.vocab,
            self.seq_len,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "toy model sizes must be positive: {self:?}"
            )));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "init_scale must be positive, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
    pub mlp_in: Array2<f64>,
    pub mlp_out: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    spec: ToyModelSpec,
    embedding: Array2<f64>,
    layers: Vec<LayerWeights>,
    head: Array2<f64>,
}

/// Token sequences with class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            tokens: indices.iter().map(|&i| self.tokens[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

pub fn query_name(layer: usize) -> String {
    format!("layer{layer}.q")
}

pub fn value_name(layer: usize) -> String {
    format!("layer{layer}.v")
}

fn random_matrix(rng: &mut SeededStream, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.normal())
}

fn to_dense(a: &Array2<f64>) -> DenseTensor {
    let (r, c) = a.dim();
    DenseTensor::from_dims(&[r, c], a.iter().copied().collect()).expect("matching sizes")
}

fn to_array(t: &DenseTensor) -> Array2<f64> {
    Array2::from_shape_vec((t.rows(), t.cols()), t.data().to_vec()).expect("matching sizes")
}

impl ToyModel {
    pub fn new(spec: ToyModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededStream::new(seed, stream::MODEL);
        let (d, h) = (spec.width, spec.hidden);
        let wd = spec.init_scale / (d as f64).sqrt();
        let wh = spec.init_scale / (h as f64).sqrt();
        let embedding = random_matrix(&mut rng, spec.vocab, d, 1.0);
        let layers = (0..spec.layers)
            .map(|_| LayerWeights {
                query: random_matrix(&mut rng, d, d, wd),
                key: random_matrix(&mut rng, d, d, wd),
                value: random_matrix(&mut rng, d, d, wd),
                output: random_matrix(&mut rng, d, d, wd),
                mlp_in: random_matrix(&mut rng, d, h, wd),
                mlp_out: random_matrix(&mut rng, h, d, wh),
            })
            .collect();
        let head = random_matrix(&mut rng, d, spec.classes, wd);
        Ok(Self {
            spec,
            embedding,
            layers,
            head,
        })
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    /// Adaptation targets: query then value of each layer.
    pub fn manifest(&self) -> WeightManifest {
        let d = self.spec.width;
        let entries = (0..self.spec.layers)
            .flat_map(|l| {
                [
                    ManifestEntry::new(query_name(l), d, d),
                    ManifestEntry::new(value_name(l), d, d),
                ]
            })
            .collect();
        WeightManifest::new(entries).expect("toy manifest is valid")
    }

    /// Frozen query and value weights in manifest order.
    pub fn target_weights(&self) -> NamedTensors {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, w)| {
                [
                    (query_name(l), to_dense(&w.query)),
                    (value_name(l), to_dense(&w.value)),
                ]
            })
            .collect()
    }

    pub fn zero_deltas(&self) -> NamedTensors {
        let d = self.spec.width;
        self.manifest()
            .entries()
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    DenseTensor::from_dims(&[d, d], vec![0.0; d * d]).expect("square"),
                )
            })
            .collect()
    }

    /// CRC32 over every frozen weight.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        let mut feed = |a: &Array2<f64>| {
            for v in a.iter() {
                h.update(&v.to_le_bytes());
            }
        };
        feed(&self.embedding);
        for w in &self.layers {
            for a in [&w.query, &w.key, &w.value, &w.output, &w.mlp_in, &w.mlp_out] {
                feed(a);
            }
        }
        feed(&self.head);
        h.finalize()
    }

    fn embed(&self, batch: &Batch) -> Result<Array2<f64>> {
        let (t, d) = (self.spec.seq_len, self.spec.width);
        let mut x = Array2::zeros((batch.len() * t, d));
        for (b, seq) in batch.tokens.iter().enumerate() {
            if seq.len() != t {
                return Err(Error::DimensionMismatch(format!(
                    "sequence {b} has length {}, expected {t}",
                    seq.len()
                )));
            }
            for (i, &tok) in seq.iter().enumerate() {
                if tok >= self.spec.vocab {
                    return Err(Error::DimensionMismatch(format!(
                        "token {tok} outside vocabulary {}",
                        self.spec.vocab
                    )));
                }
                x.row_mut(b * t + i).assign(&self.embedding.row(tok));
            }
        }
        Ok(x)
    }

    fn adapted(&self, deltas: &[(String, DenseTensor)]) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        let d = self.spec.width;
        let find = |name: String| -> Result<Array2<f64>> {
            let (_, t) = deltas
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::InvalidManifest(format!("no delta for `{name}`")))?;
            if t.dims() != [d, d] {
                return Err(Error::DimensionMismatch(format!(
                    "delta `{name}` is {}, expected ({d}x{d})",
                    t.shape()
                )));
            }
            Ok(to_array(t))
        };
        self.layers
            .iter()
            .enumerate()
            .map(|(l, w)| {
                Ok((
                    &w.query + &find(query_name(l))?,
                    &w.value + &find(value_name(l))?,
                ))
            })
            .collect()
    }
}

struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    act: Array2<f64>,
    wq: Array2<f64>,
    wv: Array2<f64>,
}

/// Activations of one forward pass.
pub struct ModelCache {
    layers: Vec<LayerCache>,
    probs: Array2<f64>,
    labels: Vec<usize>,
}

impl ModelCache {
    /// Class probabilities, one row per sample.
    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn run(
    model: &ToyModel,
    deltas: &[(String, DenseTensor)],
    batch: &Batch,
) -> Result<(Array2<f64>, Vec<LayerCache>)> {
    if batch.is_empty() {
        return Err(Error::DimensionMismatch("empty batch".into()));
    }
    let t = model.spec.seq_len;
    let inv_sqrt_d = 1.0 / (model.spec.width as f64).sqrt();
    let mut x = model.embed(batch)?;
    let mut caches = Vec::with_capacity(model.layers.len());
    for (w, (wq, wv)) in model.layers.iter().zip(model.adapted(deltas)?) {
        let q = x.dot(&wq);
        let k = x.dot(&w.key);
        let v = x.dot(&wv);
        let mut mixed = Array2::zeros(x.dim());
        let mut attn = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let rows = s![b * t..(b + 1) * t, ..];
            let mut p = q.slice(rows).dot(&k.slice(rows).t()) * inv_sqrt_d;
            softmax_rows(&mut p);
            mixed.slice_mut(rows).assign(&p.dot(&v.slice(rows)));
            attn.push(p);
        }
        let h = &x + &mixed.dot(&w.output);
        let act = h.dot(&w.mlp_in).mapv(f64::tanh);
        let next = &h + &act.dot(&w.mlp_out);
        caches.push(LayerCache {
            x,
            q,
            k,
            v,
            attn,
            act,
            wq,
            wv,
        });
        x = next;
    }
    let pooled = x
        .into_shape_with_order((batch.len(), t, model.spec.width))
        .expect("row-major")
        .mean_axis(Axis(1));
    let logits = pooled.expect("non-empty sequence").dot(&model.head);
    Ok((logits, caches))
}

/// Class scores for each sample.
pub fn logits(
    model: &ToyModel,
    deltas: &[(String, DenseTensor)],
    batch: &Batch,
) -> Result<Array2<f64>> {
    Ok(run(model, deltas, batch)?.0)
}

/// Mean cross-entropy and the cache needed by [`backward`].
pub fn forward(
    model: &ToyModel,
    deltas: &[(String, DenseTensor)],
    batch: &Batch,
) -> Result<(f64, ModelCache)> {
    let (mut logits, layers) = run(model, deltas, batch)?;
    let classes = model.spec.classes;
    let mut loss = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(&batch.labels) {
        if label >= classes {
            return Err(Error::DimensionMismatch(format!(
                "label {label} outside {classes} classes"
            )));
        }
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    softmax_rows(&mut logits);
    Ok((
        loss / batch.len() as f64,
        ModelCache {
            layers,
            probs: logits,
            labels: batch.labels.clone(),
        },
    ))
}

/// Gradient of the mean loss with respect to each query/value delta, in
/// manifest order.
pub fn backward(model: &ToyModel, cache: &ModelCache) -> NamedTensors {
    let (t, d) = (model.spec.seq_len, model.spec.width);
    let n = cache.labels.len();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let mut dlogits = cache.probs.clone();
    for (b, &label) in cache.labels.iter().enumerate() {
        dlogits[[b, label]] -= 1.0;
    }
    dlogits /= n as f64;
    let dpooled = dlogits.dot(&model.head.t()) / t as f64;
    let mut dx = Array2::zeros((n * t, d));
    for b in 0..n {
        for i in 0..t {
            dx.row_mut(b * t + i).assign(&dpooled.row(b));
        }
    }

    let mut grads = vec![None; 2 * model.layers.len()];
    for (l, (w, c)) in model.layers.iter().zip(&cache.layers).enumerate().rev() {
        let dz = dx.dot(&w.mlp_out.t()) * c.act.mapv(|a| 1.0 - a * a);
        let dh = &dx + &dz.dot(&w.mlp_in.t());
        let dmixed = dh.dot(&w.output.t());
        let mut dq = Array2::zeros((n * t, d));
        let mut dk = Array2::zeros((n * t, d));
        let mut dv = Array2::zeros((n * t, d));
        for (b, p) in c.attn.iter().enumerate() {
            let rows = s![b * t..(b + 1) * t, ..];
            let dm = dmixed.slice(rows);
            let dp = dm.dot(&c.v.slice(rows).t());
            dv.slice_mut(rows).assign(&p.t().dot(&dm));
            let mut ds = p * &dp;
            for (mut srow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let inner: f64 = srow.sum();
                srow.zip_mut_with(&prow, |sv, &pv| *sv -= pv * inner);
            }
            ds *= inv_sqrt_d;
            dq.slice_mut(rows).assign(&ds.dot(&c.k.slice(rows)));
            dk.slice_mut(rows).assign(&ds.t().dot(&c.q.slice(rows)));
        }
        let xt: ArrayView2<f64> = c.x.t();
        grads[2 * l] = Some((query_name(l), to_dense(&xt.dot(&dq))));
        grads[2 * l + 1] = Some((value_name(l), to_dense(&xt.dot(&dv))));
        dx = dh + dq.dot(&c.wq.t()) + dk.dot(&w.key.t()) + dv.dot(&c.wv.t());
    }
    grads
        .into_iter()
        .map(|g| g.expect("every layer visited"))
        .collect()
}
