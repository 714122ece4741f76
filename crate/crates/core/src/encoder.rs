//! Convolutional mark encoder with exact reverse-mode gradients.
//!
//! Forward pass: the image is inverted to ink density (`1 - intensity`), run
//! through `conv -> ReLU` layers (zero padding `kernel_size / 2`), averaged
//! over space per channel, projected linearly to `embedding_dim`, and
//! L2-normalized. Everything is `f64`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::MarkImage;
use crate::rng::{derive_seed, Rng};

pub const MODEL_MAGIC: &str = "markmatch-model";
pub const MODEL_VERSION: &str = "v1";

/// Pre-normalization norms below this are nudged along the first axis.
const DEGENERATE_NORM: f64 = 1e-12;
const DEGENERATE_NUDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel_size: usize, stride: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel_size,
            stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub conv_layers: Vec<ConvSpec>,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 64,
            conv_layers: vec![ConvSpec::new(8, 3, 2), ConvSpec::new(16, 3, 2), ConvSpec::new(32, 3, 2)],
            embedding_dim: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerGeom {
    in_ch: usize,
    in_size: usize,
    out_ch: usize,
    out_size: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl EncoderConfig {
    fn geometry(&self) -> Result<Vec<LayerGeom>> {
        if self.embedding_dim < 2 {
            return Err(Error::arg("embedding_dim must be at least 2"));
        }
        if self.input_size == 0 {
            return Err(Error::arg("input_size must be positive"));
        }
        if self.conv_layers.is_empty() {
            return Err(Error::arg("encoder needs at least one conv layer"));
        }
        let mut geoms = Vec::with_capacity(self.conv_layers.len());
        let (mut ch, mut size) = (1, self.input_size);
        for (i, l) in self.conv_layers.iter().enumerate() {
            if l.out_channels == 0 || l.kernel_size == 0 || l.stride == 0 {
                return Err(Error::arg(format!("conv layer {i} has a zero parameter")));
            }
            let pad = l.kernel_size / 2;
            if l.kernel_size > size {
                return Err(Error::arg(format!(
                    "conv layer {i}: kernel {} larger than its {size}px input",
                    l.kernel_size
                )));
            }
            let out = (size + 2 * pad - l.kernel_size) / l.stride + 1;
            geoms.push(LayerGeom {
                in_ch: ch,
                in_size: size,
                out_ch: l.out_channels,
                out_size: out,
                k: l.kernel_size,
                stride: l.stride,
                pad,
            });
            ch = l.out_channels;
            size = out;
        }
        Ok(geoms)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry().map(|_| ())
    }
}

/// Named flat parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    geoms: Vec<LayerGeom>,
    /// `conv{i}.weight [out, in, k, k]`, `conv{i}.bias [out]` per layer, then
    /// `proj.weight [d, channels]`, `proj.bias [d]`.
    tensors: Vec<ParamTensor>,
    version: String,
}

/// Gradients laid out exactly like [`EncoderParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub tensors: Vec<Vec<f64>>,
}

impl ParamGradients {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        ParamGradients {
            tensors: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flatten().copied()
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|g| g == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Accepts values that are already unit-norm within 1e-6.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || !values.iter().all(|v| v.is_finite()) {
            return Err(Error::arg("embedding must be non-empty and finite"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::arg(format!("embedding norm {norm} is not 1")));
        }
        Ok(EmbeddingVector(values))
    }

    /// Scales `values` to unit length.
    pub fn normalized(values: &[f64]) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::arg("cannot normalize a zero or non-finite vector"));
        }
        Ok(EmbeddingVector(values.iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Intermediate values kept for the backward pass of one image.
pub(crate) struct Trace {
    /// `acts[0]` is the ink-density input, `acts[i + 1]` the ReLU output of
    /// conv layer `i`.
    acts: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    norm: f64,
    embedding: Vec<f64>,
}

impl Trace {
    pub(crate) fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}

fn conv_forward(g: &LayerGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (is, os) = (g.in_size as isize, g.out_size);
    let mut out = vec![0.0; g.out_ch * os * os];
    for oc in 0..g.out_ch {
        let plane = &mut out[oc * os * os..(oc + 1) * os * os];
        plane.fill(bias[oc]);
        for ic in 0..g.in_ch {
            let inp = &input[ic * g.in_size * g.in_size..(ic + 1) * g.in_size * g.in_size];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let w = weight[((oc * g.in_ch + ic) * g.k + ky) * g.k + kx];
                    let (lo, hi) = valid_range(kx, g);
                    for oy in 0..os {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= is {
                            continue;
                        }
                        let row = &inp[iy as usize * g.in_size..];
                        let orow = &mut plane[oy * os..(oy + 1) * os];
                        for ox in lo..hi {
                            orow[ox] += w * row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output columns whose kernel tap `kx` lands inside the input row.
#[inline]
fn valid_range(kx: usize, g: &LayerGeom) -> (usize, usize) {
    let lo = if kx >= g.pad { 0 } else { (g.pad - kx).div_ceil(g.stride) };
    // ox * stride + kx - pad <= in_size - 1
    let limit = g.in_size + g.pad;
    let hi = if limit > kx {
        ((limit - kx - 1) / g.stride + 1).min(g.out_size)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Accumulates weight/bias gradients; returns the input gradient when asked.
fn conv_backward(
    g: &LayerGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let (is, os) = (g.in_size as isize, g.out_size);
    let mut grad_in = want_input.then(|| vec![0.0; g.in_ch * g.in_size * g.in_size]);
    for oc in 0..g.out_ch {
        let gplane = &grad_out[oc * os * os..(oc + 1) * os * os];
        grad_b[oc] += gplane.iter().sum::<f64>();
        for ic in 0..g.in_ch {
            let in_off = ic * g.in_size * g.in_size;
            let inp = &input[in_off..in_off + g.in_size * g.in_size];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = ((oc * g.in_ch + ic) * g.k + ky) * g.k + kx;
                    let w = weight[widx];
                    let (lo, hi) = valid_range(kx, g);
                    let mut acc = 0.0;
                    for oy in 0..os {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= is {
                            continue;
                        }
                        let base = iy as usize * g.in_size;
                        let grow = &gplane[oy * os..(oy + 1) * os];
                        for ox in lo..hi {
                            acc += grow[ox] * inp[base + ox * g.stride + kx - g.pad];
                        }
                        if let Some(gi) = grad_in.as_mut() {
                            let girow = &mut gi[in_off + base..];
                            for ox in lo..hi {
                                girow[ox * g.stride + kx - g.pad] += w * grow[ox];
                            }
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
    grad_in
}

impl EncoderParams {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        let geoms = config.geometry()?;
        let mut rng = Rng::new(derive_seed(seed, 0x454e_4321));
        let mut tensors = Vec::new();
        let mut uniform = |name: String, shape: Vec<usize>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.range(-bound, bound)).collect();
            ParamTensor { name, shape, data }
        };
        for (i, g) in geoms.iter().enumerate() {
            tensors.push(uniform(
                format!("conv{i}.weight"),
                vec![g.out_ch, g.in_ch, g.k, g.k],
                g.in_ch * g.k * g.k,
            ));
            tensors.push(ParamTensor {
                name: format!("conv{i}.bias"),
                shape: vec![g.out_ch],
                data: vec![0.0; g.out_ch],
            });
        }
        let last = geoms.last().expect("validated non-empty").out_ch;
        let d = config.embedding_dim;
        tensors.push(uniform("proj.weight".into(), vec![d, last], last));
        tensors.push(ParamTensor {
            name: "proj.bias".into(),
            shape: vec![d],
            data: vec![0.0; d],
        });
        Ok(EncoderParams {
            config,
            geoms,
            tensors,
            version: format!("init-{seed}"),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    /// Mutable access for optimizers. Shapes must not change.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.tensors.iter_mut().map(|t| t.data.as_mut_slice())
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn set_version(&mut self, version: impl Into<String>) {
        self.version = version.into().split_whitespace().collect::<Vec<_>>().join("_");
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn check_image(&self, image: &MarkImage) -> Result<()> {
        let s = self.config.input_size;
        if image.width() != s || image.height() != s {
            return Err(Error::arg(format!(
                "image {} is {}x{}, encoder expects {s}x{s}",
                image.mark_id,
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }

    pub(crate) fn forward(&self, image: &MarkImage) -> Result<Trace> {
        self.check_image(image)?;
        let mut acts = Vec::with_capacity(self.geoms.len() + 1);
        acts.push(image.pixels().iter().map(|v| 1.0 - v).collect::<Vec<f64>>());
        for (i, g) in self.geoms.iter().enumerate() {
            let mut out = conv_forward(g, &acts[i], &self.tensors[2 * i].data, &self.tensors[2 * i + 1].data);
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            acts.push(out);
        }
        let last = self.geoms.last().expect("non-empty");
        let area = (last.out_size * last.out_size) as f64;
        let act = acts.last().expect("non-empty");
        let pooled: Vec<f64> = act
            .chunks(last.out_size * last.out_size)
            .map(|c| c.iter().sum::<f64>() / area)
            .collect();
        let (w, b) = self.proj();
        let d = self.config.embedding_dim;
        let mut raw: Vec<f64> = (0..d).map(|j| b[j] + dot(&w[j * pooled.len()..(j + 1) * pooled.len()], &pooled)).collect();
        let mut norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < DEGENERATE_NORM {
            raw[0] += DEGENERATE_NUDGE;
            norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let embedding = raw.iter().map(|v| v / norm).collect();
        Ok(Trace {
            acts,
            pooled,
            norm,
            embedding,
        })
    }

    fn proj(&self) -> (&[f64], &[f64]) {
        let n = self.tensors.len();
        (&self.tensors[n - 2].data, &self.tensors[n - 1].data)
    }

    pub(crate) fn backward_trace(&self, trace: &Trace, grad_emb: &[f64], grads: &mut ParamGradients) {
        let e = &trace.embedding;
        let proj_g = dot(e, grad_emb);
        // (I - e e^T) / |v|
        let grad_raw: Vec<f64> = e
            .iter()
            .zip(grad_emb)
            .map(|(ei, gi)| (gi - ei * proj_g) / trace.norm)
            .collect();
        let n = self.tensors.len();
        let c = trace.pooled.len();
        let (w, _) = self.proj();
        let mut grad_pool = vec![0.0; c];
        for (j, &gj) in grad_raw.iter().enumerate() {
            let row = &w[j * c..(j + 1) * c];
            let grow = &mut grads.tensors[n - 2][j * c..(j + 1) * c];
            for k in 0..c {
                grow[k] += gj * trace.pooled[k];
                grad_pool[k] += row[k] * gj;
            }
            grads.tensors[n - 1][j] += gj;
        }

        let last = self.geoms.last().expect("non-empty");
        let area = last.out_size * last.out_size;
        let mut grad_act: Vec<f64> = grad_pool
            .iter()
            .flat_map(|&gp| std::iter::repeat_n(gp / area as f64, area))
            .collect();
        for i in (0..self.geoms.len()).rev() {
            let out = &trace.acts[i + 1];
            grad_act.iter_mut().zip(out).for_each(|(g, &a)| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            let (gw, rest) = grads.tensors[2 * i..].split_at_mut(1);
            let grad_in = conv_backward(
                &self.geoms[i],
                &trace.acts[i],
                &self.tensors[2 * i].data,
                &grad_act,
                &mut gw[0],
                &mut rest[0],
                i > 0,
            );
            match grad_in {
                Some(g) => grad_act = g,
                None => break,
            }
        }
    }

    pub fn embed(&self, image: &MarkImage) -> Result<EmbeddingVector> {
        Ok(EmbeddingVector(self.forward(image)?.embedding))
    }

    pub fn embed_batch(&self, images: &[MarkImage]) -> Result<Vec<EmbeddingVector>> {
        images
            .iter()
            .enumerate()
            .map(|(i, im)| {
                self.embed(im)
                    .map_err(|e| Error::arg(format!("batch item {i}: {e}")))
            })
            .collect()
    }

    /// Gradient of `sum_i <grad_embeddings[i], embed(images[i])>` with respect
    /// to every parameter.
    pub fn backward(&self, images: &[MarkImage], grad_embeddings: &[Vec<f64>]) -> Result<ParamGradients> {
        if images.len() != grad_embeddings.len() {
            return Err(Error::arg(format!(
                "{} images but {} upstream gradients",
                images.len(),
                grad_embeddings.len()
            )));
        }
        let mut grads = ParamGradients::zeros_like(self);
        for (i, (im, g)) in images.iter().zip(grad_embeddings).enumerate() {
            if g.len() != self.config.embedding_dim {
                return Err(Error::arg(format!(
                    "gradient {i} has dim {}, expected {}",
                    g.len(),
                    self.config.embedding_dim
                )));
            }
            let trace = self.forward(im).map_err(|e| Error::arg(format!("batch item {i}: {e}")))?;
            self.backward_trace(&trace, g, &mut grads);
        }
        Ok(grads)
    }

    /// Self-describing text form; floats carry 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = format!("{MODEL_MAGIC} {MODEL_VERSION}\n");
        let _ = writeln!(s, "input_size {}", self.config.input_size);
        let _ = writeln!(s, "embedding_dim {}", self.config.embedding_dim);
        for l in &self.config.conv_layers {
            let _ = writeln!(s, "conv {} {} {}", l.out_channels, l.kernel_size, l.stride);
        }
        let _ = writeln!(s, "version {}", self.version);
        for t in &self.tensors {
            let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(s, "tensor {} {}", t.name, shape.join(" "));
            let vals: Vec<String> = t.data.iter().map(|v| format!("{v:.16e}")).collect();
            s.push_str(&vals.join(" "));
            s.push('\n');
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let (ln, header) = lines.next().ok_or_else(|| Error::parse(1, "empty model file"))?;
        let mut h = header.split_whitespace();
        if h.next() != Some(MODEL_MAGIC) {
            return Err(Error::parse(ln, "not a markmatch model file"));
        }
        let ver = h.next().unwrap_or("");
        if ver != MODEL_VERSION {
            return Err(Error::Version {
                found: ver.to_string(),
                expected: MODEL_VERSION.to_string(),
            });
        }

        let mut input_size = None;
        let mut embedding_dim = None;
        let mut conv_layers = Vec::new();
        let mut version = String::new();
        let mut tensors: Vec<ParamTensor> = Vec::new();
        let mut ended = false;
        let uint = |ln: usize, s: Option<&str>| -> Result<usize> {
            s.and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::parse(ln, "expected an unsigned integer"))
        };
        while let Some((ln, line)) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let mut f = line.split_whitespace();
            match f.next() {
                Some("input_size") => input_size = Some(uint(ln, f.next())?),
                Some("embedding_dim") => embedding_dim = Some(uint(ln, f.next())?),
                Some("conv") => conv_layers.push(ConvSpec::new(uint(ln, f.next())?, uint(ln, f.next())?, uint(ln, f.next())?)),
                Some("version") => version = f.collect::<Vec<_>>().join("_"),
                Some("tensor") => {
                    let name = f.next().ok_or_else(|| Error::parse(ln, "tensor without name"))?.to_string();
                    let shape = f
                        .map(|t| t.parse::<usize>().map_err(|_| Error::parse(ln, "bad tensor shape")))
                        .collect::<Result<Vec<_>>>()?;
                    let (vln, vals) = lines.next().ok_or_else(|| Error::parse(ln + 1, "missing tensor values"))?;
                    let data = vals
                        .split_whitespace()
                        .map(|t| t.parse::<f64>().map_err(|_| Error::parse(vln, format!("bad float {t:?}"))))
                        .collect::<Result<Vec<_>>>()?;
                    if data.len() != shape.iter().product::<usize>() {
                        return Err(Error::parse(vln, format!("tensor {name} has {} values for shape {shape:?}", data.len())));
                    }
                    if !data.iter().all(|v| v.is_finite()) {
                        return Err(Error::parse(vln, format!("tensor {name} has non-finite values")));
                    }
                    tensors.push(ParamTensor { name, shape, data });
                }
                Some("end") => {
                    ended = true;
                    break;
                }
                Some(other) => return Err(Error::parse(ln, format!("unknown key {other:?}"))),
                None => {}
            }
        }
        if !ended {
            return Err(Error::parse(text.lines().count(), "model file truncated (no end marker)"));
        }
        let config = EncoderConfig {
            input_size: input_size.ok_or_else(|| Error::parse(1, "missing input_size"))?,
            conv_layers,
            embedding_dim: embedding_dim.ok_or_else(|| Error::parse(1, "missing embedding_dim"))?,
        };
        let mut params = EncoderParams::init(config, 0)?;
        if params.tensors.len() != tensors.len() {
            return Err(Error::parse(1, format!("expected {} tensors, found {}", params.tensors.len(), tensors.len())));
        }
        for (want, got) in params.tensors.iter().zip(&tensors) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::parse(1, format!("tensor {} {:?} does not match config ({} {:?})", got.name, got.shape, want.name, want.shape)));
            }
        }
        params.tensors = tensors;
        params.version = version;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::retrieval::write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
