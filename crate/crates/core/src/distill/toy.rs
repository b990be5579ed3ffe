use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{LogitGrad, LogitTensor, NUM_CLASSES};
use super::DistillError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    emb: usize,
    wm: usize,
    bm: usize,
    wo: usize,
    bo: usize,
    wc: usize,
    bc: usize,
    len: usize,
}

impl ToyDims {
    fn layout(&self) -> Layout {
        let (v, d, h) = (self.vocab, self.embed, self.hidden);
        let emb = 0;
        let wm = emb + v * d;
        let bm = wm + h * 2 * d;
        let wo = bm + h;
        let bo = wo + v * h;
        let wc = bo + v;
        let bc = wc + NUM_CLASSES * h;
        Layout {
            emb,
            wm,
            bm,
            wo,
            bo,
            wc,
            bc,
            len: bc + NUM_CLASSES,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }

    /// `(name, rows, cols)` of each parameter block in storage order.
    pub fn shapes(&self) -> Vec<(String, usize, usize)> {
        let (v, d, h) = (self.vocab, self.embed, self.hidden);
        [
            ("embedding", v, d),
            ("mix_weight", h, 2 * d),
            ("mix_bias", h, 1),
            ("vocab_weight", v, h),
            ("vocab_bias", v, 1),
            ("class_weight", NUM_CLASSES, h),
            ("class_bias", NUM_CLASSES, 1),
        ]
        .into_iter()
        .map(|(n, r, c)| (n.to_string(), r, c))
        .collect()
    }
}

/// Small causal network over a flat parameter vector.
///
/// Position `j` mixes its own embedding with the running mean of embeddings
/// up to `j`, through one tanh layer. Token logits are read from every
/// position; class logits from the mean hidden state over the prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub dims: ToyDims,
    pub params: Vec<f64>,
}

/// Activations kept for the backward pass.
pub struct Trace {
    inputs: Vec<usize>,
    prompt_len: usize,
    u: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    pooled: Vec<f64>,
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], bias: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            let row = &w[r * cols..(r + 1) * cols];
            bias[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

impl ToyModel {
    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
    /// embeddings in `[-1, 1]`.
    pub fn new(dims: ToyDims, seed: u64) -> Result<Self, DistillError> {
        if dims.vocab < 2 || dims.embed == 0 || dims.hidden == 0 {
            return Err(DistillError::Shape(format!("invalid model dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lay = dims.layout();
        let mut params = vec![0.0; lay.len];
        let mut fill = |range: std::ops::Range<usize>, scale: f64| {
            for p in &mut params[range] {
                *p = rng.gen_range(-scale..=scale);
            }
        };
        fill(lay.emb..lay.wm, 1.0);
        fill(lay.wm..lay.bm, 1.0 / ((2 * dims.embed) as f64).sqrt());
        fill(lay.wo..lay.bo, 1.0 / (dims.hidden as f64).sqrt());
        fill(lay.wc..lay.bc, 1.0 / (dims.hidden as f64).sqrt());
        Ok(ToyModel { dims, params })
    }

    pub fn forward(&self, inputs: &[usize], prompt_len: usize) -> LogitTensor {
        self.forward_traced(inputs, prompt_len).0
    }

    pub fn forward_traced(&self, inputs: &[usize], prompt_len: usize) -> (LogitTensor, Trace) {
        let ToyDims { vocab: v, embed: d, hidden: hd } = self.dims;
        let lay = self.dims.layout();
        let p = &self.params;
        let mut running = vec![0.0; d];
        let mut u = Vec::with_capacity(inputs.len());
        let mut h = Vec::with_capacity(inputs.len());
        let mut token_logits = Vec::with_capacity(inputs.len());
        for (j, &tok) in inputs.iter().enumerate() {
            let e = &p[lay.emb + tok * d..lay.emb + (tok + 1) * d];
            for (r, x) in running.iter_mut().zip(e) {
                *r += x;
            }
            let inv = 1.0 / (j + 1) as f64;
            let uj: Vec<f64> = e.iter().copied().chain(running.iter().map(|r| r * inv)).collect();
            let hj: Vec<f64> = matvec(&p[lay.wm..lay.bm], hd, 2 * d, &uj, &p[lay.bm..lay.wo])
                .into_iter()
                .map(f64::tanh)
                .collect();
            token_logits.push(matvec(&p[lay.wo..lay.bo], v, hd, &hj, &p[lay.bo..lay.wc]));
            u.push(uj);
            h.push(hj);
        }
        let pl = prompt_len.clamp(1, inputs.len().max(1));
        let mut pooled = vec![0.0; hd];
        for hj in h.iter().take(pl) {
            for (a, b) in pooled.iter_mut().zip(hj) {
                *a += b / pl as f64;
            }
        }
        let c = matvec(&p[lay.wc..lay.bc], NUM_CLASSES, hd, &pooled, &p[lay.bc..lay.len]);
        let logits = LogitTensor {
            token_logits,
            class_logits: [c[0], c[1], c[2]],
        };
        let trace = Trace {
            inputs: inputs.to_vec(),
            prompt_len: pl,
            u,
            h,
            pooled,
        };
        (logits, trace)
    }

    /// Adds the parameter gradient implied by `dl` (gradient with respect to
    /// the logits of the traced forward pass) into `grad`.
    pub fn backward(&self, trace: &Trace, dl: &LogitGrad, grad: &mut [f64]) {
        let ToyDims { vocab: v, embed: d, hidden: hd } = self.dims;
        let lay = self.dims.layout();
        let p = &self.params;
        let l = trace.inputs.len();

        // Class head.
        let mut dpooled = vec![0.0; hd];
        for c in 0..NUM_CLASSES {
            let g = dl.class[c];
            grad[lay.bc + c] += g;
            for k in 0..hd {
                grad[lay.wc + c * hd + k] += g * trace.pooled[k];
                dpooled[k] += g * p[lay.wc + c * hd + k];
            }
        }

        let mut de = vec![vec![0.0; d]; l];
        let mut dm = vec![vec![0.0; d]; l];
        for j in 0..l {
            let hj = &trace.h[j];
            let mut dh = vec![0.0; hd];
            if j < trace.prompt_len {
                for k in 0..hd {
                    dh[k] += dpooled[k] / trace.prompt_len as f64;
                }
            }
            for (t, &g) in dl.token[j].iter().enumerate().take(v) {
                if g == 0.0 {
                    continue;
                }
                grad[lay.bo + t] += g;
                let row = lay.wo + t * hd;
                for k in 0..hd {
                    grad[row + k] += g * hj[k];
                    dh[k] += g * p[row + k];
                }
            }
            let uj = &trace.u[j];
            for k in 0..hd {
                let da = dh[k] * (1.0 - hj[k] * hj[k]);
                if da == 0.0 {
                    continue;
                }
                grad[lay.bm + k] += da;
                let row = lay.wm + k * 2 * d;
                for q in 0..2 * d {
                    grad[row + q] += da * uj[q];
                }
                for q in 0..d {
                    de[j][q] += da * p[row + q];
                    dm[j][q] += da * p[row + d + q];
                }
            }
        }
        // m_j averages e_0..=e_j, so e_k collects dm_j / (j + 1) for j >= k.
        let mut carry = vec![0.0; d];
        for k in (0..l).rev() {
            for q in 0..d {
                carry[q] += dm[k][q] / (k + 1) as f64;
                de[k][q] += carry[q];
            }
        }
        for (k, &tok) in trace.inputs.iter().enumerate() {
            for q in 0..d {
                grad[lay.emb + tok * d + q] += de[k][q];
            }
        }
    }

    pub fn predict_class(&self, inputs: &[usize], prompt_len: usize) -> usize {
        let c = self.forward(inputs, prompt_len).class_logits;
        argmax(&c)
    }

    /// Greedy continuation of `prompt` until `stop` or `max_new` tokens.
    pub fn greedy_decode(&self, prompt: &[usize], stop: usize, max_new: usize) -> Vec<usize> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let logits = self.forward(&seq, prompt.len());
            let next = argmax(logits.token_logits.last().expect("non-empty sequence"));
            if next == stop {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        out
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// JSON header stored in front of the parameters of a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format: String,
    pub version: u32,
    pub dims: ToyDims,
    pub param_count: usize,
    pub shapes: Vec<(String, usize, usize)>,
    pub seed: u64,
    pub config_digest: String,
    /// Token strings when the model was trained on text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vocab: Vec<String>,
}

pub const MODEL_FORMAT: &str = "cotforge-toy";

impl ModelHeader {
    pub fn new(dims: ToyDims, seed: u64, config_digest: impl Into<String>) -> Self {
        ModelHeader {
            format: MODEL_FORMAT.to_string(),
            version: 1,
            dims,
            param_count: dims.param_count(),
            shapes: dims.shapes(),
            seed,
            config_digest: config_digest.into(),
            vocab: Vec::new(),
        }
    }
}

/// Layout: little-endian `u64` header length, the JSON header, then the
/// parameters as little-endian `f64`.
pub fn save_model(path: &Path, header: &ModelHeader, model: &ToyModel) -> Result<(), DistillError> {
    if header.dims != model.dims || header.param_count != model.params.len() {
        return Err(DistillError::Shape("model header does not match parameters".into()));
    }
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut buf = Vec::with_capacity(8 + json.len() + 8 * model.params.len());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in &model.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let io = |e| DistillError::Io(format!("{}: {e}", path.display()));
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelHeader, ToyModel), DistillError> {
    let bytes = fs::read(path).map_err(|e| DistillError::Io(format!("{}: {e}", path.display())))?;
    let bad = |m: &str| DistillError::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: ModelHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.format != MODEL_FORMAT || header.version != 1 {
        return Err(bad("unsupported model format"));
    }
    let rest = &bytes[8 + hlen..];
    if header.param_count != header.dims.param_count() || rest.len() != 8 * header.param_count {
        return Err(bad("parameter count mismatch"));
    }
    let params = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let model = ToyModel {
        dims: header.dims,
        params,
    };
    Ok((header, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ToyDims {
        ToyDims {
            vocab: 7,
            embed: 3,
            hidden: 4,
        }
    }

    #[test]
    fn forward_is_deterministic_and_causal() {
        let m = ToyModel::new(dims(), 5).unwrap();
        let a = m.forward(&[1, 2, 3, 4], 2);
        assert_eq!(a, m.forward(&[1, 2, 3, 4], 2));
        let b = m.forward(&[1, 2, 3, 6], 2);
        // Changing the last token leaves earlier positions and the prompt pool alone.
        assert_eq!(a.token_logits[..3], b.token_logits[..3]);
        assert_eq!(a.class_logits, b.class_logits);
        assert_ne!(a.token_logits[3], b.token_logits[3]);
    }

    #[test]
    fn backward_matches_finite_differences_on_linear_probe() {
        // Loss = sum of logits times fixed weights; gradient is then dl itself.
        let m = ToyModel::new(dims(), 9).unwrap();
        let inputs = [3, 1, 1, 5, 0];
        let (logits, trace) = m.forward_traced(&inputs, 3);
        let mut dl = LogitGrad::zeros_like(&logits);
        for (j, row) in dl.token.iter_mut().enumerate() {
            for (t, g) in row.iter_mut().enumerate() {
                *g = ((j * 7 + t * 3) % 5) as f64 - 2.0;
            }
        }
        dl.class = [0.5, -1.0, 2.0];
        let f = |m: &ToyModel| {
            let l = m.forward(&inputs, 3);
            let mut s: f64 = l.class_logits.iter().zip(&dl.class).map(|(a, b)| a * b).sum();
            for (r, gr) in l.token_logits.iter().zip(&dl.token) {
                s += r.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
            }
            s
        };
        let mut grad = vec![0.0; m.params.len()];
        m.backward(&trace, &dl, &mut grad);
        for (i, &g) in grad.iter().enumerate() {
            let mut p = m.clone();
            p.params[i] += 1e-6;
            let mut q = m.clone();
            q.params[i] -= 1e-6;
            let fd = (f(&p) - f(&q)) / 2e-6;
            assert!((fd - g).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {g}");
        }
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = ToyModel::new(dims(), 1).unwrap();
        let h = ModelHeader::new(m.dims, 1, "abc");
        save_model(&path, &h, &m).unwrap();
        let (h2, m2) = load_model(&path).unwrap();
        assert_eq!(h, h2);
        assert_eq!(m, m2);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn greedy_decode_stops() {
        let m = ToyModel::new(dims(), 2).unwrap();
        let out = m.greedy_decode(&[0, 1], 6, 5);
        assert!(out.len() <= 5);
        assert!(!out.contains(&6));
    }
}
