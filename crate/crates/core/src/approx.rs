//! Flat parameter vectors and the two observation-conditioned networks.
//!
//! All parameters of a run (policy head, value head, and the model's dynamics
//! and prediction heads) live in one flat `Vec<f64>` behind a named layout, so
//! the optimizer, target network, checkpointing, and the finite-difference
//! checker all treat them uniformly.
//!
//! Two architectures:
//! - `Tabular`: policy logits and values are free parameters per observation;
//!   the representation fed to the model is the observation one-hot.
//! - `Mlp`: one-hot observation -> tanh hidden layer -> linear policy/value
//!   heads; the hidden activations are the representation.
//!
//! Gradients are hand-derived per loss; there is no tape. Each `backward_*`
//! routine takes the adjoint of one network output and accumulates parameter
//! gradients. The finite-difference checker [`fd_check`] is the correctness
//! authority for every loss built on these pieces.

use rand::Rng;
use std::io::{Read, Write};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error("parameter snapshot parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutEntry {
    pub name: &'static str,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl Layout {
    fn new(shapes: &[(&'static str, usize)]) -> Layout {
        let mut entries = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for &(name, len) in shapes {
            entries.push(LayoutEntry { name, offset, len });
            offset += len;
        }
        Layout { entries, total: offset }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .unwrap_or_else(|| panic!("no parameter block named {name:?}"));
        e.offset..e.offset + e.len
    }

    /// Block name and in-block index of a flat coordinate.
    pub fn locate(&self, index: usize) -> (&'static str, usize) {
        let e = self
            .entries
            .iter()
            .find(|e| index >= e.offset && index < e.offset + e.len)
            .unwrap_or_else(|| panic!("coordinate {index} outside layout"));
        (e.name, index - e.offset)
    }
}

#[derive(Debug, Clone)]
pub struct ParamVector {
    data: Vec<f64>,
    layout: Arc<Layout>,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout && self.data == other.data
    }
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> ParamVector {
        ParamVector { data: vec![0.0; layout.total()], layout }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn block(&self, name: &str) -> &[f64] {
        &self.data[self.layout.range(name)]
    }

    pub fn block_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self.layout.range(name);
        &mut self.data[r]
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector::zeros(self.layout.clone())
    }

    pub fn fill(&mut self, x: f64) {
        self.data.iter_mut().for_each(|v| *v = x);
    }

    /// self += scale * other (layouts must match).
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) {
        assert!(
            Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout,
            "mismatched parameter layouts"
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Tabular,
    Mlp { hidden: usize },
}

/// The network's dimensions plus its parameter layout.
#[derive(Debug, Clone)]
pub struct NetSpec {
    num_obs: usize,
    num_actions: usize,
    arch: Arch,
    layout: Arc<Layout>,
}

impl NetSpec {
    pub fn new(num_obs: usize, num_actions: usize, arch: Arch) -> NetSpec {
        assert!(num_obs > 0 && num_actions > 0);
        if let Arch::Mlp { hidden } = arch {
            assert!(hidden > 0, "MLP hidden size must be positive");
        }
        let h = match arch {
            Arch::Tabular => num_obs,
            Arch::Mlp { hidden } => hidden,
        };
        let mut shapes: Vec<(&'static str, usize)> = Vec::new();
        match arch {
            Arch::Tabular => {
                shapes.push(("policy_logits", num_obs * num_actions));
                shapes.push(("value", num_obs));
            }
            Arch::Mlp { hidden } => {
                shapes.push(("enc_w", hidden * num_obs));
                shapes.push(("enc_b", hidden));
                shapes.push(("policy_w", num_actions * hidden));
                shapes.push(("policy_b", num_actions));
                shapes.push(("value_w", hidden));
                shapes.push(("value_b", 1));
            }
        }
        // Model blocks share the representation width h.
        shapes.push(("dyn_w", h * (h + num_actions)));
        shapes.push(("dyn_b", h));
        shapes.push(("model_reward_w", h));
        shapes.push(("model_reward_b", 1));
        shapes.push(("model_value_w", h));
        shapes.push(("model_value_b", 1));
        shapes.push(("model_policy_w", num_actions * h));
        shapes.push(("model_policy_b", num_actions));
        NetSpec { num_obs, num_actions, arch, layout: Arc::new(Layout::new(&shapes)) }
    }

    pub fn num_obs(&self) -> usize {
        self.num_obs
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    /// Width of the representation the model operates on.
    pub fn repr_dim(&self) -> usize {
        match self.arch {
            Arch::Tabular => self.num_obs,
            Arch::Mlp { hidden } => hidden,
        }
    }

    pub fn layout(&self) -> Arc<Layout> {
        self.layout.clone()
    }

    /// Zero-initialized heads (uniform policy, zero values everywhere); hidden
    /// weights (encoder and dynamics) uniform in [-0.05, 0.05].
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout.clone());
        if let Arch::Mlp { .. } = self.arch {
            for w in p.block_mut("enc_w") {
                *w = rng.gen_range(-0.05..0.05);
            }
        }
        for w in p.block_mut("dyn_w") {
            *w = rng.gen_range(-0.05..0.05);
        }
        p
    }

    pub fn forward(&self, params: &ParamVector, obs: usize) -> NetOutput {
        assert!(obs < self.num_obs, "observation {obs} out of range ({} observations)", self.num_obs);
        match self.arch {
            Arch::Tabular => {
                let a = self.num_actions;
                let logits = params.block("policy_logits")[obs * a..(obs + 1) * a].to_vec();
                let value = params.block("value")[obs];
                let mut hidden = vec![0.0; self.num_obs];
                hidden[obs] = 1.0;
                let probs = softmax(&logits);
                NetOutput { logits, probs, value, hidden }
            }
            Arch::Mlp { hidden: h } => {
                let enc_w = params.block("enc_w");
                let enc_b = params.block("enc_b");
                // One-hot input: the pre-activation is just the obs column plus bias.
                let hidden: Vec<f64> =
                    (0..h).map(|i| (enc_w[i * self.num_obs + obs] + enc_b[i]).tanh()).collect();
                let mut logits = params.block("policy_b").to_vec();
                matvec_acc(params.block("policy_w"), &hidden, self.num_actions, h, &mut logits);
                let value = params.block("value_b")[0]
                    + dot(params.block("value_w"), &hidden);
                let probs = softmax(&logits);
                NetOutput { logits, probs, value, hidden }
            }
        }
    }

    /// Accumulate d(loss)/d(params) given d(loss)/d(logits) at `obs`.
    pub fn backward_logits(
        &self,
        params: &ParamVector,
        obs: usize,
        out: &NetOutput,
        dlogits: &[f64],
        grad: &mut ParamVector,
    ) {
        assert_eq!(dlogits.len(), self.num_actions, "mismatched adjoint width");
        match self.arch {
            Arch::Tabular => {
                let a = self.num_actions;
                let row = &mut grad.block_mut("policy_logits")[obs * a..(obs + 1) * a];
                for (g, d) in row.iter_mut().zip(dlogits) {
                    *g += d;
                }
            }
            Arch::Mlp { hidden: h } => {
                outer_acc(dlogits, &out.hidden, grad.block_mut("policy_w"));
                for (g, d) in grad.block_mut("policy_b").iter_mut().zip(dlogits) {
                    *g += d;
                }
                let mut dh = vec![0.0; h];
                matvec_t_acc(params.block("policy_w"), dlogits, self.num_actions, h, &mut dh);
                self.backward_hidden(params, obs, out, &dh, grad);
            }
        }
    }

    /// Accumulate gradients given d(loss)/d(value) at `obs`.
    pub fn backward_value(
        &self,
        params: &ParamVector,
        obs: usize,
        out: &NetOutput,
        dvalue: f64,
        grad: &mut ParamVector,
    ) {
        match self.arch {
            Arch::Tabular => {
                grad.block_mut("value")[obs] += dvalue;
            }
            Arch::Mlp { hidden: h } => {
                for (g, &x) in grad.block_mut("value_w").iter_mut().zip(&out.hidden) {
                    *g += dvalue * x;
                }
                grad.block_mut("value_b")[0] += dvalue;
                let mut dh = vec![0.0; h];
                for (d, &w) in dh.iter_mut().zip(params.block("value_w")) {
                    *d = dvalue * w;
                }
                self.backward_hidden(params, obs, out, &dh, grad);
            }
        }
    }

    /// Accumulate gradients given d(loss)/d(hidden) at `obs` (gradient flowing
    /// into the representation, e.g. from a model unroll rooted there). The
    /// tabular representation is a constant one-hot, so nothing propagates.
    pub fn backward_hidden(
        &self,
        _params: &ParamVector,
        obs: usize,
        out: &NetOutput,
        dhidden: &[f64],
        grad: &mut ParamVector,
    ) {
        match self.arch {
            Arch::Tabular => {}
            Arch::Mlp { hidden: h } => {
                assert_eq!(dhidden.len(), h, "mismatched adjoint width");
                let enc_w = grad.block_mut("enc_w");
                for i in 0..h {
                    let du = dhidden[i] * (1.0 - out.hidden[i] * out.hidden[i]);
                    enc_w[i * self.num_obs + obs] += du;
                }
                let enc_b = grad.block_mut("enc_b");
                for i in 0..h {
                    enc_b[i] += dhidden[i] * (1.0 - out.hidden[i] * out.hidden[i]);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub value: f64,
    pub hidden: Vec<f64>,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// out += W x for row-major W (rows x cols).
pub(crate) fn matvec_acc(w: &[f64], x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        out[r] += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// out += W^T d for row-major W (rows x cols); d has length rows.
pub(crate) fn matvec_t_acc(w: &[f64], d: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(d.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for r in 0..rows {
        let dr = d[r];
        if dr != 0.0 {
            for c in 0..cols {
                out[c] += dr * w[r * cols + c];
            }
        }
    }
}

/// grad_w += d x^T for row-major grad_w (len(d) x len(x)).
pub(crate) fn outer_acc(d: &[f64], x: &[f64], grad_w: &mut [f64]) {
    debug_assert_eq!(grad_w.len(), d.len() * x.len());
    let cols = x.len();
    for (r, &dr) in d.iter().enumerate() {
        if dr != 0.0 {
            for (c, &xc) in x.iter().enumerate() {
                grad_w[r * cols + c] += dr * xc;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Block name, in-block index, analytic and numeric values at the worst coordinate.
    pub worst: Option<(&'static str, usize, f64, f64)>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Check an analytic gradient against central finite differences of `loss`
/// at `params`, coordinate by coordinate. Relative error uses a small floor so
/// coordinates whose true gradient is ~0 compare absolutely:
/// |fd - analytic| / max(|fd|, |analytic|, 1e-3).
pub fn fd_check<F: Fn(&ParamVector) -> f64>(
    params: &ParamVector,
    loss: F,
    analytic: &ParamVector,
    step: f64,
    tolerance: f64,
) -> FdReport {
    assert_eq!(params.len(), analytic.len(), "gradient/parameter length mismatch");
    let mut probe = params.clone();
    let mut max_rel = 0.0;
    let mut worst = None;
    for i in 0..params.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = loss(&probe);
        probe.data_mut()[i] = orig - step;
        let down = loss(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-3);
        if rel > max_rel {
            max_rel = rel;
            let (name, idx) = params.layout().locate(i);
            worst = Some((name, idx, a, numeric));
        }
    }
    FdReport { max_rel_error: max_rel, worst, tolerance, pass: max_rel < tolerance }
}

const SNAPSHOT_MAGIC: &str = "MUESLI-PARAMS v1";

/// Write a parameter snapshot: text layout header, then the raw f64 data in
/// little-endian order.
pub fn write_params<W: Write>(params: &ParamVector, mut w: W) -> Result<(), ApproxError> {
    writeln!(w, "{SNAPSHOT_MAGIC}")?;
    for e in params.layout().entries() {
        writeln!(w, "entry {} {} {}", e.name, e.offset, e.len)?;
    }
    writeln!(w, "data {}", params.len())?;
    for &x in params.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Read a snapshot written by [`write_params`]. The layout must match
/// `expected` exactly (same blocks, same sizes).
pub fn read_params<R: Read>(expected: &Arc<Layout>, mut r: R) -> Result<ParamVector, ApproxError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut next_line = |bytes: &[u8]| -> Result<String, ApproxError> {
        let start = pos;
        while pos < bytes.len() && bytes[pos] != b'\n' {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(ApproxError::Parse("truncated header".into()));
        }
        let line = String::from_utf8(bytes[start..pos].to_vec())
            .map_err(|e| ApproxError::Parse(e.to_string()))?;
        pos += 1;
        Ok(line)
    };
    if next_line(&bytes)? != SNAPSHOT_MAGIC {
        return Err(ApproxError::Parse("bad magic".into()));
    }
    let mut entries = Vec::new();
    let total;
    loop {
        let line = next_line(&bytes)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.first().copied() {
            Some("entry") if fields.len() == 4 => {
                let offset: usize =
                    fields[2].parse().map_err(|_| ApproxError::Parse(line.clone()))?;
                let len: usize = fields[3].parse().map_err(|_| ApproxError::Parse(line.clone()))?;
                entries.push((fields[1].to_string(), offset, len));
            }
            Some("data") if fields.len() == 2 => {
                total = fields[1].parse().map_err(|_| ApproxError::Parse(line.clone()))?;
                break;
            }
            _ => return Err(ApproxError::Parse(format!("unexpected header line {line:?}"))),
        }
    }
    let expected_entries: Vec<(String, usize, usize)> = expected
        .entries()
        .iter()
        .map(|e| (e.name.to_string(), e.offset, e.len))
        .collect();
    if entries != expected_entries || total != expected.total() {
        return Err(ApproxError::Parse("snapshot layout does not match this network".into()));
    }
    if bytes.len() - pos != total * 8 {
        return Err(ApproxError::Parse(format!(
            "expected {} data bytes, found {}",
            total * 8,
            bytes.len() - pos
        )));
    }
    let mut out = ParamVector::zeros(expected.clone());
    for i in 0..total {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[pos + i * 8..pos + (i + 1) * 8]);
        out.data_mut()[i] = f64::from_le_bytes(buf);
    }
    Ok(out)
}
