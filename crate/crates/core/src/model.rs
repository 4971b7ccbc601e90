//! A complete predictor: visit encoder (MiME or a flattened baseline), GRU
//! and both task heads, stored in one [`ParamSet`].
//!
//! Every patient in a minibatch is processed in one tape pass. Visits of all
//! patients are encoded together; the GRU then advances all sequences in
//! lock-step, with patients sorted by length so the still-running sequences
//! always occupy a prefix of the hidden-state rows.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    count_params_baseline, encode_visit_baseline, BaselineKind, BaselineParams,
};
use crate::ehr::{active_codes, CodeVocab, Patient};
use crate::error::{Error, Result};
use crate::mime::{self, canonical_object_order, count_params, MimeParams};
use crate::numerics::{
    derive_seed, seeded_rng, sigmoid, softmax, Activation, Matrix, ParamRole, ParamSet, Tape, Var,
};
use crate::seq::{self, gru_forward, GruParams, HfHead, SdpHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Mime,
    Baseline(BaselineKind),
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Mime => f.write_str("mime"),
            ModelKind::Baseline(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mime" {
            Ok(ModelKind::Mime)
        } else {
            s.parse().map(ModelKind::Baseline)
        }
    }
}

impl Serialize for ModelKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Hf,
    Sdp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub kind: ModelKind,
    /// `z` for MiME, `b` for baselines.
    pub embed_dim: usize,
    pub hidden: usize,
    pub n_dx: usize,
    pub n_tx: usize,
}

impl ModelDims {
    /// Width of the visit vectors fed to the GRU.
    pub fn visit_dim(&self) -> usize {
        match self.kind {
            ModelKind::Baseline(BaselineKind::Raw) => self.n_dx + self.n_tx,
            _ => self.embed_dim,
        }
    }

    /// Trainable scalars of the visit encoder alone.
    pub fn encoder_params(&self) -> usize {
        match self.kind {
            ModelKind::Mime => count_params(self.embed_dim, self.n_dx, self.n_tx),
            ModelKind::Baseline(k) => {
                count_params_baseline(k, self.embed_dim, self.n_dx, self.n_tx)
            }
        }
    }

    pub fn check_vocab(&self, vocab: &CodeVocab) -> Result<()> {
        if vocab.n_dx() != self.n_dx || vocab.n_tx() != self.n_tx {
            return Err(Error::Config(format!(
                "model expects |A|={} and |B|={}, cohort has |A|={} and |B|={}",
                self.n_dx,
                self.n_tx,
                vocab.n_dx(),
                vocab.n_tx()
            )));
        }
        Ok(())
    }
}

/// What a minibatch loss is made of.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub task: Task,
    pub lambda_aux: f64,
    pub l2: f64,
    pub l2_embeddings: bool,
}

impl Objective {
    /// Task loss only.
    pub fn task_only(task: Task) -> Self {
        Objective {
            task,
            lambda_aux: 0.0,
            l2: 0.0,
            l2_embeddings: false,
        }
    }
}

/// Scalar nodes making up a recorded loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    /// Mean task cross-entropy over the batch.
    pub task: Var,
    /// `λ · Σ auxiliary NLL / batch size`.
    pub aux: Var,
    pub l2: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    dims: ModelDims,
    params: ParamSet,
}

const HEAD_NAMES: [&str; 4] = ["hf_w", "hf_b", "U_s", "b_s"];

/// Batch indices sorted by sequence length, plus per-step active counts.
struct Layout {
    order: Vec<usize>,
    lens: Vec<usize>,
    offsets: Vec<usize>,
    /// `active[t]` sequences have a visit at step `t`.
    active: Vec<usize>,
}

impl Layout {
    fn new(patients: &[&Patient]) -> Self {
        let lens: Vec<usize> = patients.iter().map(|p| p.visits.len()).collect();
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            offsets.push(acc);
            acc += l;
        }
        let mut order: Vec<usize> = (0..lens.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(lens[i]));
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let active = (0..max_len)
            .map(|t| lens.iter().filter(|&&l| l > t).count())
            .collect();
        Layout {
            order,
            lens,
            offsets,
            active,
        }
    }
}

struct Recorded {
    layout: Layout,
    /// `hidden[t]` has `active[t]` rows; row `j` belongs to `order[j]`.
    hidden: Vec<Var>,
    aux: Option<Var>,
}

impl Model {
    /// Fresh model with GRU width equal to the embedding width.
    pub fn new(kind: ModelKind, embed_dim: usize, vocab: &CodeVocab, seed: u64) -> Result<Self> {
        Self::with_hidden(kind, embed_dim, embed_dim, vocab, seed)
    }

    pub fn with_hidden(
        kind: ModelKind,
        embed_dim: usize,
        hidden: usize,
        vocab: &CodeVocab,
        seed: u64,
    ) -> Result<Self> {
        if embed_dim == 0 || hidden == 0 {
            return Err(Error::Config(
                "embedding and hidden sizes must be positive".into(),
            ));
        }
        let dims = ModelDims {
            kind,
            embed_dim,
            hidden,
            n_dx: vocab.n_dx(),
            n_tx: vocab.n_tx(),
        };
        let mut rng = seeded_rng(derive_seed(seed, 0x1417));
        let mut params = ParamSet::new();
        match kind {
            ModelKind::Mime => {
                MimeParams::init(embed_dim, dims.n_dx, dims.n_tx, &mut rng).insert_into(&mut params)
            }
            ModelKind::Baseline(k) => {
                BaselineParams::init(k, embed_dim, vocab, &mut rng).insert_into(&mut params)
            }
        }
        GruParams::init(dims.visit_dim(), hidden, &mut rng).insert_into(&mut params);
        let hf = HfHead::init(hidden, &mut rng);
        let sdp = SdpHead::init(dims.n_dx, hidden, &mut rng);
        for (name, m) in HEAD_NAMES.iter().zip([hf.w, hf.b, sdp.u_s, sdp.b_s]) {
            params.insert(*name, mime::role_of(name), m);
        }
        Ok(Model { dims, params })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        check_layout(&self.params, &params)?;
        self.params = params;
        Ok(())
    }

    pub fn mime_params(&self) -> Result<MimeParams> {
        MimeParams::from_set(&self.params)
    }

    pub fn gru_params(&self) -> Result<GruParams> {
        GruParams::from_set(&self.params)
    }

    fn get(&self, name: &str) -> &Matrix {
        self.params
            .by_name(name)
            .expect("layout fixed at construction")
    }

    pub fn hf_head(&self) -> HfHead {
        HfHead {
            w: self.get("hf_w").clone(),
            b: self.get("hf_b").clone(),
        }
    }

    pub fn sdp_head(&self) -> SdpHead {
        SdpHead {
            u_s: self.get("U_s").clone(),
            b_s: self.get("b_s").clone(),
        }
    }

    // ---- direct evaluation, one patient at a time ----

    /// Visit vectors computed without a tape.
    pub fn reference_visits(&self, patient: &Patient, vocab: &CodeVocab) -> Result<Vec<Vec<f64>>> {
        self.dims.check_vocab(vocab)?;
        Ok(match self.dims.kind {
            ModelKind::Mime => {
                let p = self.mime_params()?;
                patient
                    .visits
                    .iter()
                    .map(|v| mime::encode_visit(v, &p).v)
                    .collect()
            }
            ModelKind::Baseline(k) => {
                let p = BaselineParams::from_set(k, &self.params)?;
                patient
                    .visits
                    .iter()
                    .map(|v| encode_visit_baseline(v, vocab, &p))
                    .collect()
            }
        })
    }

    pub fn reference_hidden(&self, patient: &Patient, vocab: &CodeVocab) -> Result<Vec<Vec<f64>>> {
        gru_forward(&self.reference_visits(patient, vocab)?, &self.gru_params()?)
    }

    pub fn reference_hf(&self, patient: &Patient, vocab: &CodeVocab) -> Result<f64> {
        let h = self.reference_hidden(patient, vocab)?;
        Ok(seq::predict_hf(
            h.last().expect("non-empty"),
            &self.hf_head(),
        ))
    }

    pub fn reference_sdp(&self, patient: &Patient, vocab: &CodeVocab) -> Result<Vec<Vec<f64>>> {
        let h = self.reference_hidden(patient, vocab)?;
        Ok(seq::predict_sdp(&h, &self.sdp_head()))
    }

    // ---- tape path ----

    fn encode_on_tape(
        &self,
        tape: &mut Tape<'_>,
        patients: &[&Patient],
        with_aux: bool,
    ) -> (Var, Option<Var>) {
        let visits = patients.iter().flat_map(|p| p.visits.iter());
        let ps = tape.params();
        let id = |name: &str| ps.id(name).expect("layout fixed at construction");
        match self.dims.kind {
            ModelKind::Mime => {
                let mut obj_dx = Vec::new();
                let mut obj_tx: Vec<Vec<usize>> = Vec::new();
                let mut per_visit = Vec::new();
                for v in visits {
                    for i in canonical_object_order(v) {
                        let mut tx = v.objects[i].tx.clone();
                        tx.sort_unstable();
                        obj_dx.push(v.objects[i].dx);
                        obj_tx.push(tx);
                    }
                    per_visit.push(v.len());
                }
                let emb_dx = tape.param(id("emb_dx"));
                let rd = tape.gather_rows(emb_dx, obj_dx.clone());
                let pair_obj: Vec<usize> = obj_tx
                    .iter()
                    .enumerate()
                    .flat_map(|(i, tx)| std::iter::repeat_n(i, tx.len()))
                    .collect();
                let g = if pair_obj.is_empty() {
                    rd
                } else {
                    let w_m = tape.param(id("W_m"));
                    let lin = tape.matmul_t(rd, w_m);
                    let gate = tape.act(Activation::Relu, lin);
                    let gate = tape.gather_rows(gate, pair_obj);
                    let emb_tx = tape.param(id("emb_tx"));
                    let rm = tape.gather_rows(emb_tx, obj_tx.concat());
                    let inter = tape.mul(gate, rm);
                    let lens = obj_tx.iter().map(Vec::len).collect();
                    let summed = tape.segment_sum(inter, lens);
                    tape.add(rd, summed)
                };
                let (w_o, b_o) = (tape.param(id("W_o")), tape.param(id("b_o")));
                let h = tape.affine(g, w_o, b_o);
                let h = tape.act(Activation::Relu, h);
                let o = tape.add(h, g);
                let f = tape.segment_sum(o, per_visit);
                let (w_v, b_v) = (tape.param(id("W_v")), tape.param(id("b_v")));
                let h = tape.affine(f, w_v, b_v);
                let h = tape.act(Activation::Sigmoid, h);
                let v = tape.add(h, f);

                let aux = with_aux.then(|| {
                    let (u_d, b_d) = (tape.param(id("U_d")), tape.param(id("b_d")));
                    let dx_logits = tape.affine(o, u_d, b_d);
                    let targets = obj_dx.iter().map(|&d| vec![(d, 1.0)]).collect();
                    let dx_loss = tape.softmax_xent(dx_logits, targets);
                    let (u_m, b_m) = (tape.param(id("U_m")), tape.param(id("b_m")));
                    let tx_logits = tape.affine(o, u_m, b_m);
                    let mut hot = Matrix::zeros(obj_tx.len(), self.dims.n_tx);
                    for (i, tx) in obj_tx.iter().enumerate() {
                        for &m in tx {
                            hot[(i, m)] = 1.0;
                        }
                    }
                    let tx_loss = tape.sigmoid_xent(tx_logits, hot);
                    tape.add(dx_loss, tx_loss)
                });
                (v, aux)
            }
            ModelKind::Baseline(kind) => {
                let codes: Vec<Vec<usize>> =
                    visits.map(|v| active_codes(v, self.dims.n_dx)).collect();
                if kind == BaselineKind::Raw {
                    let mut x = Matrix::zeros(codes.len(), self.dims.visit_dim());
                    for (r, cs) in codes.iter().enumerate() {
                        for &c in cs {
                            x[(r, c)] = 1.0;
                        }
                    }
                    return (tape.constant(x), None);
                }
                let act = kind.activation();
                let w1 = tape.param(id("W_x1"));
                let b1 = tape.param(id("b_x1"));
                let h = tape.column_sum(w1, codes);
                let h = tape.add_bias(h, b1);
                let mut h = tape.act(act, h);
                if kind.layers() == 2 {
                    let (w2, b2) = (tape.param(id("W_x2")), tape.param(id("b_x2")));
                    let h2 = tape.affine(h, w2, b2);
                    h = tape.act(act, h2);
                }
                (h, None)
            }
        }
    }

    fn record(&self, tape: &mut Tape<'_>, patients: &[&Patient], with_aux: bool) -> Recorded {
        let layout = Layout::new(patients);
        let (x, aux) = self.encode_on_tape(tape, patients, with_aux);
        let ps = tape.params();
        let id = |name: &str| ps.id(name).expect("layout fixed at construction");
        let [w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h] = crate::seq::GRU_NAMES.map(id);
        let (w_z, u_z, b_z) = (tape.param(w_z), tape.param(u_z), tape.param(b_z));
        let (w_r, u_r, b_r) = (tape.param(w_r), tape.param(u_r), tape.param(b_r));
        let (w_h, u_h, b_h) = (tape.param(w_h), tape.param(u_h), tape.param(b_h));
        // input projections for every visit at once
        let xz = tape.affine(x, w_z, b_z);
        let xr = tape.affine(x, w_r, b_r);
        let xh = tape.affine(x, w_h, b_h);

        let mut hidden: Vec<Var> = Vec::with_capacity(layout.active.len());
        for (t, &k) in layout.active.iter().enumerate() {
            let rows: Vec<usize> = layout.order[..k]
                .iter()
                .map(|&i| layout.offsets[i] + t)
                .collect();
            let h_prev = match hidden.last() {
                None => tape.constant(Matrix::zeros(k, self.dims.hidden)),
                Some(&h) if layout.active[t - 1] == k => h,
                Some(&h) => tape.gather_rows(h, (0..k).collect()),
            };
            let az = tape.gather_rows(xz, rows.clone());
            let hz = tape.matmul_t(h_prev, u_z);
            let zt = tape.add(az, hz);
            let zt = tape.act(Activation::Sigmoid, zt);
            let ar = tape.gather_rows(xr, rows.clone());
            let hr = tape.matmul_t(h_prev, u_r);
            let rt = tape.add(ar, hr);
            let rt = tape.act(Activation::Sigmoid, rt);
            let ah = tape.gather_rows(xh, rows);
            let rh = tape.mul(rt, h_prev);
            let hh = tape.matmul_t(rh, u_h);
            let cand = tape.add(ah, hh);
            let cand = tape.act(Activation::Tanh, cand);
            let diff = tape.sub(cand, h_prev);
            let step = tape.mul(zt, diff);
            hidden.push(tape.add(h_prev, step));
        }
        Recorded {
            layout,
            hidden,
            aux,
        }
    }

    /// Final hidden state of every patient, in batch order.
    fn final_states(tape: &mut Tape<'_>, rec: &Recorded) -> Var {
        let mut rows = vec![None; rec.layout.lens.len()];
        for (j, &i) in rec.layout.order.iter().enumerate() {
            let h = rec.hidden[rec.layout.lens[i] - 1];
            rows[i] = Some(tape.row(h, j));
        }
        tape.stack_rows(
            rows.into_iter()
                .map(|r| r.expect("every patient"))
                .collect(),
        )
    }

    fn hf_logits(&self, tape: &mut Tape<'_>, rec: &Recorded) -> Var {
        let h = Self::final_states(tape, rec);
        let ps = tape.params();
        let (w, b) = (ps.id("hf_w").unwrap(), ps.id("hf_b").unwrap());
        let (w, b) = (tape.param(w), tape.param(b));
        tape.affine(h, w, b)
    }

    /// Next-visit logits per step: `(logits, batch indices of the rows)`;
    /// row `j` of step `t` predicts visit `t + 1` of that patient.
    fn sdp_logits(&self, tape: &mut Tape<'_>, rec: &Recorded) -> Vec<(Var, Vec<usize>)> {
        let ps = tape.params();
        let (u, b) = (ps.id("U_s").unwrap(), ps.id("b_s").unwrap());
        let (u, b) = (tape.param(u), tape.param(b));
        let mut out = Vec::new();
        for t in 0..rec.hidden.len().saturating_sub(1) {
            let k = rec.layout.active[t + 1];
            let h = if k == rec.layout.active[t] {
                rec.hidden[t]
            } else {
                tape.gather_rows(rec.hidden[t], (0..k).collect())
            };
            out.push((tape.affine(h, u, b), rec.layout.order[..k].to_vec()));
        }
        out
    }

    /// Records the minibatch objective. `tape` may hold a perturbed copy of
    /// this model's parameters as long as the layout is the same.
    pub fn record_loss(
        &self,
        tape: &mut Tape<'_>,
        patients: &[&Patient],
        objective: &Objective,
    ) -> Result<LossVars> {
        if patients.is_empty() {
            return Err(Error::Invalid("empty minibatch".into()));
        }
        let with_aux = objective.lambda_aux > 0.0 && self.dims.kind == ModelKind::Mime;
        let rec = self.record(tape, patients, with_aux);
        let n = patients.len() as f64;
        let task = match objective.task {
            Task::Hf => {
                let labels = patients
                    .iter()
                    .map(|p| {
                        p.hf_label.map(f64::from).ok_or_else(|| {
                            Error::Invalid(format!("patient {} has no HF label", p.id))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let logits = self.hf_logits(tape, &rec);
                let n_rows = labels.len();
                let targets = Matrix::from_vec(n_rows, 1, labels)?;
                let xent = tape.sigmoid_xent(logits, targets);
                tape.scale(xent, 1.0 / n)
            }
            Task::Sdp => {
                // each patient's steps are averaged, then patients are averaged
                let with_steps = rec.layout.lens.iter().filter(|&&l| l >= 2).count();
                let mut terms = Vec::new();
                for (t, (logits, rows)) in self.sdp_logits(tape, &rec).into_iter().enumerate() {
                    let targets = rows
                        .iter()
                        .map(|&i| {
                            let next = patients[i].visits[t + 1].dx_set();
                            let w = 1.0 / (next.len() * (rec.layout.lens[i] - 1)) as f64;
                            next.into_iter().map(|d| (d, w)).collect()
                        })
                        .collect();
                    terms.push(tape.softmax_xent(logits, targets));
                }
                let sum = tape.sum_scalars(&terms);
                tape.scale(sum, 1.0 / with_steps.max(1) as f64)
            }
        };
        let aux = match rec.aux {
            Some(a) => tape.scale(a, objective.lambda_aux / n),
            None => tape.constant(Matrix::scalar(0.0)),
        };
        let mut l2_terms = Vec::new();
        if objective.l2 > 0.0 {
            let ps = tape.params();
            let ids: Vec<_> = ps
                .ids()
                .filter(|&i| match ps.role(i) {
                    ParamRole::Weight => true,
                    ParamRole::Embedding => objective.l2_embeddings,
                    ParamRole::Bias => false,
                })
                .collect();
            for i in ids {
                let p = tape.param(i);
                l2_terms.push(tape.sum_squares(p));
            }
        }
        let l2 = tape.sum_scalars(&l2_terms);
        let l2 = tape.scale(l2, objective.l2);
        let total = tape.add(task, aux);
        let total = tape.add(total, l2);
        Ok(LossVars {
            total,
            task,
            aux,
            l2,
        })
    }

    /// Mean task loss over `patients`, evaluated in chunks.
    pub fn task_loss(&self, patients: &[&Patient], task: Task) -> Result<f64> {
        let objective = Objective::task_only(task);
        let mut weighted = 0.0;
        let mut weight = 0usize;
        for chunk in patients.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new(&self.params);
            let loss = self.record_loss(&mut tape, chunk, &objective)?;
            let w = match task {
                Task::Hf => chunk.len(),
                Task::Sdp => chunk.iter().filter(|p| p.visits.len() >= 2).count(),
            };
            weighted += tape.value(loss.task).item() * w as f64;
            weight += w;
        }
        Ok(if weight == 0 {
            0.0
        } else {
            weighted / weight as f64
        })
    }

    /// HF probabilities in input order.
    pub fn predict_hf(&self, patients: &[&Patient]) -> Vec<f64> {
        let mut out = Vec::with_capacity(patients.len());
        for chunk in patients.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new(&self.params);
            let rec = self.record(&mut tape, chunk, false);
            let logits = self.hf_logits(&mut tape, &rec);
            out.extend(tape.value(logits).data().iter().map(|&l| sigmoid(l)));
        }
        out
    }

    /// Per patient, the next-visit distributions for steps `1..T-1`.
    pub fn predict_sdp(&self, patients: &[&Patient]) -> Vec<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(patients.len());
        for chunk in patients.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new(&self.params);
            let rec = self.record(&mut tape, chunk, false);
            let mut per: Vec<Vec<Vec<f64>>> = vec![Vec::new(); chunk.len()];
            for (logits, rows) in self.sdp_logits(&mut tape, &rec) {
                let l = tape.value(logits);
                for (j, &i) in rows.iter().enumerate() {
                    per[i].push(softmax(l.row(j)));
                }
            }
            out.extend(per);
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: self.dims.kind,
            embed_dim: self.dims.embed_dim,
            hidden: self.dims.hidden,
            n_dx: self.dims.n_dx,
            n_tx: self.dims.n_tx,
            meta: BTreeMap::new(),
            params: self
                .params
                .iter()
                .map(|(_, name, m)| {
                    (
                        name.to_string(),
                        Tensor {
                            shape: [m.rows(), m.cols()],
                            data: m.data().to_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let vocab = CodeVocab::synthetic(ck.n_dx, ck.n_tx)?;
        let mut model = Model::with_hidden(ck.kind, ck.embed_dim, ck.hidden, &vocab, 0)?;
        for name in ck.params.keys() {
            if model.params.id(name).is_none() {
                return Err(Error::Invalid(format!(
                    "checkpoint has unexpected parameter {name} for a {} model",
                    ck.kind
                )));
            }
        }
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let t = ck
                .params
                .get(&name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks parameter {name}")))?;
            let expected = model.params.get(id).shape();
            if (t.shape[0], t.shape[1]) != expected {
                return Err(Error::Shape {
                    context: format!("checkpoint parameter {name}"),
                    expected,
                    actual: (t.shape[0], t.shape[1]),
                });
            }
            *model.params.get_mut(id) = Matrix::from_vec(t.shape[0], t.shape[1], t.data.clone())?;
        }
        if !model.params.is_finite() {
            return Err(Error::Invalid("checkpoint holds non-finite values".into()));
        }
        Ok(model)
    }
}

/// Patients per tape when evaluating without gradients.
const EVAL_CHUNK: usize = 128;

fn check_layout(a: &ParamSet, b: &ParamSet) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "parameter set holds {} tensors, model expects {}",
            b.len(),
            a.len()
        )));
    }
    for ((_, na, ma), (_, nb, mb)) in a.iter().zip(b.iter()) {
        if na != nb || ma.shape() != mb.shape() {
            return Err(Error::Shape {
                context: format!("parameter {na} vs {nb}"),
                expected: ma.shape(),
                actual: mb.shape(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Serialized model: dimensions, free-form metadata and every tensor by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub hidden: usize,
    pub n_dx: usize,
    pub n_tx: usize,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            kind: self.kind,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            n_dx: self.n_dx,
            n_tx: self.n_tx,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
