use rand::Rng;

use crate::autodiff::{Array, Tape, Tensor};

use super::SaError;

/// Two-layer perceptron with a rectifier hidden layer, used for the marginal
/// scoring heads.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub w1: Array, // in x hidden
    pub b1: Array, // 1 x hidden
    pub w2: Array, // hidden x out
    pub b2: Array, // 1 x out
}

/// GRU gate weights; the slot is the hidden state.
/// Convention: update gate 0 leaves the hidden state unchanged.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_xz: Array,
    pub w_hz: Array,
    pub b_z: Array,
    pub w_xr: Array,
    pub w_hr: Array,
    pub b_r: Array,
    pub w_xc: Array,
    pub w_hc: Array,
    pub b_c: Array,
}

/// Learnable state of one slot-attention module.
#[derive(Clone, Debug)]
pub struct SlotAttentionParams {
    pub w_q: Array, // d x d_k
    pub w_k: Array, // c x d_k
    pub w_v: Array, // c x d_v
    pub gru: GruParams,
    /// Row-marginal scorer over slots (d -> 1).
    pub h_a: MlpParams,
    /// Column-marginal scorer over inputs (c -> 1).
    pub h_b: MlpParams,
    pub slot_mu: Array,      // 1 x d
    pub slot_log_std: Array, // 1 x d
}

/// Dimensions of a slot-attention module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SaDims {
    /// Slot dimension.
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Input feature dimension.
    pub c: usize,
    /// Hidden width of the marginal heads.
    pub head_hidden: usize,
}

impl Default for SaDims {
    fn default() -> Self {
        SaDims {
            d: 32,
            d_k: 32,
            d_v: 32,
            c: 32,
            head_hidden: 32,
        }
    }
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Array::from_vec(vec![rows, cols], data).expect("sized by construction")
}

fn mlp<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> MlpParams {
    MlpParams {
        w1: glorot(input, hidden, rng),
        b1: Array::zeros(vec![1, hidden]),
        w2: glorot(hidden, 1, rng),
        b2: Array::zeros(vec![1, 1]),
    }
}

impl SlotAttentionParams {
    /// Fresh Glorot-initialized parameters; biases start at zero, the slot
    /// distribution at mean U[-1/sqrt(d), 1/sqrt(d)] with unit std.
    pub fn init<R: Rng>(dims: SaDims, rng: &mut R) -> Self {
        let SaDims {
            d,
            d_k,
            d_v,
            c,
            head_hidden,
        } = dims;
        let lim = 1.0 / (d as f64).sqrt();
        let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-lim..lim)).collect();
        SlotAttentionParams {
            w_q: glorot(d, d_k, rng),
            w_k: glorot(c, d_k, rng),
            w_v: glorot(c, d_v, rng),
            gru: GruParams {
                w_xz: glorot(d_v, d, rng),
                w_hz: glorot(d, d, rng),
                b_z: Array::zeros(vec![1, d]),
                w_xr: glorot(d_v, d, rng),
                w_hr: glorot(d, d, rng),
                b_r: Array::zeros(vec![1, d]),
                w_xc: glorot(d_v, d, rng),
                w_hc: glorot(d, d, rng),
                b_c: Array::zeros(vec![1, d]),
            },
            h_a: mlp(d, head_hidden, rng),
            h_b: mlp(c, head_hidden, rng),
            slot_mu: Array::from_vec(vec![1, d], mu).expect("sized"),
            slot_log_std: Array::zeros(vec![1, d]),
        }
    }

    pub fn dims(&self) -> SaDims {
        SaDims {
            d: self.w_q.shape()[0],
            d_k: self.w_q.shape()[1],
            d_v: self.w_v.shape()[1],
            c: self.w_k.shape()[0],
            head_hidden: self.h_a.w1.shape()[1],
        }
    }

    /// Named views over every learnable array, in a fixed order shared with
    /// [`LinkedParams::fields`] (optimizers rely on the alignment).
    pub fn fields(&self) -> Vec<(&'static str, &Array)> {
        vec![
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("gru.w_xz", &self.gru.w_xz),
            ("gru.w_hz", &self.gru.w_hz),
            ("gru.b_z", &self.gru.b_z),
            ("gru.w_xr", &self.gru.w_xr),
            ("gru.w_hr", &self.gru.w_hr),
            ("gru.b_r", &self.gru.b_r),
            ("gru.w_xc", &self.gru.w_xc),
            ("gru.w_hc", &self.gru.w_hc),
            ("gru.b_c", &self.gru.b_c),
            ("h_a.w1", &self.h_a.w1),
            ("h_a.b1", &self.h_a.b1),
            ("h_a.w2", &self.h_a.w2),
            ("h_a.b2", &self.h_a.b2),
            ("h_b.w1", &self.h_b.w1),
            ("h_b.b1", &self.h_b.b1),
            ("h_b.w2", &self.h_b.w2),
            ("h_b.b2", &self.h_b.b2),
            ("slot_mu", &self.slot_mu),
            ("slot_log_std", &self.slot_log_std),
        ]
    }

    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut Array)> {
        vec![
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("gru.w_xz", &mut self.gru.w_xz),
            ("gru.w_hz", &mut self.gru.w_hz),
            ("gru.b_z", &mut self.gru.b_z),
            ("gru.w_xr", &mut self.gru.w_xr),
            ("gru.w_hr", &mut self.gru.w_hr),
            ("gru.b_r", &mut self.gru.b_r),
            ("gru.w_xc", &mut self.gru.w_xc),
            ("gru.w_hc", &mut self.gru.w_hc),
            ("gru.b_c", &mut self.gru.b_c),
            ("h_a.w1", &mut self.h_a.w1),
            ("h_a.b1", &mut self.h_a.b1),
            ("h_a.w2", &mut self.h_a.w2),
            ("h_a.b2", &mut self.h_a.b2),
            ("h_b.w1", &mut self.h_b.w1),
            ("h_b.b1", &mut self.h_b.b1),
            ("h_b.w2", &mut self.h_b.w2),
            ("h_b.b2", &mut self.h_b.b2),
            ("slot_mu", &mut self.slot_mu),
            ("slot_log_std", &mut self.slot_log_std),
        ]
    }

    /// Rebuilds the struct from `(name, array)` pairs as produced by
    /// [`SlotAttentionParams::fields`].
    pub fn from_named(entries: &[(String, Array)]) -> Result<Self, SaError> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut params = SlotAttentionParams::init(SaDims::default(), &mut rng);
        let mut seen = 0usize;
        for (name, array) in entries {
            let mut matched = false;
            for (field, slot) in params.fields_mut() {
                if field == name {
                    *slot = array.clone();
                    matched = true;
                    seen += 1;
                    break;
                }
            }
            if !matched {
                return Err(SaError::BadConfig(format!("unknown parameter {name}")));
            }
        }
        if seen != params.fields().len() {
            return Err(SaError::BadConfig(format!(
                "checkpoint carries {seen} of {} parameters",
                params.fields().len()
            )));
        }
        params.validate_shapes()?;
        Ok(params)
    }

    fn validate_shapes(&self) -> Result<(), SaError> {
        let d = self.w_q.shape()[0];
        let d_v = self.w_v.shape()[1];
        let checks = [
            (self.gru.w_xz.shape() == [d_v, d], "gru.w_xz"),
            (self.gru.w_hz.shape() == [d, d], "gru.w_hz"),
            (self.w_k.shape()[1] == self.w_q.shape()[1], "w_k"),
            (self.slot_mu.shape() == [1, d], "slot_mu"),
            (self.slot_log_std.shape() == [1, d], "slot_log_std"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(SaError::BadConfig(format!("inconsistent shape for {what}")));
            }
        }
        Ok(())
    }

    /// Watches every parameter on `tape` so gradients can be taken.
    pub fn link(&self, tape: &Tape) -> LinkedParams {
        self.map(|a| tape.watch(a.clone()))
    }

    /// Detached tensors for inference-only passes.
    pub fn constant(&self) -> LinkedParams {
        self.map(|a| Tensor::from(a.clone()))
    }

    fn map(&self, f: impl Fn(&Array) -> Tensor) -> LinkedParams {
        LinkedParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            gru: LinkedGru {
                w_xz: f(&self.gru.w_xz),
                w_hz: f(&self.gru.w_hz),
                b_z: f(&self.gru.b_z),
                w_xr: f(&self.gru.w_xr),
                w_hr: f(&self.gru.w_hr),
                b_r: f(&self.gru.b_r),
                w_xc: f(&self.gru.w_xc),
                w_hc: f(&self.gru.w_hc),
                b_c: f(&self.gru.b_c),
            },
            h_a: LinkedMlp {
                w1: f(&self.h_a.w1),
                b1: f(&self.h_a.b1),
                w2: f(&self.h_a.w2),
                b2: f(&self.h_a.b2),
            },
            h_b: LinkedMlp {
                w1: f(&self.h_b.w1),
                b1: f(&self.h_b.b1),
                w2: f(&self.h_b.w2),
                b2: f(&self.h_b.b2),
            },
            slot_mu: f(&self.slot_mu),
            slot_log_std: f(&self.slot_log_std),
        }
    }
}

#[derive(Clone)]
pub struct LinkedMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone)]
pub struct LinkedGru {
    pub w_xz: Tensor,
    pub w_hz: Tensor,
    pub b_z: Tensor,
    pub w_xr: Tensor,
    pub w_hr: Tensor,
    pub b_r: Tensor,
    pub w_xc: Tensor,
    pub w_hc: Tensor,
    pub b_c: Tensor,
}

/// Tape-linked (or constant) view of [`SlotAttentionParams`].
#[derive(Clone)]
pub struct LinkedParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub gru: LinkedGru,
    pub h_a: LinkedMlp,
    pub h_b: LinkedMlp,
    pub slot_mu: Tensor,
    pub slot_log_std: Tensor,
}

impl LinkedParams {
    /// Same order as [`SlotAttentionParams::fields`].
    pub fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("gru.w_xz", &self.gru.w_xz),
            ("gru.w_hz", &self.gru.w_hz),
            ("gru.b_z", &self.gru.b_z),
            ("gru.w_xr", &self.gru.w_xr),
            ("gru.w_hr", &self.gru.w_hr),
            ("gru.b_r", &self.gru.b_r),
            ("gru.w_xc", &self.gru.w_xc),
            ("gru.w_hc", &self.gru.w_hc),
            ("gru.b_c", &self.gru.b_c),
            ("h_a.w1", &self.h_a.w1),
            ("h_a.b1", &self.h_a.b1),
            ("h_a.w2", &self.h_a.w2),
            ("h_a.b2", &self.h_a.b2),
            ("h_b.w1", &self.h_b.w1),
            ("h_b.b1", &self.h_b.b1),
            ("h_b.w2", &self.h_b.w2),
            ("h_b.b2", &self.h_b.b2),
            ("slot_mu", &self.slot_mu),
            ("slot_log_std", &self.slot_log_std),
        ]
    }
}
