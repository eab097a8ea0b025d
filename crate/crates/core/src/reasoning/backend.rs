//! Reasoner backends: a small causal self-attention stack and a
//! pass-through used for testing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Axis, Tape, Tensor, Var};
use crate::params::{Bindings, Linear, ParamStore};

/// Maps a realized prompt to hidden states and hidden states to vocabulary
/// logits. Implementations hold parameter ids only and keep no state
/// between calls.
pub trait ReasonerBackend {
    /// Hidden width `d`.
    fn width(&self, store: &ParamStore) -> usize;

    /// `m × d` prompt to `m × d` hidden states.
    fn forward(&self, tape: &mut Tape, bound: &Bindings, prompt: Var) -> Result<Var>;

    /// Final prediction pass over (possibly refined) hidden states; returns
    /// `1 × V` vocabulary logits for the last position.
    fn predict(&self, tape: &mut Tape, bound: &Bindings, hidden: Var) -> Result<Var>;

    /// Generation head `d → V`.
    fn gen_head(&self) -> Linear;
}

fn check_width(op: &'static str, tape: &Tape, x: Var, d: usize) -> Result<()> {
    let w = tape.shape(x)[1];
    if w != d {
        return Err(Error::dim(op, format!("input width {w}, backend width {d}")));
    }
    if tape.shape(x)[0] == 0 {
        return Err(Error::dim(op, "empty sequence"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
        })
    }

    /// Attention of `queries` over `keys`; causal when both are the full sequence.
    fn apply(&self, tape: &mut Tape, b: &Bindings, queries: Var, keys: Var, causal: bool) -> Result<Var> {
        let d = tape.shape(queries)[1] as f64;
        let q = self.q.forward(tape, b, queries)?;
        let k = self.k.forward(tape, b, keys)?;
        let v = self.v.forward(tape, b, keys)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.affine(s, 1.0 / d.sqrt(), 0.0)?;
        let a = if causal { tape.causal_softmax(s)? } else { tape.softmax(s, Axis::Rows)? };
        let mixed = tape.matmul(a, v)?;
        self.o.forward(tape, b, mixed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Block {
    attn: Attention,
    up: Linear,
    down: Linear,
}

/// Pre-norm causal transformer stack with a single-query attention readout
/// at the last position for the prediction pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceBackend {
    blocks: Vec<Block>,
    readout: Attention,
    head: Linear,
    d: usize,
}

impl ReferenceBackend {
    pub fn new(store: &mut ParamStore, d: usize, vocab: usize, layers: usize, rng: &mut impl Rng) -> Result<Self> {
        if layers == 0 {
            return Err(Error::invalid("reference backend needs at least one layer"));
        }
        let mut blocks = Vec::with_capacity(layers);
        for i in 0..layers {
            blocks.push(Block {
                attn: Attention::new(store, &format!("backend.layer{i}.attn"), d, rng)?,
                up: Linear::new(store, &format!("backend.layer{i}.up"), d, 2 * d, rng)?,
                down: Linear::new(store, &format!("backend.layer{i}.down"), 2 * d, d, rng)?,
            });
        }
        Ok(ReferenceBackend {
            blocks,
            readout: Attention::new(store, "backend.readout", d, rng)?,
            head: Linear::new(store, "backend.gen_head", d, vocab, rng)?,
            d,
        })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }
}

impl ReasonerBackend for ReferenceBackend {
    fn width(&self, _: &ParamStore) -> usize {
        self.d
    }

    fn forward(&self, tape: &mut Tape, b: &Bindings, prompt: Var) -> Result<Var> {
        check_width("reason", tape, prompt, self.d)?;
        let mut x = prompt;
        for block in &self.blocks {
            let n = tape.rms_norm(x)?;
            let a = block.attn.apply(tape, b, n, n, true)?;
            x = tape.add(x, a)?;
            let n = tape.rms_norm(x)?;
            let h = block.up.forward(tape, b, n)?;
            let h = tape.relu(h)?;
            let h = block.down.forward(tape, b, h)?;
            x = tape.add(x, h)?;
        }
        Ok(x)
    }

    // No normalization here: gated slot rows must keep their scale.
    fn predict(&self, tape: &mut Tape, b: &Bindings, hidden: Var) -> Result<Var> {
        check_width("predict", tape, hidden, self.d)?;
        let m = tape.shape(hidden)[0];
        let last = tape.gather_rows(hidden, &[m - 1])?;
        let read = self.readout.apply(tape, b, last, hidden, false)?;
        let out = tape.add(last, read)?;
        self.head.forward(tape, b, out)
    }

    fn gen_head(&self) -> Linear {
        self.head
    }
}

/// `hidden = prompt`; prediction is the generation head on the mean hidden state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityBackend {
    head: Linear,
    d: usize,
}

impl IdentityBackend {
    pub fn new(store: &mut ParamStore, d: usize, vocab: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(IdentityBackend {
            head: Linear::new(store, "backend.gen_head", d, vocab, rng)?,
            d,
        })
    }
}

impl ReasonerBackend for IdentityBackend {
    fn width(&self, _: &ParamStore) -> usize {
        self.d
    }

    fn forward(&self, tape: &mut Tape, _: &Bindings, prompt: Var) -> Result<Var> {
        check_width("reason", tape, prompt, self.d)?;
        Ok(prompt)
    }

    fn predict(&self, tape: &mut Tape, b: &Bindings, hidden: Var) -> Result<Var> {
        check_width("predict", tape, hidden, self.d)?;
        let m = tape.shape(hidden)[0];
        let avg = tape.constant(Tensor::filled(1, m, 1.0 / m as f64));
        let pooled = tape.matmul(avg, hidden)?;
        self.head.forward(tape, b, pooled)
    }

    fn gen_head(&self) -> Linear {
        self.head
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Reference,
    Identity,
}

/// Closed set of backends so models stay serializable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    Reference(ReferenceBackend),
    Identity(IdentityBackend),
}

impl Backend {
    pub fn new(kind: BackendKind, store: &mut ParamStore, d: usize, vocab: usize, layers: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(match kind {
            BackendKind::Reference => Backend::Reference(ReferenceBackend::new(store, d, vocab, layers, rng)?),
            BackendKind::Identity => Backend::Identity(IdentityBackend::new(store, d, vocab, rng)?),
        })
    }

    fn inner(&self) -> &dyn ReasonerBackend {
        match self {
            Backend::Reference(b) => b,
            Backend::Identity(b) => b,
        }
    }
}

impl ReasonerBackend for Backend {
    fn width(&self, store: &ParamStore) -> usize {
        self.inner().width(store)
    }

    fn forward(&self, tape: &mut Tape, bound: &Bindings, prompt: Var) -> Result<Var> {
        self.inner().forward(tape, bound, prompt)
    }

    fn predict(&self, tape: &mut Tape, bound: &Bindings, hidden: Var) -> Result<Var> {
        self.inner().predict(tape, bound, hidden)
    }

    fn gen_head(&self) -> Linear {
        self.inner().gen_head()
    }
}

/// Hidden states for a value-level prompt with parameters held constant.
pub fn reason(prompt: &Tensor, backend: &dyn ReasonerBackend, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = store.bind_constant(&mut tape);
    let x = tape.constant(prompt.clone());
    let h = backend.forward(&mut tape, &b, x)?;
    Ok(tape.value(h).clone())
}
