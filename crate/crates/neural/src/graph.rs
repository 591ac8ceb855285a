//! A reusable forward program bound to parameters, with explicit
//! forward/backward phases.

use std::collections::BTreeMap;

use crate::error::{shape_err, NeuralError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub type NamedTensors<T> = BTreeMap<String, Tensor<T>>;

/// A computation that can be re-recorded on a fresh tape.
pub trait Program<T: Scalar> {
    /// Declared input names and shapes.
    fn signature(&self) -> Vec<(String, Vec<usize>)>;

    fn build(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore,
        inputs: &BTreeMap<String, Var>,
    ) -> Result<BTreeMap<String, Var>>;
}

/// Program defined by a closure.
pub struct FnProgram<F> {
    signature: Vec<(String, Vec<usize>)>,
    f: F,
}

impl<F> FnProgram<F> {
    pub fn new(signature: Vec<(String, Vec<usize>)>, f: F) -> Self {
        Self { signature, f }
    }
}

impl<T, F> Program<T> for FnProgram<F>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore, &BTreeMap<String, Var>) -> Result<BTreeMap<String, Var>>,
{
    fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.signature.clone()
    }

    fn build(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore,
        inputs: &BTreeMap<String, Var>,
    ) -> Result<BTreeMap<String, Var>> {
        (self.f)(tape, params, inputs)
    }
}

pub struct GradGraph<T: Scalar, P> {
    program: P,
    pub params: ParamStore,
    tape: Option<Tape<T>>,
    outputs: BTreeMap<String, Var>,
}

impl<T: Scalar, P: Program<T>> GradGraph<T, P> {
    pub fn new(program: P, params: ParamStore) -> Self {
        Self {
            program,
            params,
            tape: None,
            outputs: BTreeMap::new(),
        }
    }

    pub fn program(&self) -> &P {
        &self.program
    }

    /// Record the program on a fresh tape. Intermediate values are retained
    /// for a following [`GradGraph::backward`].
    pub fn forward(&mut self, inputs: &NamedTensors<T>) -> Result<NamedTensors<T>> {
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (i, (name, shape)) in self.program.signature().into_iter().enumerate() {
            let t = inputs.get(&name).ok_or_else(|| {
                shape_err("input", i, format!("missing declared input `{name}`"))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err(
                    "input",
                    i,
                    format!("input `{name}` has shape {:?}, declared {shape:?}", t.shape()),
                ));
            }
            vars.insert(name, tape.constant(t.clone()));
        }
        let outputs = self.program.build(&mut tape, &self.params, &vars)?;
        let values = outputs
            .iter()
            .map(|(n, &v)| (n.clone(), tape.value(v).clone()))
            .collect();
        self.outputs = outputs;
        self.tape = Some(tape);
        Ok(values)
    }

    pub fn backward(&mut self, output: &str, seed: &Tensor<T>) -> Result<()> {
        let tape = self
            .tape
            .as_mut()
            .ok_or_else(|| NeuralError::State("backward called before forward".into()))?;
        let &v = self
            .outputs
            .get(output)
            .ok_or_else(|| NeuralError::State(format!("no output named `{output}`")))?;
        tape.backward(v, seed)
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.tape.as_ref()
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.keys().map(String::as_str)
    }

    /// Gradients of trainable parameters from the last backward pass(es).
    pub fn param_grads(&self) -> Result<BTreeMap<String, Tensor<T>>> {
        self.tape
            .as_ref()
            .map(Tape::param_grads)
            .ok_or_else(|| NeuralError::State("no forward pass recorded".into()))
    }
}
