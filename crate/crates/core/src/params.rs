//! Uniform access to the trainable tensors of a model, used by the optimizer,
//! checkpointing and gradient checks.

use crate::data::io::Checkpoint;
use crate::error::{Error, Result};
use crate::fdconv::ConvWeights;
use crate::layers::UpConvWeights;
use crate::perspective::RateParams;

/// A named view of one parameter tensor.
pub struct ParamView<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [f32],
}

/// A model (or gradient of a model) as an ordered list of flat tensors.
///
/// `tensors` and `tensors_mut` must enumerate the same tensors in the same
/// order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<ParamView<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f32]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn scale(&mut self, s: f32) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    fn add_scaled(&mut self, other: &Self, s: f32)
    where
        Self: Sized,
    {
        let src: Vec<Vec<f32>> = other.tensors().into_iter().map(|t| t.data.to_vec()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(&src) {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += s * b);
        }
    }

    fn all_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0))
    }
}

/// Prefixes every tensor name of `inner` with `prefix.`.
pub fn prefixed<'a>(prefix: &str, inner: Vec<ParamView<'a>>) -> Vec<ParamView<'a>> {
    inner
        .into_iter()
        .map(|t| ParamView {
            name: format!("{prefix}.{}", t.name),
            ..t
        })
        .collect()
}

impl ParamSet for ConvWeights {
    fn tensors(&self) -> Vec<ParamView<'_>> {
        vec![
            ParamView {
                name: "kernel".into(),
                dims: self.kernel_shape().to_vec(),
                data: &self.kernel,
            },
            ParamView {
                name: "bias".into(),
                dims: vec![self.cout()],
                data: &self.bias,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        vec![&mut self.kernel, &mut self.bias]
    }
}

impl ParamSet for UpConvWeights {
    fn tensors(&self) -> Vec<ParamView<'_>> {
        vec![
            ParamView {
                name: "kernel".into(),
                dims: self.kernel_shape().to_vec(),
                data: &self.kernel,
            },
            ParamView {
                name: "bias".into(),
                dims: vec![self.cout()],
                data: &self.bias,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        vec![&mut self.kernel, &mut self.bias]
    }
}

impl ParamSet for RateParams {
    fn tensors(&self) -> Vec<ParamView<'_>> {
        vec![ParamView {
            name: "rate".into(),
            dims: vec![4],
            data: self.as_slice(),
        }]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        vec![self.as_mut_slice()]
    }
}

impl<T: ParamSet> ParamSet for Vec<T> {
    fn tensors(&self) -> Vec<ParamView<'_>> {
        self.iter()
            .enumerate()
            .flat_map(|(i, p)| prefixed(&i.to_string(), p.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.iter_mut().flat_map(|p| p.tensors_mut()).collect()
    }
}

pub fn save_params<P: ParamSet + ?Sized>(ck: &mut Checkpoint, prefix: &str, p: &P) {
    for t in p.tensors() {
        ck.push(format!("{prefix}.{}", t.name), &t.dims, t.data);
    }
}

/// Overwrites `p` with the matching entries of `ck`; every tensor must be
/// present with identical dims.
pub fn load_params<P: ParamSet + ?Sized>(ck: &Checkpoint, prefix: &str, p: &mut P) -> Result<()> {
    let specs: Vec<(String, Vec<usize>)> = p
        .tensors()
        .into_iter()
        .map(|t| (format!("{prefix}.{}", t.name), t.dims))
        .collect();
    for ((name, dims), dst) in specs.iter().zip(p.tensors_mut()) {
        let e = ck.require(name)?;
        if &e.dims != dims {
            return Err(Error::Shape(format!("{name}: checkpoint dims {:?}, model {:?}", e.dims, dims)));
        }
        dst.copy_from_slice(&e.data);
    }
    Ok(())
}
