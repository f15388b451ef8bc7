//! Named parameter trees.
//!
//! Parameter blocks are generic over their leaf type so the same structure
//! holds tensor values (`T = Tensor`), graph handles (`T = Var`) or
//! gradients. Every leaf has a dotted name such as `emotion.video.w_q`;
//! names are stable and used by checkpoints and the optimizer.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub trait ParamTree<T> {
    type Mapped<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T));
    fn try_map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> Result<U>) -> Result<Self::Mapped<U>>;
}

pub(crate) fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.into()
    } else {
        format!("{prefix}.{field}")
    }
}

macro_rules! param_block {
    ($(#[$meta:meta])* $vis:vis struct $name:ident { $($(#[$fmeta:meta])* $field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        $vis struct $name<T = $crate::tensor::Tensor> {
            $($(#[$fmeta])* pub $field: T,)*
        }

        impl<T> $crate::params::ParamTree<T> for $name<T> {
            type Mapped<U> = $name<U>;

            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
                $(f(&$crate::params::join(prefix, stringify!($field)), &self.$field);)*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $(f(&$crate::params::join(prefix, stringify!($field)), &mut self.$field);)*
            }

            fn try_map<U>(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &T) -> $crate::error::Result<U>,
            ) -> $crate::error::Result<$name<U>> {
                Ok($name {
                    $($field: f(&$crate::params::join(prefix, stringify!($field)), &self.$field)?,)*
                })
            }
        }
    };
}
pub(crate) use param_block;

/// Registers every tensor of a tree as a graph leaf.
pub fn bind<P: ParamTree<Tensor>>(g: &mut Graph, tree: &P, trainable: bool) -> P::Mapped<Var> {
    tree.try_map("", &mut |_, t| {
        Ok(if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        })
    })
    .expect("binding is infallible")
}

/// Reads the accumulated gradient of every bound leaf, keyed by full name.
/// Leaves that `backward` never reached get a zero gradient.
pub fn collect_grads<P: ParamTree<Var>>(g: &Graph, bound: &P, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
    bound.visit(prefix, &mut |name, &v| {
        let grad = g.grad(v).cloned().unwrap_or_else(|| {
            let (r, c) = g.shape(v);
            Tensor::zeros(r, c)
        });
        out.insert(name.into(), grad);
    });
}

pub fn named<'a, P: ParamTree<Tensor>>(tree: &'a P, prefix: &str) -> Vec<(String, &'a Tensor)> {
    let mut out = Vec::new();
    tree.visit(prefix, &mut |name, t| out.push((String::from(name), t)));
    out
}

pub fn count_scalars<P: ParamTree<Tensor>>(tree: &P) -> usize {
    let mut n = 0;
    tree.visit("", &mut |_, t| n += t.len());
    n
}

/// Overwrites every leaf from `source`, checking names and shapes.
pub fn load_from<P: ParamTree<Tensor>>(tree: &mut P, prefix: &str, source: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut failure = None;
    tree.visit_mut(prefix, &mut |name, t| {
        if failure.is_some() {
            return;
        }
        match source.get(name) {
            None => failure = Some(Error::Contract(format!("missing parameter `{name}`"))),
            Some(src) if src.shape() != t.shape() => {
                failure = Some(Error::Shape {
                    op: "load",
                    detail: format!("`{name}` is {:?}, expected {:?}", src.shape(), t.shape()),
                })
            }
            Some(src) => *t = src.clone(),
        }
    });
    failure.map_or(Ok(()), Err)
}

/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` entries.
pub fn uniform_init(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}
